//! Multinomial naive Bayes trained by sdEM following the appendix pseudo-code.
//!
//! The state holds class counts `C`, word counts `N[k][w]`, their row sums
//! `M[k]` and the prior correction `gamma` that is added to every count when
//! scoring. NCLL and Hinge steps never shrink the counts (`nu = 0`). The NLL
//! step shrinks everything by `1 - rho`; the word counts are then stored
//! relative to a global `scale` so that a step costs `O(|d| + |Y|)`.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::engine::{run_epochs, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_epoch, EpochMetrics, Evaluable};
use crate::expfam::{argmax_excluding, log_sum_exp, softmax, LabeledInstance};
use crate::losses::{Loss, PROB_FLOOR};

/// Below this the lazy scale is folded back into the stored counts.
const SCALE_RENORM: f64 = 1e-150;

/// Dirichlet pseudo-count per word: `P1` uses 1, `P2` uses `ln |W|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MnbPrior {
    P1,
    P2,
}

impl MnbPrior {
    pub fn alpha(self, vocab_size: usize) -> Result<f64> {
        let a = match self {
            MnbPrior::P1 => 1.0,
            MnbPrior::P2 => (vocab_size as f64).ln(),
        };
        if !(a > 0.0) {
            return Err(Error::config(format!(
                "prior {self:?} gives alpha = {a} for |W| = {vocab_size}"
            )));
        }
        Ok(a)
    }
}

impl std::fmt::Display for MnbPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MnbPrior::P1 => "p1",
            MnbPrior::P2 => "p2",
        })
    }
}

impl std::str::FromStr for MnbPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(MnbPrior::P1),
            "p2" => Ok(MnbPrior::P2),
            other => Err(Error::config(format!("unknown prior '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnbState {
    num_classes: usize,
    vocab_size: usize,
    alpha: f64,
    c: Vec<f64>,
    /// Stored word counts; the true value is `scale * n[k * W + w]`.
    n: Vec<f64>,
    m: Vec<f64>,
    gamma: f64,
    scale: f64,
}

/// What a single update observed.
#[derive(Debug, Clone, PartialEq)]
pub struct MnbStep {
    pub posterior: Vec<f64>,
    pub loss_value: f64,
    /// False when a Hinge step skipped the document.
    pub active: bool,
}

impl MnbState {
    /// `N[k][w] = alpha`, `C[k] = 1`, `M[k] = alpha |W|`, `gamma = 0`.
    pub fn new(num_classes: usize, vocab_size: usize, alpha: f64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("vocabulary is empty"));
        }
        if num_classes == 0 {
            return Err(Error::config("at least one class is required"));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            num_classes,
            vocab_size,
            alpha,
            c: vec![1.0; num_classes],
            n: vec![alpha; num_classes * vocab_size],
            m: vec![alpha * vocab_size as f64; num_classes],
            gamma: 0.0,
            scale: 1.0,
        })
    }

    pub fn with_prior(num_classes: usize, vocab_size: usize, prior: MnbPrior) -> Result<Self> {
        Self::new(num_classes, vocab_size, prior.alpha(vocab_size)?)
    }

    /// Builds a state from explicit counts; `M` is computed as the row sums.
    pub fn from_counts(c: Vec<f64>, n: Vec<Vec<f64>>, gamma: f64, alpha: f64) -> Result<Self> {
        let k = c.len();
        let w = n.first().map_or(0, Vec::len);
        if n.len() != k || n.iter().any(|r| r.len() != w) {
            return Err(Error::config("count matrix shape does not match classes"));
        }
        let mut st = Self::new(k, w, alpha)?;
        if c.iter().chain(n.iter().flatten()).any(|v| !(*v >= 0.0)) || !(gamma >= 0.0) {
            return Err(Error::config("counts and gamma must be non-negative"));
        }
        st.m = n.iter().map(|r| r.iter().sum()).collect();
        st.n = n.into_iter().flatten().collect();
        st.c = c;
        st.gamma = gamma;
        Ok(st)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn n(&self, k: usize, w: usize) -> f64 {
        self.scale * self.n[k * self.vocab_size + w]
    }

    pub fn n_row(&self, k: usize) -> Vec<f64> {
        (0..self.vocab_size).map(|w| self.n(k, w)).collect()
    }

    fn set_n(&mut self, k: usize, w: usize, value: f64) {
        self.n[k * self.vocab_size + w] = value / self.scale;
    }

    /// Largest `|M[k] - sum_w N[k][w]|` relative to `max(1, M[k])`.
    pub fn coherence_error(&self) -> f64 {
        (0..self.num_classes)
            .map(|k| {
                let sum: f64 = self.n_row(k).iter().sum();
                (self.m[k] - sum).abs() / self.m[k].abs().max(1.0)
            })
            .fold(0.0, f64::max)
    }

    fn check_doc(&self, doc: &Document) -> Result<()> {
        match doc.max_word() {
            Some(w) if w as usize >= self.vocab_size => Err(Error::Vocabulary(format!(
                "word id {w} outside a vocabulary of {}",
                self.vocab_size
            ))),
            _ => Ok(()),
        }
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::config(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Unnormalized log posterior scores:
    /// `ln(C[k]+g) + sum_w |w| ln(N[k][w]+g) - L ln(M[k] + g |d|)`.
    pub fn log_scores(&self, doc: &Document) -> Vec<f64> {
        let g = self.gamma;
        let distinct = doc.distinct() as f64;
        let length = doc.tokens() as f64;
        (0..self.num_classes)
            .map(|k| {
                let words: f64 = doc
                    .entries()
                    .iter()
                    .map(|&(w, c)| c as f64 * (self.n(k, w as usize) + g).ln())
                    .sum();
                let norm = if length > 0.0 {
                    length * (self.m[k] + g * distinct).ln()
                } else {
                    0.0
                };
                (self.c[k] + g).ln() + words - norm
            })
            .collect()
    }

    /// Log joint under the normalized model returned by [`MnbState::finalize`].
    pub fn finalized_log_joint(&self, doc: &Document) -> Vec<f64> {
        let g = self.gamma;
        let total: f64 = self.c.iter().map(|c| c + g).sum();
        let smooth = g * self.vocab_size as f64;
        (0..self.num_classes)
            .map(|k| {
                let denom = (self.m[k] + smooth).ln();
                ((self.c[k] + g) / total).ln()
                    + doc
                        .entries()
                        .iter()
                        .map(|&(w, c)| c as f64 * ((self.n(k, w as usize) + g).ln() - denom))
                        .sum::<f64>()
            })
            .collect()
    }

    /// `(N + g) / (M + g |W|)` and `(C + g) / sum`.
    pub fn finalize(&self) -> MnbModel {
        let g = self.gamma;
        let total: f64 = self.c.iter().map(|c| c + g).sum();
        let smooth = g * self.vocab_size as f64;
        let mut log_word = Vec::with_capacity(self.n.len());
        for k in 0..self.num_classes {
            let denom = (self.m[k] + smooth).ln();
            log_word.extend((0..self.vocab_size).map(|w| (self.n(k, w) + g).ln() - denom));
        }
        MnbModel {
            log_prior: self.c.iter().map(|c| ((c + g) / total).ln()).collect(),
            log_word,
            vocab_size: self.vocab_size,
        }
    }

    fn accrue_gamma(&mut self, rho: f64, n: usize) {
        self.gamma += self.alpha * rho / n as f64;
    }

    /// Moves `amount` into `N[y][w]` for every word and `C[y]`, without clamping.
    fn add_row(&mut self, y: usize, doc: &Document, amount: f64) {
        for &(w, c) in doc.entries() {
            let w = w as usize;
            let delta = amount * c as f64;
            let v = self.n(y, w) + delta;
            self.set_n(y, w, v);
            self.m[y] += delta;
        }
        self.c[y] += amount;
    }

    /// Removes `amount` per token from row `k`, clamping at zero and moving `M`
    /// by the realized change only.
    fn remove_row_clamped(&mut self, k: usize, doc: &Document, amount: f64) {
        for &(w, c) in doc.entries() {
            let w = w as usize;
            let old = self.n(k, w);
            let new = (old - amount * c as f64).max(0.0);
            self.set_n(k, w, new);
            // Clamp away round-off so an emptied row cannot leave M negative.
            self.m[k] = (self.m[k] + new - old).max(0.0);
        }
        self.c[k] = (self.c[k] - amount).max(0.0);
    }

    fn posterior(&self, doc: &Document) -> Result<(Vec<f64>, Vec<f64>)> {
        let scores = self.log_scores(doc);
        let p = softmax(&scores).ok_or_else(|| Error::numeric(0, "class posterior underflow"))?;
        Ok((scores, p))
    }

    pub fn ncll_update(&mut self, y: usize, doc: &Document, rho: f64, n: usize) -> Result<MnbStep> {
        self.check_label(y)?;
        self.check_doc(doc)?;
        self.accrue_gamma(rho, n);
        let (_, p) = self.posterior(doc)?;
        self.add_row(y, doc, rho * (1.0 - p[y]));
        for (k, &pk) in p.iter().enumerate() {
            if k != y {
                self.remove_row_clamped(k, doc, rho * pk);
            }
        }
        let loss_value = -p[y].max(PROB_FLOOR).ln();
        Ok(MnbStep {
            posterior: p,
            loss_value,
            active: true,
        })
    }

    pub fn hinge_update(&mut self, y: usize, doc: &Document, rho: f64, n: usize) -> Result<MnbStep> {
        self.check_label(y)?;
        self.check_doc(doc)?;
        if self.num_classes < 2 {
            return Err(Error::config("hinge loss needs at least two classes"));
        }
        self.accrue_gamma(rho, n);
        let (scores, p) = self.posterior(doc)?;
        let rival = argmax_excluding(&scores, y).expect("at least two classes");
        let margin = scores[y] - scores[rival];
        let loss_value = (1.0 - margin).max(0.0);
        if margin > 1.0 {
            return Ok(MnbStep {
                posterior: p,
                loss_value,
                active: false,
            });
        }
        self.add_row(y, doc, rho * (1.0 - p[y]));
        self.remove_row_clamped(rival, doc, rho * p[rival]);
        Ok(MnbStep {
            posterior: p,
            loss_value,
            active: true,
        })
    }

    /// `(N, C, gamma) <- (1 - rho)(N, C, gamma) + rho (s(y, d), I[y], alpha / n)`.
    pub fn nll_update(&mut self, y: usize, doc: &Document, rho: f64, n: usize) -> Result<MnbStep> {
        self.check_label(y)?;
        self.check_doc(doc)?;
        let loss_value = -self.finalized_log_joint(doc)[y];
        let keep = 1.0 - rho;
        if keep <= 0.0 {
            self.n.iter_mut().for_each(|v| *v = 0.0);
            self.scale = 1.0;
        } else {
            self.scale *= keep;
        }
        self.m.iter_mut().for_each(|v| *v *= keep.max(0.0));
        self.c.iter_mut().for_each(|v| *v *= keep.max(0.0));
        self.gamma = keep.max(0.0) * self.gamma + rho * self.alpha / n as f64;
        self.add_row(y, doc, rho);
        if self.scale < SCALE_RENORM {
            let s = self.scale;
            self.n.iter_mut().for_each(|v| *v *= s);
            self.scale = 1.0;
        }
        Ok(MnbStep {
            posterior: Vec::new(),
            loss_value,
            active: true,
        })
    }

    pub fn update(&mut self, loss: Loss, y: usize, doc: &Document, rho: f64, n: usize) -> Result<MnbStep> {
        match loss {
            Loss::Nll => self.nll_update(y, doc, rho, n),
            Loss::Ncll => self.ncll_update(y, doc, rho, n),
            Loss::Hinge => self.hinge_update(y, doc, rho, n),
        }
    }

    pub fn to_dump(&self) -> MnbDump {
        MnbDump {
            num_classes: self.num_classes,
            vocab_size: self.vocab_size,
            alpha: self.alpha,
            gamma: self.gamma,
            scale: self.scale,
            c: self.c.clone(),
            m: self.m.clone(),
            n: self
                .n
                .chunks(self.vocab_size)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(w, v)| (w as u32, *v))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_dump(d: MnbDump) -> Result<Self> {
        let mut st = Self::new(d.num_classes, d.vocab_size, d.alpha)?;
        if d.c.len() != d.num_classes || d.m.len() != d.num_classes || d.n.len() != d.num_classes {
            return Err(Error::Format("MNB dump arrays do not match the class count".into()));
        }
        st.n.iter_mut().for_each(|v| *v = 0.0);
        for (k, row) in d.n.iter().enumerate() {
            for &(w, v) in row {
                if w as usize >= d.vocab_size {
                    return Err(Error::Format(format!("word id {w} outside the vocabulary")));
                }
                st.n[k * d.vocab_size + w as usize] = v;
            }
        }
        st.c = d.c;
        st.m = d.m;
        st.gamma = d.gamma;
        st.scale = d.scale;
        Ok(st)
    }
}

/// Serialized MNB state: dense `C` and `M`, sparse rows of `N` (zeros omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnbDump {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub scale: f64,
    pub c: Vec<f64>,
    pub m: Vec<f64>,
    pub n: Vec<Vec<(u32, f64)>>,
}

/// Normalized multinomial naive Bayes for serving.
#[derive(Debug, Clone, PartialEq)]
pub struct MnbModel {
    pub log_prior: Vec<f64>,
    /// `ln p(w | k)` at `k * W + w`.
    pub log_word: Vec<f64>,
    pub vocab_size: usize,
}

impl MnbModel {
    pub fn log_joint(&self, doc: &Document) -> Vec<f64> {
        self.log_prior
            .iter()
            .enumerate()
            .map(|(k, lp)| {
                lp + doc
                    .entries()
                    .iter()
                    .map(|&(w, c)| c as f64 * self.log_word[k * self.vocab_size + w as usize])
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn posterior(&self, doc: &Document) -> Option<Vec<f64>> {
        softmax(&self.log_joint(doc))
    }

    pub fn prior(&self) -> Vec<f64> {
        self.log_prior.iter().map(|v| v.exp()).collect()
    }

    pub fn word_probs(&self, k: usize) -> Vec<f64> {
        self.log_word[k * self.vocab_size..(k + 1) * self.vocab_size]
            .iter()
            .map(|v| v.exp())
            .collect()
    }
}

/// Scores with the state's own posterior; perplexity uses the normalized model.
impl Evaluable<Document> for MnbState {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn class_log_scores(&self, doc: &Document, _: u64) -> Vec<f64> {
        self.log_scores(doc)
    }

    fn log_marginal(&self, doc: &Document, _: u64) -> f64 {
        log_sum_exp(&self.finalized_log_joint(doc))
    }

    fn size(&self, doc: &Document) -> f64 {
        doc.tokens() as f64
    }
}

/// `p(k | d)` from the Algorithm 3 scores.
pub fn mnb_posterior(doc: &Document, state: &MnbState) -> Result<Vec<f64>> {
    softmax(&state.log_scores(doc)).ok_or_else(|| Error::numeric(0, "class posterior underflow"))
}

/// Batch multinomial naive Bayes with a Laplace prior: `C[k]` = 1 + class count,
/// `N[k][w]` = `alpha` + word count, `gamma = 0`.
pub fn laplace_mnb(
    docs: &[LabeledInstance<Document>],
    num_classes: usize,
    vocab_size: usize,
    alpha: f64,
) -> Result<MnbState> {
    let mut c = vec![1.0; num_classes];
    let mut n = vec![vec![alpha; vocab_size]; num_classes];
    for inst in docs {
        if inst.label >= num_classes {
            return Err(Error::config(format!("label {} out of range", inst.label)));
        }
        c[inst.label] += 1.0;
        for &(w, cnt) in inst.x.entries() {
            let row = &mut n[inst.label];
            let slot = row.get_mut(w as usize).ok_or_else(|| {
                Error::Vocabulary(format!("word id {w} outside a vocabulary of {vocab_size}"))
            })?;
            *slot += cnt as f64;
        }
    }
    MnbState::from_counts(c, n, 0.0, alpha)
}

#[derive(Debug, Clone)]
pub struct MnbRun {
    pub state: MnbState,
    pub epochs: Vec<EpochMetrics>,
    pub steps: u64,
}

/// Trains MNB with sdEM. Held-out metrics use `heldout` when given.
pub fn train(
    docs: &[LabeledInstance<Document>],
    mut state: MnbState,
    config: &TrainConfig,
    heldout: Option<&[LabeledInstance<Document>]>,
) -> Result<MnbRun> {
    for inst in docs.iter().chain(heldout.unwrap_or(&[]).iter()) {
        state.check_label(inst.label)?;
        state.check_doc(&inst.x)?;
    }
    if config.loss == Loss::Hinge && state.num_classes < 2 {
        return Err(Error::config("hinge loss needs at least two classes"));
    }
    let n = docs.len();
    let (epochs, steps) = run_epochs(
        n,
        config,
        &mut state,
        |st, ctx| {
            let inst = &docs[ctx.index];
            st.update(config.loss, inst.label, &inst.x, ctx.rho, n)
                .map(|s| s.loss_value)
                .map_err(|e| match e {
                    Error::Numeric { what, .. } => Error::numeric(ctx.t, what),
                    other => other,
                })
        },
        |st, epoch, wall| Ok(evaluate_epoch(epoch, docs, heldout, st, wall)),
    )?;
    Ok(MnbRun {
        state,
        epochs,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn doc(pairs: &[(u32, u32)]) -> Document {
        Document::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn worked_state() -> MnbState {
        MnbState::from_counts(
            vec![1.0, 1.0],
            vec![vec![3.0, 1.0], vec![1.0, 3.0]],
            0.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn fresh_state_is_uniform() {
        let st = MnbState::new(3, 5, 1.0).unwrap();
        let p = mnb_posterior(&doc(&[(0, 2), (4, 1)]), &st).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn worked_posterior() {
        let p = mnb_posterior(&doc(&[(0, 1)]), &worked_state()).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn empty_document_uses_class_counts() {
        let st = MnbState::from_counts(vec![3.0, 1.0], vec![vec![1.0], vec![1.0]], 0.0, 1.0).unwrap();
        let p = mnb_posterior(&Document::empty(), &st).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        assert!(matches!(MnbState::new(2, 0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn ncll_worked_update() {
        // The true label is the second class, so p(y|d) = 0.25.
        let mut st = worked_state();
        let d = doc(&[(0, 1)]);
        let n = 1_000_000_000;
        st.ncll_update(1, &d, 0.1, n).unwrap();
        assert_abs_diff_eq!(st.n(1, 0), 1.0 + 0.1 * 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(st.n(0, 0), 3.0 - 0.1 * 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(st.m()[1], 4.0 + 0.1 * 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(st.m()[0], 4.0 - 0.1 * 0.75, epsilon = 1e-6);
        assert!(st.coherence_error() < 1e-15);
    }

    #[test]
    fn ncll_with_certain_posterior_only_moves_gamma() {
        let mut st = MnbState::from_counts(vec![1.0, 0.0], vec![vec![1.0], vec![0.0]], 0.0, 1.0).unwrap();
        let before = st.clone();
        let step = st.ncll_update(0, &doc(&[(0, 1)]), 0.5, 1_000_000_000_000).unwrap();
        assert!(step.posterior[0] > 1.0 - 1e-9);
        assert!(st.gamma() > 0.0);
        assert_abs_diff_eq!(st.n(0, 0), before.n(0, 0), epsilon = 1e-9);
        assert_eq!(st.n(1, 0), 0.0);
    }

    #[test]
    fn clamping_moves_m_by_realized_change() {
        let mut st = MnbState::from_counts(
            vec![1.0, 1.0],
            vec![vec![1.0, 1.0], vec![0.1, 0.1]],
            0.0,
            1.0,
        )
        .unwrap();
        let d = doc(&[(0, 3)]);
        let step = st.ncll_update(0, &d, 1.0, 1_000_000).unwrap();
        assert!(3.0 * step.posterior[1] > 0.1);
        assert_eq!(st.n(1, 0), 0.0);
        assert_abs_diff_eq!(st.m()[1], 0.1, epsilon = 1e-12);
        assert!(st.c()[1] >= 0.0);
    }

    #[test]
    fn hinge_skips_confident_documents() {
        let mut st = MnbState::from_counts(
            vec![1.0, 1.0],
            vec![vec![50.0, 1.0], vec![1.0, 50.0]],
            0.0,
            1.0,
        )
        .unwrap();
        let before = st.clone();
        let step = st.hinge_update(0, &doc(&[(0, 2)]), 0.5, 100).unwrap();
        assert!(!step.active);
        assert_eq!(st.n_row(0), before.n_row(0));
        assert_eq!(st.c(), before.c());
        assert!(st.gamma() > before.gamma());
    }

    #[test]
    fn hinge_touches_only_true_and_rival_rows() {
        let mut st = MnbState::new(3, 2, 1.0).unwrap();
        st.c = vec![1.0, 2.0, 1.5];
        let before = st.clone();
        let step = st.hinge_update(0, &doc(&[(1, 1)]), 0.5, 10).unwrap();
        assert!(step.active);
        assert_ne!(st.n_row(0), before.n_row(0));
        assert_ne!(st.n_row(1), before.n_row(1));
        assert_eq!(st.n_row(2), before.n_row(2));
        assert_eq!(st.c()[2], before.c()[2]);
        assert!(MnbState::new(1, 2, 1.0).unwrap().hinge_update(0, &doc(&[(0, 1)]), 0.5, 1).is_err());
    }

    #[test]
    fn finalize_examples() {
        let st = MnbState::from_counts(vec![1.0, 1.0], vec![vec![2.0, 2.0], vec![1.0, 3.0]], 0.0, 1.0).unwrap();
        let m = st.finalize();
        assert_abs_diff_eq!(m.log_word[0].exp(), 0.5, epsilon = 1e-15);
        let st = MnbState::from_counts(vec![0.0, 0.0], vec![vec![0.0, 0.0], vec![0.0, 0.0]], 1.0, 1.0).unwrap();
        let m = st.finalize();
        assert_abs_diff_eq!(m.log_word[1].exp(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.log_prior[0].exp(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn finalized_posterior_matches_state_posterior_at_zero_gamma() {
        let st = MnbState::from_counts(vec![2.0, 1.0], vec![vec![1.0, 4.0, 2.0], vec![3.0, 0.5, 1.0]], 0.0, 1.0).unwrap();
        let d = doc(&[(0, 2), (2, 1)]);
        let a = mnb_posterior(&d, &st).unwrap();
        let b = st.finalize().posterior(&d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn nll_first_step_keeps_only_the_document() {
        let mut st = MnbState::new(2, 3, 1.0).unwrap();
        st.nll_update(1, &doc(&[(2, 4)]), 1.0, 10).unwrap();
        assert_eq!(st.n_row(0), vec![0.0; 3]);
        assert_eq!(st.n_row(1), vec![0.0, 0.0, 4.0]);
        assert_eq!(st.c(), &[0.0, 1.0]);
        assert_abs_diff_eq!(st.gamma(), 0.1, epsilon = 1e-15);
        st.nll_update(0, &doc(&[(0, 2)]), 0.5, 10).unwrap();
        assert_abs_diff_eq!(st.n(1, 2), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(st.n(0, 0), 1.0, epsilon = 1e-15);
        assert!(st.coherence_error() < 1e-15);
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let mut st = MnbState::new(2, 4, 1.0).unwrap();
        st.ncll_update(0, &doc(&[(0, 1), (3, 2)]), 1.0, 5).unwrap();
        st.nll_update(1, &doc(&[(1, 1)]), 0.3, 5).unwrap();
        let json = serde_json::to_string(&st.to_dump()).unwrap();
        let back = MnbState::from_dump(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn priors() {
        assert_eq!(MnbPrior::P1.alpha(10).unwrap(), 1.0);
        assert_abs_diff_eq!(MnbPrior::P2.alpha(100).unwrap(), 100f64.ln());
        assert!(MnbPrior::P2.alpha(1).is_err());
    }
}
