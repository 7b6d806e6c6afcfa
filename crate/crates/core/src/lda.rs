//! Per-class LDA classifier trained by sdEM with online collapsed Gibbs sampling.
//!
//! All occurrences of a word in a document share one topic, so the latent
//! variables are one topic per distinct word. Given class `y` the topic
//! sequence follows a Dirichlet-multinomial with meta-parameter `topic_alpha`
//! and word `w` with `|w|_d` occurrences contributes `beta[y][z][w]^{|w|_d}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::engine::{run_epochs, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_epoch, EpochMetrics, Evaluable};
use crate::expfam::{
    argmax_excluding, log_sum_exp, softmax, ConjugatePrior, ExpectationState, LabeledInstance,
    ModelFamily, Observability, SparseStats,
};
use crate::losses::{Loss, PROB_FLOOR};
use crate::rng::{self, tag, StreamRng};

const SCALE_RENORM: f64 = 1e-150;
/// Stream sub-tag for the class-posterior estimate of a training step.
const POSTERIOR_STREAM: u64 = u64::MAX;

/// Word-topic probabilities as seen by the sampler.
pub trait TopicWords {
    fn num_topics(&self) -> usize;
    fn topic_alpha(&self) -> f64;
    /// `ln beta[label][z][w]`.
    fn log_beta(&self, label: usize, z: usize, w: usize) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub burn_in: usize,
    pub samples: usize,
    /// Average the full conditionals instead of the sampled indicators.
    #[serde(default = "default_true")]
    pub rao_blackwell: bool,
}

fn default_true() -> bool {
    true
}

impl GibbsConfig {
    pub const TRAIN: GibbsConfig = GibbsConfig {
        burn_in: 5,
        samples: 10,
        rao_blackwell: true,
    };
    pub const EVAL: GibbsConfig = GibbsConfig {
        burn_in: 20,
        samples: 50,
        rao_blackwell: true,
    };

    pub fn new(burn_in: usize, samples: usize) -> Result<Self> {
        let cfg = Self {
            burn_in,
            samples,
            rao_blackwell: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("Gibbs sampler needs at least one retained sample"));
        }
        Ok(())
    }
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self::TRAIN
    }
}

/// `(word, count)` pairs of a document's distinct words.
pub fn doc_words(doc: &Document) -> Vec<(usize, u32)> {
    doc.entries().iter().map(|&(w, c)| (w as usize, c)).collect()
}

/// `|w|_d * ln beta[label][z][w]` laid out `j * Z + z`.
fn weighted_log_beta<T: TopicWords + ?Sized>(topics: &T, label: usize, words: &[(usize, u32)]) -> Vec<f64> {
    let z = topics.num_topics();
    let mut out = Vec::with_capacity(words.len() * z);
    for &(w, c) in words {
        for t in 0..z {
            out.push(c as f64 * topics.log_beta(label, t, w));
        }
    }
    out
}

fn conditional_into(lb: &[f64], counts: &[usize], alpha: f64, out: &mut [f64]) -> f64 {
    for (t, o) in out.iter_mut().enumerate() {
        *o = lb[t] + (counts[t] as f64 + alpha).ln();
    }
    let lse = log_sum_exp(out);
    for o in out.iter_mut() {
        *o = (*o - lse).exp();
    }
    lse
}

fn sample_index(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `p(z_j | y, z_{-j}, d)`, proportional to `beta^{|w_j|_d} (S^{(-j)}_z + alpha)`.
pub fn gibbs_conditional<T: TopicWords + ?Sized>(
    topics: &T,
    label: usize,
    words: &[(usize, u32)],
    j: usize,
    assignment: &[usize],
) -> Vec<f64> {
    let nz = topics.num_topics();
    let mut counts = vec![0usize; nz];
    for (i, &z) in assignment.iter().enumerate() {
        if i != j {
            counts[z] += 1;
        }
    }
    let (w, c) = words[j];
    let lb: Vec<f64> = (0..nz)
        .map(|z| c as f64 * topics.log_beta(label, z, w))
        .collect();
    let mut out = vec![0.0; nz];
    conditional_into(&lb, &counts, topics.topic_alpha(), &mut out);
    out
}

fn init_from_lb(lb: &[f64], nz: usize, alpha: f64, rng: &mut StreamRng) -> (Vec<usize>, Vec<usize>) {
    let j_count = lb.len() / nz;
    let mut counts = vec![0usize; nz];
    let mut assignment = Vec::with_capacity(j_count);
    let mut probs = vec![0.0; nz];
    for j in 0..j_count {
        conditional_into(&lb[j * nz..(j + 1) * nz], &counts, alpha, &mut probs);
        let z = sample_index(&probs, rng);
        counts[z] += 1;
        assignment.push(z);
    }
    (assignment, counts)
}

/// Sequential initialization: each word is drawn from the conditional given the
/// topics drawn so far, starting from empty counts.
pub fn init_topics<T: TopicWords + ?Sized>(
    topics: &T,
    label: usize,
    words: &[(usize, u32)],
    rng: &mut StreamRng,
) -> Vec<usize> {
    let lb = weighted_log_beta(topics, label, words);
    init_from_lb(&lb, topics.num_topics(), topics.topic_alpha(), rng).0
}

/// Estimate of `E_z[s(y, z, d)]` laid out `j * Z + z` over the distinct words.
///
/// Runs `init_topics`, then `burn_in + samples` sweeps and averages the
/// retained sweeps. Every word's entries sum to `|w|_d`.
pub fn expected_statistics<T: TopicWords + ?Sized>(
    topics: &T,
    label: usize,
    words: &[(usize, u32)],
    cfg: &GibbsConfig,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let nz = topics.num_topics();
    let alpha = topics.topic_alpha();
    let j_count = words.len();
    let mut acc = vec![0.0; j_count * nz];
    if j_count == 0 {
        return acc;
    }
    if nz == 1 {
        for (j, &(_, c)) in words.iter().enumerate() {
            acc[j] = c as f64;
        }
        return acc;
    }
    let lb = weighted_log_beta(topics, label, words);
    let (mut assignment, mut counts) = init_from_lb(&lb, nz, alpha, rng);
    let mut probs = vec![0.0; nz];
    for sweep in 0..cfg.burn_in + cfg.samples {
        let retained = sweep >= cfg.burn_in;
        for j in 0..j_count {
            counts[assignment[j]] -= 1;
            conditional_into(&lb[j * nz..(j + 1) * nz], &counts, alpha, &mut probs);
            if retained && cfg.rao_blackwell {
                for (a, p) in acc[j * nz..(j + 1) * nz].iter_mut().zip(&probs) {
                    *a += p;
                }
            }
            let z = sample_index(&probs, rng);
            assignment[j] = z;
            counts[z] += 1;
            if retained && !cfg.rao_blackwell {
                acc[j * nz + z] += 1.0;
            }
        }
    }
    let inv = 1.0 / cfg.samples as f64;
    for (j, &(_, c)) in words.iter().enumerate() {
        for a in &mut acc[j * nz..(j + 1) * nz] {
            *a *= inv * c as f64;
        }
    }
    acc
}

/// Unbiased sequential importance sampling estimate of `p(d | y)`, returned in
/// log space. Each particle draws topics word by word from the initialization
/// proposal and carries the product of the proposal normalizers.
pub fn log_likelihood_estimate<T: TopicWords + ?Sized>(
    topics: &T,
    label: usize,
    words: &[(usize, u32)],
    particles: usize,
    rng: &mut StreamRng,
) -> f64 {
    let nz = topics.num_topics();
    let alpha = topics.topic_alpha();
    let lb = weighted_log_beta(topics, label, words);
    if nz == 1 {
        return lb.iter().sum();
    }
    let particles = particles.max(1);
    let mut log_weights = Vec::with_capacity(particles);
    let mut probs = vec![0.0; nz];
    let mut counts = vec![0usize; nz];
    for _ in 0..particles {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut lw = 0.0;
        for j in 0..words.len() {
            let lse = conditional_into(&lb[j * nz..(j + 1) * nz], &counts, alpha, &mut probs);
            lw += lse - (j as f64 + nz as f64 * alpha).ln();
            counts[sample_index(&probs, rng)] += 1;
        }
        log_weights.push(lw);
    }
    log_sum_exp(&log_weights) - (particles as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaState {
    num_classes: usize,
    num_topics: usize,
    vocab_size: usize,
    eta: f64,
    topic_alpha: f64,
    c: Vec<f64>,
    /// Stored counts; the true `N[k][z][w]` is `scale * n[(k * Z + z) * W + w]`.
    n: Vec<f64>,
    /// `M[k][z]` at `k * Z + z`.
    m: Vec<f64>,
    gamma: f64,
    scale: f64,
}

pub const DEFAULT_ETA: f64 = 0.1;

/// `beta` with `gamma * smoothing_words` added to each topic total.
pub struct BetaView<'a> {
    state: &'a LdaState,
    smoothing_words: f64,
}

impl TopicWords for BetaView<'_> {
    fn num_topics(&self) -> usize {
        self.state.num_topics
    }

    fn topic_alpha(&self) -> f64 {
        self.state.topic_alpha
    }

    fn log_beta(&self, label: usize, z: usize, w: usize) -> f64 {
        let s = self.state;
        (s.n(label, z, w) + s.gamma).ln() - (s.m_at(label, z) + s.gamma * self.smoothing_words).ln()
    }
}

impl LdaState {
    /// `N = eta/|Z|`, `C = 1`, `M = |W| eta/|Z|`, `gamma = 0`, `topic_alpha = 1/|Z|`.
    pub fn new(num_classes: usize, num_topics: usize, vocab_size: usize, eta: f64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("vocabulary is empty"));
        }
        if num_classes == 0 || num_topics == 0 {
            return Err(Error::config("classes and topics must be at least 1"));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::config(format!("eta must be positive, got {eta}")));
        }
        let per = eta / num_topics as f64;
        Ok(Self {
            num_classes,
            num_topics,
            vocab_size,
            eta,
            topic_alpha: 1.0 / num_topics as f64,
            c: vec![1.0; num_classes],
            n: vec![per; num_classes * num_topics * vocab_size],
            m: vec![per * vocab_size as f64; num_classes * num_topics],
            gamma: 0.0,
            scale: 1.0,
        })
    }

    /// State from explicit counts `n[k][z][w]`; `M` is computed as row sums.
    pub fn from_counts(c: Vec<f64>, n: Vec<Vec<Vec<f64>>>, gamma: f64, eta: f64) -> Result<Self> {
        let k = c.len();
        let z = n.first().map_or(0, Vec::len);
        let w = n.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if n.len() != k || n.iter().any(|r| r.len() != z || r.iter().any(|t| t.len() != w)) {
            return Err(Error::config("count tensor shape is inconsistent"));
        }
        let mut st = Self::new(k, z, w, eta)?;
        if c.iter().chain(n.iter().flatten().flatten()).any(|v| !(*v >= 0.0)) || !(gamma >= 0.0) {
            return Err(Error::config("counts and gamma must be non-negative"));
        }
        st.m = n.iter().flatten().map(|t| t.iter().sum()).collect();
        st.n = n.into_iter().flatten().flatten().collect();
        st.c = c;
        st.gamma = gamma;
        Ok(st)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn topic_alpha(&self) -> f64 {
        self.topic_alpha
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    fn idx(&self, k: usize, z: usize, w: usize) -> usize {
        (k * self.num_topics + z) * self.vocab_size + w
    }

    pub fn n(&self, k: usize, z: usize, w: usize) -> f64 {
        self.scale * self.n[self.idx(k, z, w)]
    }

    pub fn m_at(&self, k: usize, z: usize) -> f64 {
        self.m[k * self.num_topics + z]
    }

    fn set_n(&mut self, k: usize, z: usize, w: usize, value: f64) {
        let i = self.idx(k, z, w);
        self.n[i] = value / self.scale;
    }

    pub fn coherence_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.num_classes {
            for z in 0..self.num_topics {
                let sum: f64 = (0..self.vocab_size).map(|w| self.n(k, z, w)).sum();
                let m = self.m_at(k, z);
                worst = worst.max((m - sum).abs() / m.abs().max(1.0));
            }
        }
        worst
    }

    /// Smoothing with `gamma |W|`, used by the sampler and for perplexity.
    pub fn vocabulary_view(&self) -> BetaView<'_> {
        BetaView {
            state: self,
            smoothing_words: self.vocab_size as f64,
        }
    }

    /// Smoothing with `gamma |d|`, matching the multinomial scoring rule.
    pub fn scoring_view(&self, distinct_words: usize) -> BetaView<'_> {
        BetaView {
            state: self,
            smoothing_words: distinct_words as f64,
        }
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

    /// Per-class `ln(C[k]+gamma) + ln p_hat(d | k)` where `p_hat` is the
    /// importance-sampling estimate with `cfg.samples` particles. `rng_for(k)`
    /// supplies the stream for class `k`.
    pub fn log_scores_with(
        &self,
        doc: &Document,
        cfg: &GibbsConfig,
        mut rng_for: impl FnMut(usize) -> StreamRng,
    ) -> Vec<f64> {
        let words = doc_words(doc);
        let view = self.scoring_view(words.len());
        (0..self.num_classes)
            .map(|k| {
                let mut rng = rng_for(k);
                (self.c[k] + self.gamma).ln()
                    + log_likelihood_estimate(&view, k, &words, cfg.samples, &mut rng)
            })
            .collect()
    }

    /// `ln p(d)` under the normalized model with vocabulary smoothing.
    pub fn log_marginal_with(
        &self,
        doc: &Document,
        cfg: &GibbsConfig,
        mut rng_for: impl FnMut(usize) -> StreamRng,
    ) -> f64 {
        let words = doc_words(doc);
        let view = self.vocabulary_view();
        let total: f64 = self.c.iter().map(|c| c + self.gamma).sum();
        let joint: Vec<f64> = (0..self.num_classes)
            .map(|k| {
                let mut rng = rng_for(k);
                ((self.c[k] + self.gamma) / total).ln()
                    + log_likelihood_estimate(&view, k, &words, cfg.samples, &mut rng)
            })
            .collect();
        log_sum_exp(&joint)
    }

    /// Applies `N[k][z][w] += rho * varpi * s[z][w]` with clamping at zero and
    /// realized-change bookkeeping on `M[k][z]`.
    pub fn online_lda_update(&mut self, k: usize, words: &[(usize, u32)], stats: &[f64], rho: f64, varpi: f64) {
        let nz = self.num_topics;
        for (j, &(w, _)) in words.iter().enumerate() {
            for z in 0..nz {
                let old = self.n(k, z, w);
                let new = (old + rho * varpi * stats[j * nz + z]).max(0.0);
                self.set_n(k, z, w, new);
                self.m[k * nz + z] = (self.m[k * nz + z] + new - old).max(0.0);
            }
        }
    }

    fn accrue_gamma(&mut self, rho: f64, n: usize) {
        self.gamma += self.eta / self.num_topics as f64 * rho / n as f64;
    }

    fn class_stats(&self, k: usize, words: &[(usize, u32)], cfg: &GibbsConfig, rng: &mut StreamRng) -> Vec<f64> {
        expected_statistics(&self.vocabulary_view(), k, words, cfg, rng)
    }

    fn update_counts(&mut self, y: usize, rival: Option<usize>, p: &[f64], rho: f64) {
        self.c[y] += rho * (1.0 - p[y]);
        for (k, (c, &pk)) in self.c.iter_mut().zip(p).enumerate() {
            let touched = match rival {
                Some(r) => k == r,
                None => k != y,
            };
            if touched {
                *c = (*c - rho * pk).max(0.0);
            }
        }
    }

    pub fn ncll_step(&mut self, y: usize, doc: &Document, rho: f64, n: usize, ctx: &StepStreams) -> Result<LdaStep> {
        self.check_label(y)?;
        self.check_doc(doc)?;
        self.accrue_gamma(rho, n);
        let scores = self.log_scores_with(doc, &ctx.cfg, |k| ctx.posterior_stream(k));
        let p = softmax(&scores).ok_or_else(|| Error::numeric(0, "class posterior underflow"))?;
        let words = doc_words(doc);
        for k in 0..self.num_classes {
            let varpi = if k == y { 1.0 - p[y] } else { -p[k] };
            if varpi == 0.0 {
                continue;
            }
            let stats = self.class_stats(k, &words, &ctx.cfg, &mut ctx.chain_stream(k));
            self.online_lda_update(k, &words, &stats, rho, varpi);
        }
        self.update_counts(y, None, &p, rho);
        Ok(LdaStep {
            loss_value: -p[y].max(PROB_FLOOR).ln(),
            posterior: p,
            active: true,
        })
    }

    pub fn hinge_step(&mut self, y: usize, doc: &Document, rho: f64, n: usize, ctx: &StepStreams) -> Result<LdaStep> {
        self.check_label(y)?;
        self.check_doc(doc)?;
        if self.num_classes < 2 {
            return Err(Error::config("hinge loss needs at least two classes"));
        }
        self.accrue_gamma(rho, n);
        let scores = self.log_scores_with(doc, &ctx.cfg, |k| ctx.posterior_stream(k));
        let p = softmax(&scores).ok_or_else(|| Error::numeric(0, "class posterior underflow"))?;
        let rival = argmax_excluding(&scores, y).expect("at least two classes");
        let margin = scores[y] - scores[rival];
        let loss_value = (1.0 - margin).max(0.0);
        if margin > 1.0 {
            return Ok(LdaStep {
                posterior: p,
                loss_value,
                active: false,
            });
        }
        let words = doc_words(doc);
        for (k, varpi) in [(y, 1.0 - p[y]), (rival, -p[rival])] {
            if varpi == 0.0 {
                continue;
            }
            let stats = self.class_stats(k, &words, &ctx.cfg, &mut ctx.chain_stream(k));
            self.online_lda_update(k, &words, &stats, rho, varpi);
        }
        self.update_counts(y, Some(rival), &p, rho);
        Ok(LdaStep {
            posterior: p,
            loss_value,
            active: true,
        })
    }

    /// `(N, C, gamma) <- (1 - rho)(N, C, gamma) + rho (E_z[s(y, z, d)], I[y], eta/|Z|/n)`.
    pub fn nll_step(&mut self, y: usize, doc: &Document, rho: f64, n: usize, ctx: &StepStreams) -> Result<LdaStep> {
        self.check_label(y)?;
        self.check_doc(doc)?;
        let words = doc_words(doc);
        let stats = self.class_stats(y, &words, &ctx.cfg, &mut ctx.chain_stream(y));
        let loss_value = -self.log_marginal_class(doc, y, &ctx.cfg, &mut ctx.posterior_stream(y));
        let keep = (1.0 - rho).max(0.0);
        if keep == 0.0 {
            self.n.iter_mut().for_each(|v| *v = 0.0);
            self.scale = 1.0;
        } else {
            self.scale *= keep;
        }
        self.m.iter_mut().for_each(|v| *v *= keep);
        self.c.iter_mut().for_each(|v| *v *= keep);
        self.gamma = keep * self.gamma + rho * self.eta / self.num_topics as f64 / n as f64;
        self.online_lda_update(y, &words, &stats, rho, 1.0);
        self.c[y] += rho;
        if self.scale < SCALE_RENORM {
            let s = self.scale;
            self.n.iter_mut().for_each(|v| *v *= s);
            self.scale = 1.0;
        }
        Ok(LdaStep {
            posterior: Vec::new(),
            loss_value,
            active: true,
        })
    }

    fn log_marginal_class(&self, doc: &Document, y: usize, cfg: &GibbsConfig, rng: &mut StreamRng) -> f64 {
        let words = doc_words(doc);
        let total: f64 = self.c.iter().map(|c| c + self.gamma).sum();
        ((self.c[y] + self.gamma) / total).ln()
            + log_likelihood_estimate(&self.vocabulary_view(), y, &words, cfg.samples, rng)
    }

    pub fn step(&mut self, loss: Loss, y: usize, doc: &Document, rho: f64, n: usize, ctx: &StepStreams) -> Result<LdaStep> {
        match loss {
            Loss::Nll => self.nll_step(y, doc, rho, n, ctx),
            Loss::Ncll => self.ncll_step(y, doc, rho, n, ctx),
            Loss::Hinge => self.hinge_step(y, doc, rho, n, ctx),
        }
    }

    /// Normalized `beta[k][z][w] = (N + gamma) / (M + gamma |W|)` at `(k * Z + z) * W + w`
    /// and class probabilities `(C + gamma) / sum`.
    pub fn finalize(&self) -> (Vec<f64>, Vec<f64>) {
        let view = self.vocabulary_view();
        let mut beta = Vec::with_capacity(self.n.len());
        for k in 0..self.num_classes {
            for z in 0..self.num_topics {
                beta.extend((0..self.vocab_size).map(|w| view.log_beta(k, z, w).exp()));
            }
        }
        let total: f64 = self.c.iter().map(|c| c + self.gamma).sum();
        let prior = self.c.iter().map(|c| (c + self.gamma) / total).collect();
        (beta, prior)
    }

    pub fn to_dump(&self) -> LdaDump {
        LdaDump {
            num_classes: self.num_classes,
            num_topics: self.num_topics,
            vocab_size: self.vocab_size,
            eta: self.eta,
            topic_alpha: self.topic_alpha,
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

    pub fn from_dump(d: LdaDump) -> Result<Self> {
        let mut st = Self::new(d.num_classes, d.num_topics, d.vocab_size, d.eta)?;
        let rows = d.num_classes * d.num_topics;
        if d.c.len() != d.num_classes || d.m.len() != rows || d.n.len() != rows {
            return Err(Error::Format("LDA dump arrays do not match the declared shape".into()));
        }
        st.n.iter_mut().for_each(|v| *v = 0.0);
        for (r, row) in d.n.iter().enumerate() {
            for &(w, v) in row {
                if w as usize >= d.vocab_size {
                    return Err(Error::Format(format!("word id {w} outside the vocabulary")));
                }
                st.n[r * d.vocab_size + w as usize] = v;
            }
        }
        st.topic_alpha = d.topic_alpha;
        st.c = d.c;
        st.m = d.m;
        st.gamma = d.gamma;
        st.scale = d.scale;
        Ok(st)
    }
}

/// Serialized LDA state; rows of `N` are indexed `k * Z + z`, zeros omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaDump {
    pub num_classes: usize,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub eta: f64,
    pub topic_alpha: f64,
    pub gamma: f64,
    pub scale: f64,
    pub c: Vec<f64>,
    pub m: Vec<f64>,
    pub n: Vec<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaStep {
    pub posterior: Vec<f64>,
    pub loss_value: f64,
    pub active: bool,
}

/// Random streams for one training step, keyed by `(seed, t, document)`.
#[derive(Debug, Clone, Copy)]
pub struct StepStreams {
    pub seed: u64,
    pub t: u64,
    pub doc: u64,
    pub cfg: GibbsConfig,
}

impl StepStreams {
    pub fn new(seed: u64, t: u64, doc: u64, cfg: GibbsConfig) -> Self {
        Self { seed, t, doc, cfg }
    }

    pub fn chain_stream(&self, class: usize) -> StreamRng {
        rng::stream(self.seed, &[tag::TRAIN, self.t, self.doc, class as u64])
    }

    pub fn posterior_stream(&self, class: usize) -> StreamRng {
        rng::stream(self.seed, &[tag::TRAIN, self.t, self.doc, POSTERIOR_STREAM, class as u64])
    }
}

/// `p(y | d)` estimated with `cfg.samples` particles per class.
pub fn lda_posterior(doc: &Document, state: &LdaState, cfg: &GibbsConfig, seed: u64) -> Result<Vec<f64>> {
    let scores = state.log_scores_with(doc, cfg, |k| rng::stream(seed, &[tag::EVAL, k as u64]));
    softmax(&scores).ok_or_else(|| Error::numeric(0, "class posterior underflow"))
}

/// Evaluation wrapper: fixed Gibbs configuration and seed.
pub struct LdaView<'a> {
    pub state: &'a LdaState,
    pub cfg: GibbsConfig,
    pub seed: u64,
}

impl Evaluable<Document> for LdaView<'_> {
    fn num_classes(&self) -> usize {
        self.state.num_classes
    }

    fn class_log_scores(&self, doc: &Document, key: u64) -> Vec<f64> {
        self.state
            .log_scores_with(doc, &self.cfg, |k| rng::stream(self.seed, &[key, k as u64, 0]))
    }

    fn log_marginal(&self, doc: &Document, key: u64) -> f64 {
        self.state
            .log_marginal_with(doc, &self.cfg, |k| rng::stream(self.seed, &[key, k as u64, 1]))
    }

    fn size(&self, doc: &Document) -> f64 {
        doc.tokens() as f64
    }
}

#[derive(Debug, Clone)]
pub struct LdaRun {
    pub state: LdaState,
    pub epochs: Vec<EpochMetrics>,
    pub steps: u64,
}

/// Trains the LDA classifier with sdEM.
pub fn train(
    docs: &[LabeledInstance<Document>],
    mut state: LdaState,
    config: &TrainConfig,
    train_cfg: GibbsConfig,
    eval_cfg: GibbsConfig,
    heldout: Option<&[LabeledInstance<Document>]>,
) -> Result<LdaRun> {
    train_cfg.validate()?;
    eval_cfg.validate()?;
    for inst in docs.iter().chain(heldout.unwrap_or(&[]).iter()) {
        state.check_label(inst.label)?;
        state.check_doc(&inst.x)?;
    }
    let n = docs.len();
    let eval_seed = crate::eval::eval_seed(config.seed);
    let (epochs, steps) = run_epochs(
        n,
        config,
        &mut state,
        |st, ctx| {
            let inst = &docs[ctx.index];
            let streams = StepStreams::new(config.seed, ctx.t, ctx.index as u64, train_cfg);
            st.step(config.loss, inst.label, &inst.x, ctx.rho, n, &streams)
                .map(|s| s.loss_value)
                .map_err(|e| match e {
                    Error::Numeric { what, .. } => Error::numeric(ctx.t, what),
                    other => other,
                })
        },
        |st, epoch, wall| {
            let view = LdaView {
                state: st,
                cfg: eval_cfg,
                seed: eval_seed,
            };
            Ok(evaluate_epoch(epoch, docs, heldout, &view, wall))
        },
    )?;
    Ok(LdaRun {
        state,
        epochs,
        steps,
    })
}

// --- Generic family adapter ------------------------------------------------------

/// The LDA classifier as a latent-variable [`ModelFamily`].
///
/// Layout: `C[k]` at `k`, then `N[k][z][w]` at `K + (k * Z + z) * W + w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdaFamily {
    pub num_classes: usize,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub gibbs: GibbsConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaParams {
    pub log_prior: Vec<f64>,
    /// `ln beta[k][z][w]` at `(k * Z + z) * W + w`.
    pub log_beta: Vec<f64>,
    pub num_topics: usize,
    pub vocab_size: usize,
}

impl TopicWords for LdaParams {
    fn num_topics(&self) -> usize {
        self.num_topics
    }

    fn topic_alpha(&self) -> f64 {
        1.0 / self.num_topics as f64
    }

    fn log_beta(&self, label: usize, z: usize, w: usize) -> f64 {
        self.log_beta[(label * self.num_topics + z) * self.vocab_size + w]
    }
}

impl LdaFamily {
    pub fn new(num_classes: usize, num_topics: usize, vocab_size: usize, gibbs: GibbsConfig) -> Result<Self> {
        if num_classes == 0 || num_topics == 0 || vocab_size == 0 {
            return Err(Error::config("classes, topics and vocabulary must be non-empty"));
        }
        gibbs.validate()?;
        Ok(Self {
            num_classes,
            num_topics,
            vocab_size,
            gibbs,
        })
    }

    pub fn word_index(&self, k: usize, z: usize, w: usize) -> usize {
        self.num_classes + (k * self.num_topics + z) * self.vocab_size + w
    }

    /// One pseudo-count per class and `eta / |Z|` per word-topic cell, `nu = 0`.
    pub fn prior(&self, eta: f64) -> Result<ConjugatePrior> {
        let mut a = vec![1.0; self.num_classes];
        a.extend(std::iter::repeat_n(
            eta / self.num_topics as f64,
            self.num_classes * self.num_topics * self.vocab_size,
        ));
        ConjugatePrior::new(a, 0.0)
    }
}

impl ModelFamily for LdaFamily {
    type Input = Document;
    type Params = LdaParams;

    fn statistic_dim(&self) -> usize {
        self.num_classes * (1 + self.num_topics * self.vocab_size)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn observability(&self) -> Observability {
        Observability::Latent
    }

    fn check_feasible(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.statistic_dim() {
            return Err(Error::config("LDA state has the wrong dimension"));
        }
        match mu.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            Some(i) => Err(Error::Feasibility {
                component: i,
                what: if i < self.num_classes { "class count C" } else { "word-topic count N" },
                value: mu[i],
            }),
            None => Ok(()),
        }
    }

    fn m_step(&self, state: &ExpectationState) -> Result<LdaParams> {
        self.check_feasible(&state.mu)?;
        let k = self.num_classes;
        let total: f64 = state.mu[..k].iter().sum();
        let mut log_beta = Vec::with_capacity(state.mu.len() - k);
        for row in state.mu[k..].chunks(self.vocab_size) {
            let m: f64 = row.iter().sum();
            log_beta.extend(row.iter().map(|v| (v / m).ln()));
        }
        Ok(LdaParams {
            log_prior: state.mu[..k].iter().map(|c| (c / total).ln()).collect(),
            log_beta,
            num_topics: self.num_topics,
            vocab_size: self.vocab_size,
        })
    }

    fn sufficient_statistics(&self, _label: usize, _x: &Document) -> Result<SparseStats> {
        Err(Error::config(
            "LDA statistics depend on hidden topics; use the expected statistics",
        ))
    }

    fn expected_statistics(
        &self,
        params: &LdaParams,
        label: usize,
        doc: &Document,
        rng: &mut StreamRng,
    ) -> Result<SparseStats> {
        if doc.max_word().is_some_and(|w| w as usize >= self.vocab_size) {
            return Err(Error::Vocabulary("word id outside the vocabulary".into()));
        }
        let words = doc_words(doc);
        let stats = expected_statistics(params, label, &words, &self.gibbs, rng);
        let mut s = SparseStats::new();
        s.push(label, 1.0);
        for (j, &(w, _)) in words.iter().enumerate() {
            for z in 0..self.num_topics {
                s.push(self.word_index(label, z, w), stats[j * self.num_topics + z]);
            }
        }
        Ok(s)
    }

    fn class_log_joint(&self, params: &LdaParams, doc: &Document, rng: &mut StreamRng) -> Vec<f64> {
        let words = doc_words(doc);
        (0..self.num_classes)
            .map(|k| {
                params.log_prior[k]
                    + log_likelihood_estimate(params, k, &words, self.gibbs.samples, rng)
            })
            .collect()
    }

    fn instance_size(&self, doc: &Document) -> f64 {
        doc.tokens() as f64
    }

    fn check_step(&self, mu: &mut [f64], floor: f64) {
        for v in mu.iter_mut() {
            if !(*v >= floor) {
                *v = floor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::enumeration_oracle;
    use crate::mnb::{mnb_posterior, MnbState};
    use approx::assert_abs_diff_eq;

    struct Fixed {
        log_beta: Vec<Vec<f64>>,
        alpha: f64,
    }

    impl TopicWords for Fixed {
        fn num_topics(&self) -> usize {
            self.log_beta.len()
        }
        fn topic_alpha(&self) -> f64 {
            self.alpha
        }
        fn log_beta(&self, _: usize, z: usize, w: usize) -> f64 {
            self.log_beta[z][w]
        }
    }

    fn two_topics() -> Fixed {
        let p = [[0.6, 0.3, 0.1], [0.1, 0.2, 0.7]];
        Fixed {
            log_beta: p.iter().map(|r| r.iter().map(|v: &f64| v.ln()).collect()).collect(),
            alpha: 0.5,
        }
    }

    #[test]
    fn single_topic_is_degenerate() {
        let f = Fixed {
            log_beta: vec![vec![0.5f64.ln(), 0.5f64.ln()]],
            alpha: 1.0,
        };
        let words = [(0, 2), (1, 1)];
        assert_eq!(gibbs_conditional(&f, 0, &words, 0, &[0, 0]), vec![1.0]);
        let mut rng = rng::stream(1, &[]);
        assert_eq!(init_topics(&f, 0, &words, &mut rng), vec![0, 0]);
        let s = expected_statistics(&f, 0, &words, &GibbsConfig::TRAIN, &mut rng);
        assert_eq!(s, vec![2.0, 1.0]);
    }

    #[test]
    fn uniform_beta_gives_uniform_conditional() {
        let f = Fixed {
            log_beta: vec![vec![0.25f64.ln(); 4]; 3],
            alpha: 1.0 / 3.0,
        };
        let p = gibbs_conditional(&f, 0, &[(2, 1)], 0, &[0]);
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn conditional_hand_case() {
        let f = two_topics();
        let words = [(0, 1), (1, 2), (2, 1)];
        let assignment = [1, 0, 1];
        let p = gibbs_conditional(&f, 0, &words, 1, &assignment);
        // others: topic 1 twice, topic 0 never
        let a = 0.3f64.powi(2) * (0.0 + 0.5);
        let b = 0.2f64.powi(2) * (2.0 + 0.5);
        assert_abs_diff_eq!(p[0], a / (a + b), epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], b / (a + b), epsilon = 1e-12);
    }

    #[test]
    fn init_topics_single_word_follows_beta() {
        let f = two_topics();
        let mut hits = 0;
        let trials = 20_000;
        for i in 0..trials {
            let mut rng = rng::stream(5, &[i]);
            if init_topics(&f, 0, &[(0, 1)], &mut rng)[0] == 0 {
                hits += 1;
            }
        }
        let expected = 0.6 / 0.7;
        let freq = hits as f64 / trials as f64;
        let sd = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((freq - expected).abs() < 4.0 * sd, "{freq} vs {expected}");
        let mut a = rng::stream(9, &[]);
        let mut b = rng::stream(9, &[]);
        let words = [(0, 1), (1, 1), (2, 3)];
        assert_eq!(init_topics(&f, 0, &words, &mut a), init_topics(&f, 0, &words, &mut b));
    }

    #[test]
    fn expected_statistics_rows_sum_to_counts() {
        let f = two_topics();
        let words = [(0, 3), (1, 1), (2, 2)];
        for rb in [true, false] {
            let cfg = GibbsConfig {
                burn_in: 2,
                samples: 7,
                rao_blackwell: rb,
            };
            let s = expected_statistics(&f, 0, &words, &cfg, &mut rng::stream(3, &[]));
            for (j, &(_, c)) in words.iter().enumerate() {
                assert_abs_diff_eq!(s[2 * j] + s[2 * j + 1], c as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn indicator_chain_matches_enumeration() {
        let f = two_topics();
        let words = [(0, 1), (1, 1), (2, 1)];
        let exact = enumeration_oracle(&f, 0, &words, 1).unwrap();
        let cfg = GibbsConfig {
            burn_in: 100,
            samples: 40_000,
            rao_blackwell: false,
        };
        let s = expected_statistics(&f, 0, &words, &cfg, &mut rng::stream(11, &[]));
        for (a, b) in s.iter().zip(&exact.expected_stats) {
            assert_abs_diff_eq!(a, b, epsilon = 0.015);
        }
    }

    #[test]
    fn importance_sampling_is_exact_for_one_topic_and_close_for_two() {
        let f = two_topics();
        let words = [(0, 1), (1, 2), (2, 1)];
        let exact = enumeration_oracle(&f, 0, &words, 1).unwrap().log_likelihood;
        let est = log_likelihood_estimate(&f, 0, &words, 20_000, &mut rng::stream(2, &[]));
        assert_abs_diff_eq!(est, exact, epsilon = 0.01);
        let one = Fixed {
            log_beta: vec![f.log_beta[0].clone()],
            alpha: 1.0,
        };
        let est = log_likelihood_estimate(&one, 0, &words, 3, &mut rng::stream(2, &[]));
        assert_abs_diff_eq!(est, 0.6f64.ln() + 2.0 * 0.3f64.ln() + 0.1f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn one_topic_posterior_equals_multinomial_posterior() {
        let c = vec![2.0, 0.5, 1.0];
        let n = vec![vec![1.0, 0.0, 3.0, 2.0], vec![0.5, 2.0, 0.0, 1.0], vec![1.0, 1.0, 1.0, 1.0]];
        let gamma = 0.3;
        let mnb = MnbState::from_counts(c.clone(), n.clone(), gamma, 1.0).unwrap();
        let lda = LdaState::from_counts(c, n.into_iter().map(|r| vec![r]).collect(), gamma, 0.1).unwrap();
        let doc = Document::from_pairs([(0, 2), (2, 1), (3, 4)]).unwrap();
        let a = mnb_posterior(&doc, &mnb).unwrap();
        let b = lda_posterior(&doc, &lda, &GibbsConfig::EVAL, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn fresh_state_posterior_is_uniform() {
        let st = LdaState::new(3, 2, 5, DEFAULT_ETA).unwrap();
        let doc = Document::from_pairs([(0, 1), (3, 2)]).unwrap();
        let p = lda_posterior(&doc, &st, &GibbsConfig::EVAL, 4).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn initial_state_matches_algorithm_header() {
        let st = LdaState::new(2, 4, 10, 0.1).unwrap();
        assert_abs_diff_eq!(st.n(1, 3, 9), 0.025, epsilon = 1e-15);
        assert_abs_diff_eq!(st.m_at(0, 2), 0.25, epsilon = 1e-15);
        assert_eq!(st.c(), &[1.0, 1.0]);
        assert_eq!(st.topic_alpha(), 0.25);
    }

    #[test]
    fn online_update_cases() {
        let mut st = LdaState::new(2, 1, 3, 0.3).unwrap();
        let before = st.clone();
        let words = [(0, 2), (2, 1)];
        st.online_lda_update(0, &words, &[2.0, 1.0], 0.5, 0.0);
        assert_eq!(st, before);
        st.online_lda_update(0, &words, &[2.0, 1.0], 0.5, 1.0);
        assert_abs_diff_eq!(st.n(0, 0, 0), 0.3 + 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(st.m_at(0, 0), 0.9 + 1.5, epsilon = 1e-15);
        st.online_lda_update(1, &words, &[2.0, 1.0], 0.5, -1.0);
        assert_eq!(st.n(1, 0, 0), 0.0);
        assert_abs_diff_eq!(st.m_at(1, 0), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn steps_keep_coherence_and_are_reproducible() {
        let doc = Document::from_pairs([(0, 2), (1, 1), (4, 3)]).unwrap();
        for loss in [Loss::Nll, Loss::Ncll, Loss::Hinge] {
            let mut a = LdaState::new(3, 2, 5, 0.1).unwrap();
            let mut b = a.clone();
            for t in 0..20u64 {
                let ctx = StepStreams::new(7, t, 0, GibbsConfig::TRAIN);
                let rho = 1.0 / (1.0 + 0.1 * t as f64);
                a.step(loss, (t % 3) as usize, &doc, rho, 10, &ctx).unwrap();
                b.step(loss, (t % 3) as usize, &doc, rho, 10, &ctx).unwrap();
            }
            assert_eq!(a, b);
            assert!(a.coherence_error() < 1e-12, "{loss}");
        }
    }

    #[test]
    fn family_rejects_fully_observed_rule() {
        use crate::losses::{ncll_grad, GradientForm};
        let fam = LdaFamily::new(2, 2, 3, GibbsConfig::TRAIN).unwrap();
        let prior = fam.prior(0.1).unwrap();
        let params = fam
            .m_step(&ExpectationState::new(prior.alpha_bar.clone(), 1).unwrap())
            .unwrap();
        let doc = Document::from_pairs([(0, 1)]).unwrap();
        let mut rng = rng::stream(1, &[]);
        let err = ncll_grad(&fam, &params, 0, &doc, GradientForm::FullyObserved, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
        let ok = ncll_grad(&fam, &params, 0, &doc, GradientForm::Auto, &mut rng).unwrap();
        // uniform model: posterior 1/2, delta sums to zero on the class block
        assert_abs_diff_eq!(ok.delta.get(0) + ok.delta.get(1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let mut st = LdaState::new(2, 2, 4, 0.1).unwrap();
        let doc = Document::from_pairs([(0, 1), (3, 1)]).unwrap();
        st.ncll_step(0, &doc, 1.0, 3, &StepStreams::new(1, 0, 0, GibbsConfig::TRAIN)).unwrap();
        st.nll_step(1, &doc, 0.4, 3, &StepStreams::new(1, 1, 0, GibbsConfig::TRAIN)).unwrap();
        let json = serde_json::to_string(&st.to_dump()).unwrap();
        assert_eq!(LdaState::from_dump(serde_json::from_str(&json).unwrap()).unwrap(), st);
    }
}
