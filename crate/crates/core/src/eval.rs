//! Metrics and reference oracles.
//!
//! Metrics are pure functions of a data snapshot and a model snapshot. Documents
//! are scored in parallel; reductions run in index order so repeated evaluation
//! is bit-identical.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{argmax, argmax_excluding, log_sum_exp, LabeledInstance, ModelFamily};
use crate::lda::TopicWords;
use crate::rng::{self, tag};

/// Posterior probabilities below this are clipped before taking logs.
pub const NCLL_FLOOR: f64 = 1e-300;

/// A model that can score instances for evaluation.
///
/// `key` identifies the instance so that sampled estimators can draw from an
/// independent, reproducible stream per instance.
pub trait Evaluable<X>: Sync {
    fn num_classes(&self) -> usize;

    /// `ln p(y, x)` for every class, up to a class-independent constant.
    fn class_log_scores(&self, x: &X, key: u64) -> Vec<f64>;

    /// `ln p(x)` under the normalized model.
    fn log_marginal(&self, x: &X, key: u64) -> f64;

    /// Token count used by perplexity.
    fn size(&self, x: &X) -> f64;
}

/// Adapter that evaluates a [`ModelFamily`] at fixed parameters.
pub struct FamilyView<'a, M: ModelFamily> {
    model: &'a M,
    params: &'a M::Params,
    seed: u64,
}

impl<'a, M: ModelFamily> FamilyView<'a, M> {
    pub fn new(model: &'a M, params: &'a M::Params, seed: u64) -> Self {
        Self { model, params, seed }
    }
}

impl<M: ModelFamily> Evaluable<M::Input> for FamilyView<'_, M> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn class_log_scores(&self, x: &M::Input, key: u64) -> Vec<f64> {
        let mut r = rng::stream(self.seed, &[key, 0]);
        self.model.class_log_joint(self.params, x, &mut r)
    }

    fn log_marginal(&self, x: &M::Input, key: u64) -> f64 {
        let mut r = rng::stream(self.seed, &[key, 1]);
        self.model.log_marginal(self.params, x, &mut r)
    }

    fn size(&self, x: &M::Input) -> f64 {
        self.model.instance_size(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_ncll: f64,
    pub train_hinge: f64,
    /// Training perplexity divided by the number of training documents.
    pub norm_perplexity: f64,
    pub train_perplexity: f64,
    pub test_perplexity: f64,
    pub heldout_accuracy: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub const COLUMNS: [&'static str; 8] = [
        "epoch",
        "train_ncll",
        "train_hinge",
        "norm_perplexity",
        "train_perplexity",
        "test_perplexity",
        "heldout_accuracy",
        "wall_seconds",
    ];
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    label: usize,
    posterior_true: f64,
    margin: f64,
    predicted: usize,
}

fn score_one<X, E: Evaluable<X> + ?Sized>(model: &E, inst: &LabeledInstance<X>, key: u64) -> Scored {
    let scores = model.class_log_scores(&inst.x, key);
    let lse = log_sum_exp(&scores);
    let posterior_true = if lse.is_finite() {
        (scores[inst.label] - lse).exp()
    } else {
        0.0
    };
    let margin = match argmax_excluding(&scores, inst.label) {
        Some(r) => scores[inst.label] - scores[r],
        None => f64::INFINITY,
    };
    Scored {
        label: inst.label,
        posterior_true,
        margin,
        predicted: argmax(&scores),
    }
}

fn score_all<X: Sync, E: Evaluable<X> + ?Sized>(
    data: &[LabeledInstance<X>],
    model: &E,
    key_base: u64,
) -> Vec<Scored> {
    data.par_iter()
        .enumerate()
        .map(|(i, inst)| score_one(model, inst, key_base + i as u64))
        .collect()
}

fn hinge_of_margin(margin: f64) -> f64 {
    (1.0 - margin).max(0.0)
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Mean `-ln p(y | x)` and the number of posteriors clipped at [`NCLL_FLOOR`].
pub fn ncll_metric_with_clips<X: Sync, E: Evaluable<X> + ?Sized>(
    data: &[LabeledInstance<X>],
    model: &E,
) -> (f64, usize) {
    let scored = score_all(data, model, 0);
    let clips = scored.iter().filter(|s| s.posterior_true < NCLL_FLOOR).count();
    let value = mean(
        scored.iter().map(|s| -s.posterior_true.max(NCLL_FLOOR).ln()),
        data.len(),
    );
    (value, clips)
}

pub fn ncll_metric<X: Sync, E: Evaluable<X> + ?Sized>(data: &[LabeledInstance<X>], model: &E) -> f64 {
    ncll_metric_with_clips(data, model).0
}

/// Mean `max(0, 1 - ln p(y, x) / p(y_bar, x))` with `y_bar` the most offending class.
pub fn hinge_metric<X: Sync, E: Evaluable<X> + ?Sized>(data: &[LabeledInstance<X>], model: &E) -> f64 {
    let scored = score_all(data, model, 0);
    mean(scored.iter().map(|s| hinge_of_margin(s.margin)), data.len())
}

pub fn accuracy_metric<X: Sync, E: Evaluable<X> + ?Sized>(
    data: &[LabeledInstance<X>],
    model: &E,
) -> f64 {
    let scored = score_all(data, model, 0);
    scored.iter().filter(|s| s.predicted == s.label).count() as f64 / data.len() as f64
}

/// Per-token perplexity `exp(-sum ln p(d) / sum tokens)`.
pub fn perplexity<X: Sync, E: Evaluable<X> + ?Sized>(
    data: &[LabeledInstance<X>],
    model: &E,
    key_base: u64,
) -> f64 {
    let parts: Vec<(f64, f64)> = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| (model.log_marginal(&inst.x, key_base + i as u64), model.size(&inst.x)))
        .collect();
    let (ll, tokens) = parts
        .iter()
        .fold((0.0, 0.0), |(a, b), (l, t)| (a + l, b + t));
    if tokens == 0.0 {
        return 1.0;
    }
    (-ll / tokens).exp()
}

/// Perplexity divided by the number of documents.
pub fn perplexity_metric<X: Sync, E: Evaluable<X> + ?Sized>(
    data: &[LabeledInstance<X>],
    model: &E,
) -> f64 {
    perplexity(data, model, 0) / data.len() as f64
}

const HELDOUT_KEY_BASE: u64 = 1 << 40;

/// Metrics for one completed epoch. Held-out columns fall back to the training
/// data when no held-out set is given.
pub fn evaluate_epoch<X: Sync, E: Evaluable<X> + ?Sized>(
    epoch: usize,
    train: &[LabeledInstance<X>],
    heldout: Option<&[LabeledInstance<X>]>,
    model: &E,
    wall_seconds: f64,
) -> EpochMetrics {
    let scored = score_all(train, model, 0);
    let n = train.len();
    let train_ncll = mean(
        scored.iter().map(|s| -s.posterior_true.max(NCLL_FLOOR).ln()),
        n,
    );
    let train_hinge = mean(scored.iter().map(|s| hinge_of_margin(s.margin)), n);
    let train_perplexity = perplexity(train, model, 0);
    let (heldout_accuracy, test_perplexity) = match heldout {
        Some(h) if !h.is_empty() => {
            let hs = score_all(h, model, HELDOUT_KEY_BASE);
            let acc = hs.iter().filter(|s| s.predicted == s.label).count() as f64 / h.len() as f64;
            (acc, perplexity(h, model, HELDOUT_KEY_BASE))
        }
        _ => {
            let acc = scored.iter().filter(|s| s.predicted == s.label).count() as f64 / n as f64;
            (acc, train_perplexity)
        }
    };
    EpochMetrics {
        epoch,
        train_ncll,
        train_hinge,
        norm_perplexity: train_perplexity / n as f64,
        train_perplexity,
        test_perplexity,
        heldout_accuracy,
        wall_seconds,
    }
}

/// Writes `# key: value` metadata lines, a header and one row per epoch.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_metrics_csv<W: Write>(
    mut out: W,
    metadata: &[(String, String)],
    rows: &[EpochMetrics],
) -> Result<()> {
    for (k, v) in metadata {
        writeln!(out, "# {k}: {v}")?;
    }
    writeln!(out, "{}", EpochMetrics::COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_ncll,
            r.train_hinge,
            r.norm_perplexity,
            r.train_perplexity,
            r.test_perplexity,
            r.heldout_accuracy,
            r.wall_seconds
        )?;
    }
    Ok(())
}

/// Parses the rows written by [`write_metrics_csv`], skipping metadata lines.
pub fn read_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != EpochMetrics::COLUMNS.len() {
            return Err(bad("wrong number of columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(EpochMetrics {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            train_ncll: num(f[1])?,
            train_hinge: num(f[2])?,
            norm_perplexity: num(f[3])?,
            train_perplexity: num(f[4])?,
            test_perplexity: num(f[5])?,
            heldout_accuracy: num(f[6])?,
            wall_seconds: num(f[7])?,
        });
    }
    Ok(rows)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_oracle<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(0, format!("non-finite function value around coordinate {j}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

// --- Enumeration oracle for the topic model -----------------------------------

/// Largest `|Y| * |Z|^|d|` the enumeration oracle accepts.
pub const ENUMERATION_CAP: f64 = 1e6;

/// Exact quantities for one document under a topic model.
#[derive(Debug, Clone)]
pub struct ExactTopicPosterior {
    /// `E[s[z][j]]` for class `y`, indexed `j * |Z| + z` over the document's
    /// distinct words `j`.
    pub expected_stats: Vec<f64>,
    /// `ln p(d | y)`.
    pub log_likelihood: f64,
}

/// Visits every topic assignment of `m` units over `z` topics.
fn for_each_assignment(m: usize, z: usize, mut f: impl FnMut(&[usize])) {
    let mut a = vec![0usize; m];
    loop {
        f(&a);
        let mut i = 0;
        loop {
            if i == m {
                return;
            }
            a[i] += 1;
            if a[i] < z {
                break;
            }
            a[i] = 0;
            i += 1;
        }
    }
}

/// Log probability of an assignment under the collapsed Dirichlet-multinomial
/// prior over topics (one unit per distinct word).
pub fn log_assignment_prior(assignment: &[usize], num_topics: usize, alpha: f64) -> f64 {
    let mut counts = vec![0usize; num_topics];
    let mut lp = 0.0;
    for (j, &z) in assignment.iter().enumerate() {
        lp += (counts[z] as f64 + alpha).ln() - (j as f64 + num_topics as f64 * alpha).ln();
        counts[z] += 1;
    }
    lp
}

/// Exact posterior over topic assignments for class `label` by full enumeration.
///
/// `words` holds `(word, count)` pairs of the document's distinct words. The
/// unnormalized posterior of an assignment is
/// `prior(z) * prod_j beta(y, z_j, w_j)^{count_j}`.
pub fn enumeration_oracle<T: TopicWords + ?Sized>(
    topics: &T,
    label: usize,
    words: &[(usize, u32)],
    num_classes: usize,
) -> Result<ExactTopicPosterior> {
    let z = topics.num_topics();
    let size = num_classes as f64 * (z as f64).powi(words.len() as i32);
    if size > ENUMERATION_CAP {
        return Err(Error::Refused(format!(
            "enumeration of {size} assignments exceeds the cap of {ENUMERATION_CAP}"
        )));
    }
    let alpha = topics.topic_alpha();
    let mut log_weights = Vec::new();
    let mut assignments = Vec::new();
    for_each_assignment(words.len(), z, |a| {
        let mut lw = log_assignment_prior(a, z, alpha);
        for (j, &(w, c)) in words.iter().enumerate() {
            lw += c as f64 * topics.log_beta(label, a[j], w);
        }
        log_weights.push(lw);
        assignments.push(a.to_vec());
    });
    let log_likelihood = log_sum_exp(&log_weights);
    let mut expected_stats = vec![0.0; words.len() * z];
    for (a, lw) in assignments.iter().zip(&log_weights) {
        let p = (lw - log_likelihood).exp();
        for (j, &(_, c)) in words.iter().enumerate() {
            expected_stats[j * z + a[j]] += p * c as f64;
        }
    }
    Ok(ExactTopicPosterior {
        expected_stats,
        log_likelihood,
    })
}

/// Seed used by evaluation streams derived from a training seed.
pub fn eval_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[tag::EVAL])
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed {
        scores: Vec<Vec<f64>>,
    }

    impl Evaluable<usize> for Fixed {
        fn num_classes(&self) -> usize {
            self.scores[0].len()
        }
        fn class_log_scores(&self, x: &usize, _: u64) -> Vec<f64> {
            self.scores[*x].clone()
        }
        fn log_marginal(&self, x: &usize, _: u64) -> f64 {
            log_sum_exp(&self.scores[*x])
        }
        fn size(&self, _: &usize) -> f64 {
            1.0
        }
    }

    fn data(labels: &[usize]) -> Vec<LabeledInstance<usize>> {
        labels.iter().enumerate().map(|(i, &l)| LabeledInstance::new(l, i)).collect()
    }

    #[test]
    fn ncll_hand_values() {
        let ln = f64::ln;
        // posteriors for the true labels: 0.5 and 0.25
        let m = Fixed {
            scores: vec![vec![ln(0.5), ln(0.5)], vec![ln(0.75), ln(0.25)]],
        };
        let d = data(&[0, 1]);
        let v = ncll_metric(&d, &m);
        assert!((v - (ln(2.0) + ln(4.0)) / 2.0).abs() < 1e-12);
        let perfect = Fixed {
            scores: vec![vec![0.0, f64::NEG_INFINITY]],
        };
        assert_eq!(ncll_metric(&data(&[0]), &perfect), 0.0);
        let (v, clips) = ncll_metric_with_clips(&data(&[1]), &perfect);
        assert_eq!(clips, 1);
        assert!((v - 300.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hinge_hand_values() {
        let m = Fixed {
            scores: vec![vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]],
        };
        assert_eq!(hinge_metric(&data(&[0]), &m), 0.0);
        let tied = vec![LabeledInstance::new(0, 1)];
        assert_eq!(hinge_metric(&tied, &m), 1.0);
        let neg = vec![LabeledInstance::new(0, 2)];
        assert_eq!(hinge_metric(&neg, &m), 2.0);
    }

    #[test]
    fn accuracy_counts_and_ties() {
        let m = Fixed {
            scores: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        };
        assert_eq!(accuracy_metric(&data(&[0, 0]), &m), 1.0);
        assert_eq!(accuracy_metric(&data(&[1, 1]), &m), 0.0);
        assert_eq!(accuracy_metric(&data(&[0, 1]), &m), 0.5);
    }

    #[test]
    fn perplexity_uniform_and_normalization() {
        // Uniform unigram over 4 words: ln p(token) = -ln 4.
        struct Unigram;
        impl Evaluable<u32> for Unigram {
            fn num_classes(&self) -> usize {
                1
            }
            fn class_log_scores(&self, x: &u32, _: u64) -> Vec<f64> {
                vec![-(*x as f64) * 4f64.ln()]
            }
            fn log_marginal(&self, x: &u32, _: u64) -> f64 {
                -(*x as f64) * 4f64.ln()
            }
            fn size(&self, x: &u32) -> f64 {
                *x as f64
            }
        }
        let d = vec![LabeledInstance::new(0, 3u32), LabeledInstance::new(0, 5u32)];
        assert!((perplexity(&d, &Unigram, 0) - 4.0).abs() < 1e-12);
        let doubled: Vec<_> = d.iter().chain(d.iter()).cloned().collect();
        let a = perplexity_metric(&d, &Unigram);
        let b = perplexity_metric(&doubled, &Unigram);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_oracle(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = finite_diff_oracle(|_| 5.0, &[1.0, 2.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_oracle(|x| 2.5 * x[0] - x[1], &[0.3, 0.7], 1e-3).unwrap();
        assert!((g[0] - 2.5).abs() < 1e-10 && (g[1] + 1.0).abs() < 1e-10);
        assert!(finite_diff_oracle(|_| f64::NAN, &[0.0], 1e-3).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let row = EpochMetrics {
            epoch: 3,
            train_ncll: 0.1 + 0.2,
            train_hinge: 1.0 / 3.0,
            norm_perplexity: 1e-17,
            train_perplexity: 123.456_789_012_345_68,
            test_perplexity: f64::NAN,
            heldout_accuracy: 0.9,
            wall_seconds: 0.0,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("model".into(), "mnb".into())], std::slice::from_ref(&row)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# model: mnb\nepoch,train_ncll"));
        let back = read_metrics_csv(&text).unwrap();
        assert_eq!(back[0].train_ncll.to_bits(), row.train_ncll.to_bits());
        assert_eq!(back[0].train_perplexity.to_bits(), row.train_perplexity.to_bits());
        assert!(back[0].test_perplexity.is_nan());
    }

    #[test]
    fn assignment_prior_sums_to_one() {
        let mut total = 0.0;
        for_each_assignment(3, 2, |a| total += log_assignment_prior(a, 2, 0.5).exp());
        assert!((total - 1.0).abs() < 1e-12);
    }
}
