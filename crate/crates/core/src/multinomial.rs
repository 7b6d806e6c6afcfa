//! Multinomial naive Bayes expressed as a generic [`ModelFamily`].
//!
//! Layout: class counts `C[k]` at `k`, then word counts `N[k][w]` at
//! `K + k * W + w`. The dedicated trainer in [`crate::mnb`] follows the
//! appendix pseudo-code; this form exists so the generic engine, the loss rules
//! and the Fisher/unbiasedness checks can run on a text model.

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::expfam::{ConjugatePrior, ExpectationState, ModelFamily, SparseStats};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultinomialNb {
    num_classes: usize,
    vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialParams {
    pub log_prior: Vec<f64>,
    /// `ln p(w | k)` at `k * W + w`.
    pub log_word: Vec<f64>,
    pub vocab_size: usize,
}

impl MultinomialParams {
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

impl MultinomialNb {
    pub fn new(num_classes: usize, vocab_size: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("at least one class is required"));
        }
        if vocab_size == 0 {
            return Err(Error::config("vocabulary is empty"));
        }
        Ok(Self {
            num_classes,
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn class_index(&self, k: usize) -> usize {
        k
    }

    pub fn word_index(&self, k: usize, w: usize) -> usize {
        self.num_classes + k * self.vocab_size + w
    }

    /// Laplace-style prior: one pseudo-count per class, `alpha` per word, `nu = 0`.
    pub fn laplace_prior(&self, alpha: f64) -> Result<ConjugatePrior> {
        let mut a = vec![1.0; self.num_classes];
        a.extend(std::iter::repeat_n(alpha, self.num_classes * self.vocab_size));
        ConjugatePrior::new(a, 0.0)
    }

    /// Closed-form probabilities from accumulated statistics `mu`.
    pub fn normalize(&self, mu: &[f64]) -> MultinomialParams {
        let k = self.num_classes;
        let w = self.vocab_size;
        let total: f64 = mu[..k].iter().sum();
        let log_prior = mu[..k].iter().map(|c| (c / total).ln()).collect();
        let mut log_word = Vec::with_capacity(k * w);
        for row in mu[k..].chunks(w) {
            let m: f64 = row.iter().sum();
            log_word.extend(row.iter().map(|n| (n / m).ln()));
        }
        MultinomialParams {
            log_prior,
            log_word,
            vocab_size: w,
        }
    }
}

impl ModelFamily for MultinomialNb {
    type Input = Document;
    type Params = MultinomialParams;

    fn statistic_dim(&self) -> usize {
        self.num_classes * (1 + self.vocab_size)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_feasible(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.statistic_dim() {
            return Err(Error::config(format!(
                "state has {} components, model declares {}",
                mu.len(),
                self.statistic_dim()
            )));
        }
        for (i, v) in mu.iter().enumerate() {
            if !(*v > 0.0) || !v.is_finite() {
                let what = if i < self.num_classes {
                    "class count C"
                } else {
                    "word count N"
                };
                return Err(Error::Feasibility {
                    component: i,
                    what,
                    value: *v,
                });
            }
        }
        Ok(())
    }

    fn m_step(&self, state: &ExpectationState) -> Result<MultinomialParams> {
        self.check_feasible(&state.mu)?;
        Ok(self.normalize(&state.mu))
    }

    fn sufficient_statistics(&self, label: usize, doc: &Document) -> Result<SparseStats> {
        if label >= self.num_classes {
            return Err(Error::config(format!("label {label} out of range")));
        }
        let mut s = SparseStats::new();
        s.push(self.class_index(label), 1.0);
        for &(w, c) in doc.entries() {
            let w = w as usize;
            if w >= self.vocab_size {
                return Err(Error::Vocabulary(format!(
                    "word id {w} outside a vocabulary of {}",
                    self.vocab_size
                )));
            }
            s.push(self.word_index(label, w), c as f64);
        }
        Ok(s)
    }

    /// Words outside the vocabulary are ignored.
    fn class_log_joint(&self, params: &MultinomialParams, doc: &Document, _: &mut StreamRng) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = &params.log_word[k * self.vocab_size..(k + 1) * self.vocab_size];
                params.log_prior[k]
                    + doc
                        .entries()
                        .iter()
                        .filter(|(w, _)| (*w as usize) < self.vocab_size)
                        .map(|&(w, c)| c as f64 * row[w as usize])
                        .sum::<f64>()
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
    use crate::expfam::ExpectationState;

    #[test]
    fn normalization_examples() {
        let m = MultinomialNb::new(1, 3).unwrap();
        let p = m
            .m_step(&ExpectationState::new(vec![1.0, 2.0, 1.0, 1.0], 1).unwrap())
            .unwrap();
        let probs = p.word_probs(0);
        assert!((probs[0] - 0.5).abs() < 1e-15 && (probs[1] - 0.25).abs() < 1e-15);

        let prior = m.laplace_prior(1.0).unwrap();
        let p = m
            .m_step(&ExpectationState::new(prior.alpha_bar.clone(), 1).unwrap())
            .unwrap();
        for q in p.word_probs(0) {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn statistics_examples() {
        let m = MultinomialNb::new(2, 3).unwrap();
        let d = Document::from_pairs([(0, 2), (1, 1)]).unwrap();
        let s = m.sufficient_statistics(1, &d).unwrap().to_dense(8);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0]);
        let s = m.sufficient_statistics(0, &Document::empty()).unwrap();
        assert_eq!(s.to_dense(8)[0], 1.0);
        assert_eq!(s.entries.len(), 1);
        let oov = Document::from_pairs([(7, 1)]).unwrap();
        assert!(matches!(m.sufficient_statistics(0, &oov), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn feasibility_matches_m_step_domain() {
        let m = MultinomialNb::new(2, 2).unwrap();
        let mut mu = vec![1.0; 6];
        assert!(m.is_feasible(&mu));
        mu[4] = 0.0;
        assert!(m.m_step(&ExpectationState::new(mu.clone(), 1).unwrap()).is_err());
        m.check_step(&mut mu, 0.01);
        assert_eq!(mu[4], 0.01);
        assert!(m.is_feasible(&mu));
    }
}
