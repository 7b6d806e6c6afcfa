//! Joint categorical model over `(class, word)` cells for single-token instances.
//!
//! This is the multinomial naive Bayes model with one-word documents, written in
//! its minimal chart: `mu` holds the probabilities of every cell except the last,
//! and `theta_i = ln(mu_i / mu_ref)`. The chart is invertible, so the Fisher
//! identities can be checked numerically against the sdEM update direction.

use crate::error::{Error, Result};
use crate::expfam::{DualChart, ExpectationState, ModelFamily, SparseStats};
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct JointCategorical {
    num_classes: usize,
    vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams {
    /// `ln p(cell)` for every cell, the reference cell included.
    pub log_prob: Vec<f64>,
}

impl JointCategorical {
    pub fn new(num_classes: usize, vocab_size: usize) -> Result<Self> {
        if num_classes < 2 || vocab_size == 0 {
            return Err(Error::config("need at least 2 classes and 1 word"));
        }
        Ok(Self {
            num_classes,
            vocab_size,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.num_classes * self.vocab_size
    }

    pub fn cell(&self, label: usize, word: usize) -> usize {
        label * self.vocab_size + word
    }

    fn reference_mass(mu: &[f64]) -> f64 {
        1.0 - mu.iter().sum::<f64>()
    }

    /// Uniform cell probabilities; a natural interior prior mean.
    pub fn uniform_state(&self) -> Vec<f64> {
        vec![1.0 / self.num_cells() as f64; self.num_cells() - 1]
    }
}

impl ModelFamily for JointCategorical {
    type Input = usize;
    type Params = CategoricalParams;

    fn statistic_dim(&self) -> usize {
        self.num_cells() - 1
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_feasible(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.statistic_dim() {
            return Err(Error::config("state length does not match the model"));
        }
        for (i, &v) in mu.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Feasibility {
                    component: i,
                    what: "cell probability",
                    value: v,
                });
            }
        }
        let rest = Self::reference_mass(mu);
        if !(rest > 0.0) {
            return Err(Error::Feasibility {
                component: mu.len(),
                what: "reference cell probability",
                value: rest,
            });
        }
        Ok(())
    }

    fn m_step(&self, state: &ExpectationState) -> Result<CategoricalParams> {
        self.check_feasible(&state.mu)?;
        let mut log_prob: Vec<f64> = state.mu.iter().map(|v| v.ln()).collect();
        log_prob.push(Self::reference_mass(&state.mu).ln());
        Ok(CategoricalParams { log_prob })
    }

    fn sufficient_statistics(&self, label: usize, word: &usize) -> Result<SparseStats> {
        if label >= self.num_classes {
            return Err(Error::config(format!("label {label} out of range")));
        }
        if *word >= self.vocab_size {
            return Err(Error::Vocabulary(format!("word id {word} out of range")));
        }
        let mut s = SparseStats::new();
        let c = self.cell(label, *word);
        if c < self.statistic_dim() {
            s.push(c, 1.0);
        }
        Ok(s)
    }

    fn class_log_joint(&self, params: &CategoricalParams, word: &usize, _: &mut StreamRng) -> Vec<f64> {
        (0..self.num_classes)
            .map(|y| params.log_prob[self.cell(y, *word)])
            .collect()
    }

    fn check_step(&self, mu: &mut [f64], floor: f64) {
        let k = mu.len() as f64;
        // Every cell, the reference included, must be able to hold the floor.
        let floor = floor.min(0.5 / (k + 1.0));
        for v in mu.iter_mut() {
            if !(*v >= floor) {
                *v = floor;
            }
        }
        let total: f64 = mu.iter().sum();
        if total > 1.0 - floor {
            // Shrink the excess over the floor so every cell keeps at least `floor`.
            let room = 1.0 - floor - k * floor;
            let excess = total - k * floor;
            for v in mu.iter_mut() {
                *v = floor + (*v - floor) * room / excess;
            }
        }
    }
}

impl DualChart for JointCategorical {
    fn chart_dim(&self) -> usize {
        self.statistic_dim()
    }

    fn theta_of_mu(&self, mu: &[f64]) -> Result<Vec<f64>> {
        self.check_feasible(mu)?;
        let reference = Self::reference_mass(mu).ln();
        Ok(mu.iter().map(|v| v.ln() - reference).collect())
    }

    fn mu_of_theta(&self, theta: &[f64]) -> Vec<f64> {
        let a = self.log_partition(theta);
        theta.iter().map(|t| (t - a).exp()).collect()
    }

    fn log_partition(&self, theta: &[f64]) -> f64 {
        let mut ext = theta.to_vec();
        ext.push(0.0);
        crate::expfam::log_sum_exp(&ext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{fisher_information_mu, fisher_information_theta};

    #[test]
    fn two_outcome_fisher_matches_closed_form() {
        // One class pair, one word: two cells, one free coordinate.
        let model = JointCategorical::new(2, 1).unwrap();
        let fisher = fisher_information_mu(&model, &[0.5], 1e-6).unwrap();
        // d/dmu ln(mu / (1 - mu)) = 1 / (mu (1 - mu)) = 4
        assert!((fisher.matrix[(0, 0)] - 4.0).abs() < 1e-5);
        assert!(!fisher.near_boundary);
    }

    #[test]
    fn fisher_pair_is_inverse() {
        let model = JointCategorical::new(2, 3).unwrap();
        let mu = [0.1, 0.2, 0.15, 0.05, 0.3];
        let theta = model.theta_of_mu(&mu).unwrap();
        let i_mu = fisher_information_mu(&model, &mu, 1e-6).unwrap();
        let i_theta = fisher_information_theta(&model, &theta, 1e-6).unwrap();
        let prod = &i_mu.matrix * &i_theta.matrix;
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - expected).abs() < 1e-4, "({i},{j}) = {}", prod[(i, j)]);
            }
        }
    }

    #[test]
    fn fisher_flags_boundary() {
        let model = JointCategorical::new(2, 1).unwrap();
        let fisher = fisher_information_mu(&model, &[1e-9], 1e-12).unwrap();
        assert!(fisher.near_boundary);
    }

    #[test]
    fn check_step_restores_feasibility() {
        let model = JointCategorical::new(2, 2).unwrap();
        let mut mu = vec![-0.3, 0.9, 0.8];
        model.check_step(&mut mu, 1e-3);
        assert!(model.is_feasible(&mu));
        assert!(mu.iter().all(|v| *v >= 1e-3 - 1e-15));
    }
}
