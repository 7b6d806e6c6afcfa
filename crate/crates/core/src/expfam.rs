//! Exponential-family parameter duality and the model-family contract.
//!
//! sdEM iterates over expectation parameters (running sufficient statistics) and
//! only ever moves to natural parameters through a closed-form M-step. Every model
//! shipped by the crate implements [`ModelFamily`]; models that want their Fisher
//! geometry checked numerically also implement [`DualChart`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// One `(y, x)` observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance<X> {
    pub label: usize,
    pub x: X,
}

impl<X> LabeledInstance<X> {
    pub fn new(label: usize, x: X) -> Self {
        Self { label, x }
    }
}

/// Expectation parameters `mu` plus the training-set size used by the prior term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationState {
    pub mu: Vec<f64>,
    pub n: usize,
}

impl ExpectationState {
    pub fn new(mu: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("training-set size n must be positive"));
        }
        Ok(Self { mu, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Conjugate prior hyperparameters `(alpha_bar, nu)`.
///
/// `nu` is stored per statistic component so that a model can combine blocks
/// with different prior families (the Gaussian toy model uses a Beta prior with
/// `nu = 0` on its counts and a Normal-Gamma prior with `nu = 1` on its moments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePrior {
    pub alpha_bar: Vec<f64>,
    pub nu: Vec<f64>,
}

impl ConjugatePrior {
    pub fn new(alpha_bar: Vec<f64>, nu: f64) -> Result<Self> {
        let nu = vec![nu; alpha_bar.len()];
        Self::with_block_nu(alpha_bar, nu)
    }

    pub fn with_block_nu(alpha_bar: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() != nu.len() {
            return Err(Error::config(format!(
                "prior layout mismatch: alpha_bar has {} components, nu has {}",
                alpha_bar.len(),
                nu.len()
            )));
        }
        if let Some(i) = nu.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config(format!("nu[{i}] = {} must be >= 0", nu[i])));
        }
        Ok(Self { alpha_bar, nu })
    }

    /// Checks that the prior matches the model layout and that `alpha_bar` is feasible.
    pub fn validate<M: ModelFamily + ?Sized>(&self, model: &M) -> Result<()> {
        if self.alpha_bar.len() != model.statistic_dim() {
            return Err(Error::config(format!(
                "prior has {} components, model declares {}",
                self.alpha_bar.len(),
                model.statistic_dim()
            )));
        }
        model.check_feasible(&self.alpha_bar)
    }
}

/// Sparse, signed statistic increment. Indices refer to the model's flat layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseStats {
    pub entries: Vec<(usize, f64)>,
}

impl SparseStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, index: usize, value: f64) {
        self.entries.push((index, value));
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SparseStats, scale: f64) {
        self.entries
            .extend(other.entries.iter().map(|&(i, v)| (i, v * scale)));
    }

    /// Sorts by index and merges duplicate indices. Exact zeros are kept so
    /// that the touched-index set is preserved.
    pub fn coalesce(mut self) -> Self {
        self.entries.sort_by_key(|&(i, _)| i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.entries.len());
        for (i, v) in self.entries {
            match out.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => out.push((i, v)),
            }
        }
        Self { entries: out }
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .iter()
            .filter(|(i, _)| *i == index)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(i, _)| *i)
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Whether the model has hidden variables beyond the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observability {
    Full,
    Latent,
}

/// Behavioral contract every sdEM-trainable model implements.
///
/// The statistic layout is a flat vector declared by the model (class block
/// first, then per-class parameter blocks). Statistics need not be minimal.
pub trait ModelFamily: Sync {
    type Input: Sync;
    type Params: Clone + Send + Sync;

    fn statistic_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn observability(&self) -> Observability {
        Observability::Full
    }

    /// Succeeds exactly when [`ModelFamily::m_step`] succeeds on `mu`.
    fn check_feasible(&self, mu: &[f64]) -> Result<()>;

    /// Closed-form maximum likelihood map `theta(mu)`.
    fn m_step(&self, state: &ExpectationState) -> Result<Self::Params>;

    /// `s(y, x)` for fully observed models. Latent models return a
    /// configuration error because `s` depends on unobserved variables.
    fn sufficient_statistics(&self, label: usize, x: &Self::Input) -> Result<SparseStats>;

    /// `E_z[s(y, z, x) | theta]`; possibly a sampled, unbiased estimate.
    fn expected_statistics(
        &self,
        _params: &Self::Params,
        label: usize,
        x: &Self::Input,
        _rng: &mut StreamRng,
    ) -> Result<SparseStats> {
        self.sufficient_statistics(label, x)
    }

    /// `ln p(y, x | theta)` for every class `y` (marginalized over latent variables).
    fn class_log_joint(&self, params: &Self::Params, x: &Self::Input, rng: &mut StreamRng)
        -> Vec<f64>;

    /// `ln p(x | theta)`.
    fn log_marginal(&self, params: &Self::Params, x: &Self::Input, rng: &mut StreamRng) -> f64 {
        log_sum_exp(&self.class_log_joint(params, x, rng))
    }

    /// Number of tokens an instance contributes to perplexity.
    fn instance_size(&self, _x: &Self::Input) -> f64 {
        1.0
    }

    /// Projects `mu` back into the feasible region. Must be total.
    fn check_step(&self, mu: &mut [f64], floor: f64);

    fn is_feasible(&self, mu: &[f64]) -> bool {
        self.check_feasible(mu).is_ok()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax. Returns `None` when every score is `-inf` or NaN.
pub fn softmax(scores: &[f64]) -> Option<Vec<f64>> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Some(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Largest entry excluding `skip`; ties go to the lowest index.
pub fn argmax_excluding(values: &[f64], skip: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if i == skip {
            continue;
        }
        match best {
            Some(b) if *v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

// --- Fisher diagnostics ----------------------------------------------------

/// Largest statistic dimension the Fisher diagnostic will handle.
pub const FISHER_DIM_CAP: usize = 64;

/// A minimal coordinate chart with an invertible `theta <-> mu` map.
///
/// Only used by diagnostics: the training path never forms a Fisher matrix.
pub trait DualChart {
    fn chart_dim(&self) -> usize;

    fn theta_of_mu(&self, mu: &[f64]) -> Result<Vec<f64>>;

    fn mu_of_theta(&self, theta: &[f64]) -> Vec<f64>;

    /// `A_l(theta)`; needed to evaluate the NLL and the `nu` part of the log prior.
    fn log_partition(&self, theta: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    /// Set when entries blow up, i.e. the state sits close to the boundary of `S`.
    pub near_boundary: bool,
}

/// Entries above this magnitude mark the state as close to the boundary.
pub const BOUNDARY_ENTRY_THRESHOLD: f64 = 1e8;

/// Central-difference Jacobian of `f` at `x`.
fn jacobian<F>(x: &[f64], h: f64, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k = x.len();
    let mut jac = DMatrix::zeros(k, k);
    let mut probe = x.to_vec();
    for j in 0..k {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        for i in 0..k {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn check_dim(k: usize) -> Result<()> {
    if k > FISHER_DIM_CAP {
        return Err(Error::Refused(format!(
            "Fisher diagnostic requested for K = {k} > {FISHER_DIM_CAP}; not for production paths"
        )));
    }
    Ok(())
}

/// `I(mu) = d theta / d mu`, by central differences of the closed-form M-step.
pub fn fisher_information_mu<C: DualChart + ?Sized>(
    chart: &C,
    mu: &[f64],
    h: f64,
) -> Result<FisherMatrix> {
    check_dim(mu.len())?;
    chart.theta_of_mu(mu)?;
    let matrix = jacobian(mu, h, |m| chart.theta_of_mu(m))?;
    let near_boundary = matrix.iter().any(|v| v.abs() > BOUNDARY_ENTRY_THRESHOLD);
    Ok(FisherMatrix {
        matrix,
        near_boundary,
    })
}

/// `I(theta) = d mu / d theta`, by central differences of the mean map.
pub fn fisher_information_theta<C: DualChart + ?Sized>(
    chart: &C,
    theta: &[f64],
    h: f64,
) -> Result<FisherMatrix> {
    check_dim(theta.len())?;
    let matrix = jacobian(theta, h, |t| Ok(chart.mu_of_theta(t)))?;
    let near_boundary = matrix.iter().any(|v| v.abs() > BOUNDARY_ENTRY_THRESHOLD);
    Ok(FisherMatrix {
        matrix,
        near_boundary,
    })
}

/// Solves `I(mu) x = rhs`, i.e. applies the inverse Fisher matrix.
pub fn apply_inverse(fisher: &FisherMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let b = nalgebra::DVector::from_column_slice(rhs);
    fisher
        .matrix
        .clone()
        .lu()
        .solve(&b)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::numeric(0, "Fisher matrix is singular"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coalesce_merges_and_sorts() {
        let mut s = SparseStats::new();
        s.push(3, 1.0);
        s.push(1, 2.0);
        s.push(3, -0.5);
        let s = s.coalesce();
        assert_eq!(s.entries, vec![(1, 2.0), (3, 0.5)]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_excluding(&[5.0, 2.0, 2.0], 0), Some(1));
        assert_eq!(argmax_excluding(&[5.0], 0), None);
    }

    #[test]
    fn softmax_is_shift_invariant_and_rejects_all_neg_inf() {
        let a = softmax(&[0.0, (3.0f64).ln()]).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-15);
        let b = softmax(&[1000.0, 1000.0 + (3.0f64).ln()]).unwrap();
        assert!((b[1] - 0.75).abs() < 1e-12);
        assert!(softmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_none());
    }

    #[test]
    fn prior_rejects_negative_nu() {
        assert!(ConjugatePrior::new(vec![1.0], -0.1).is_err());
        assert!(ConjugatePrior::new(vec![1.0], 0.0).is_ok());
    }
}
