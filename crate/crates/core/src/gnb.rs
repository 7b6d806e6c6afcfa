//! Toy Gaussian naive Bayes: a binary class and one continuous predictor.
//!
//! Statistic layout is `[N0, N1, S0, S1, V0, V1]` where class index 0 is the
//! label `y = -1` and class index 1 is `y = +1`. `N` are class counts, `S` sums
//! of `x` and `V` sums of `x^2`.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{self, TrainConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::expfam::{ConjugatePrior, ExpectationState, LabeledInstance, ModelFamily, SparseStats};
use crate::rng::{self, tag, StreamRng};

pub const STATISTIC_DIM: usize = 6;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Maps a `{-1, +1}` label to a class index.
pub fn class_of_label(y: i8) -> Result<usize> {
    match y {
        -1 => Ok(0),
        1 => Ok(1),
        other => Err(Error::config(format!("toy labels are -1 or 1, got {other}"))),
    }
}

pub fn label_of_class(k: usize) -> i8 {
    if k == 0 {
        -1
    } else {
        1
    }
}

/// Named view over the six statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnbState {
    pub n: [f64; 2],
    pub s: [f64; 2],
    pub v: [f64; 2],
}

impl GnbState {
    pub fn from_mu(mu: &[f64]) -> Self {
        Self {
            n: [mu[0], mu[1]],
            s: [mu[2], mu[3]],
            v: [mu[4], mu[5]],
        }
    }

    pub fn to_mu(&self) -> Vec<f64> {
        vec![self.n[0], self.n[1], self.s[0], self.s[1], self.v[0], self.v[1]]
    }

    /// `V/N - (S/N)^2`, evaluated as `(V - S^2/N) / N` to limit cancellation.
    pub fn variance(&self, k: usize) -> f64 {
        (self.v[k] - self.s[k] * self.s[k] / self.n[k]) / self.n[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnbParams {
    pub prior: [f64; 2],
    pub mean: [f64; 2],
    pub sigma: [f64; 2],
}

impl GnbParams {
    pub fn log_joint(&self, x: f64) -> [f64; 2] {
        let f = |k: usize| {
            let z = (x - self.mean[k]) / self.sigma[k];
            self.prior[k].ln() - self.sigma[k].ln() - LN_SQRT_2PI - 0.5 * z * z
        };
        [f(0), f(1)]
    }

    pub fn predict(&self, x: f64) -> usize {
        let lj = self.log_joint(x);
        if lj[1] > lj[0] {
            1
        } else {
            0
        }
    }
}

pub fn gnb_m_step(state: &GnbState) -> Result<GnbParams> {
    check_state(state)?;
    let total = state.n[0] + state.n[1];
    let f = |k: usize| state.variance(k).sqrt();
    Ok(GnbParams {
        prior: [state.n[0] / total, state.n[1] / total],
        mean: [state.s[0] / state.n[0], state.s[1] / state.n[1]],
        sigma: [f(0), f(1)],
    })
}

fn check_state(state: &GnbState) -> Result<()> {
    for k in 0..2 {
        if !(state.n[k] > 0.0) || !state.n[k].is_finite() {
            return Err(Error::Feasibility {
                component: k,
                what: "class count N",
                value: state.n[k],
            });
        }
        if !state.s[k].is_finite() {
            return Err(Error::Feasibility {
                component: 2 + k,
                what: "sum S",
                value: state.s[k],
            });
        }
        let var = state.variance(k);
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::Feasibility {
                component: 4 + k,
                what: "variance V/N - (S/N)^2",
                value: var,
            });
        }
    }
    Ok(())
}

/// `p(k | x)` for both classes.
pub fn gnb_posterior(x: f64, params: &GnbParams) -> [f64; 2] {
    let lj = params.log_joint(x);
    let m = lj[0].max(lj[1]);
    let a = (lj[0] - m).exp();
    let b = (lj[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// Floors `N` at `floor` and `V` at `S^2/N + floor`.
pub fn gnb_check(state: &mut GnbState, floor: f64) {
    for k in 0..2 {
        if !(state.n[k] >= floor) {
            state.n[k] = floor;
        }
        let sq = state.s[k] * state.s[k] / state.n[k];
        if !(state.v[k] >= sq + floor) {
            state.v[k] = sq + floor;
        }
        // Guard against the floor vanishing in rounding when S^2/N is huge.
        if !(state.variance(k) > 0.0) {
            state.v[k] = sq * (1.0 + 4.0 * f64::EPSILON) + floor;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GaussianNb;

impl ModelFamily for GaussianNb {
    type Input = f64;
    type Params = GnbParams;

    fn statistic_dim(&self) -> usize {
        STATISTIC_DIM
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn check_feasible(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != STATISTIC_DIM {
            return Err(Error::config("GNB state must have 6 components"));
        }
        check_state(&GnbState::from_mu(mu))
    }

    fn m_step(&self, state: &ExpectationState) -> Result<GnbParams> {
        self.check_feasible(&state.mu)?;
        gnb_m_step(&GnbState::from_mu(&state.mu))
    }

    fn sufficient_statistics(&self, label: usize, x: &f64) -> Result<SparseStats> {
        if label > 1 {
            return Err(Error::config(format!("GNB class index {label} out of range")));
        }
        let mut s = SparseStats::new();
        s.push(label, 1.0);
        s.push(2 + label, *x);
        s.push(4 + label, x * x);
        Ok(s)
    }

    fn class_log_joint(&self, params: &GnbParams, x: &f64, _: &mut StreamRng) -> Vec<f64> {
        params.log_joint(*x).to_vec()
    }

    fn check_step(&self, mu: &mut [f64], floor: f64) {
        let mut st = GnbState::from_mu(mu);
        gnb_check(&mut st, floor);
        mu.copy_from_slice(&st.to_mu());
    }
}

/// Beta prior (`nu = 0`, `alpha_bar = 1`) on the counts and Normal-Gamma prior
/// (`nu = 1`, `alpha_bar = 0` for S and 1 for V) on each Gaussian.
pub fn default_prior() -> ConjugatePrior {
    ConjugatePrior::with_block_nu(
        vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0],
        vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
    )
    .expect("static prior is valid")
}

/// How the second argument of `N(m, s)` in the toy distribution is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadReading {
    #[default]
    StdDev,
    Variance,
}

impl SpreadReading {
    pub fn std_dev(self, spread: f64) -> f64 {
        match self {
            SpreadReading::StdDev => spread,
            SpreadReading::Variance => spread.sqrt(),
        }
    }
}

impl std::fmt::Display for SpreadReading {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpreadReading::StdDev => "stddev",
            SpreadReading::Variance => "variance",
        })
    }
}

impl FromStr for SpreadReading {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stddev" | "sd" => Ok(SpreadReading::StdDev),
            "variance" | "var" => Ok(SpreadReading::Variance),
            other => Err(Error::config(format!("unknown spread reading '{other}'"))),
        }
    }
}

/// Draws from the toy distribution: `p(y=-1) = 0.5`, `x | y=-1 ~ N(0, 3)` and
/// `x | y=1 ~ 0.8 N(-5, 0.1) + 0.2 N(5, 0.1)`.
pub fn toy_generator(n: usize, seed: u64, reading: SpreadReading) -> Vec<LabeledInstance<f64>> {
    let mut rng = rng::stream(seed, &[tag::TOY]);
    let wide = Normal::new(0.0, reading.std_dev(3.0)).expect("finite std dev");
    let narrow = reading.std_dev(0.1);
    let left = Normal::new(-5.0, narrow).expect("finite std dev");
    let right = Normal::new(5.0, narrow).expect("finite std dev");
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                LabeledInstance::new(0, wide.sample(&mut rng))
            } else if rng.random_bool(0.8) {
                LabeledInstance::new(1, left.sample(&mut rng))
            } else {
                LabeledInstance::new(1, right.sample(&mut rng))
            }
        })
        .collect()
}

/// Writes `label x` lines with labels in `{-1, 1}`.
pub fn write_toy_sample<W: Write>(mut out: W, sample: &[LabeledInstance<f64>]) -> Result<()> {
    for inst in sample {
        writeln!(out, "{} {}", label_of_class(inst.label), inst.x)?;
    }
    Ok(())
}

pub fn read_toy_sample<R: BufRead>(input: R) -> Result<Vec<LabeledInstance<f64>>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let mut parts = line.split_whitespace();
        let (Some(y), Some(x), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected two columns: label x"));
        };
        let y: i8 = y.parse().map_err(|_| bad("label must be -1 or 1"))?;
        let x: f64 = x.parse().map_err(|_| bad("x must be a number"))?;
        let class = class_of_label(y).map_err(|_| bad("label must be -1 or 1"))?;
        out.push(LabeledInstance::new(class, x));
    }
    Ok(out)
}

/// Trains the toy model with sdEM from the default prior.
pub fn train(
    data: &[LabeledInstance<f64>],
    config: &TrainConfig,
    heldout: Option<&[LabeledInstance<f64>]>,
) -> Result<TrainedModel<GnbParams>> {
    engine::sdem_train(data, &GaussianNb, &default_prior(), config, heldout)
}

pub fn accuracy(params: &GnbParams, data: &[LabeledInstance<f64>]) -> f64 {
    let hits = data.iter().filter(|i| params.predict(i.x) == i.label).count();
    hits as f64 / data.len() as f64
}

/// Seeds for the training and test draws of the toy experiment.
pub fn toy_seeds(seed: u64) -> (u64, u64) {
    (rng::derive_seed(seed, &[1]), rng::derive_seed(seed, &[2]))
}
