//! NLL, NCLL and Hinge gradient rules as sparse statistic deltas.
//!
//! A [`LossGradient`] is stored in update orientation: the engine applies
//! `mu' = (1 - rho * (shrink_rate + nu / n)) * mu + rho * (delta + alpha_bar / n)`.
//! For fully observed models `delta` is built from `s(y, x)`; for latent models
//! from `E_z[s(y, z, x) | theta]`, which may be a sampled estimate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{argmax_excluding, softmax, ModelFamily, Observability, SparseStats};
use crate::rng::StreamRng;

/// Floor applied to probabilities before taking logs in loss values.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Nll,
    Ncll,
    Hinge,
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Nll => "nll",
            Loss::Ncll => "ncll",
            Loss::Hinge => "hinge",
        })
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nll" => Ok(Loss::Nll),
            "ncll" => Ok(Loss::Ncll),
            "hinge" => Ok(Loss::Hinge),
            other => Err(Error::config(format!("unknown loss '{other}'"))),
        }
    }
}

/// Which table of update rules to use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientForm {
    /// Follow the model's observability.
    #[default]
    Auto,
    FullyObserved,
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub delta: SparseStats,
    /// 1 for NLL (the extra `(1 + nu/n)` shrink), 0 for NCLL and Hinge.
    pub shrink_rate: f64,
    /// Every rule adds `alpha_bar / n`, including the inactive Hinge branch.
    pub prior_add: bool,
    /// False only for a Hinge instance with margin above 1.
    pub active: bool,
    /// Loss value at the current parameters (prior excluded).
    pub loss_value: f64,
    pub margin: Option<f64>,
}

fn resolve_form<M: ModelFamily + ?Sized>(model: &M, form: GradientForm) -> Result<Observability> {
    match (form, model.observability()) {
        (GradientForm::Auto, obs) => Ok(obs),
        (GradientForm::FullyObserved, Observability::Latent) => Err(Error::config(
            "fully observed update rule requested for a model with latent variables",
        )),
        (GradientForm::FullyObserved, Observability::Full) => Ok(Observability::Full),
        (GradientForm::Latent, _) => Ok(Observability::Latent),
    }
}

fn statistics<M: ModelFamily + ?Sized>(
    model: &M,
    params: &M::Params,
    label: usize,
    x: &M::Input,
    obs: Observability,
    rng: &mut StreamRng,
) -> Result<SparseStats> {
    match obs {
        Observability::Full => model.sufficient_statistics(label, x),
        Observability::Latent => model.expected_statistics(params, label, x, rng),
    }
}

fn check_label<M: ModelFamily + ?Sized>(model: &M, label: usize) -> Result<()> {
    if label >= model.num_classes() {
        return Err(Error::config(format!(
            "label {label} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

fn finite_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::numeric(0, "non-finite class score"));
    }
    Ok(())
}

pub fn nll_grad<M: ModelFamily + ?Sized>(
    model: &M,
    params: &M::Params,
    label: usize,
    x: &M::Input,
    form: GradientForm,
    rng: &mut StreamRng,
) -> Result<LossGradient> {
    check_label(model, label)?;
    let obs = resolve_form(model, form)?;
    let delta = statistics(model, params, label, x, obs, rng)?;
    let scores = model.class_log_joint(params, x, rng);
    Ok(LossGradient {
        delta,
        shrink_rate: 1.0,
        prior_add: true,
        active: true,
        loss_value: -scores[label],
        margin: None,
    })
}

pub fn ncll_grad<M: ModelFamily + ?Sized>(
    model: &M,
    params: &M::Params,
    label: usize,
    x: &M::Input,
    form: GradientForm,
    rng: &mut StreamRng,
) -> Result<LossGradient> {
    check_label(model, label)?;
    let obs = resolve_form(model, form)?;
    let scores = model.class_log_joint(params, x, rng);
    finite_scores(&scores)?;
    let posterior =
        softmax(&scores).ok_or_else(|| Error::numeric(0, "class posterior underflow"))?;

    let mut delta = statistics(model, params, label, x, obs, rng)?;
    for (k, &p) in posterior.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let s = statistics(model, params, k, x, obs, rng)?;
        delta.add_scaled(&s, -p);
    }
    Ok(LossGradient {
        delta: delta.coalesce(),
        shrink_rate: 0.0,
        prior_add: true,
        active: true,
        loss_value: -posterior[label].max(PROB_FLOOR).ln(),
        margin: None,
    })
}

pub fn hinge_grad<M: ModelFamily + ?Sized>(
    model: &M,
    params: &M::Params,
    label: usize,
    x: &M::Input,
    form: GradientForm,
    rng: &mut StreamRng,
) -> Result<LossGradient> {
    check_label(model, label)?;
    if model.num_classes() < 2 {
        return Err(Error::config("hinge loss needs at least two classes"));
    }
    let obs = resolve_form(model, form)?;
    let scores = model.class_log_joint(params, x, rng);
    finite_scores(&scores)?;
    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
        return Err(Error::numeric(0, "all class scores are -inf"));
    }
    let rival = argmax_excluding(&scores, label).expect("at least two classes");
    let margin = scores[label] - scores[rival];
    let loss_value = (1.0 - margin).max(0.0);
    if margin > 1.0 {
        return Ok(LossGradient {
            delta: SparseStats::new(),
            shrink_rate: 0.0,
            prior_add: true,
            active: false,
            loss_value,
            margin: Some(margin),
        });
    }
    let mut delta = statistics(model, params, label, x, obs, rng)?;
    let s_rival = statistics(model, params, rival, x, obs, rng)?;
    delta.add_scaled(&s_rival, -1.0);
    Ok(LossGradient {
        delta: delta.coalesce(),
        shrink_rate: 0.0,
        prior_add: true,
        active: true,
        loss_value,
        margin: Some(margin),
    })
}

pub fn loss_grad<M: ModelFamily + ?Sized>(
    loss: Loss,
    model: &M,
    params: &M::Params,
    label: usize,
    x: &M::Input,
    form: GradientForm,
    rng: &mut StreamRng,
) -> Result<LossGradient> {
    match loss {
        Loss::Nll => nll_grad(model, params, label, x, form, rng),
        Loss::Ncll => ncll_grad(model, params, label, x, form, rng),
        Loss::Hinge => hinge_grad(model, params, label, x, form, rng),
    }
}

/// Per-instance loss value without the prior term.
pub fn loss_value<M: ModelFamily + ?Sized>(
    loss: Loss,
    model: &M,
    params: &M::Params,
    label: usize,
    x: &M::Input,
    rng: &mut StreamRng,
) -> f64 {
    let scores = model.class_log_joint(params, x, rng);
    match loss {
        Loss::Nll => -scores[label],
        Loss::Ncll => -(scores[label] - crate::expfam::log_sum_exp(&scores)),
        Loss::Hinge => {
            let rival = argmax_excluding(&scores, label).unwrap_or(label);
            (1.0 - (scores[label] - scores[rival])).max(0.0)
        }
    }
}
