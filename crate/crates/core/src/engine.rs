//! The generic sdEM loop: E-step (loss gradient applied to `mu`), check-step
//! (projection back into the feasible region) and closed-form M-step.
//!
//! The update direction is the gradient of the regularized loss with respect to
//! the natural parameters, which equals the natural gradient in expectation
//! coordinates for exponential families. No Fisher matrix is ever formed here.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EpochMetrics, FamilyView};
use crate::expfam::{ConjugatePrior, ExpectationState, LabeledInstance, ModelFamily};
use crate::losses::{self, GradientForm, Loss, LossGradient};
use crate::rng::{self, tag, StreamRng};

/// `rho_t = 1 / (1 + lambda * t)` with `t` counting instance visits from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    lambda: f64,
    t: u64,
}

impl LearningRateSchedule {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { lambda, t: 0 })
    }

    pub fn rho_at(lambda: f64, t: u64) -> f64 {
        1.0 / (1.0 + lambda * t as f64)
    }

    pub fn rho(&self) -> f64 {
        Self::rho_at(self.lambda, self.t)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn advance(&mut self) {
        self.t += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Stop early once the relative change of the epoch-mean training loss
    /// falls below this value. `None` runs the full epoch budget.
    pub min_rel_change: Option<f64>,
    #[serde(default)]
    pub form: GradientForm,
}

impl TrainConfig {
    pub fn new(loss: Loss, lambda: f64, epochs: usize, seed: u64) -> Self {
        Self {
            lambda,
            epochs,
            seed,
            loss,
            min_rel_change: None,
            form: GradientForm::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LearningRateSchedule::new(self.lambda)?;
        if let Some(r) = self.min_rel_change {
            if !(r >= 0.0) {
                return Err(Error::config("min_rel_change must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainTrace<P> {
    pub epochs: Vec<EpochMetrics>,
    pub params: P,
    /// Total number of instance visits, i.e. the final value of `t`.
    pub steps: u64,
}

/// Visiting order for one epoch; deterministic in `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[tag::SHUFFLE, epoch]);
    order.shuffle(&mut rng);
    order
}

pub fn shuffle<T: Clone>(data: &[T], seed: u64) -> Vec<T> {
    epoch_order(data.len(), seed, 0)
        .into_iter()
        .map(|i| data[i].clone())
        .collect()
}

/// The dense direction `d l_bar / d theta` that `step` moves against.
pub fn natural_gradient(grad: &LossGradient, mu: &[f64], prior: &ConjugatePrior, n: usize) -> Vec<f64> {
    let n = n as f64;
    let mut out: Vec<f64> = mu
        .iter()
        .zip(&prior.alpha_bar)
        .zip(&prior.nu)
        .map(|((m, a), nu)| {
            let prior_add = if grad.prior_add { a / n } else { 0.0 };
            (grad.shrink_rate + nu / n) * m - prior_add
        })
        .collect();
    for &(i, v) in &grad.delta.entries {
        out[i] -= v;
    }
    out
}

/// `mu <- (1 - rho (shrink + nu/n)) mu + rho (delta + alpha_bar / n)`, without projection.
pub fn apply_update(
    state: &mut ExpectationState,
    grad: &LossGradient,
    prior: &ConjugatePrior,
    rho: f64,
    step_index: u64,
) -> Result<()> {
    let n = state.n as f64;
    for &(i, v) in &grad.delta.entries {
        if !v.is_finite() {
            return Err(Error::numeric(
                step_index,
                format!("non-finite gradient component {i}"),
            ));
        }
    }
    for ((m, a), nu) in state.mu.iter_mut().zip(&prior.alpha_bar).zip(&prior.nu) {
        let shrink = 1.0 - rho * (grad.shrink_rate + nu / n);
        let prior_add = if grad.prior_add { rho * a / n } else { 0.0 };
        *m = shrink * *m + prior_add;
    }
    for &(i, v) in &grad.delta.entries {
        state.mu[i] += rho * v;
    }
    Ok(())
}

/// Projects `state` into the model's feasible region with the given floor.
pub fn check_step<M: ModelFamily + ?Sized>(model: &M, state: &mut ExpectationState, floor: f64) {
    model.check_step(&mut state.mu, floor);
}

/// Check-step floor used with step size `rho`: `rho / n`.
pub fn check_floor(rho: f64, n: usize) -> f64 {
    rho / n as f64
}

/// One E-step + check-step on `state`; the caller refreshes the parameters.
#[allow(clippy::too_many_arguments)]
pub fn step<M: ModelFamily + ?Sized>(
    model: &M,
    params: &M::Params,
    state: &mut ExpectationState,
    instance: &LabeledInstance<M::Input>,
    loss: Loss,
    prior: &ConjugatePrior,
    rho: f64,
    form: GradientForm,
    step_index: u64,
    rng: &mut StreamRng,
) -> Result<LossGradient> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!("step size {rho} outside (0, 1]")));
    }
    let grad = losses::loss_grad(loss, model, params, instance.label, &instance.x, form, rng)
        .map_err(|e| match e {
            Error::Numeric { what, .. } => Error::numeric(step_index, what),
            other => other,
        })?;
    apply_update(state, &grad, prior, rho, step_index)?;
    check_step(model, state, check_floor(rho, state.n));
    Ok(grad)
}

/// Per-epoch context passed to the step closure of [`run_epochs`].
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub epoch: usize,
    /// Index of the instance in the training data.
    pub index: usize,
    pub t: u64,
    pub rho: f64,
}

/// Shared epoch loop: shuffling, schedule, metric cadence and early stopping.
///
/// `step_fn` performs one update and returns the loss value it observed.
/// `observe` produces the metrics for a completed epoch from the end-of-epoch
/// state; `wall_seconds` covers the training part of the epoch only.
pub fn run_epochs<S, F, O>(
    n: usize,
    config: &TrainConfig,
    state: &mut S,
    mut step_fn: F,
    mut observe: O,
) -> Result<(Vec<EpochMetrics>, u64)>
where
    F: FnMut(&mut S, StepContext) -> Result<f64>,
    O: FnMut(&S, usize, f64) -> Result<EpochMetrics>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::config("training data is empty"));
    }
    let mut schedule = LearningRateSchedule::new(config.lambda)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut previous_loss: Option<f64> = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for index in epoch_order(n, config.seed, epoch as u64) {
            let ctx = StepContext {
                epoch,
                index,
                t: schedule.t(),
                rho: schedule.rho(),
            };
            loss_sum += step_fn(state, ctx)?;
            schedule.advance();
        }
        let wall = started.elapsed().as_secs_f64();
        metrics.push(observe(state, epoch + 1, wall)?);

        let mean_loss = loss_sum / n as f64;
        log::debug!("epoch {} mean training loss {mean_loss}", epoch + 1);
        if let (Some(threshold), Some(prev)) = (config.min_rel_change, previous_loss) {
            let rel = (mean_loss - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < threshold {
                log::info!("converged after {} epochs (relative change {rel:e})", epoch + 1);
                break;
            }
        }
        previous_loss = Some(mean_loss);
    }
    Ok((metrics, schedule.t()))
}

/// Result of [`sdem_train`]: the trace plus the final expectation state.
pub struct TrainedModel<P> {
    pub trace: TrainTrace<P>,
    pub state: ExpectationState,
}

/// Runs sdEM on a generic model family.
///
/// `mu` starts at the prior mean `alpha_bar`. Held-out metrics use `heldout`
/// when given and the training data otherwise.
pub fn sdem_train<M: ModelFamily>(
    data: &[LabeledInstance<M::Input>],
    model: &M,
    prior: &ConjugatePrior,
    config: &TrainConfig,
    heldout: Option<&[LabeledInstance<M::Input>]>,
) -> Result<TrainedModel<M::Params>> {
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    prior.validate(model)?;
    // Fail fast on observability mismatches before touching the state.
    if config.form == GradientForm::FullyObserved
        && model.observability() == crate::expfam::Observability::Latent
    {
        return Err(Error::config(
            "fully observed update rule requested for a model with latent variables",
        ));
    }
    let mut state = ExpectationState::new(prior.alpha_bar.clone(), data.len())?;
    let params = model.m_step(&state)?;
    let mut current = (state.clone(), params);
    let eval_seed = rng::derive_seed(config.seed, &[tag::EVAL]);

    let (epochs, steps) = run_epochs(
        data.len(),
        config,
        &mut current,
        |(state, params), ctx| {
            let mut rng = rng::stream(config.seed, &[tag::TRAIN, ctx.t, ctx.index as u64]);
            let grad = step(
                model,
                params,
                state,
                &data[ctx.index],
                config.loss,
                prior,
                ctx.rho,
                config.form,
                ctx.t,
                &mut rng,
            )?;
            *params = model.m_step(state).map_err(|e| match e {
                Error::Feasibility { component, what, value } => Error::numeric(
                    ctx.t,
                    format!("check-step left {what}[{component}] = {value}"),
                ),
                other => other,
            })?;
            Ok(grad.loss_value)
        },
        |(_, params), epoch, wall| {
            let view = FamilyView::new(model, params, eval_seed);
            Ok(eval::evaluate_epoch(epoch, data, heldout, &view, wall))
        },
    )?;
    let (final_state, params) = current;
    state.mu = final_state.mu;
    Ok(TrainedModel {
        trace: TrainTrace {
            epochs,
            params,
            steps,
        },
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_starts_at_one_and_decreases() {
        let mut s = LearningRateSchedule::new(0.1).unwrap();
        assert_eq!(s.rho(), 1.0);
        let mut prev = s.rho();
        for _ in 0..100 {
            s.advance();
            assert!(s.rho() < prev);
            prev = s.rho();
        }
        assert_eq!(s.t(), 100);
        assert!(LearningRateSchedule::new(0.0).is_err());
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        let data: Vec<u32> = (0..50).collect();
        let a = shuffle(&data, 9);
        assert_eq!(a, shuffle(&data, 9));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, data);
        assert_eq!(shuffle(&[42], 3), vec![42]);
    }

    #[test]
    fn epochs_get_different_orders() {
        assert_ne!(epoch_order(30, 1, 0), epoch_order(30, 1, 1));
    }

    use crate::categorical::JointCategorical;
    use crate::corpus::Document;
    use crate::multinomial::MultinomialNb;
    use approx::assert_abs_diff_eq;

    fn rng0() -> StreamRng {
        rng::stream(0, &[0])
    }

    /// Two classes, two words; `C = [3, 1]`, `N = [[2, 1], [1, 3]]`.
    fn two_by_two() -> (MultinomialNb, Vec<f64>) {
        (MultinomialNb::new(2, 2).unwrap(), vec![3.0, 1.0, 2.0, 1.0, 1.0, 3.0])
    }

    #[test]
    fn zero_epochs_return_prior_mean_parameters() {
        let model = MultinomialNb::new(2, 3).unwrap();
        let prior = model.laplace_prior(0.5).unwrap();
        let data = vec![LabeledInstance::new(0, Document::from_tokens([0, 1]))];
        let cfg = TrainConfig::new(Loss::Ncll, 0.1, 0, 1);
        let out = sdem_train(&data, &model, &prior, &cfg, None).unwrap();
        assert!(out.trace.epochs.is_empty());
        assert_eq!(out.trace.steps, 0);
        assert_eq!(out.state.mu, prior.alpha_bar);
        assert_eq!(out.trace.params, model.normalize(&prior.alpha_bar));
    }

    #[test]
    fn ncll_hand_enumerated_update() {
        let (model, mu) = two_by_two();
        let prior = model.laplace_prior(1.0).unwrap();
        let mut state = ExpectationState::new(mu.clone(), 10).unwrap();
        let params = model.m_step(&state).unwrap();
        let doc = Document::from_pairs([(0, 2), (1, 1)]).unwrap();
        let inst = LabeledInstance::new(0, doc);
        let rho = 0.5;
        step(&model, &params, &mut state, &inst, Loss::Ncll, &prior, rho, GradientForm::Auto, 0, &mut rng0())
            .unwrap();
        // p(y | d) proportional to 3/4 (2/3)^2 (1/3) = 1/9 and 1/4 (1/4)^2 (3/4) = 3/256,
        // so p(1 | d) = 27/283 and delta = p(1 | d) (s(0) - s(1)).
        let p1 = 27.0 / 283.0;
        let diff = [1.0, -1.0, 2.0, 1.0, -2.0, -1.0];
        for i in 0..6 {
            let expected = mu[i] + rho * (p1 * diff[i] + 1.0 / 10.0);
            assert_abs_diff_eq!(state.mu[i], expected, epsilon = 1e-12);
        }
    }

    fn confident_case() -> (MultinomialNb, ExpectationState, LabeledInstance<Document>) {
        let model = MultinomialNb::new(2, 2).unwrap();
        let state = ExpectationState::new(vec![1.0, 1.0, 9.0, 1.0, 1.0, 9.0], 4).unwrap();
        let inst = LabeledInstance::new(0, Document::from_pairs([(0, 2000)]).unwrap());
        (model, state, inst)
    }

    #[test]
    fn perfectly_classified_ncll_keeps_shrink_and_prior_only() {
        let (model, mut state, inst) = confident_case();
        let prior = ConjugatePrior::new(vec![2.0; 6], 0.5).unwrap();
        let before = state.mu.clone();
        let params = model.m_step(&state).unwrap();
        let grad = step(&model, &params, &mut state, &inst, Loss::Ncll, &prior, 0.25, GradientForm::Auto, 0, &mut rng0())
            .unwrap();
        assert!(grad.delta.entries.iter().all(|&(_, v)| v == 0.0));
        for (after, m) in state.mu.iter().zip(&before) {
            let expected = (1.0 - 0.25 * 0.5 / 4.0) * m + 0.25 * 2.0 / 4.0;
            assert_abs_diff_eq!(*after, expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn inactive_hinge_keeps_prior_term_only() {
        let (model, mut state, inst) = confident_case();
        let prior = ConjugatePrior::new(vec![2.0; 6], 0.5).unwrap();
        let before = state.mu.clone();
        let params = model.m_step(&state).unwrap();
        let grad = step(&model, &params, &mut state, &inst, Loss::Hinge, &prior, 0.25, GradientForm::Auto, 0, &mut rng0())
            .unwrap();
        assert!(!grad.active);
        assert!(grad.margin.unwrap() > 1.0);
        for (after, m) in state.mu.iter().zip(&before) {
            assert_abs_diff_eq!(*after, (1.0 - 0.25 * 0.5 / 4.0) * m + 0.25 * 2.0 / 4.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn step_rejects_bad_rho() {
        let (model, mut state, inst) = confident_case();
        let prior = model.laplace_prior(1.0).unwrap();
        let params = model.m_step(&state).unwrap();
        for rho in [0.0, 1.5, f64::NAN] {
            let r = step(&model, &params, &mut state, &inst, Loss::Nll, &prior, rho, GradientForm::Auto, 0, &mut rng0());
            assert!(r.is_err());
        }
    }

    #[test]
    fn nll_with_unit_lambda_lands_on_the_batch_map() {
        let model = MultinomialNb::new(2, 3).unwrap();
        let prior = model.laplace_prior(1.0).unwrap();
        let data = vec![
            LabeledInstance::new(0, Document::from_tokens([0, 0, 1])),
            LabeledInstance::new(1, Document::from_tokens([2, 2])),
            LabeledInstance::new(0, Document::from_tokens([1])),
            LabeledInstance::new(1, Document::from_tokens([0, 2, 2, 2])),
        ];
        let cfg = TrainConfig::new(Loss::Nll, 1.0, 3, 5);
        let out = sdem_train(&data, &model, &prior, &cfg, None).unwrap();

        // Batch MAP: pseudo-counts plus observed counts, normalised per block.
        let mut counts = prior.alpha_bar.clone();
        for inst in &data {
            for (i, v) in model.sufficient_statistics(inst.label, &inst.x).unwrap().to_dense(counts.len()).iter().enumerate() {
                counts[i] += v;
            }
        }
        let map = model.normalize(&counts);
        for (a, b) in out.trace.params.log_word.iter().zip(&map.log_word) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in out.trace.params.log_prior.iter().zip(&map.log_prior) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Per-instance directions averaged over the data against the batch
    /// gradient assembled from class posteriors computed from scratch.
    #[test]
    fn averaged_direction_is_the_batch_gradient() {
        let model = JointCategorical::new(3, 2).unwrap();
        let mu = vec![0.1, 0.22, 0.05, 0.2, 0.15];
        let prior = ConjugatePrior::new(vec![0.3, 0.1, 0.2, 0.1, 0.1], 0.7).unwrap();
        let data: Vec<LabeledInstance<usize>> = [(0, 0), (1, 1), (2, 0), (2, 1), (0, 1), (1, 0)]
            .iter()
            .map(|&(y, w)| LabeledInstance::new(y, w))
            .collect();
        let n = data.len();
        let state = ExpectationState::new(mu.clone(), n).unwrap();
        let params = model.m_step(&state).unwrap();
        let mut cells = mu.clone();
        cells.push(1.0 - mu.iter().sum::<f64>());
        let indicator = |y: usize, w: usize| {
            let mut s = vec![0.0; mu.len()];
            if y * 2 + w < mu.len() {
                s[y * 2 + w] = 1.0;
            }
            s
        };

        for loss in [Loss::Nll, Loss::Ncll, Loss::Hinge] {
            let mut avg = vec![0.0; mu.len()];
            for inst in &data {
                let g = losses::loss_grad(loss, &model, &params, inst.label, &inst.x, GradientForm::Auto, &mut rng0()).unwrap();
                for (a, v) in avg.iter_mut().zip(natural_gradient(&g, &mu, &prior, n)) {
                    *a += v / n as f64;
                }
            }

            let mut batch: Vec<f64> = mu
                .iter()
                .zip(&prior.alpha_bar)
                .map(|(m, a)| {
                    let shrink = if loss == Loss::Nll { 1.0 } else { 0.0 };
                    (shrink + 0.7 / n as f64) * m - a / n as f64
                })
                .collect();
            for inst in &data {
                let w = inst.x;
                let joint: Vec<f64> = (0..3).map(|y| cells[y * 2 + w]).collect();
                let z: f64 = joint.iter().sum();
                let mut push = |y: usize, scale: f64| {
                    for (b, s) in batch.iter_mut().zip(indicator(y, w)) {
                        *b += scale * s / n as f64;
                    }
                };
                push(inst.label, -1.0);
                match loss {
                    Loss::Nll => {}
                    Loss::Ncll => (0..3).for_each(|y| push(y, joint[y] / z)),
                    Loss::Hinge => {
                        let rival = (0..3)
                            .filter(|&y| y != inst.label)
                            .max_by(|&a, &b| joint[a].partial_cmp(&joint[b]).unwrap())
                            .unwrap();
                        if (joint[inst.label] / joint[rival]).ln() <= 1.0 {
                            push(rival, 1.0);
                        } else {
                            push(inst.label, 1.0);
                        }
                    }
                }
            }
            for (a, b) in avg.iter().zip(&batch) {
                assert!((a - b).abs() < 1e-10, "{loss}: {a} vs {b}");
            }
        }
    }
}
