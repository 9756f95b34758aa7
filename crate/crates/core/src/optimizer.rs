//! CVaR + sharpness-aware training loop.
//!
//! Per mini-batch:
//!
//! 1. train-mode forward at θ with fresh dropout masks, per-sample BCE;
//! 2. λ from [`cvar_lambda_search`] on the batch losses;
//! 3. backward with logit gradients weighted by [`cvar_active_weights`];
//! 4. ε* = γ·sign(∇θ) from [`sam_perturbation`];
//! 5. forward/backward at θ+ε* with the same masks and the same λ; only this
//!    pass feeds the batch-norm running statistics;
//! 6. optimizer step on θ (not θ+ε*) with the perturbed-point gradient.
//!
//! The learning rate follows a half-cosine over epochs.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurebank::FeatureBank;
use crate::mlp::{
    self, backward_into, default_dims, forward_train, init_params, DropoutMasks, Gradients,
    MlpError, MlpParams,
};
use crate::model::{EpochRecord, TrainedModel};
use crate::robust_loss::{
    bce_logit_grad, bce_per_sample, cvar_active_weights, cvar_lambda_search, CvarSolution,
    LossError,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training bank is unlabeled")]
    UnlabeledBank,
    #[error("training bank has {0} records; need at least 2")]
    BankTooSmall(usize),
    #[error("bank dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("shape mismatch between parameters, gradients and optimizer state")]
    ShapeMismatch,
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain `θ ← θ − lr·∇`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// CVaR level in (0, 1]; 1 is plain average BCE.
    pub alpha: f64,
    /// Perturbation radius; 0 disables the perturbation.
    pub gamma: f64,
    /// Run the two-pass perturbed step. When false, one pass per batch.
    pub sam: bool,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    pub hidden_dim: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Bisection stops once the λ bracket is narrower than this fraction of
    /// the batch loss range.
    pub lambda_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.05,
            sam: true,
            lr: 1e-3,
            lr_min: 0.0,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            dropout_rate: 0.3,
            hidden_dim: mlp::DEFAULT_HIDDEN,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let finite = [
            self.alpha,
            self.gamma,
            self.lr,
            self.lr_min,
            self.dropout_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.lambda_tol,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all real-valued fields must be finite".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if self.gamma < 0.0 {
            return bad(format!("gamma {} is negative", self.gamma));
        }
        if self.lr <= 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr {
            return bad(format!(
                "need 0 <= lr_min <= lr and lr > 0, got lr {} lr_min {}",
                self.lr, self.lr_min
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.lambda_tol <= 0.0 {
            return bad("lambda_tol must be positive".into());
        }
        Ok(())
    }
}

/// Entrywise `γ·sign(g)` over every trainable tensor, in
/// [`MlpParams::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub tensors: Vec<Vec<f64>>,
}

impl Perturbation {
    /// Adds the perturbation to `params`. Zero entries leave values untouched.
    pub fn apply(&self, params: &mut MlpParams) {
        for (dst, eps) in params.tensors_mut().into_iter().zip(&self.tensors) {
            for (p, &e) in dst.iter_mut().zip(eps) {
                if e != 0.0 {
                    *p += e;
                }
            }
        }
    }
}

/// `γ·sign(g)` with `sign(0) = 0`.
pub fn sam_perturbation(grads: &Gradients, gamma: f64) -> Perturbation {
    let mut p = Perturbation {
        tensors: grads.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
    };
    p.fill(grads, gamma);
    p
}

impl Perturbation {
    /// Recomputes `γ·sign(g)` in place. The buffer must match `grads`.
    pub fn fill(&mut self, grads: &Gradients, gamma: f64) {
        // Branch-free sign; NaN maps to 0 like an exact zero.
        let sign = |g: f64| (i8::from(g > 0.0) - i8::from(g < 0.0)) as f64 * gamma;
        for (dst, g) in self.tensors.iter_mut().zip(grads.tensors()) {
            assert_eq!(dst.len(), g.len(), "perturbation buffer shape");
            for (e, &g) in dst.iter_mut().zip(g) {
                *e = sign(g);
            }
        }
    }
}

/// First and second moment accumulators for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut MlpParams,
    grads: &Gradients,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    let shapes_match = params.len() == grads.len()
        && state.first.len() == grads.len()
        && params
            .iter()
            .zip(&grads)
            .zip(&state.first)
            .all(|((p, g), m)| p.len() == g.len() && m.len() == g.len());
    if !shapes_match {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// `θ ← θ − lr·∇`.
pub fn sgd_step(params: &mut MlpParams, grads: &Gradients, lr: f64) -> Result<(), TrainError> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
        return Err(TrainError::ShapeMismatch);
    }
    for (p, g) in params.iter_mut().zip(&grads) {
        for (x, &d) in p.iter_mut().zip(g.iter()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Half-cosine annealing from `lr` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, lr_min: f64) -> Result<f64, TrainError> {
    if total_steps == 0 || step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * progress).cos()))
}

/// What happened on one mini-batch, reported to a [`TrainObserver`].
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Bank record indices of the batch, in batch order.
    pub indices: &'a [usize],
    pub masks: &'a DropoutMasks,
    /// Per-sample losses at θ.
    pub losses: &'a [f64],
    pub solution: &'a CvarSolution,
    /// CVaR weights at θ.
    pub weights: &'a [f64],
    /// `None` when the perturbed pass is disabled.
    pub perturbation: Option<&'a Perturbation>,
    /// CVaR weights used for the applied gradient.
    pub update_weights: &'a [f64],
    pub update_grads: &'a Gradients,
    pub lr: f64,
}

/// Instrumentation hooks. Every method defaults to a no-op.
pub trait TrainObserver {
    fn forward_pass(&mut self, _perturbed: bool) {}
    fn backward_pass(&mut self, _perturbed: bool) {}
    fn lambda_search(&mut self) {}
    fn batch(&mut self, _event: &BatchEvent<'_>) {}
    fn dropped_batch(&mut self, _epoch: usize, _size: usize) {}
    fn epoch(&mut self, _record: &EpochRecord, _params: &MlpParams) {}
}

impl TrainObserver for () {}

/// Trains a fresh head on a labeled bank.
pub fn train(bank: &FeatureBank, config: &TrainConfig) -> Result<TrainedModel, TrainError> {
    train_with_observer(bank, config, &mut ())
}

pub fn train_with_observer(
    bank: &FeatureBank,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    let labels = bank.labels().ok_or(TrainError::UnlabeledBank)?;
    if bank.len() < 2 {
        return Err(TrainError::BankTooSmall(bank.len()));
    }
    let dims = default_dims(bank.feature_dim(), config.hidden_dim);
    let mut params = init_params(&dims, derive_seed(config.seed, 0))?;
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let dim = bank.feature_dim();
    let all: Vec<usize> = (0..bank.len()).collect();
    // Reused every batch; multi-megabyte temporaries otherwise dominate the
    // cost of a step at the default width.
    let mut shifted = params.clone();
    let mut eps = Perturbation {
        tensors: params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect(),
    };
    let mut grads = Gradients::zeros_like(&params);
    let mut grads2 = Gradients::zeros_like(&params);

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_min)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1 + epoch as u64));
        let mut order = all.clone();
        order.shuffle(&mut rng);

        let mut sum_value = 0.0;
        let mut sum_lambda = 0.0;
        let mut sum_active = 0.0;
        let mut batches = 0usize;
        for (b, indices) in order.chunks(config.batch_size).enumerate() {
            if indices.len() < 2 {
                log::warn!(
                    "epoch {epoch}: dropping final batch of {} sample",
                    indices.len()
                );
                observer.dropped_batch(epoch, indices.len());
                continue;
            }
            let n = indices.len();
            let mut x = Array2::<f64>::zeros((n, dim));
            for (row, &i) in x.rows_mut().into_iter().zip(indices) {
                for (dst, &v) in row.into_iter().zip(bank.feature(i)) {
                    *dst = f64::from(v);
                }
            }
            let y: Vec<f64> = indices.iter().map(|&i| f64::from(labels[i])).collect();
            let masks = DropoutMasks::sample(&params, n, config.dropout_rate, &mut rng)?;

            let (logits, cache) = forward_train(&params, x.view(), &masks)?;
            observer.forward_pass(false);
            let losses = bce_per_sample(logits.as_slice().expect("contiguous"), &y)?;
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            let (lo, hi) = losses
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
                    (lo.min(l), hi.max(l))
                });
            let tol = (config.lambda_tol * (hi - lo)).max(f64::MIN_POSITIVE);
            let solution = cvar_lambda_search(&losses, config.alpha, tol)?;
            observer.lambda_search();
            let weights = cvar_active_weights(&losses, solution.lambda, config.alpha)?;
            let dlogits = weighted(
                &bce_logit_grad(logits.as_slice().expect("contiguous"), &y)?,
                &weights,
            );

            backward_into(&params, &cache, &dlogits, &mut grads)?;
            observer.backward_pass(false);
            let (update_grads, update_weights, stats_cache) = if config.sam {
                eps.fill(&grads, config.gamma);
                shifted.copy_from(&params);
                eps.apply(&mut shifted);
                let (logits2, cache2) = forward_train(&shifted, x.view(), &masks)?;
                observer.forward_pass(true);
                let losses2 = bce_per_sample(logits2.as_slice().expect("contiguous"), &y)?;
                if losses2.iter().any(|l| !l.is_finite()) {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: b });
                }
                let weights2 = cvar_active_weights(&losses2, solution.lambda, config.alpha)?;
                let dlogits2 = weighted(
                    &bce_logit_grad(logits2.as_slice().expect("contiguous"), &y)?,
                    &weights2,
                );
                backward_into(&shifted, &cache2, &dlogits2, &mut grads2)?;
                observer.backward_pass(true);
                (&grads2, weights2, cache2)
            } else {
                (&grads, weights.clone(), cache)
            };
            if !update_grads.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }

            mlp::update_running_stats(&mut params, &stats_cache);
            match config.optimizer {
                OptimizerKind::Adam => adam_step(&mut adam, &mut params, update_grads, lr, config)?,
                OptimizerKind::Sgd => sgd_step(&mut params, update_grads, lr)?,
            }

            observer.batch(&BatchEvent {
                epoch,
                batch: b,
                indices,
                masks: &masks,
                losses: &losses,
                solution: &solution,
                weights: &weights,
                perturbation: config.sam.then_some(&eps),
                update_weights: &update_weights,
                update_grads,
                lr,
            });
            sum_value += solution.value;
            sum_lambda += solution.lambda;
            sum_active += solution.active_count as f64 / n as f64;
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            mean_cvar_loss: sum_value / denom,
            mean_lambda: sum_lambda / denom,
            active_fraction: sum_active / denom,
            lr,
        };
        if !(record.mean_cvar_loss.is_finite() && record.mean_lambda.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: batches,
            });
        }
        observer.epoch(&record, &params);
        log::info!(
            "epoch {epoch}: cvar {:.6} lambda {:.6} active {:.3} lr {:.3e}",
            record.mean_cvar_loss,
            record.mean_lambda,
            record.active_fraction,
            lr
        );
        history.push(record);
    }

    Ok(TrainedModel {
        params,
        config: config.clone(),
        history,
    })
}

fn weighted(grad: &[f64], weights: &[f64]) -> Vec<f64> {
    grad.iter().zip(weights).map(|(g, w)| g * w).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurebank::{synth_bank, SynthConfig};
    use ndarray::{Array1, Array2};

    fn scalar_grads(values: &[f64]) -> Gradients {
        Gradients {
            hidden: vec![],
            output_weight: Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
            output_bias: Array1::zeros(1),
        }
    }

    fn small_bank(seed: u64) -> FeatureBank {
        synth_bank(&SynthConfig {
            num_scans_per_class: 4,
            slices_per_scan: (5, 5),
            feature_dim: 6,
            class_separation: 4.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
        .0
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden_dim: 8,
            batch_size: 8,
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perturbation_is_sign_times_gamma() {
        let p = sam_perturbation(&scalar_grads(&[0.2, -0.1, 0.0]), 0.05);
        assert_eq!(p.tensors[0], vec![0.05, -0.05, 0.0]);
        assert_eq!(p.tensors[1], vec![0.0]);
        let zero = sam_perturbation(&scalar_grads(&[0.2, -0.1, 0.0]), 0.0);
        assert!(zero.tensors.iter().flatten().all(|&e| e == 0.0));
        let scaled = sam_perturbation(&scalar_grads(&[20.0, -10.0, 0.0]), 0.05);
        assert_eq!(p, scaled);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = init_params(&[1, 1, 1], 0).unwrap();
        let before = params.output.weight[[0, 0]];
        let mut grads = backward_zero(&params);
        grads.output_weight[[0, 0]] = 0.5;
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig::default();
        adam_step(&mut state, &mut params, &grads, 1e-3, &cfg).unwrap();
        let delta = params.output.weight[[0, 0]] - before;
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((delta + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(state.step, 1);
    }

    fn backward_zero(params: &MlpParams) -> Gradients {
        Gradients {
            hidden: params
                .hidden
                .iter()
                .map(|h| mlp::HiddenGradients {
                    weight: Array2::zeros(h.linear.weight.dim()),
                    bias: Array1::zeros(h.linear.bias.len()),
                    scale: Array1::zeros(h.norm.scale.len()),
                    shift: Array1::zeros(h.norm.shift.len()),
                })
                .collect(),
            output_weight: Array2::zeros(params.output.weight.dim()),
            output_bias: Array1::zeros(1),
        }
    }

    #[test]
    fn zero_grad_adam_leaves_params() {
        let mut params = init_params(&[3, 4, 4, 1], 0).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(
            &mut state,
            &mut params,
            &backward_zero(&before),
            1e-2,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let p0 = init_params(&[3, 4, 4, 1], 0).unwrap();
        let mut g = backward_zero(&p0);
        g.output_bias[0] = -0.3;
        g.hidden[0].weight[[1, 2]] = 0.7;
        let run = || {
            let mut p = p0.clone();
            let mut s = AdamState::new(&p);
            adam_step(&mut s, &mut p, &g, 1e-3, &TrainConfig::default()).unwrap();
            adam_step(&mut s, &mut p, &g, 1e-3, &TrainConfig::default()).unwrap();
            p
        };
        assert_eq!(run(), run());
        let mut other = init_params(&[3, 5, 5, 1], 0).unwrap();
        let mut s = AdamState::new(&p0);
        assert!(matches!(
            adam_step(&mut s, &mut other, &g, 1e-3, &TrainConfig::default()),
            Err(TrainError::ShapeMismatch)
        ));
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0).unwrap(), 1e-3);
        assert_eq!(cosine_lr(10, 10, 1e-3, 1e-5).unwrap(), 1e-5);
        assert!((cosine_lr(5, 10, 1e-3, 0.0).unwrap() - 5e-4).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=17)
            .map(|s| cosine_lr(s, 17, 0.1, 0.01).unwrap())
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(matches!(
            cosine_lr(11, 10, 1e-3, 0.0),
            Err(TrainError::StepOutOfRange { .. })
        ));
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig {
                alpha: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                alpha: 1.5,
                ..ok.clone()
            },
            TrainConfig {
                gamma: -0.1,
                ..ok.clone()
            },
            TrainConfig {
                lr: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                lr_min: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 1,
                ..ok.clone()
            },
            TrainConfig {
                dropout_rate: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                lambda_tol: f64::NAN,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let bank = small_bank(1);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let model = train(&bank, &cfg).unwrap();
        assert!(model.history.is_empty());
        let init = init_params(&default_dims(6, 8), derive_seed(cfg.seed, 0)).unwrap();
        assert_eq!(model.params, init);
    }

    #[test]
    fn rejects_unlabeled_and_tiny_banks() {
        let bank = small_bank(1);
        assert!(matches!(
            train(&bank.without_labels(), &small_config()),
            Err(TrainError::UnlabeledBank)
        ));
        assert!(matches!(
            train(&bank.select(&[0]), &small_config()),
            Err(TrainError::BankTooSmall(1))
        ));
    }

    #[derive(Default)]
    struct Counter {
        forwards: usize,
        backwards: usize,
        searches: usize,
        batches: usize,
        dropped: usize,
        lambda_in_range: bool,
    }

    impl TrainObserver for Counter {
        fn forward_pass(&mut self, _: bool) {
            self.forwards += 1;
        }
        fn backward_pass(&mut self, _: bool) {
            self.backwards += 1;
        }
        fn lambda_search(&mut self) {
            self.searches += 1;
        }
        fn batch(&mut self, e: &BatchEvent<'_>) {
            if self.batches == 0 {
                self.lambda_in_range = true;
            }
            let lo = e.losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = e.losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            self.lambda_in_range &= e.solution.lambda >= lo && e.solution.lambda <= hi;
            self.batches += 1;
        }
        fn dropped_batch(&mut self, _: usize, _: usize) {
            self.dropped += 1;
        }
    }

    #[test]
    fn pass_counts_per_batch() {
        // 41 records with batch 8: five full batches and a dropped singleton.
        let bank = small_bank(2).select(&(0..40).chain([0]).collect::<Vec<_>>());
        let mut counter = Counter::default();
        let model = train_with_observer(&bank, &small_config(), &mut counter).unwrap();
        assert_eq!(counter.batches, 15);
        assert_eq!(counter.dropped, 3);
        assert_eq!(counter.forwards, 30);
        assert_eq!(counter.backwards, 30);
        assert_eq!(counter.searches, 15);
        assert!(counter.lambda_in_range);
        assert_eq!(model.history.len(), 3);

        let mut single = Counter::default();
        let cfg = TrainConfig {
            sam: false,
            ..small_config()
        };
        train_with_observer(&bank, &cfg, &mut single).unwrap();
        assert_eq!((single.forwards, single.backwards), (15, 15));
    }

    #[test]
    fn training_is_deterministic() {
        let bank = small_bank(3);
        let a = train(&bank, &small_config()).unwrap();
        let b = train(&bank, &small_config()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let c = train(
            &bank,
            &TrainConfig {
                seed: 6,
                ..small_config()
            },
        )
        .unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn history_is_finite_and_lr_follows_schedule() {
        let bank = small_bank(4);
        let cfg = TrainConfig {
            epochs: 4,
            lr_min: 1e-4,
            ..small_config()
        };
        let model = train(&bank, &cfg).unwrap();
        for (e, r) in model.history.iter().enumerate() {
            assert_eq!(r.epoch, e);
            assert!(r.mean_cvar_loss.is_finite() && r.mean_lambda.is_finite());
            assert!((0.0..=1.0).contains(&r.active_fraction));
            assert_eq!(r.lr, cosine_lr(e, 4, 1e-3, 1e-4).unwrap());
        }
    }

    #[test]
    fn sgd_mode_runs() {
        let bank = small_bank(5);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            ..small_config()
        };
        let model = train(&bank, &cfg).unwrap();
        assert_eq!(model.history.len(), 3);
    }
}
