//! Oracles and fixtures shared by the integration suites. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use cvarsam::featurebank::{split_bank, synth_bank, FeatureBank, ScanManifest, SynthConfig};
use cvarsam::mlp::{self, backward, forward_train, DropoutMasks, MlpParams};
use cvarsam::robust_loss::{
    bce_logit_grad, bce_per_sample, cvar_active_weights, cvar_lambda_search,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact minimum of `λ + 1/(αn)·Σ(ℓ−λ)₊`, evaluated at every kink.
pub fn kink_minimum(losses: &[f64], alpha: f64) -> f64 {
    let n = losses.len() as f64;
    let mut kinks = losses.to_vec();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    kinks
        .iter()
        .map(|&k| k + losses.iter().map(|&l| (l - k).max(0.0)).sum::<f64>() / (alpha * n))
        .fold(f64::INFINITY, f64::min)
}

pub fn random_losses(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=64);
    (0..n).map(|_| rng.random::<f64>() * 5.0).collect()
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Relative error with the denominator floored at 1e-6, so entries whose
/// analytic and numeric values both vanish compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random `[d, h, h, 1]` network with non-default batch-norm affine terms.
pub fn random_network(rng: &mut ChaCha8Rng) -> MlpParams {
    let d = rng.random_range(3..=7);
    let h = rng.random_range(3..=6);
    randomized_network(&[d, h, h, 1], rng)
}

pub fn randomized_network(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpParams {
    let mut p = mlp::init_params(dims, rng.random()).unwrap();
    for layer in &mut p.hidden {
        layer
            .linear
            .bias
            .mapv_inplace(|_| rng.random_range(-0.5..0.5));
        layer
            .norm
            .scale
            .mapv_inplace(|_| rng.random_range(0.5..1.5));
        layer
            .norm
            .shift
            .mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    p.output.bias[0] = rng.random_range(-0.5..0.5);
    p
}

/// CVaR objective at a fixed λ, through a train-mode pass with fixed masks.
fn objective(
    params: &MlpParams,
    x: &Array2<f64>,
    y: &[f64],
    masks: &DropoutMasks,
    alpha: f64,
    lambda: f64,
) -> f64 {
    let (logits, _) = forward_train(params, x.view(), masks).unwrap();
    let losses = bce_per_sample(logits.as_slice().unwrap(), y).unwrap();
    let n = losses.len() as f64;
    lambda + losses.iter().map(|&l| (l - lambda).max(0.0)).sum::<f64>() / (alpha * n)
}

/// Compares `backward` against central differences of the CVaR objective
/// with step `h`, for a random network, batch of 8, dropout 0.3 and the
/// given α. λ is moved to the middle of the gap above the searched kink, so
/// the active set cannot change under the finite-difference steps.
pub fn gradient_check(seed: u64, alpha: f64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_network(&mut rng);
    gradient_check_on(params, &mut rng, alpha, h)
}

/// [`gradient_check`] on a given network.
pub fn gradient_check_on(params: MlpParams, rng: &mut ChaCha8Rng, alpha: f64, h: f64) -> GradCheck {
    let dims = params.dims();
    let n = 8;
    let x = Array2::from_shape_simple_fn((n, dims[0]), || rng.random_range(-2.0..2.0));
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let masks = DropoutMasks::sample(&params, n, 0.3, rng).unwrap();

    let (logits, cache) = forward_train(&params, x.view(), &masks).unwrap();
    let losses = bce_per_sample(logits.as_slice().unwrap(), &y).unwrap();
    let solution = cvar_lambda_search(&losses, alpha, 1e-12).unwrap();
    let mut sorted = losses.clone();
    sorted.sort_by(f64::total_cmp);
    let lambda = match sorted.iter().find(|&&l| l > solution.lambda) {
        Some(&next) if solution.lambda >= sorted[0] => {
            let below = sorted
                .iter()
                .rev()
                .find(|&&l| l <= solution.lambda)
                .copied()
                .unwrap();
            (below + next) / 2.0
        }
        Some(_) => sorted[0] - 1.0,
        None => sorted[n - 1] + 1.0,
    };
    let weights = cvar_active_weights(&losses, lambda, alpha).unwrap();
    assert_eq!(
        weights.iter().filter(|&&w| w > 0.0).count(),
        losses.iter().filter(|&&l| l > solution.lambda).count(),
        "moving λ off the kink must keep the active set"
    );
    let grad_z = bce_logit_grad(logits.as_slice().unwrap(), &y).unwrap();
    let dlogits: Vec<f64> = grad_z.iter().zip(&weights).map(|(g, w)| g * w).collect();
    let grads = backward(&params, &cache, &dlogits).unwrap();

    let mut worst = 0.0f64;
    let mut entries = 0;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    for (t, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= h;
            let fd = (objective(&plus, &x, &y, &masks, alpha, lambda)
                - objective(&minus, &x, &y, &masks, alpha, lambda))
                / (2.0 * h);
            worst = worst.max(rel_err(a, fd));
            entries += 1;
        }
    }
    GradCheck {
        entries,
        max_rel_err: worst,
    }
}

/// Two separable Gaussian clusters split 75/25 by scan.
pub fn separable_split(
    dim: usize,
    scans_per_class: usize,
    slices: usize,
    separation: f64,
    seed: u64,
) -> (FeatureBank, FeatureBank, ScanManifest) {
    let (bank, manifest) = synth_bank(&SynthConfig {
        num_scans_per_class: scans_per_class,
        slices_per_scan: (slices, slices),
        feature_dim: dim,
        class_separation: separation,
        noise_sigma: 1.0,
        label_noise_rate: 0.0,
        seed,
    })
    .unwrap();
    let (train, test) = split_bank(&bank, 0.75, seed ^ 0x5eed).unwrap();
    (train, test, manifest)
}
