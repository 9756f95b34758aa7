//! Per-sample binary cross-entropy and the empirical CVaR objective
//!
//! ```text
//! F(λ) = λ + 1/(αn) · Σ (ℓᵢ − λ)₊
//! ```
//!
//! `F` is convex and piecewise linear in λ with kinks at the loss values. Its
//! right derivative is `g(λ) = 1 − #{ℓᵢ > λ}/(αn)`, a nondecreasing step
//! function, so the minimizer is found by bisecting on the sign of `g`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss vector is empty")]
    Empty,
    #[error("alpha must lie in (0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("length mismatch: {logits} logits, {labels} labels")]
    LengthMismatch { logits: usize, labels: usize },
    #[error("label {value} at index {index} is not binary")]
    NonBinaryLabel { index: usize, value: f64 },
    #[error("non-finite loss at index {0}")]
    NonFinite(usize),
}

/// Upper bound on bisection steps; each halves the bracket.
pub const MAX_BISECTION_STEPS: usize = 64;

/// Optimal threshold of the CVaR objective for one loss vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvarSolution {
    pub lambda: f64,
    pub value: f64,
    /// Number of samples with loss strictly above `lambda`.
    pub active_count: usize,
}

fn check_pair(logits: &[f64], labels: &[f64]) -> Result<(), LossError> {
    if logits.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            logits: logits.len(),
            labels: labels.len(),
        });
    }
    if let Some((index, &value)) = labels
        .iter()
        .enumerate()
        .find(|(_, &y)| y != 0.0 && y != 1.0)
    {
        return Err(LossError::NonBinaryLabel { index, value });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<(), LossError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(LossError::AlphaOutOfRange(alpha))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on logits, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_per_sample(logits: &[f64], labels: &[f64]) -> Result<Vec<f64>, LossError> {
    check_pair(logits, labels)?;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .collect())
}

/// Derivative of [`bce_per_sample`] with respect to each logit: `σ(z) − y`.
pub fn bce_logit_grad(logits: &[f64], labels: &[f64]) -> Result<Vec<f64>, LossError> {
    check_pair(logits, labels)?;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| sigmoid(z) - y)
        .collect())
}

/// Evaluates `λ + 1/(αn) · Σ (ℓᵢ − λ)₊` at the given `lambda`.
pub fn cvar_value(losses: &[f64], alpha: f64, lambda: f64) -> Result<f64, LossError> {
    if losses.is_empty() {
        return Err(LossError::Empty);
    }
    check_alpha(alpha)?;
    let hinge: f64 = losses.iter().map(|&l| (l - lambda).max(0.0)).sum();
    Ok(lambda + hinge / (alpha * losses.len() as f64))
}

fn count_above(losses: &[f64], lambda: f64) -> usize {
    losses.iter().filter(|&&l| l > lambda).count()
}

/// Minimizes the CVaR objective over λ by bisection on its subgradient.
///
/// The bracket starts at `[min(ℓ), max(ℓ)]` and shrinks until its width is at
/// most `tol` or [`MAX_BISECTION_STEPS`] have run. The returned λ is the right
/// end of the final bracket, where `g(λ) ≥ 0`.
///
/// At `α = 1` the objective is flat on `(−∞, min ℓ]`; λ is then placed one
/// step below the smallest loss so that every sample is active and the
/// weighting reduces exactly to the uniform average.
pub fn cvar_lambda_search(losses: &[f64], alpha: f64, tol: f64) -> Result<CvarSolution, LossError> {
    if losses.is_empty() {
        return Err(LossError::Empty);
    }
    check_alpha(alpha)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(LossError::BadTolerance(tol));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(LossError::NonFinite(i));
    }
    let n = losses.len();
    let tail = alpha * n as f64;
    let (mut lo, mut hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
            (lo.min(l), hi.max(l))
        });

    let subgradient = |lambda: f64| 1.0 - count_above(losses, lambda) as f64 / tail;

    let lambda = if n as f64 <= tail {
        lo.next_down()
    } else if subgradient(lo) >= 0.0 {
        lo
    } else {
        for _ in 0..MAX_BISECTION_STEPS {
            if hi - lo <= tol {
                break;
            }
            let mid = lo + (hi - lo) / 2.0;
            if mid <= lo || mid >= hi {
                break;
            }
            if subgradient(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    Ok(CvarSolution {
        lambda,
        value: cvar_value(losses, alpha, lambda)?,
        active_count: count_above(losses, lambda),
    })
}

/// Per-sample weights of the CVaR gradient at a fixed λ: `1/(αn)` for
/// samples with loss strictly above `lambda`, zero otherwise.
pub fn cvar_active_weights(losses: &[f64], lambda: f64, alpha: f64) -> Result<Vec<f64>, LossError> {
    if losses.is_empty() {
        return Err(LossError::Empty);
    }
    check_alpha(alpha)?;
    let w = 1.0 / (alpha * losses.len() as f64);
    Ok(losses
        .iter()
        .map(|&l| if l > lambda { w } else { 0.0 })
        .collect())
}
