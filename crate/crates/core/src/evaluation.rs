//! Slice- and scan-level evaluation.
//!
//! Slices are classified independently; a scan's diagnosis is the majority of
//! its slice labels, with exact ties going to the positive class. Both levels
//! are scored with macro F1, the unweighted mean of the per-class F1 scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurebank::{FeatureBank, ScanManifest};
use crate::mlp::{forward_eval, predict_proba, MlpError, MlpParams};
use crate::model::TrainedModel;
use crate::robust_loss::{bce_per_sample, cvar_lambda_search, LossError};
use crate::seed::derive_seed;

/// Human-readable statement of the vote tie rule, echoed in every report.
pub const TIE_RULE: &str =
    "slice probability >= 0.5 is positive; tied scan votes resolve to positive (1)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bank dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bank is unlabeled")]
    UnlabeledBank,
    #[error("scan {0} missing from manifest")]
    MissingManifestEntry(u64),
    #[error("scan {0} has no label in the manifest")]
    UnlabeledManifestEntry(u64),
    #[error("length mismatch: {preds} predictions, {truth} labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("no units to score")]
    Empty,
    #[error("grid needs an odd number of points >= 3, got {0}")]
    BadGrid(usize),
    #[error("grid half width must be positive and finite, got {0}")]
    BadHalfWidth(f64),
    #[error("could not draw a non-degenerate direction after {0} attempts")]
    DegenerateDirection(usize),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// How slice predictions are combined into a scan diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Majority of hard slice labels; ties go to 1.
    #[default]
    MajorityVote,
    /// Mean slice probability thresholded at 0.5.
    MeanProbability,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePrediction {
    pub scan_id: u64,
    pub label: u8,
    pub probability: f64,
}

fn check_dim(params: &MlpParams, bank: &FeatureBank) -> Result<(), EvalError> {
    let expected = params.input_dim();
    if bank.feature_dim() != expected {
        return Err(EvalError::DimensionMismatch {
            expected,
            found: bank.feature_dim(),
        });
    }
    Ok(())
}

fn bank_matrix(bank: &FeatureBank) -> ndarray::Array2<f64> {
    ArrayView2::from_shape((bank.len(), bank.feature_dim()), bank.features())
        .expect("record-major features")
        .mapv(f64::from)
}

/// Eval-mode prediction for every record, in bank order.
pub fn predict_slices(
    model: &TrainedModel,
    bank: &FeatureBank,
) -> Result<Vec<SlicePrediction>, EvalError> {
    check_dim(&model.params, bank)?;
    if bank.is_empty() {
        return Ok(Vec::new());
    }
    let probs = predict_proba(&model.params, bank_matrix(bank).view())?;
    Ok(bank
        .scan_ids()
        .iter()
        .zip(probs)
        .map(|(&scan_id, probability)| SlicePrediction {
            scan_id,
            label: u8::from(probability >= 0.5),
            probability,
        })
        .collect())
}

/// Majority vote per scan; an exact tie yields 1.
pub fn aggregate_scans(slice_preds: &[(u64, u8)]) -> BTreeMap<u64, u8> {
    let mut votes: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for &(scan, label) in slice_preds {
        let v = votes.entry(scan).or_default();
        if label == 1 {
            v.1 += 1;
        } else {
            v.0 += 1;
        }
    }
    votes
        .into_iter()
        .map(|(scan, (neg, pos))| (scan, u8::from(pos >= neg)))
        .collect()
}

/// Mean probability per scan, thresholded at 0.5.
pub fn aggregate_scans_mean(preds: &[SlicePrediction]) -> BTreeMap<u64, u8> {
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for p in preds {
        let s = sums.entry(p.scan_id).or_default();
        s.0 += p.probability;
        s.1 += 1;
    }
    sums.into_iter()
        .map(|(scan, (sum, n))| (scan, u8::from(sum / n as f64 >= 0.5)))
        .collect()
}

/// Binary confusion counts with class 1 as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts with the class roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

pub fn confusion(preds: &[u8], truth: &[u8]) -> Result<ConfusionCounts, EvalError> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in preds.iter().zip(truth) {
        match (p == 1, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1 of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_scores(tp: usize, fp: usize, fn_: usize) -> ClassScores {
    ClassScores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        // 2·P·R/(P+R) written in counts; 0 when the class never appears.
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    }
}

/// Scores for the positive class and the negative class.
pub fn per_class(c: &ConfusionCounts) -> (ClassScores, ClassScores) {
    (
        class_scores(c.tp, c.fp, c.fn_),
        class_scores(c.tn, c.fn_, c.fp),
    )
}

/// Unweighted mean of the positive- and negative-class F1.
pub fn macro_f1(c: &ConfusionCounts) -> Result<f64, EvalError> {
    if c.total() == 0 {
        return Err(EvalError::Empty);
    }
    let (pos, neg) = per_class(c);
    Ok((pos.f1 + neg.f1) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub confusion: ConfusionCounts,
    pub macro_f1: f64,
    pub positive: ClassScores,
    pub negative: ClassScores,
}

impl LevelReport {
    pub fn from_counts(confusion: ConfusionCounts) -> Result<Self, EvalError> {
        let (positive, negative) = per_class(&confusion);
        Ok(Self {
            macro_f1: macro_f1(&confusion)?,
            confusion,
            positive,
            negative,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_slices: usize,
    pub num_scans: usize,
    pub aggregation: Aggregation,
    pub tie_rule: String,
    pub slice: LevelReport,
    pub scan: LevelReport,
}

impl EvalReport {
    pub fn slice_macro_f1(&self) -> f64 {
        self.slice.macro_f1
    }

    pub fn scan_macro_f1(&self) -> f64 {
        self.scan.macro_f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(
    model: &TrainedModel,
    bank: &FeatureBank,
    manifest: &ScanManifest,
) -> Result<EvalReport, EvalError> {
    evaluate_with(model, bank, manifest, Aggregation::MajorityVote)
}

/// Scores slice predictions against slice labels and scan diagnoses against
/// manifest labels, from a single inference pass.
pub fn evaluate_with(
    model: &TrainedModel,
    bank: &FeatureBank,
    manifest: &ScanManifest,
    aggregation: Aggregation,
) -> Result<EvalReport, EvalError> {
    let truth = bank.labels().ok_or(EvalError::UnlabeledBank)?;
    for &scan in bank.scan_ids() {
        match manifest.get(scan) {
            None => return Err(EvalError::MissingManifestEntry(scan)),
            Some(e) if e.label.is_none() => return Err(EvalError::UnlabeledManifestEntry(scan)),
            Some(_) => {}
        }
    }
    let preds = predict_slices(model, bank)?;
    let slice_labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let slice = LevelReport::from_counts(confusion(&slice_labels, truth)?)?;

    let scans = match aggregation {
        Aggregation::MajorityVote => {
            let pairs: Vec<(u64, u8)> = preds.iter().map(|p| (p.scan_id, p.label)).collect();
            aggregate_scans(&pairs)
        }
        Aggregation::MeanProbability => aggregate_scans_mean(&preds),
    };
    let (scan_preds, scan_truth): (Vec<u8>, Vec<u8>) = scans
        .iter()
        .map(|(scan, &label)| {
            let t = manifest
                .get(*scan)
                .and_then(|e| e.label)
                .expect("checked above");
            (label, t)
        })
        .unzip();
    let scan = LevelReport::from_counts(confusion(&scan_preds, &scan_truth)?)?;
    Ok(EvalReport {
        num_slices: bank.len(),
        num_scans: scans.len(),
        aggregation,
        tie_rule: TIE_RULE.to_string(),
        slice,
        scan,
    })
}

/// Full-bank CVaR of the per-slice BCE under eval-mode parameters.
pub fn cvar_loss(params: &MlpParams, bank: &FeatureBank, alpha: f64) -> Result<f64, EvalError> {
    check_dim(params, bank)?;
    let labels = bank.labels().ok_or(EvalError::UnlabeledBank)?;
    if bank.is_empty() {
        return Err(EvalError::Empty);
    }
    let logits = forward_eval(params, bank_matrix(bank).view())?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let losses = bce_per_sample(logits.as_slice().expect("contiguous"), &y)?;
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
            (lo.min(l), hi.max(l))
        });
    let tol = (1e-12 * (hi - lo)).max(f64::MIN_POSITIVE);
    Ok(cvar_lambda_search(&losses, alpha, tol)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub u: f64,
    pub v: f64,
    pub loss: f64,
}

/// Maximum number of direction draws before giving up.
pub const DIRECTION_ATTEMPTS: usize = 10;

/// Gaussian direction rescaled so each tensor has the norm of the matching
/// model tensor. Tensors with zero norm get a zero direction.
fn filter_normalized_direction(params: &MlpParams, seed: u64) -> Option<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let dir: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| {
            let raw: Vec<f64> = (0..t.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let target = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { target / norm } else { 0.0 };
            total += target * target;
            raw.into_iter().map(|v| v * scale).collect()
        })
        .collect();
    (total > 0.0 && dir.iter().flatten().all(|v| v.is_finite())).then_some(dir)
}

fn draw_direction(params: &MlpParams, seed: u64, stream: u64) -> Result<Vec<Vec<f64>>, EvalError> {
    (0..DIRECTION_ATTEMPTS as u64)
        .find_map(|attempt| {
            filter_normalized_direction(params, derive_seed(seed, stream * 1000 + attempt))
        })
        .ok_or(EvalError::DegenerateDirection(DIRECTION_ATTEMPTS))
}

/// CVaR loss on a `grid_points × grid_points` grid spanned by two random
/// filter-normalized directions, `u` and `v` in `[−half_width, half_width]`.
/// Rows are ordered by `u` then `v`.
pub fn loss_surface(
    model: &TrainedModel,
    bank: &FeatureBank,
    alpha: f64,
    grid_half_width: f64,
    grid_points: usize,
    seed: u64,
) -> Result<Vec<SurfacePoint>, EvalError> {
    if grid_points < 3 || grid_points.is_multiple_of(2) {
        return Err(EvalError::BadGrid(grid_points));
    }
    if !(grid_half_width.is_finite() && grid_half_width > 0.0) {
        return Err(EvalError::BadHalfWidth(grid_half_width));
    }
    check_dim(&model.params, bank)?;
    let d1 = draw_direction(&model.params, seed, 1)?;
    let d2 = draw_direction(&model.params, seed, 2)?;
    let half = (grid_points / 2) as f64;
    let coord = |i: usize| grid_half_width * (i as f64 - half) / half;

    let mut out = Vec::with_capacity(grid_points * grid_points);
    for i in 0..grid_points {
        for j in 0..grid_points {
            let (u, v) = (coord(i), coord(j));
            let mut shifted = model.params.clone();
            if u != 0.0 || v != 0.0 {
                for ((t, a), b) in shifted.tensors_mut().into_iter().zip(&d1).zip(&d2) {
                    for ((p, &x), &y) in t.iter_mut().zip(a).zip(b) {
                        *p += u * x + v * y;
                    }
                }
            }
            out.push(SurfacePoint {
                u,
                v,
                loss: cvar_loss(&shifted, bank, alpha)?,
            });
        }
    }
    Ok(out)
}

/// `u,v,loss` CSV with 17 significant digits.
pub fn surface_csv(points: &[SurfacePoint]) -> String {
    let mut s = String::from("u,v,loss\n");
    for p in points {
        writeln!(s, "{:.16e},{:.16e},{:.16e}", p.u, p.v, p.loss).expect("write to string");
    }
    s
}
