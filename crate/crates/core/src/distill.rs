//! Teacher-student pseudo-labeling.
//!
//! A teacher trained on the labeled bank labels every unlabeled slice
//! (`p ≥ 0.5 → 1`); the student is trained on the labeled bank followed by
//! the pseudo-labeled one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{aggregate_scans, predict_slices, EvalError};
use crate::featurebank::{merge_banks, BankError, FeatureBank};
use crate::model::TrainedModel;
use crate::optimizer::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("pseudo-labeling expects an unlabeled bank")]
    LabeledInputRejected,
    #[error("teacher training needs a labeled bank")]
    UnlabeledTeacherBank,
    #[error("bank dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("confidence threshold must lie in (0.5, 1), got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelOptions {
    /// Keep only slices with `max(p, 1−p) ≥ threshold`.
    pub threshold: Option<f64>,
    /// Replace each slice label with its scan's majority vote.
    pub scan_consistent: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub total_unlabeled: usize,
    pub labeled_positive: usize,
    pub labeled_negative: usize,
    pub discarded_low_confidence: usize,
    pub threshold_used: Option<OrderedThreshold>,
}

/// Threshold stored as its bit pattern so stats stay `Eq`; serializes as a
/// plain number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderedThreshold(u64);

impl OrderedThreshold {
    pub fn new(v: f64) -> Self {
        Self(v.to_bits())
    }

    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

impl Serialize for OrderedThreshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.get())
    }
}

impl<'de> Deserialize<'de> for OrderedThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Self::new)
    }
}

impl PseudoLabelStats {
    pub fn kept(&self) -> usize {
        self.labeled_positive + self.labeled_negative
    }
}

/// Labels every slice of `unlabeled` with the model's prediction.
pub fn pseudo_label(
    model: &TrainedModel,
    unlabeled: &FeatureBank,
    threshold: Option<f64>,
) -> Result<(FeatureBank, PseudoLabelStats), DistillError> {
    pseudo_label_with(
        model,
        unlabeled,
        &PseudoLabelOptions {
            threshold,
            scan_consistent: false,
        },
    )
}

pub fn pseudo_label_with(
    model: &TrainedModel,
    unlabeled: &FeatureBank,
    options: &PseudoLabelOptions,
) -> Result<(FeatureBank, PseudoLabelStats), DistillError> {
    if unlabeled.is_labeled() && !unlabeled.is_empty() {
        return Err(DistillError::LabeledInputRejected);
    }
    if unlabeled.feature_dim() != model.feature_dim() {
        return Err(DistillError::DimensionMismatch {
            expected: model.feature_dim(),
            found: unlabeled.feature_dim(),
        });
    }
    if let Some(t) = options.threshold {
        if !(t > 0.5 && t < 1.0) {
            return Err(DistillError::BadThreshold(t));
        }
    }
    let preds = predict_slices(model, unlabeled)?;
    let mut labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    if options.scan_consistent {
        let pairs: Vec<(u64, u8)> = preds.iter().map(|p| (p.scan_id, p.label)).collect();
        let votes: BTreeMap<u64, u8> = aggregate_scans(&pairs);
        for (label, p) in labels.iter_mut().zip(&preds) {
            *label = votes[&p.scan_id];
        }
    }
    let keep: Vec<usize> = match options.threshold {
        None => (0..preds.len()).collect(),
        Some(t) => (0..preds.len())
            .filter(|&i| {
                let p = preds[i].probability;
                p.max(1.0 - p) >= t
            })
            .collect(),
    };
    let kept_labels: Vec<u8> = keep.iter().map(|&i| labels[i]).collect();
    let positive = kept_labels.iter().filter(|&&l| l == 1).count();
    let stats = PseudoLabelStats {
        total_unlabeled: unlabeled.len(),
        labeled_positive: positive,
        labeled_negative: kept_labels.len() - positive,
        discarded_low_confidence: unlabeled.len() - keep.len(),
        threshold_used: options.threshold.map(OrderedThreshold::new),
    };
    let bank = unlabeled.select(&keep).with_labels(kept_labels)?;
    Ok((bank, stats))
}

/// Outcome of one teacher → student pass.
#[derive(Debug, Clone)]
pub struct DistillReport {
    pub teacher: TrainedModel,
    pub student: TrainedModel,
    pub pseudo_bank: FeatureBank,
    pub stats: PseudoLabelStats,
    pub labeled_size: usize,
    pub student_training_size: usize,
}

/// JSON-friendly summary of a [`DistillReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub labeled_size: usize,
    pub pseudo_labeled_size: usize,
    pub student_training_size: usize,
    pub stats: PseudoLabelStats,
    pub teacher_config: TrainConfig,
    pub student_config: TrainConfig,
    pub teacher_model: Option<String>,
    pub student_model: Option<String>,
}

impl DistillReport {
    pub fn summary(&self) -> DistillSummary {
        DistillSummary {
            labeled_size: self.labeled_size,
            pseudo_labeled_size: self.pseudo_bank.len(),
            student_training_size: self.student_training_size,
            stats: self.stats.clone(),
            teacher_config: self.teacher.config.clone(),
            student_config: self.student.config.clone(),
            teacher_model: None,
            student_model: None,
        }
    }
}

pub fn distill(
    labeled: &FeatureBank,
    unlabeled: &FeatureBank,
    teacher_cfg: &TrainConfig,
    student_cfg: &TrainConfig,
    options: &PseudoLabelOptions,
) -> Result<DistillReport, DistillError> {
    if !labeled.is_labeled() {
        return Err(DistillError::UnlabeledTeacherBank);
    }
    if labeled.feature_dim() != unlabeled.feature_dim() {
        return Err(DistillError::DimensionMismatch {
            expected: labeled.feature_dim(),
            found: unlabeled.feature_dim(),
        });
    }
    let teacher = train(labeled, teacher_cfg)?;
    let (pseudo_bank, stats) = pseudo_label_with(&teacher, unlabeled, options)?;
    let student_bank = merge_banks(labeled, &pseudo_bank)?;
    let student = train(&student_bank, student_cfg)?;
    Ok(DistillReport {
        teacher,
        student,
        labeled_size: labeled.len(),
        student_training_size: student_bank.len(),
        pseudo_bank,
        stats,
    })
}
