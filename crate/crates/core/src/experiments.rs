//! Multi-run protocols: the α sweep and the loss/sharpness ablation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{evaluate, EvalError, EvalReport};
use crate::featurebank::{FeatureBank, ScanManifest};
use crate::optimizer::{train, TrainConfig, TrainError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The α grid searched by default.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub slice_macro_f1: f64,
    pub scan_macro_f1: f64,
}

/// Trains and evaluates one model per α. The i-th grid value (after sorting)
/// trains with seed `derive_seed(base.seed, i)`. Rows come back sorted by α.
pub fn sweep_alpha(
    train_bank: &FeatureBank,
    test_bank: &FeatureBank,
    manifest: &ScanManifest,
    base: &TrainConfig,
    alphas: &[f64],
) -> Result<Vec<SweepRow>, ExperimentError> {
    if alphas.is_empty() {
        return Err(ExperimentError::EmptyGrid);
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let seed = derive_seed(base.seed, i as u64);
            let cfg = TrainConfig {
                alpha,
                seed,
                ..base.clone()
            };
            let model = train(train_bank, &cfg)?;
            let report = evaluate(&model, test_bank, manifest)?;
            Ok(SweepRow {
                alpha,
                seed,
                slice_macro_f1: report.slice_macro_f1(),
                scan_macro_f1: report.scan_macro_f1(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,slice_macro_f1,scan_macro_f1\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.16e},{:.16e}\n",
            r.alpha, r.slice_macro_f1, r.scan_macro_f1
        ));
    }
    s
}

/// The four combinations of loss (average BCE or CVaR) and update (plain or
/// sharpness-aware).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Bce,
    BceSam,
    Cvar,
    CvarSam,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [Self::Bce, Self::BceSam, Self::Cvar, Self::CvarSam];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bce => "BCE",
            Self::BceSam => "BCE+SAM",
            Self::Cvar => "CVaR",
            Self::CvarSam => "CVaR+SAM",
        }
    }

    /// `base` with α and the perturbation set for this arm. Arms without
    /// CVaR use α = 1; arms without SAM run the single-pass update.
    pub fn config(self, base: &TrainConfig, cvar_alpha: f64, gamma: f64) -> TrainConfig {
        let (cvar, sam) = match self {
            Self::Bce => (false, false),
            Self::BceSam => (false, true),
            Self::Cvar => (true, false),
            Self::CvarSam => (true, true),
        };
        TrainConfig {
            alpha: if cvar { cvar_alpha } else { 1.0 },
            gamma: if sam { gamma } else { 0.0 },
            sam,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub arm: AblationArm,
    pub name: String,
    pub config: TrainConfig,
    pub final_cvar_loss: Option<f64>,
    pub report: EvalReport,
}

/// Trains every arm with the same seed and evaluates each on `test_bank`.
pub fn run_ablation(
    train_bank: &FeatureBank,
    test_bank: &FeatureBank,
    manifest: &ScanManifest,
    base: &TrainConfig,
    cvar_alpha: f64,
    gamma: f64,
) -> Result<Vec<AblationResult>, ExperimentError> {
    AblationArm::ALL
        .iter()
        .map(|&arm| {
            let config = arm.config(base, cvar_alpha, gamma);
            let model = train(train_bank, &config)?;
            let report = evaluate(&model, test_bank, manifest)?;
            Ok(AblationResult {
                arm,
                name: arm.name().to_string(),
                final_cvar_loss: model.history.last().map(|r| r.mean_cvar_loss),
                config,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurebank::{split_bank, synth_bank, SynthConfig};

    #[test]
    fn default_grid_covers_tenths() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[8], 0.9);
    }

    #[test]
    fn arm_configs() {
        let base = TrainConfig::default();
        let bce = AblationArm::Bce.config(&base, 0.4, 0.05);
        assert_eq!((bce.alpha, bce.gamma, bce.sam), (1.0, 0.0, false));
        let full = AblationArm::CvarSam.config(&base, 0.4, 0.05);
        assert_eq!((full.alpha, full.gamma, full.sam), (0.4, 0.05, true));
    }

    #[test]
    fn sweep_sorts_and_derives_seeds() {
        let (bank, manifest) = synth_bank(&SynthConfig {
            num_scans_per_class: 4,
            slices_per_scan: (4, 4),
            feature_dim: 4,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train_bank, test_bank) = split_bank(&bank, 0.5, 2).unwrap();
        let base = TrainConfig {
            hidden_dim: 6,
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let rows = sweep_alpha(&train_bank, &test_bank, &manifest, &base, &[0.9, 0.2]).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.alpha).collect::<Vec<_>>(),
            vec![0.2, 0.9]
        );
        assert_eq!(rows[0].seed, derive_seed(base.seed, 0));
        assert_ne!(rows[0].seed, rows[1].seed);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("alpha,slice_macro_f1,scan_macro_f1\n0.2,"));
        assert!(matches!(
            sweep_alpha(&train_bank, &test_bank, &manifest, &base, &[]),
            Err(ExperimentError::EmptyGrid)
        ));
    }
}
