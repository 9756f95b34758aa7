//! `cvarsam` command-line pipeline. Every stage reads and writes files, and
//! every command leaves a `<output>.run.json` record next to its main output.
//!
//! Exit codes: 0 on success, 2 on a usage error, 1 on a runtime error.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cvarsam::distill::{distill, pseudo_label_with, PseudoLabelOptions};
use cvarsam::evaluation::{evaluate_with, loss_surface, surface_csv, Aggregation};
use cvarsam::experiments::{default_alpha_grid, run_ablation, sweep_alpha, sweep_csv};
use cvarsam::featurebank::{
    read_bank, split_bank, synth_bank, write_bank, ScanManifest, SynthConfig, ENCODER_FEATURE_DIM,
};
use cvarsam::optimizer::{OptimizerKind, TrainConfig};
use cvarsam::seed::derive_seed;
use cvarsam::{train, TrainedModel};
use serde_json::json;

use run::RunRecord;

#[derive(Parser)]
#[command(
    name = "cvarsam",
    version,
    about = "CVaR + sharpness-aware training of slice classifiers on precomputed embeddings"
)]
struct Cli {
    /// Default directory for training histories.
    #[arg(long, global = true, env = "CVARSAM_LOG_DIR")]
    log_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-cluster synthetic feature bank and its manifest.
    Synth(SynthArgs),
    /// Summarize a feature bank.
    Inspect {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Split a bank into train and test banks by scan.
    Split(SplitArgs),
    /// Train a classifier head on a labeled bank.
    Train(TrainCmd),
    /// Evaluate a model at slice and scan level.
    Eval(EvalArgs),
    /// Label an unlabeled bank with a trained model.
    PseudoLabel(PseudoArgs),
    /// Teacher, pseudo-labels, then student, in one run.
    Distill(DistillArgs),
    /// Train and evaluate one model per α.
    SweepAlpha(SweepArgs),
    /// Export the CVaR loss around a trained model along two random directions.
    LossSurface(SurfaceArgs),
    /// Train the BCE / BCE+SAM / CVaR / CVaR+SAM arms with one seed.
    Ablate(AblateArgs),
    /// Recompute the digests recorded in a `.run.json` file.
    Verify { run: PathBuf },
}

fn alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn nonneg(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite non-negative number"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

/// `N` or `A-B`.
fn slice_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if lo == 0 || hi < lo {
        return Err(format!("bad slice range {s}"));
    }
    Ok((lo, hi))
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    scans_per_class: usize,
    /// Slices per scan, `N` or `A-B`.
    #[arg(long, value_parser = slice_range, default_value = "10-20")]
    slices: (usize, usize),
    #[arg(long, default_value_t = ENCODER_FEATURE_DIM)]
    dim: usize,
    #[arg(long, value_parser = nonneg, default_value_t = 4.0)]
    sep: f64,
    #[arg(long, value_parser = nonneg, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_parser = unit_interval, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop labels from the bank; the manifest keeps them as ground truth.
    #[arg(long)]
    unlabeled: bool,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the bank path with a `.csv` extension.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Fraction of scans that go to the first output.
    #[arg(long, value_parser = unit_interval, default_value_t = 0.75)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, value_parser = alpha, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, value_parser = nonneg, default_value_t = 0.05)]
    gamma: f64,
    /// Single-pass updates without the perturbed gradient.
    #[arg(long)]
    no_sam: bool,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_min: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = unit_interval, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value_t = 768)]
    hidden: usize,
    /// Plain SGD instead of Adam.
    #[arg(long)]
    sgd: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            sam: !self.no_sam,
            lr: self.lr,
            lr_min: self.lr_min,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            dropout_rate: self.dropout,
            hidden_dim: self.hidden,
            optimizer: if self.sgd {
                OptimizerKind::Sgd
            } else {
                OptimizerKind::Adam
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    bank: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
    /// JSONL with one line per epoch. Defaults to the log directory, or to
    /// the model path with a `.history.jsonl` suffix.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregateArg {
    Vote,
    Mean,
}

impl From<AggregateArg> for Aggregation {
    fn from(a: AggregateArg) -> Self {
        match a {
            AggregateArg::Vote => Aggregation::MajorityVote,
            AggregateArg::Mean => Aggregation::MeanProbability,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "vote")]
    aggregate: AggregateArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PseudoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Discard slices whose confidence max(p, 1−p) is below this, in (0.5, 1).
    #[arg(long)]
    threshold: Option<f64>,
    /// Broadcast each scan's majority label to all its slices.
    #[arg(long)]
    scan_consistent: bool,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the output path with a `.stats.json` suffix.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    // Shared by teacher and student; they train with seeds derived from
    // `--seed` on streams 0 and 1.
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    scan_consistent: bool,
    #[arg(long)]
    teacher_out: PathBuf,
    #[arg(long)]
    student_out: PathBuf,
    /// Pseudo-labeled bank.
    #[arg(long)]
    pseudo_out: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    train_bank: PathBuf,
    #[arg(long)]
    test_bank: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated α grid; defaults to 0.1, 0.2, …, 0.9.
    #[arg(long, value_delimiter = ',', value_parser = alpha)]
    alphas: Option<Vec<f64>>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, value_parser = alpha, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    #[arg(long, default_value_t = 21)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train_bank: PathBuf,
    #[arg(long)]
    test_bank: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    // `--alpha` and `--gamma` apply to the CVaR and SAM arms.
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("model {}", path.display()))
}

fn load_bank(path: &Path) -> Result<cvarsam::FeatureBank> {
    read_bank(path).with_context(|| format!("feature bank {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<ScanManifest> {
    ScanManifest::load(path).with_context(|| format!("manifest {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let log_dir = cli.log_dir;
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                num_scans_per_class: a.scans_per_class,
                slices_per_scan: a.slices,
                feature_dim: a.dim,
                class_separation: a.sep,
                noise_sigma: a.sigma,
                label_noise_rate: a.label_noise,
                seed: a.seed,
            };
            let (bank, manifest) = synth_bank(&cfg).context("synth")?;
            let bank = if a.unlabeled {
                bank.without_labels()
            } else {
                bank
            };
            let manifest_path = a.manifest.unwrap_or_else(|| a.out.with_extension("csv"));
            write_bank(&bank, &a.out)?;
            manifest.save(&manifest_path)?;
            log::info!(
                "wrote {} records from {} scans to {}",
                bank.len(),
                manifest.len(),
                a.out.display()
            );
            RunRecord::new("synth", json!(cfg), Some(a.seed))
                .outputs(&[&a.out, &manifest_path])?
                .finish(&a.out, start)
        }
        Command::Inspect { bank } => {
            let b = load_bank(&bank)?;
            let summary = json!({
                "records": b.len(),
                "feature_dim": b.feature_dim(),
                "labeled": b.is_labeled(),
                "scans": b.distinct_scans().len(),
                "positive_slices": b.labels().map(|l| l.iter().filter(|&&x| x == 1).count()),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if b.feature_dim() != ENCODER_FEATURE_DIM {
                log::warn!(
                    "feature_dim {} differs from the {ENCODER_FEATURE_DIM}-wide encoder embeddings",
                    b.feature_dim()
                );
            }
            Ok(())
        }
        Command::Split(a) => {
            let bank = load_bank(&a.bank)?;
            let (train_bank, test_bank) = split_bank(&bank, a.fraction, a.seed).context("split")?;
            write_bank(&train_bank, &a.train_out)?;
            write_bank(&test_bank, &a.test_out)?;
            log::info!(
                "{} train / {} test records",
                train_bank.len(),
                test_bank.len()
            );
            RunRecord::new("split", json!({ "fraction": a.fraction }), Some(a.seed))
                .inputs(&[&a.bank])?
                .outputs(&[&a.train_out, &a.test_out])?
                .finish(&a.train_out, start)
        }
        Command::Train(a) => {
            let bank = load_bank(&a.bank)?;
            let cfg = a.train.config();
            let model = train(&bank, &cfg).context("train")?;
            model.save(&a.out)?;
            let history = match (a.history, &log_dir) {
                (Some(p), _) => p,
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir)?;
                    let stem = a
                        .out
                        .file_name()
                        .map(|s| s.to_owned())
                        .unwrap_or_else(|| "model".into());
                    with_suffix(&dir.join(stem), ".history.jsonl")
                }
                (None, None) => with_suffix(&a.out, ".history.jsonl"),
            };
            std::fs::write(&history, model.history_jsonl())?;
            if let Some(last) = model.history.last() {
                println!(
                    "epoch {}: cvar loss {:.6}, lambda {:.6}, active fraction {:.3}, lr {:.3e}",
                    last.epoch,
                    last.mean_cvar_loss,
                    last.mean_lambda,
                    last.active_fraction,
                    last.lr
                );
            }
            RunRecord::new("train", json!(cfg), Some(cfg.seed))
                .inputs(&[&a.bank])?
                .outputs(&[&a.out, &history])?
                .finish(&a.out, start)
        }
        Command::Eval(a) => {
            let model = load_model(&a.model)?;
            let bank = load_bank(&a.bank)?;
            let manifest = load_manifest(&a.manifest)?;
            let report =
                evaluate_with(&model, &bank, &manifest, a.aggregate.into()).context("eval")?;
            std::fs::write(&a.out, report.to_json() + "\n")?;
            println!(
                "slice macro F1 {:.4}, scan macro F1 {:.4}",
                report.slice_macro_f1(),
                report.scan_macro_f1()
            );
            RunRecord::new("eval", json!({ "aggregation": report.aggregation }), None)
                .inputs(&[&a.model, &a.bank, &a.manifest])?
                .outputs(&[&a.out])?
                .finish(&a.out, start)
        }
        Command::PseudoLabel(a) => {
            let model = load_model(&a.model)?;
            let bank = load_bank(&a.bank)?;
            let opts = PseudoLabelOptions {
                threshold: a.threshold,
                scan_consistent: a.scan_consistent,
            };
            let (labeled, stats) =
                pseudo_label_with(&model, &bank, &opts).context("pseudo-label")?;
            write_bank(&labeled, &a.out)?;
            let stats_path = a
                .stats
                .unwrap_or_else(|| with_suffix(&a.out, ".stats.json"));
            write_json(&stats_path, &stats)?;
            log::info!(
                "{} positive, {} negative, {} discarded of {}",
                stats.labeled_positive,
                stats.labeled_negative,
                stats.discarded_low_confidence,
                stats.total_unlabeled
            );
            RunRecord::new("pseudo-label", json!(opts), None)
                .inputs(&[&a.model, &a.bank])?
                .outputs(&[&a.out, &stats_path])?
                .finish(&a.out, start)
        }
        Command::Distill(a) => {
            let labeled = load_bank(&a.labeled)?;
            let unlabeled = load_bank(&a.unlabeled)?;
            let base = a.train.config();
            let teacher_cfg = TrainConfig {
                seed: derive_seed(base.seed, 0),
                ..base.clone()
            };
            let student_cfg = TrainConfig {
                seed: derive_seed(base.seed, 1),
                ..base.clone()
            };
            let opts = PseudoLabelOptions {
                threshold: a.threshold,
                scan_consistent: a.scan_consistent,
            };
            let report = distill(&labeled, &unlabeled, &teacher_cfg, &student_cfg, &opts)
                .context("distill")?;
            report.teacher.save(&a.teacher_out)?;
            report.student.save(&a.student_out)?;
            let mut outputs = vec![
                a.teacher_out.clone(),
                a.student_out.clone(),
                a.report.clone(),
            ];
            if let Some(p) = &a.pseudo_out {
                write_bank(&report.pseudo_bank, p)?;
                outputs.push(p.clone());
            }
            write_json(&a.report, &report.summary())?;
            println!(
                "student trained on {} records ({} labeled + {} pseudo-labeled)",
                report.student_training_size,
                report.labeled_size,
                report.stats.kept()
            );
            let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
            RunRecord::new(
                "distill",
                json!({ "teacher": teacher_cfg, "student": student_cfg, "pseudo_label": opts }),
                Some(base.seed),
            )
            .inputs(&[&a.labeled, &a.unlabeled])?
            .outputs(&refs)?
            .finish(&a.report, start)
        }
        Command::SweepAlpha(a) => {
            let train_bank = load_bank(&a.train_bank)?;
            let test_bank = load_bank(&a.test_bank)?;
            let manifest = load_manifest(&a.manifest)?;
            let base = a.train.config();
            let grid = a.alphas.unwrap_or_else(default_alpha_grid);
            let rows = sweep_alpha(&train_bank, &test_bank, &manifest, &base, &grid)
                .context("sweep-alpha")?;
            std::fs::write(&a.out, sweep_csv(&rows))?;
            for r in &rows {
                log::info!(
                    "alpha {}: slice F1 {:.4}, scan F1 {:.4}",
                    r.alpha,
                    r.slice_macro_f1,
                    r.scan_macro_f1
                );
            }
            RunRecord::new(
                "sweep-alpha",
                json!({ "base": base, "alphas": grid, "runs": rows }),
                Some(base.seed),
            )
            .inputs(&[&a.train_bank, &a.test_bank, &a.manifest])?
            .outputs(&[&a.out])?
            .finish(&a.out, start)
        }
        Command::LossSurface(a) => {
            let model = load_model(&a.model)?;
            let bank = load_bank(&a.bank)?;
            let points = loss_surface(&model, &bank, a.alpha, a.half_width, a.points, a.seed)
                .context("loss-surface")?;
            std::fs::write(&a.out, surface_csv(&points))?;
            RunRecord::new(
                "loss-surface",
                json!({ "alpha": a.alpha, "half_width": a.half_width, "points": a.points }),
                Some(a.seed),
            )
            .inputs(&[&a.model, &a.bank])?
            .outputs(&[&a.out])?
            .finish(&a.out, start)
        }
        Command::Ablate(a) => {
            let train_bank = load_bank(&a.train_bank)?;
            let test_bank = load_bank(&a.test_bank)?;
            let manifest = load_manifest(&a.manifest)?;
            let base = a.train.config();
            let results = run_ablation(
                &train_bank,
                &test_bank,
                &manifest,
                &base,
                base.alpha,
                base.gamma,
            )
            .context("ablate")?;
            for r in &results {
                println!(
                    "{:<9} slice F1 {:.4}  scan F1 {:.4}",
                    r.name,
                    r.report.slice_macro_f1(),
                    r.report.scan_macro_f1()
                );
            }
            write_json(&a.out, &results)?;
            RunRecord::new("ablate", json!(base), Some(base.seed))
                .inputs(&[&a.train_bank, &a.test_bank, &a.manifest])?
                .outputs(&[&a.out])?
                .finish(&a.out, start)
        }
        Command::Verify { run } => {
            let mismatches = run::verify(&run)?;
            if mismatches.is_empty() {
                println!("all digests match");
                Ok(())
            } else {
                for m in &mismatches {
                    eprintln!("{m}");
                }
                bail!("{} digest mismatch(es)", mismatches.len())
            }
        }
    }
}
