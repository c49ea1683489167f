use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use g2link::cymetric::CyTrainConfig;
use g2link::par::Execution;
use g2link::pipeline::{
    self, BuildConfig, Mode, SplitFractions, SweepConfig, VerifyConfig, VerifyPaths, CY_MODEL_FILE, DATASET_FILE,
    POINTS_FILE,
};
use g2link::regressor::{RegressorConfig, RegressorKind};

/// G2-structures on the link of the Fermat quintic.
///
/// Each stage reads the previous stage's files from --out (or explicit
/// paths) and writes its own outputs plus a JSON manifest there.
#[derive(Parser)]
#[command(name = "g2link", version)]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Phi,
    Metric,
}

#[derive(Subcommand)]
enum Command {
    /// Sample points on the quintic.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
    },
    /// Train the Kähler potential correction.
    TrainCy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        volume_weight: f64,
        /// Save a checkpoint every N epochs (0 disables).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Build the G2 dataset from sampled points.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        points: Option<PathBuf>,
        /// Fibre angles per base point.
        #[arg(long, default_value_t = 5)]
        thetas: usize,
        #[arg(long, default_value = "fs")]
        mode: Mode,
        /// CY model for nn mode.
        #[arg(long)]
        cy_model: Option<PathBuf>,
        /// Step of the contact-form calibration.
        #[arg(long, default_value_t = pipeline::DEFAULT_EPS)]
        eps: f64,
    },
    /// Train the 3-form or metric regressor.
    TrainG2 {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 150)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value = "0.9:0.05:0.05")]
        split: SplitFractions,
        /// Halve the step size every N epochs.
        #[arg(long, default_value_t = 30)]
        decay_every: usize,
        /// Append one-hot patch indices to the inputs.
        #[arg(long)]
        one_hot: bool,
    },
    /// Structural, torsion and model checks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value_t = pipeline::DEFAULT_EPS)]
        eps: f64,
        /// Step for the model-based torsion.
        #[arg(long, default_value_t = 1e-5)]
        model_eps: f64,
        #[arg(long, default_value = "0.9:0.05:0.05")]
        split: SplitFractions,
        /// Records used by the derivative checks.
        #[arg(long, default_value_t = 1000)]
        max_points: usize,
    },
    /// Exterior-derivative norms over a grid of steps.
    SweepEps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        /// Comma-separated steps; defaults to half decades from 1e-12 to 1.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
        #[arg(long, default_value = "0.9:0.05:0.05")]
        split: SplitFractions,
        #[arg(long, default_value_t = 200)]
        max_points: usize,
    },
}

#[derive(Args)]
struct Models {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    cy_model: Option<PathBuf>,
    #[arg(long)]
    phi_model: Option<PathBuf>,
    #[arg(long)]
    metric_model: Option<PathBuf>,
}

fn or_default(p: Option<PathBuf>, out: &std::path::Path, name: &str) -> PathBuf {
    p.unwrap_or_else(|| out.join(name))
}

/// Model files default to those in --out when present.
fn existing(p: Option<PathBuf>, out: &std::path::Path, name: &str) -> Option<PathBuf> {
    p.or_else(|| Some(out.join(name)).filter(|q| q.exists()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.serial { Execution::Serial } else { Execution::Parallel };
    match cli.command {
        Command::Sample { common, count } => {
            let path = pipeline::run_sample(count, common.seed, &common.out, exec)?;
            log::info!("wrote {}", path.display());
        }
        Command::TrainCy { common, points, epochs, batch, lr, volume_weight, checkpoint_every } => {
            let points = or_default(points, &common.out, POINTS_FILE);
            let cfg = CyTrainConfig {
                lr,
                batch,
                volume_weight,
                seed: common.seed,
                exec,
                checkpoint_every,
                checkpoint_dir: (checkpoint_every > 0).then(|| common.out.join("cy_checkpoints")),
                ..Default::default()
            };
            let state = pipeline::run_train_cy(&points, epochs, cfg, &common.out)?;
            if let Some(last) = state.history.last() {
                log::info!("epoch {}: validation Monge-Ampere {:.4e}", last.epoch, last.validation.monge_ampere);
            }
        }
        Command::BuildDataset { common, points, thetas, mode, cy_model, eps } => {
            let points = or_default(points, &common.out, POINTS_FILE);
            let cy_model = match mode {
                Mode::Nn => Some(or_default(cy_model, &common.out, CY_MODEL_FILE)),
                Mode::Fs => None,
            };
            let cfg = BuildConfig { mode, thetas, seed: common.seed, calibration_eps: eps, exec };
            let ds = pipeline::run_build_dataset(&points, cy_model.as_deref(), &cfg, &common.out)?;
            log::info!(
                "{} records (c_eta {:.6}, lambda {:.6})",
                ds.samples.len(),
                ds.header.c_eta,
                ds.header.lambda
            );
        }
        Command::TrainG2 { common, kind, dataset, epochs, batch, lr, split, decay_every, one_hot } => {
            let dataset = or_default(dataset, &common.out, DATASET_FILE);
            let kind = match kind {
                KindArg::Phi => RegressorKind::Form,
                KindArg::Metric => RegressorKind::Metric,
            };
            let cfg = RegressorConfig { epochs, batch, lr, decay_every, one_hot, seed: common.seed, exec, ..Default::default() };
            let (_, scores) = pipeline::run_train_g2(&dataset, kind, &split, &cfg, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&scores)?);
        }
        Command::Verify { common, models, eps, model_eps, split, max_points } => {
            let out = &common.out;
            let dataset = or_default(models.dataset, out, DATASET_FILE);
            let cy = existing(models.cy_model, out, CY_MODEL_FILE);
            let phi = existing(models.phi_model, out, &pipeline::model_file(RegressorKind::Form));
            let metric = existing(models.metric_model, out, &pipeline::model_file(RegressorKind::Metric));
            let cfg = VerifyConfig { eps, model_eps, split, max_points, exec, ..Default::default() };
            let paths = VerifyPaths {
                dataset: &dataset,
                cy: cy.as_deref(),
                phi: phi.as_deref(),
                metric: metric.as_deref(),
            };
            let report = pipeline::run_verify(&paths, &cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::SweepEps { common, models, eps, split, max_points } => {
            let out = &common.out;
            let eps = if eps.is_empty() { pipeline::default_sweep_grid() } else { eps };
            if eps.iter().any(|&e| !(e > 0.0)) {
                bail!("every step must be positive");
            }
            let dataset = or_default(models.dataset, out, DATASET_FILE);
            let cy = existing(models.cy_model, out, CY_MODEL_FILE);
            let phi = existing(models.phi_model, out, &pipeline::model_file(RegressorKind::Form));
            let metric = existing(models.metric_model, out, &pipeline::model_file(RegressorKind::Metric));
            let cfg = SweepConfig { eps, max_points, split, exec };
            let results = pipeline::run_sweep(&dataset, cy.as_deref(), phi.as_deref(), metric.as_deref(), &cfg, out)
                .context("eps sweep failed")?;
            for (name, r) in &results {
                println!("{name}: plateau {:?}, {} failed evaluations", r.plateau_value(), r.failures);
            }
        }
    }
    Ok(())
}
