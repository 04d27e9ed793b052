//! Command-line driver for the estimator pipeline.
//!
//! Every subcommand reads an experiment configuration from JSON, runs a
//! deterministic pipeline keyed by the configured seed, and writes its
//! results into the output directory. All output files embed the
//! configuration hash and the seed, so runs can be traced back to their
//! inputs and repeated byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hamlearn::estimator::{ConditioningReport, Estimator};
use hamlearn::experiments::{
    self, config_hash, ConvergenceRow, ExperimentConfig, FitOutcome, KernelFamily, SavedModel,
    SystemSpec,
};
use hamlearn::systems::SystemModel;

#[derive(Parser)]
#[command(
    name = "hamlearn",
    version,
    about = "Learn Hamiltonian functions on Poisson manifolds from vector-field data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long, value_name = "path.json")]
    config: PathBuf,
    /// Override the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArg {
    /// Reuse a fitted model file instead of refitting.
    #[arg(long, value_name = "model.json")]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the estimator and write the model and fit report.
    Fit(Common),
    /// Cross-validated grid search over the bandwidth and ridge grids.
    GridSearch(Common),
    /// Score a fitted estimator on fresh test points and the slice.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Integrate the true and learned flows and compare them.
    FlowCompare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Run the training-size convergence study.
    Convergence(Common),
    /// Export the heatmap suite over the evaluation slice.
    ExportHeatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let hash = config_hash(&cfg)?;
    Ok((cfg, hash))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(dir, name, &text)
}

/// Either refit from the configuration or restore a model file; the
/// model must describe the configured system.
fn obtain_estimator(
    cfg: &ExperimentConfig,
    model: &Option<PathBuf>,
) -> Result<(SystemModel, Estimator, f64, f64, f64)> {
    match model {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading model {}", path.display()))?;
            let saved: SavedModel = serde_json::from_str(&text)
                .with_context(|| format!("parsing model {}", path.display()))?;
            if saved.system != cfg.system {
                bail!(
                    "model {} was fitted on a different system than the config",
                    path.display()
                );
            }
            let (system, est) = experiments::restore_model(&saved)?;
            Ok((system, est, saved.eta, saved.c, 0.0))
        }
        None => {
            let start = Instant::now();
            let FitOutcome {
                system,
                estimator,
                eta,
                c,
                ..
            } = experiments::run_fit(cfg)?;
            Ok((system, estimator, eta, c, start.elapsed().as_secs_f64()))
        }
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    config_hash: &'a str,
    seed: u64,
    system: &'a SystemSpec,
    kernel: KernelFamily,
    eta: f64,
    c: f64,
    lambda: f64,
    training_points: usize,
    sigma: f64,
    rkhs_norm_sq: f64,
    residual_rel: f64,
    conditioning: &'a ConditioningReport,
    runtime_seconds: f64,
}

fn cmd_fit(common: &Common) -> Result<()> {
    let (cfg, hash) = load_config(common)?;
    let start = Instant::now();
    let outcome = experiments::run_fit(&cfg)?;
    let runtime = start.elapsed().as_secs_f64();
    let model = experiments::save_model(&cfg, &outcome.estimator, outcome.eta, outcome.c)?;
    write_json(&common.out, "model.json", &model)?;
    let report = FitReport {
        config_hash: &hash,
        seed: cfg.seed,
        system: &cfg.system,
        kernel: cfg.kernel,
        eta: outcome.eta,
        c: outcome.c,
        lambda: outcome.lambda,
        training_points: outcome.training.len(),
        sigma: cfg.sigma,
        rkhs_norm_sq: outcome.estimator.rkhs_norm_sq(),
        residual_rel: outcome.estimator.residual_rel(),
        conditioning: outcome.estimator.conditioning(),
        runtime_seconds: runtime,
    };
    write_json(&common.out, "fit_report.json", &report)?;
    println!(
        "fit: N={} lambda={:.3e} residual={:.2e} ({:.2}s)",
        report.training_points, report.lambda, report.residual_rel, runtime
    );
    Ok(())
}

#[derive(Serialize)]
struct CvBest<'a> {
    config_hash: &'a str,
    seed: u64,
    best_eta: f64,
    best_c: f64,
    best_score: f64,
    lambda_at_full_n: f64,
}

fn cmd_grid_search(common: &Common) -> Result<()> {
    let (cfg, hash) = load_config(common)?;
    let system = cfg.system.build()?;
    let training = hamlearn::TrainingSet::from_system(
        &system,
        cfg.sample_count,
        cfg.bounds.as_deref(),
        cfg.sigma,
        cfg.seed,
        "train",
    )?;
    let start = Instant::now();
    let table = experiments::cross_validate(&cfg, &training)?;
    let runtime = start.elapsed().as_secs_f64();
    write_file(&common.out, "cv_table.csv", &table.to_csv(&hash, cfg.seed))?;
    let best = CvBest {
        config_hash: &hash,
        seed: cfg.seed,
        best_eta: table.best_eta,
        best_c: table.best_c,
        best_score: table.best_score,
        lambda_at_full_n: experiments::lambda_schedule(table.best_c, training.len(), cfg.alpha)?,
    };
    write_json(&common.out, "cv_best.json", &best)?;
    println!(
        "grid-search: {} cells, best eta={} c={} score={:.6e} ({:.2}s)",
        table.entries.len(),
        table.best_eta,
        table.best_c,
        table.best_score,
        runtime
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, model: &Option<PathBuf>) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let start = Instant::now();
    let (system, est, _, _, _) = obtain_estimator(&cfg, model)?;
    let report = experiments::evaluate(&cfg, &system, &est, start.elapsed().as_secs_f64())?;
    write_json(&common.out, "eval_report.json", &report)?;
    println!(
        "evaluate: vf_rel_rmse={:.4} h_abs_err={:.4e} casimir_max_abs={:.4e}",
        report.vf_rel_rmse, report.h_abs_err, report.casimir_max_abs
    );
    Ok(())
}

fn cmd_flow_compare(common: &Common, model: &Option<PathBuf>) -> Result<()> {
    let (cfg, hash) = load_config(common)?;
    let (system, est, _, _, _) = obtain_estimator(&cfg, model)?;
    let spec = match &cfg.flow {
        Some(f) => f.clone(),
        None => experiments::default_flow(&cfg, &system),
    };
    let (truth, learned, report) = experiments::flow_compare(&cfg, &system, &est, &spec)?;
    write_file(&common.out, "flow_true.csv", &truth.to_csv(&hash, cfg.seed))?;
    write_file(&common.out, "flow_learned.csv", &learned.to_csv(&hash, cfg.seed))?;
    write_json(&common.out, "flow_report.json", &report)?;
    println!(
        "flow-compare: distance={:.4e} truncated(true={}, learned={})",
        report.flow_distance, report.true_truncated, report.learned_truncated
    );
    Ok(())
}

#[derive(Serialize)]
struct ConvergenceReport<'a> {
    config_hash: &'a str,
    seed: u64,
    slope: f64,
    rows: &'a [ConvergenceRow],
}

fn cmd_convergence(common: &Common) -> Result<()> {
    let (cfg, hash) = load_config(common)?;
    if cfg.convergence_ns.is_empty() {
        bail!("config has no convergence_ns sizes");
    }
    let start = Instant::now();
    let table = experiments::convergence_study(&cfg, &cfg.convergence_ns)?;
    let runtime = start.elapsed().as_secs_f64();
    write_file(&common.out, "convergence.csv", &table.to_csv(&hash, cfg.seed))?;
    let report = ConvergenceReport {
        config_hash: &hash,
        seed: cfg.seed,
        slope: table.slope,
        rows: &table.rows,
    };
    write_json(&common.out, "convergence_report.json", &report)?;
    println!(
        "convergence: {} sizes, log-log slope {:.3} ({:.2}s)",
        table.rows.len(),
        table.slope,
        runtime
    );
    Ok(())
}

fn cmd_export_heatmap(common: &Common, model: &Option<PathBuf>) -> Result<()> {
    let (cfg, hash) = load_config(common)?;
    let (system, est, _, _, _) = obtain_estimator(&cfg, model)?;
    let spec = experiments::resolve_heatmap(&cfg, &system)?;
    let set = experiments::heatmap_suite(&cfg, &system, &est, &spec, &hash)?;
    write_file(&common.out, "heatmap_h_true.csv", &set.h_true)?;
    write_file(&common.out, "heatmap_h_learned.csv", &set.h_learned)?;
    write_file(&common.out, "heatmap_h_error.csv", &set.h_error)?;
    write_file(&common.out, "heatmap_vf_error.csv", &set.vf_error)?;
    println!(
        "export-heatmap: {}x{} cells on axes {:?}",
        spec.resolution, spec.resolution, spec.axes
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Fit(common) => cmd_fit(common),
        Command::GridSearch(common) => cmd_grid_search(common),
        Command::Evaluate { common, model } => cmd_evaluate(common, &model.model),
        Command::FlowCompare { common, model } => cmd_flow_compare(common, &model.model),
        Command::Convergence(common) => cmd_convergence(common),
        Command::ExportHeatmap { common, model } => cmd_export_heatmap(common, &model.model),
    }
}
