//! Command-line front end: experiment runs, single-task upper bounds,
//! config sweeps, checkpoint evaluation, gradient audits and report
//! aggregation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gradcal::synth::DropModality;
use gradcal::train::{
    gradient_audit_run, read_baseline_metrics, run_experiment, run_upper_bounds, CalibrationMode,
    ExperimentConfig, LossWeights, RunReport,
};
use gradcal::{Network, SplitScheme, TaskMetrics};

#[derive(Parser)]
#[command(
    name = "gradcal",
    version,
    about = "Gradient calibration lab for toy multi-modal multi-task training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write metrics.jsonl, summary.csv,
    /// checkpoint.json and report.json into the output directory.
    Run(RunArgs),
    /// Train the two single-task variants and write their metrics as the
    /// per-task upper bounds file.
    UpperBounds(UpperBoundsArgs),
    /// Run a list of named experiments from one sweep file.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on freshly generated evaluation data,
    /// optionally dropping one modality.
    Eval(EvalArgs),
    /// Audit backward gradients against central finite differences on
    /// randomly drawn toy networks.
    GradCheck(GradCheckArgs),
    /// Aggregate run reports into one comparison table.
    Report(ReportArgs),
}

fn parse_mode(s: &str) -> Result<CalibrationMode, String> {
    match s {
        "none" => Ok(CalibrationMode::None),
        "intra" => Ok(CalibrationMode::Intra),
        "inter" => Ok(CalibrationMode::Inter),
        "both" => Ok(CalibrationMode::Both),
        other => Err(format!(
            "unknown calibration {other:?} (expected none|intra|inter|both)"
        )),
    }
}

fn parse_split(s: &str) -> Result<SplitScheme, String> {
    match s {
        "full" => Ok(SplitScheme::Full),
        "disjoint-normal" => Ok(SplitScheme::DisjointNormal),
        "disjoint-balance" => Ok(SplitScheme::DisjointBalance),
        other => Err(format!(
            "unknown split {other:?} (expected full|disjoint-normal|disjoint-balance)"
        )),
    }
}

fn parse_drop(s: &str) -> Result<DropModality, String> {
    match s {
        "none" => Ok(DropModality::None),
        "lidar" => Ok(DropModality::Lidar),
        "image" => Ok(DropModality::Image),
        other => Err(format!(
            "unknown drop {other:?} (expected none|lidar|image)"
        )),
    }
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; omitted fields take the benchmark defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for training, network init and data generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    calibration: Option<CalibrationMode>,
    /// Fixed det:seg loss weights, e.g. 1:5.
    #[arg(long, value_parser = parse_weights)]
    loss_weights: Option<LossWeights>,
    #[arg(long, value_parser = parse_split)]
    split: Option<SplitScheme>,
    /// Per-task upper-bound metrics; enables the delta-MTL field of the
    /// report.
    #[arg(long)]
    baseline_metrics: Option<PathBuf>,
}

#[derive(Args)]
struct UpperBoundsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving upper_bounds.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep file: {"experiments": [{"name", "config"}, ...]}.
    #[arg(long)]
    config: PathBuf,
    /// Root directory; each experiment writes into <out>/<name>/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    baseline_metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config describing the evaluation data (defaults to the benchmark).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_drop, default_value = "none")]
    drop: DropModality,
}

#[derive(Args)]
struct GradCheckArgs {
    /// How many random networks to audit.
    #[arg(long, default_value_t = 20)]
    networks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Also audit the configured trainer loss end to end.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing report.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Recompute delta-MTL against this upper-bounds file when a report
    /// lacks one.
    #[arg(long)]
    baseline_metrics: Option<PathBuf>,
    /// Optional CSV destination for the aggregate table.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Sweep file schema.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    experiments: Vec<SweepEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepEntry {
    name: String,
    config: ExperimentConfig,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            ExperimentConfig::from_file(p).with_context(|| format!("loading {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_run_overrides(mut cfg: ExperimentConfig, args: &RunArgs) -> ExperimentConfig {
    if let Some(seed) = args.seed {
        cfg = cfg.with_master_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(mode) = args.calibration {
        cfg.calibration = mode;
    }
    if let Some(w) = args.loss_weights {
        cfg.loss_weights = w;
    }
    if let Some(split) = args.split {
        cfg.split = split;
    }
    cfg
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = apply_run_overrides(load_config(args.config.as_ref())?, &args);
    let baseline = args
        .baseline_metrics
        .as_ref()
        .map(|p| read_baseline_metrics(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let report = run_experiment(&cfg, baseline.as_ref())?;
    let out = cfg.out_dir.expect("validated by run_experiment");
    println!(
        "run complete: {} steps, det_accuracy={:.4}, seg_iou={:.4}{}",
        report.steps,
        report.final_metrics.det_accuracy,
        report.final_metrics.seg_iou,
        report
            .delta_mtl
            .map(|d| format!(", delta_mtl={:.4}", d))
            .unwrap_or_default()
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_upper_bounds(args: UpperBoundsArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_master_seed(seed);
    }
    let path = args.out.join("upper_bounds.json");
    let bounds = run_upper_bounds(&cfg, &path)?;
    println!(
        "upper bounds: det_accuracy={:.4}, seg_iou={:.4}",
        bounds.det_accuracy, bounds.seg_iou
    );
    println!("written to {}", path.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let sweep: SweepFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    if sweep.experiments.is_empty() {
        bail!("sweep file lists no experiments");
    }
    let baseline = args
        .baseline_metrics
        .as_ref()
        .map(|p| read_baseline_metrics(p))
        .transpose()?;
    for entry in &sweep.experiments {
        let mut cfg = entry.config.clone();
        cfg.out_dir = Some(args.out.join(&entry.name));
        let report = run_experiment(&cfg, baseline.as_ref())?;
        println!(
            "{}: det_accuracy={:.4} seg_iou={:.4}{}",
            entry.name,
            report.final_metrics.det_accuracy,
            report.final_metrics.seg_iou,
            report
                .delta_mtl
                .map(|d| format!(" delta_mtl={:.4}", d))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_master_seed(seed);
    }
    let net = Network::load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if net.config() != &cfg.net {
        bail!(
            "checkpoint network config does not match the experiment config; \
             evaluation data would be inconsistent"
        );
    }
    let (_, eval_set) = gradcal::train::prepare_datasets(&cfg)?;
    let metrics = gradcal::train::evaluate(&net, &eval_set, args.drop, cfg.batch_size)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let report = gradcal::gradcheck::audit_random_networks(args.networks, args.seed, args.step)?;
    let ok = report.passes(1e-5, 1e-8);
    println!(
        "gradient audit: {} networks, {} entries, max rel error {:.3e}, max near-zero abs error {:.3e} -> {}",
        report.networks,
        report.entries_checked,
        report.max_rel_error,
        report.max_abs_error_near_zero,
        if ok { "PASS" } else { "FAIL" }
    );
    let mut all_ok = ok;
    if let Some(path) = &args.config {
        let cfg = ExperimentConfig::from_file(path)?;
        let trainer = gradient_audit_run(&cfg, args.step)?;
        let t_ok = trainer.passes(1e-5, 1e-8);
        println!(
            "trainer-loss audit: max rel error {:.3e}, max near-zero abs error {:.3e} -> {}",
            trainer.max_rel_error,
            trainer.max_abs_error_near_zero,
            if t_ok { "PASS" } else { "FAIL" }
        );
        all_ok = all_ok && t_ok;
    }
    if !all_ok {
        bail!("gradient audit failed");
    }
    Ok(())
}

fn load_report(dir: &Path) -> Result<RunReport> {
    RunReport::from_file(&dir.join("report.json"))
        .with_context(|| format!("reading {}", dir.join("report.json").display()))
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let baseline: Option<TaskMetrics> = args
        .baseline_metrics
        .as_ref()
        .map(|p| read_baseline_metrics(p))
        .transpose()?;
    let mut rows = Vec::new();
    for dir in &args.runs {
        let report = load_report(dir)?;
        let delta = match (report.delta_mtl, &baseline) {
            (Some(d), _) => Some(d),
            (None, Some(b)) => Some(gradcal::metrics::delta_mtl_pair(
                &report.final_metrics,
                b,
                1,
            )?),
            (None, None) => None,
        };
        rows.push((
            dir.display().to_string(),
            report.config.calibration,
            report.config.loss_weights,
            report.config.split,
            report.final_metrics,
            delta,
        ));
    }

    println!(
        "{:<28} {:>6} {:>8} {:>17} {:>8} {:>8} {:>10}",
        "run", "calib", "weights", "split", "det_acc", "seg_iou", "delta_mtl"
    );
    let mut csv = String::from("run,calibration,loss_weights,split,det_accuracy,seg_iou,delta_mtl\n");
    for (name, mode, weights, split, metrics, delta) in &rows {
        let delta_text = delta.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<28} {:>6} {:>8} {:>17} {:>8.4} {:>8.4} {:>10}",
            name,
            mode.as_str(),
            weights.to_string(),
            split.as_str(),
            metrics.det_accuracy,
            metrics.seg_iou,
            delta_text
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            mode.as_str(),
            weights,
            split.as_str(),
            metrics.det_accuracy,
            metrics.seg_iou,
            delta.map(|d| d.to_string()).unwrap_or_else(|| "-".into())
        ));
    }
    if let Some(path) = &args.out {
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        println!("table written to {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::UpperBounds(args) => cmd_upper_bounds(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::Report(args) => cmd_report(args),
    }
}
