use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use olt_core::data::{load_dataset, synth_gaussian_dataset, SynthSpec};
use olt_core::eval::EvalReport;
use olt_core::experiment::{sweep_csv, CalibrationReport, Experiment, ExperimentConfig, PreparedData};
use olt_core::pipeline::{run_olt_until, Phase, Progress};
use olt_core::scoring::theorem::verify_temperature_separation;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sparse-subnetwork pruning and OOD evaluation for intent classifiers.
#[derive(Debug, Parser)]
#[command(name = "olt", version)]
struct Cli {
    /// Experiment config (flat JSON; every key optional).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian dataset in the JSON-lines format.
    Generate(GenerateArgs),
    /// Finetune the dense model.
    Train,
    /// Learn gates and threshold them into the mask.
    Prune,
    /// Retrain the masked network from its initialization.
    Retrain,
    /// Evaluate dense and pruned models under every configured scorer.
    Eval,
    /// Temperature sweep of temp-msp on the pruned model.
    Sweep,
    /// Check the temperature-scaling inequality on constructed logit pairs.
    TheoremCheck(TheoremArgs),
    /// Summarize the reports in the output directory.
    Report,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 15)]
    k_ind: usize,
    #[arg(long, default_value_t = 5)]
    k_ood: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0.25)]
    spread: f64,
    /// Destination file; defaults to the config's dataset path.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TheoremArgs {
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [3, 10, 150])]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.5, 2.0, 10.0, 100.0])]
    temperatures: Vec<f64>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_phases(cfg: &ExperimentConfig, last: Phase) -> Result<Progress> {
    let dataset = load_dataset(&cfg.dataset).with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    let data = PreparedData::new(cfg, &dataset)?;
    let progress = run_olt_until(
        &cfg.pipeline(),
        &data.train,
        data.num_classes(),
        Some(&cfg.checkpoint_dir()),
        last,
    )?;
    let resumed: Vec<&str> = progress.resumed.iter().map(|p| p.name()).collect();
    println!(
        "completed phase {} (restored from checkpoints: {})",
        progress.completed.name(),
        if resumed.is_empty() { "none".to_string() } else { resumed.join(", ") }
    );
    if let Some(s) = progress.sparsity {
        println!("sparsity {s:.4}");
    }
    println!("checkpoints in {}", cfg.checkpoint_dir().display());
    Ok(progress)
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let spec = SynthSpec {
        k_ind: args.k_ind,
        k_ood: args.k_ood,
        dim: args.dim,
        n_per_class: args.n_per_class,
        spread: args.spread,
        seed: cfg.seed,
    };
    let dataset = synth_gaussian_dataset(&spec)?;
    let path = args.output.clone().unwrap_or_else(|| cfg.dataset.clone());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    dataset.write_jsonl(&path)?;
    println!("wrote {} examples to {}", dataset.len(), path.display());
    Ok(())
}

fn eval(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let exp = Experiment::prepare(&cfg)?;
    let reports = exp.write_all(&cfg.out)?;
    print_reports(&reports);
    println!("wrote {} reports under {}", reports.len(), cfg.out.display());
    Ok(())
}

fn sweep(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let exp = Experiment::prepare(&cfg)?;
    let rows = exp.temperature_sweep(&cfg.sweep_temperatures)?;
    let csv = sweep_csv(&rows);
    let path = cfg.out.join("sweep").join("olt-temp-msp.csv");
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

fn theorem_check(cli: &Cli, args: &TheoremArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = verify_temperature_separation(args.pairs, &args.ks, &args.temperatures, false, &mut rng)?;
    println!("{:>5} {:>9} {:>7} {:>10} {:>12}", "k", "T", "pairs", "violations", "worst_gap");
    for c in &report.cells {
        println!(
            "{:>5} {:>9} {:>7} {:>10} {:>12.3e}",
            c.k, c.temperature, c.pairs, c.violations, c.worst_gap
        );
    }
    println!("max |MSP(A;1) - MSP(B;1)| = {:.3e}", report.max_equality_error);
    if report.violations() > 0 {
        bail!("{} violations", report.violations());
    }
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    println!(
        "{:<8} {:<12} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "model", "scorer", "T", "acc", "auroc", "tnr95", "ece", "ind_acc"
    );
    for r in reports {
        println!(
            "{:<8} {:<12} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.model, r.scorer, r.temperature, r.acc, r.auroc, r.tnr95, r.ece, r.ind_accuracy
        );
    }
}

fn report(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cfg.out.join("reports");
    let mut paths = json_files(&dir)?;
    paths.sort();
    let (mut evals, mut cals) = (Vec::new(), Vec::new());
    for path in &paths {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(c) = serde_json::from_str::<CalibrationReport>(&raw) {
            cals.push(c);
        } else {
            let r: EvalReport = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
            r.validate()?;
            evals.push(r);
        }
    }
    if evals.is_empty() {
        bail!("no reports found in {}; run `olt eval` first", dir.display());
    }
    print_reports(&evals);
    if !cals.is_empty() {
        println!();
        println!("{:<8} {:>9} {:>7} {:>10} {:>13}", "model", "fitted_T", "ece", "scaled_ece", "ood_mean_conf");
        for c in &cals {
            println!(
                "{:<8} {:>9.4} {:>7.4} {:>10.4} {:>13.4}",
                c.model, c.fitted_temperature, c.ece, c.scaled_ece, c.ood_mean_confidence
            );
        }
    }
    Ok(())
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(out)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => generate(&cli, args),
        Command::Train => run_phases(&load_config(&cli)?, Phase::Dense).map(drop),
        Command::Prune => run_phases(&load_config(&cli)?, Phase::Subnetwork).map(drop),
        Command::Retrain => run_phases(&load_config(&cli)?, Phase::Olt).map(drop),
        Command::Eval => eval(&cli),
        Command::Sweep => sweep(&cli),
        Command::TheoremCheck(args) => theorem_check(&cli, args),
        Command::Report => report(&cli),
    }
}
