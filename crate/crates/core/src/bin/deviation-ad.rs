use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deviation_ad::evaluation::{run_ablation, run_sweep, SweepSpec};
use deviation_ad::experiment::{evaluate_run, run_experiment, ExperimentConfig};
use deviation_ad::reweighting::DivergenceKind;
use deviation_ad::trainer::AblationVariant;

#[derive(Parser)]
#[command(version, about = "Anomaly detection training under a contaminated normal set")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contaminate, train and evaluate one run.
    Train(TrainArgs),
    /// Re-score the final checkpoint of a run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a grid described by a YAML sweep spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run the loss-variant grid described by a YAML sweep spec.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// YAML file with base settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mvtec, visa or toy.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    texture_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn into_config(self) -> deviation_ad::Result<(ExperimentConfig, PathBuf)> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_yaml_file(path)?,
            None if self.dataset.as_deref() == Some("toy") => ExperimentConfig::toy(self.seed.unwrap_or(0)),
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.dataset {
            c.dataset = v;
        }
        if let Some(v) = self.data_root {
            c.data_root = Some(v);
        }
        if let Some(v) = self.category {
            c.category = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.divergence {
            c.divergence = v.parse::<DivergenceKind>()?;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.variant {
            c.variant = v.parse::<AblationVariant>()?;
        }
        if let Some(v) = self.texture_dir {
            c.texture_dir = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
            c.toy.seed = v;
        }
        Ok((c, self.out))
    }
}

fn run(cli: Cli) -> deviation_ad::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let (config, out) = args.into_config()?;
            let r = run_experiment(&config, Some(&out))?.report;
            println!(
                "{} {} eps={} seed={}: AUC-ROC {:.4}, AUC-PR {:.4}",
                r.dataset, r.category, r.epsilon, r.seed, r.auc_roc, r.auc_pr
            );
            println!("run directory: {}", out.display());
        }
        Command::Evaluate { run } => {
            let r = evaluate_run(&run)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Sweep { spec } => {
            let spec = SweepSpec::from_yaml_file(&spec)?;
            let outcome = run_sweep(&spec)?;
            let failed = outcome.reports.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} cells ({failed} failed); results in {}",
                outcome.reports.len(),
                spec.out.display()
            );
        }
        Command::Ablate { spec } => {
            let spec = SweepSpec::from_yaml_file(&spec)?;
            run_ablation(&spec)?;
            let table = std::fs::read_to_string(spec.out.join("ablation.md")).unwrap_or_default();
            println!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
