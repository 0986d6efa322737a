//! Train and evaluate on the synthetic blob task.
//!
//! ```sh
//! cargo run --release --example train_toy -- [seed] [variant] [out_dir]
//! ```

use std::path::PathBuf;

use deviation_ad::experiment::{run_experiment, ExperimentConfig};

fn main() -> deviation_ad::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let mut config = ExperimentConfig::toy(seed);
    if let Some(variant) = args.next() {
        config.variant = variant.parse()?;
    }
    let out = args.next().map(PathBuf::from);

    let started = std::time::Instant::now();
    let run = run_experiment(&config, out.as_deref())?;
    let r = &run.report;
    println!(
        "{} seed {}: AUC-ROC {:.4}, AUC-PR {:.4} ({} normal / {} anomalous test images, {:.1}s)",
        r.variant,
        r.seed,
        r.auc_roc,
        r.auc_pr,
        r.n_test_normal,
        r.n_test_anomalous,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
