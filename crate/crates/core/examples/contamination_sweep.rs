//! Sweep the contamination ratio on the toy task and write tables and plots.
//!
//! ```sh
//! cargo run --release --example contamination_sweep -- [out_dir]
//! ```
//!
//! Uses a reduced toy (32 px, 2 epochs) so the grid finishes in a few minutes on CPU.

use std::path::PathBuf;

use deviation_ad::evaluation::{run_sweep, SweepSpec};
use deviation_ad::experiment::ExperimentConfig;

fn main() -> deviation_ad::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/contamination_sweep".into()));
    let mut base = ExperimentConfig::toy(0);
    base.toy.resolution = 32;
    base.toy.n_train = 40;
    base.epochs = 2;
    base.burn_in = 1;
    base.m_reference = 500;
    let spec = SweepSpec {
        base,
        categories: vec!["blobs".into()],
        epsilons: vec![0.0, 0.1, 0.2],
        seeds: vec![0],
        out,
        ..SweepSpec::default()
    };
    let outcome = run_sweep(&spec)?;
    for r in &outcome.reports {
        match &r.error {
            None => println!("eps {:.2}: AUC-ROC {:.4}, AUC-PR {:.4}", r.epsilon, r.auc_roc, r.auc_pr),
            Some(e) => println!("eps {:.2}: failed: {e}", r.epsilon),
        }
    }
    println!("tables and plots in {}", spec.out.display());
    Ok(())
}
