//! Compare the loss variants on the toy task and print the ablation table.
//!
//! ```sh
//! cargo run --release --example ablation -- [out_dir]
//! ```

use std::path::PathBuf;

use deviation_ad::evaluation::{run_ablation, SweepSpec};
use deviation_ad::experiment::ExperimentConfig;
use deviation_ad::trainer::AblationVariant;

fn main() -> deviation_ad::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/ablation".into()));
    let mut base = ExperimentConfig::toy(0);
    base.toy.resolution = 32;
    base.toy.n_train = 40;
    base.epochs = 2;
    base.burn_in = 1;
    base.m_reference = 500;
    let spec = SweepSpec {
        base,
        categories: vec!["blobs".into()],
        epsilons: vec![0.1],
        seeds: vec![0],
        variants: AblationVariant::ALL.to_vec(),
        out,
        ..SweepSpec::default()
    };
    run_ablation(&spec)?;
    let path = spec.out.join("ablation.md");
    let table = std::fs::read_to_string(&path).map_err(|source| deviation_ad::Error::Io { path, source })?;
    println!("{table}");
    Ok(())
}
