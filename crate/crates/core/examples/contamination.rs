//! Contaminate a toy training pool and write the manifest.
//!
//! ```sh
//! cargo run --example contamination -- [epsilon] [manifest.json]
//! ```

use std::path::PathBuf;

use deviation_ad::data::{inject_contamination, toy_category, ContaminationSpec, ToyConfig};

fn main() -> deviation_ad::Result<()> {
    let mut args = std::env::args().skip(1);
    let epsilon: f64 = args.next().map_or(0.1, |s| s.parse().expect("epsilon must be a number"));
    let path = PathBuf::from(args.next().unwrap_or_else(|| "contamination_manifest.json".into()));
    let data = toy_category(&ToyConfig::default())?;
    let spec = ContaminationSpec { epsilon, ..ContaminationSpec::default() };
    let set = inject_contamination(&data.train_normals, &data.test_anomalies, &spec)?;
    let m = &set.manifest;
    println!(
        "{} of {} training images are disguised anomalies; {} also appear in the test set",
        m.n_contaminated, m.n, m.test_overlap
    );
    for e in m.entries.iter().filter(|e| e.y_true == 1) {
        println!("  slot {:>3} <- {}", e.index, e.source);
    }
    m.save(&path)?;
    println!("manifest written to {}", path.display());
    Ok(())
}
