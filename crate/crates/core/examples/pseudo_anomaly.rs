//! Synthesize pseudo-anomalies on toy normals and save image/mask pairs as PNG.
//!
//! ```sh
//! cargo run --example pseudo_anomaly -- [out_dir] [texture_dir]
//! ```
//!
//! Without `texture_dir` the procedural texture source is used.

use std::path::PathBuf;

use deviation_ad::data::{toy_category, ToyConfig};
use deviation_ad::noise_synth::{AnomalySource, BlendSpec, ProceduralTextures, PseudoAnomalyGenerator, TextureCorpus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deviation_ad::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/pseudo_anomaly".into()));
    let source: Box<dyn AnomalySource> = match args.next() {
        Some(dir) => Box::new(TextureCorpus::open(dir)?),
        None => Box::new(ProceduralTextures),
    };
    let generator = PseudoAnomalyGenerator::new(BlendSpec::default(), source)?;
    let data = toy_category(&ToyConfig { resolution: 96, n_train: 6, ..ToyConfig::default() })?;
    std::fs::create_dir_all(&out).map_err(|source| deviation_ad::Error::Io { path: out.clone(), source })?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, normal) in data.train_normals.iter().enumerate() {
        let pa = generator.generate(&normal.image, &mut rng)?;
        normal.image.save_png(&out.join(format!("{i:02}_normal.png")))?;
        pa.image.save_png(&out.join(format!("{i:02}_pseudo.png")))?;
        pa.mask.to_image().save_png(&out.join(format!("{i:02}_mask.png")))?;
        println!("{i:02}: beta {:.2}, mask covers {:.1}%", pa.beta, 100.0 * pa.mask.fraction());
    }
    println!("wrote {} triples to {}", data.train_normals.len(), out.display());
    Ok(())
}
