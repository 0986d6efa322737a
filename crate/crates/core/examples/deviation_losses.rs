//! Evaluate the scalar losses and k-means pseudo labels on a handful of scores.
//!
//! ```sh
//! cargo run --example deviation_losses
//! ```

use deviation_ad::losses::{bce_loss, deviation_loss, kmeans_soft_targets, sample_reference_stats, soft_deviation_loss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deviation_ad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stats = sample_reference_stats(5000, 0.0, 1.0, &mut rng)?;
    println!("reference: mu {:.4}, sigma {:.4} from {} draws", stats.mu_s, stats.sigma_s, stats.m);

    let gamma = 5.0;
    let scores = [-0.3, 0.1, 0.4, 2.5, 6.0];
    let probs = [0.05, 0.2, 0.5, 0.8, 0.99];
    println!("{:>7} {:>6} {:>9} {:>9} {:>9} {:>8}", "score", "p", "dev(y=0)", "dev(y=1)", "soft", "bce(0)");
    for (&s, &p) in scores.iter().zip(&probs) {
        println!(
            "{s:>7.2} {p:>6.2} {:>9.4} {:>9.4} {:>9.4} {:>8.4}",
            deviation_loss(s, 0, &stats, gamma),
            deviation_loss(s, 1, &stats, gamma),
            soft_deviation_loss(s, p, &stats, gamma),
            bce_loss(p, 0)
        );
    }
    let y = [0u8, 0, 0, 0, 1];
    println!("k-means targets for {scores:?}: {:?}", kmeans_soft_targets(&scores, &y));
    Ok(())
}
