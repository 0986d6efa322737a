//! Compare instance weights under each divergence for a batch with two outlying losses.
//!
//! ```sh
//! cargo run --example instance_reweighting -- [lambda]
//! ```

use deviation_ad::reweighting::{reweighted_objective, DivergenceSpec};

fn main() -> deviation_ad::Result<()> {
    let lambda: f64 = std::env::args().nth(1).map_or(0.1, |s| s.parse().expect("lambda must be a number"));
    let losses = [0.2, 0.25, 0.3, 0.22, 0.28, 1.8, 2.4, 0.26];
    println!("losses {losses:?}");
    let specs = [
        ("KL", DivergenceSpec::kl(lambda)),
        ("reverse KL", DivergenceSpec::reverse_kl(lambda)),
        ("alpha 0.1", DivergenceSpec::alpha(0.1, lambda)),
        ("alpha 0.5", DivergenceSpec::alpha(0.5, lambda)),
    ];
    for (name, spec) in &specs {
        let w = spec.weights(&losses)?;
        let shown: Vec<String> = w.as_slice().iter().map(|v| format!("{v:.3}")).collect();
        println!("{name:>11}: [{}]  weighted loss {:.4}", shown.join(", "), w.dot(&losses));
    }
    let bce = [0.1, 0.1, 0.2, 0.1, 0.1, 0.9, 1.1, 0.1];
    let seg = [0.05; 8];
    let objective = reweighted_objective(&losses, &bce, &seg, &specs[2].1)?;
    println!("full objective under alpha 0.1: {:.4}", objective.value);
    Ok(())
}
