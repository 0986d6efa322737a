//! Build the detector and inspect the feature and head shapes for one batch.
//!
//! ```sh
//! cargo run --example feature_encoder -- [resnet18|tiny]
//! ```

use burn::backend::NdArray;
use burn::tensor::{Distribution, Tensor};
use deviation_ad::model::{AnomalyModel, ModelConfig};

type B = NdArray<f32>;

fn main() -> deviation_ad::Result<()> {
    let config = match std::env::args().nth(1).as_deref() {
        Some("tiny") => ModelConfig::tiny(64, 8),
        _ => ModelConfig::default(),
    };
    let device = Default::default();
    let model = AnomalyModel::<B>::new(&config, 0, &device)?;
    let r = config.encoder.input_resolution;
    let images = Tensor::<B, 4>::random([2, 3, r, r], Distribution::Uniform(0.0, 1.0), &device);

    let features = model.encode(images.clone());
    println!("backbone {:?}, stages {:?}", config.encoder.backbone, config.encoder.stages);
    println!("fused features  {:?}", features.f_co.dims());
    println!("last stage      {:?}", features.f_last.dims());

    let out = model.forward(images, true);
    println!("score map       {:?}", out.score_map.dims());
    println!("top-K scores    {:?}", out.psi_k.into_data().to_vec::<f32>().unwrap_or_default());
    println!("probabilities   {:?}", out.prob.into_data().to_vec::<f32>().unwrap_or_default());
    if let Some(seg) = out.seg {
        println!("segmentation    {:?}", seg.dims());
    }
    Ok(())
}
