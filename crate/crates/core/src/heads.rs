//! The three heads fed by the encoder: per-location anomaly scorer with top-K pooling,
//! the anomaly classification head, and the segmentation decoder.

use burn::module::Module;
use burn::nn::{BatchNorm, BatchNormConfig, Linear};
use burn::tensor::activation::{relu, sigmoid};
use burn::tensor::backend::Backend;
use burn::tensor::{Int, Tensor, TensorData};
use rand::RngCore;

use crate::backbone::resize_bilinear;
use crate::conv::{uniform_fan_in, Conv};
use crate::error::{Error, Result};

/// Flattened per-location anomaly scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap(pub Vec<f64>);

impl ScoreMap {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean of the K largest entries of a [`ScoreMap`].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct AnomalyScore(pub f64);

/// `K = max(1, ⌈fraction · n⌉)`.
pub fn top_k_count(n: usize, k_fraction: f64) -> Result<usize> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::arg(format!("k_fraction {k_fraction} outside (0, 1]")));
    }
    // absorb representation error such as 0.1 * 30 = 3.0000000000000004
    let k = (k_fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(n.max(1)))
}

/// Indices of the `k` largest values, ties resolved by position (stable descending sort).
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

/// Average of the `⌈k_fraction · n⌉` highest scores.
pub fn topk_score(map: &ScoreMap, k_fraction: f64) -> Result<AnomalyScore> {
    if map.is_empty() {
        return Err(Error::arg("score map is empty"));
    }
    let k = top_k_count(map.len(), k_fraction)?;
    let sum: f64 = top_k_indices(&map.0, k).iter().map(|&i| map.0[i]).sum();
    Ok(AnomalyScore(sum / k as f64))
}

/// Batched, differentiable top-K mean of `[B, N]` scores, returning `[B]`. The selection is
/// made on the values; gradient flows as `1/K` into the selected entries.
pub fn topk_mean<B: Backend>(scores: Tensor<B, 2>, k_fraction: f64) -> Result<Tensor<B, 1>> {
    let [batch, n] = scores.dims();
    let k = top_k_count(n, k_fraction)?;
    let values: Vec<f64> = scores.clone().into_data().iter::<f64>().collect();
    let mut idx = Vec::with_capacity(batch * k);
    for row in values.chunks(n) {
        idx.extend(top_k_indices(row, k).into_iter().map(|i| i as i64));
    }
    let idx = Tensor::<B, 2, Int>::from_data(TensorData::new(idx, [batch, k]), &scores.device());
    Ok(scores.gather(1, idx).mean_dim(1).reshape([batch]))
}

/// Two 1×1 convolutions with a ReLU between: one score per spatial location.
#[derive(Module, Debug)]
pub struct Scorer<B: Backend> {
    hidden: Conv<B>,
    out: Conv<B>,
}

impl<B: Backend> Scorer<B> {
    pub fn new(channels: usize, hidden: usize, rng: &mut dyn RngCore, device: &B::Device) -> Self {
        Self {
            hidden: Conv::new(channels, hidden, 1, 1, 0, true, rng, device),
            out: Conv::new(hidden, 1, 1, 1, 0, true, rng, device),
        }
    }

    /// `[B, C, H, W] → [B, H·W]`
    pub fn forward(&self, f_co: Tensor<B, 4>) -> Tensor<B, 2> {
        let [b, _, h, w] = f_co.dims();
        self.out
            .forward(relu(self.hidden.forward(f_co)))
            .reshape([b, h * w])
    }
}

/// Global average pooling, a linear map and a logistic squashing.
#[derive(Module, Debug)]
pub struct ClassifierHead<B: Backend> {
    linear: Linear<B>,
}

/// Probabilities are kept inside `[ε, 1 − ε]` so they stay in the open unit interval in f32.
pub const PROB_EPS: f64 = 1e-7;

impl<B: Backend> ClassifierHead<B> {
    pub fn new(channels: usize, rng: &mut dyn RngCore, device: &B::Device) -> Self {
        Self {
            linear: Linear {
                weight: uniform_fan_in([channels, 1], channels, rng, device),
                bias: Some(uniform_fan_in([1], channels, rng, device)),
            },
        }
    }

    pub fn logits(&self, f_last: Tensor<B, 4>) -> Tensor<B, 1> {
        let [b, c, h, w] = f_last.dims();
        let pooled = f_last.reshape([b, c, h * w]).mean_dim(2).reshape([b, c]);
        self.linear.forward(pooled).reshape([b])
    }

    /// `[B, c, h, w] → [B]` probabilities in `(0, 1)`.
    pub fn forward(&self, f_last: Tensor<B, 4>) -> Tensor<B, 1> {
        sigmoid(self.logits(f_last)).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }
}

#[derive(Module, Debug)]
pub struct UpBlock<B: Backend> {
    conv: Conv<B>,
    bn: BatchNorm<B, 2>,
}

/// Three resize+conv blocks from the fused map up to the input resolution, then a 1×1
/// projection and a logistic output.
#[derive(Module, Debug)]
pub struct SegDecoder<B: Backend> {
    blocks: Vec<UpBlock<B>>,
    head: Conv<B>,
}

impl<B: Backend> SegDecoder<B> {
    pub fn new(channels: usize, width: usize, rng: &mut dyn RngCore, device: &B::Device) -> Self {
        let widths = [width, (width / 2).max(1), (width / 4).max(1)];
        let mut cin = channels;
        let blocks = widths
            .iter()
            .map(|&cout| {
                let block = UpBlock {
                    conv: Conv::new(cin, cout, 3, 1, 1, false, rng, device),
                    bn: BatchNormConfig::new(cout).init(device),
                };
                cin = cout;
                block
            })
            .collect();
        Self {
            blocks,
            head: Conv::new(cin, 1, 1, 1, 0, true, rng, device),
        }
    }

    /// `[B, C, H, W] → [B, 1, out_h, out_w]` with values in `(0, 1)`.
    pub fn forward(&self, f_co: Tensor<B, 4>, out_h: usize, out_w: usize) -> Tensor<B, 4> {
        let [_, _, h, w] = f_co.dims();
        let steps = self.blocks.len();
        let mut x = f_co;
        for (i, block) in self.blocks.iter().enumerate() {
            let t = (i + 1) as f64 / steps as f64;
            let th = (h as f64 * (out_h as f64 / h as f64).powf(t)).round() as usize;
            let tw = (w as f64 * (out_w as f64 / w as f64).powf(t)).round() as usize;
            let (th, tw) = if i + 1 == steps { (out_h, out_w) } else { (th.max(1), tw.max(1)) };
            x = resize_bilinear(x, th, tw);
            x = relu(block.bn.forward(block.conv.forward(x)));
        }
        sigmoid(self.head.forward(x))
    }
}
