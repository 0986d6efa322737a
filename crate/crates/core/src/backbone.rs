//! Multi-scale feature encoder: a residual CNN whose selected stage outputs are resized to
//! the largest selected resolution and concatenated along channels.

use std::path::PathBuf;

use burn::module::{Module, ModuleMapper, ParamId};
use burn::nn::pool::{MaxPool2d, MaxPool2dConfig};
use burn::nn::{BatchNorm, BatchNormConfig, PaddingConfig2d};
use burn::tensor::activation::relu;
use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::conv::Conv;
use crate::error::{Error, Result};

/// Channel mean of the classification corpus the reference backbones are pretrained on.
pub const PRETRAIN_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Channel standard deviation matching [`PRETRAIN_MEAN`].
pub const PRETRAIN_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Which residual network to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// The standard 18-layer residual network (64/128/256/512 channels, strides 4/8/16/32).
    Resnet18,
    /// A one-block-per-stage network with a stride-2 stem and no max-pool, for CPU-scale
    /// experiments. Stage widths are `w, 2w, 4w, 8w`; strides 2/4/8/16.
    Tiny { base_width: usize },
}

impl BackboneKind {
    pub fn stage_channels(&self) -> [usize; 4] {
        match *self {
            BackboneKind::Resnet18 => [64, 128, 256, 512],
            BackboneKind::Tiny { base_width: w } => [w, 2 * w, 4 * w, 8 * w],
        }
    }

    fn blocks_per_stage(&self) -> [usize; 4] {
        match self {
            BackboneKind::Resnet18 => [2, 2, 2, 2],
            BackboneKind::Tiny { .. } => [1, 1, 1, 1],
        }
    }

    fn stem_width(&self) -> usize {
        self.stage_channels()[0]
    }

    /// Spatial side length after each of the four stages, for a square input.
    pub fn stage_sizes(&self, input: usize) -> [usize; 4] {
        let conv = |n: usize, k: usize, s: usize, p: usize| {
            if n + 2 * p < k {
                0
            } else {
                (n + 2 * p - k) / s + 1
            }
        };
        let stem = match self {
            BackboneKind::Resnet18 => conv(conv(input, 7, 2, 3), 3, 2, 1),
            BackboneKind::Tiny { .. } => conv(input, 3, 2, 1),
        };
        let s1 = stem;
        let s2 = conv(s1, 3, 2, 1);
        let s3 = conv(s2, 3, 2, 1);
        let s4 = conv(s3, 3, 2, 1);
        if stem == 0 {
            return [0; 4];
        }
        [s1, s2, s3, s4]
    }
}

/// Encoder selection and training mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    /// 1-based stage indices, shallow to deep (`[2, 3, 4]` for Layer2..Layer4).
    pub stages: Vec<usize>,
    pub input_resolution: usize,
    pub finetune: bool,
    /// Optional pretrained parameters (a record written by [`crate::model::save_model`]
    /// style `NamedMpk` recorder for the encoder alone).
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Resnet18,
            stages: vec![2, 3, 4],
            input_resolution: 224,
            finetune: true,
            weights: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("at least one encoder stage must be selected"));
        }
        if self.stages.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err(Error::config(format!(
                "stages must be drawn from 1..=4, got {:?}",
                self.stages
            )));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "stages must be strictly increasing (shallow to deep), got {:?}",
                self.stages
            )));
        }
        if let BackboneKind::Tiny { base_width: 0 } = self.backbone {
            return Err(Error::config("tiny backbone needs a positive base_width"));
        }
        let sizes = self.backbone.stage_sizes(self.input_resolution);
        if sizes[3] == 0 {
            return Err(Error::config(format!(
                "input resolution {} collapses the deepest stage to zero size",
                self.input_resolution
            )));
        }
        Ok(())
    }

    /// Channel count of the concatenated map: the sum over selected stages.
    pub fn fused_channels(&self) -> usize {
        let ch = self.backbone.stage_channels();
        self.stages.iter().map(|&s| ch[s - 1]).sum()
    }

    /// Spatial side of the concatenated map: the largest selected stage.
    pub fn fused_size(&self) -> usize {
        let sizes = self.backbone.stage_sizes(self.input_resolution);
        self.stages.iter().map(|&s| sizes[s - 1]).max().unwrap_or(0)
    }

    pub fn last_channels(&self) -> usize {
        self.backbone.stage_channels()[3]
    }

    pub fn last_size(&self) -> usize {
        self.backbone.stage_sizes(self.input_resolution)[3]
    }
}

#[derive(Module, Debug)]
pub struct ConvBn<B: Backend> {
    conv: Conv<B>,
    bn: BatchNorm<B, 2>,
}

impl<B: Backend> ConvBn<B> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut dyn RngCore, device: &B::Device) -> Self {
        let pad = k / 2;
        Self {
            conv: Conv::new(cin, cout, k, stride, pad, false, rng, device),
            bn: BatchNormConfig::new(cout).init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.bn.forward(self.conv.forward(x))
    }
}

#[derive(Module, Debug)]
pub struct BasicBlock<B: Backend> {
    first: ConvBn<B>,
    second: ConvBn<B>,
    shortcut: Option<ConvBn<B>>,
}

impl<B: Backend> BasicBlock<B> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut dyn RngCore, device: &B::Device) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, rng, device));
        Self {
            first: ConvBn::new(cin, cout, 3, stride, rng, device),
            second: ConvBn::new(cout, cout, 3, 1, rng, device),
            shortcut,
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let identity = match &self.shortcut {
            Some(s) => s.forward(x.clone()),
            None => x.clone(),
        };
        let out = relu(self.first.forward(x));
        relu(self.second.forward(out) + identity)
    }
}

#[derive(Module, Debug)]
pub struct Stage<B: Backend> {
    blocks: Vec<BasicBlock<B>>,
}

impl<B: Backend> Stage<B> {
    fn forward(&self, mut x: Tensor<B, 4>) -> Tensor<B, 4> {
        for block in &self.blocks {
            x = block.forward(x);
        }
        x
    }
}

/// A four-stage residual network returning every stage output.
#[derive(Module, Debug)]
pub struct ResNet<B: Backend> {
    stem: ConvBn<B>,
    pool: Option<MaxPool2d>,
    stages: Vec<Stage<B>>,
}

impl<B: Backend> ResNet<B> {
    pub fn new(kind: BackboneKind, rng: &mut dyn RngCore, device: &B::Device) -> Self {
        let channels = kind.stage_channels();
        let blocks = kind.blocks_per_stage();
        let (stem, pool) = match kind {
            BackboneKind::Resnet18 => (
                ConvBn::new(3, kind.stem_width(), 7, 2, rng, device),
                Some(
                    MaxPool2dConfig::new([3, 3])
                        .with_strides([2, 2])
                        .with_padding(PaddingConfig2d::Explicit(1, 1))
                        .init(),
                ),
            ),
            BackboneKind::Tiny { .. } => (ConvBn::new(3, kind.stem_width(), 3, 2, rng, device), None),
        };
        let mut cin = kind.stem_width();
        let stages = (0..4)
            .map(|i| {
                let stride = if i == 0 { 1 } else { 2 };
                let blocks = (0..blocks[i])
                    .map(|b| {
                        let block = BasicBlock::new(cin, channels[i], if b == 0 { stride } else { 1 }, rng, device);
                        cin = channels[i];
                        block
                    })
                    .collect();
                Stage { blocks }
            })
            .collect();
        Self { stem, pool, stages }
    }

    /// Outputs of stages 1..=4, in order.
    pub fn forward_stages(&self, x: Tensor<B, 4>) -> Vec<Tensor<B, 4>> {
        let mut x = relu(self.stem.forward(x));
        if let Some(pool) = &self.pool {
            x = pool.forward(x);
        }
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(x);
            outs.push(x.clone());
        }
        outs
    }
}

/// Concatenated multi-scale features plus the deepest stage map.
#[derive(Clone, Debug)]
pub struct FeatureBundle<B: Backend> {
    /// `[B, C, H, W]`, `C = Σ c_i` over selected stages, `H×W` the largest selected size.
    pub f_co: Tensor<B, 4>,
    /// `[B, c_last, h_last, w_last]`, the final stage before any pooling or resizing.
    pub f_last: Tensor<B, 4>,
}

/// Bilinear resampling matrix (`out × in`) with half-pixel centers (align-corners off).
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of `[B, C, H, W]` to `[B, C, out_h, out_w]`, expressed as
/// two dense matrix products so it backpropagates on every backend.
pub fn resize_bilinear<B: Backend>(x: Tensor<B, 4>, out_h: usize, out_w: usize) -> Tensor<B, 4> {
    let [b, c, h, w] = x.dims();
    if (h, w) == (out_h, out_w) {
        return x;
    }
    let device = x.device();
    let rw = Tensor::<B, 2>::from_data(
        TensorData::new(bilinear_matrix(w, out_w), [out_w, w]),
        &device,
    );
    let rh = Tensor::<B, 2>::from_data(
        TensorData::new(bilinear_matrix(h, out_h), [out_h, h]),
        &device,
    );
    let x = x.reshape([b * c * h, w]).matmul(rw.transpose());
    let x = x
        .reshape([b, c, h, out_w])
        .swap_dims(2, 3)
        .reshape([b * c * out_w, h])
        .matmul(rh.transpose());
    x.reshape([b, c, out_w, out_h]).swap_dims(2, 3)
}

/// Shift/scale `[B, 3, H, W]` pixels in `[0, 1]` by the pretraining channel statistics.
pub fn normalize_input<B: Backend>(x: Tensor<B, 4>) -> Tensor<B, 4> {
    let device = x.device();
    let mean = Tensor::<B, 1>::from_floats(PRETRAIN_MEAN, &device).reshape([1, 3, 1, 1]);
    let std = Tensor::<B, 1>::from_floats(PRETRAIN_STD, &device).reshape([1, 3, 1, 1]);
    (x - mean) / std
}

/// Backbone plus stage selection.
#[derive(Module, Debug)]
pub struct Encoder<B: Backend> {
    net: ResNet<B>,
    stages: Vec<usize>,
}

impl<B: Backend> Encoder<B> {
    pub fn new(config: &EncoderConfig, rng: &mut dyn RngCore, device: &B::Device) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: ResNet::new(config.backbone, rng, device),
            stages: config.stages.clone(),
        })
    }

    /// Encode `[B, 3, H, W]` images in `[0, 1]`.
    pub fn encode(&self, images: Tensor<B, 4>) -> FeatureBundle<B> {
        let maps = self.net.forward_stages(normalize_input(images));
        let selected: Vec<Tensor<B, 4>> = self.stages.iter().map(|&s| maps[s - 1].clone()).collect();
        let (h, w) = selected.iter().fold((0, 0), |(h, w), m| {
            let [_, _, mh, mw] = m.dims();
            (h.max(mh), w.max(mw))
        });
        let resized: Vec<Tensor<B, 4>> = selected
            .into_iter()
            .map(|m| resize_bilinear(m, h, w))
            .collect();
        let f_co = Tensor::cat(resized, 1);
        let f_last = maps.into_iter().last().expect("four stages");
        FeatureBundle { f_co, f_last }
    }
}

/// Sets `require_grad` on every float tensor it visits. Detaching first turns running
/// statistics that still carry graph history back into leaves.
pub(crate) struct RequireGrad(pub bool);

impl<B: Backend> ModuleMapper<B> for RequireGrad {
    fn map_float<const D: usize>(&mut self, _id: ParamId, tensor: Tensor<B, D>) -> Tensor<B, D> {
        tensor.detach().set_require_grad(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::NdArray;

    type TB = NdArray<f32>;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand::SeedableRng::seed_from_u64(0)
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(7, 28), (14, 28), (28, 28), (5, 3)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f32 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_matches_pointwise_bilinear() {
        // independent per-pixel evaluation with half-pixel centers
        let (h, w, oh, ow) = (3usize, 4usize, 5usize, 7usize);
        let vals: Vec<f32> = (0..h * w).map(|i| ((i * 37) % 11) as f32 / 10.0).collect();
        let dev = Default::default();
        let x = Tensor::<TB, 4>::from_data(TensorData::new(vals.clone(), [1, 1, h, w]), &dev);
        let y: Vec<f32> = resize_bilinear(x, oh, ow).into_data().to_vec().unwrap();
        let coord = |o: usize, n: usize, on: usize| {
            let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(n - 1), s - i0 as f64)
        };
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w, ow);
                let v = |yy: usize, xx: usize| vals[yy * w + xx] as f64;
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                let expect = top * (1.0 - fy) + bot * fy;
                assert!((y[oy * ow + ox] as f64 - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn resize_preserves_constant_maps() {
        let dev = Default::default();
        let x = Tensor::<TB, 4>::full([2, 3, 7, 7], 0.37, &dev);
        let y: Vec<f32> = resize_bilinear(x, 28, 28).into_data().to_vec().unwrap();
        assert!(y.iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn stage_geometry() {
        let r = BackboneKind::Resnet18;
        assert_eq!(r.stage_sizes(224), [56, 28, 14, 7]);
        let t = BackboneKind::Tiny { base_width: 8 };
        assert_eq!(t.stage_sizes(64), [32, 16, 8, 4]);
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.fused_channels(), 896);
        assert_eq!(cfg.fused_size(), 28);
    }

    #[test]
    fn tiny_resolution_rejected() {
        let cfg = EncoderConfig {
            input_resolution: 16,
            ..EncoderConfig::default()
        };
        // 16 -> 8 -> 4 -> 4 -> 2 -> 1 -> 1: still valid for resnet18
        assert!(cfg.validate().is_ok());
        let cfg = EncoderConfig {
            input_resolution: 0,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_unordered_stages() {
        let cfg = EncoderConfig {
            stages: vec![3, 2],
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            stages: vec![],
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_stage_is_not_resampled() {
        let dev = Default::default();
        let cfg = EncoderConfig {
            backbone: BackboneKind::Tiny { base_width: 4 },
            stages: vec![3],
            input_resolution: 32,
            finetune: true,
            weights: None,
        };
        let enc = Encoder::<TB>::new(&cfg, &mut rng(), &dev).unwrap();
        let x = Tensor::<TB, 4>::ones([1, 3, 32, 32], &dev).mul_scalar(0.5);
        let bundle = enc.encode(x.clone());
        let maps = enc.net.forward_stages(normalize_input(x));
        let direct: Vec<f32> = maps[2].clone().into_data().to_vec().unwrap();
        let fused: Vec<f32> = bundle.f_co.into_data().to_vec().unwrap();
        assert_eq!(direct, fused);
    }
}
