//! The full detector: encoder plus scorer, classification head and segmentation decoder,
//! with seeded construction and single-file checkpoints.

use std::path::Path;

use burn::module::{Ignored, Module, ModuleVisitor, ParamId};
use burn::record::{DoublePrecisionSettings, NamedMpkFileRecorder};
use burn::tensor::backend::Backend;
use burn::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, Encoder, EncoderConfig, FeatureBundle, RequireGrad};
use crate::error::{Error, Result};
use crate::heads::{topk_mean, ClassifierHead, Scorer, SegDecoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden channels of the 1×1 scorer.
    pub scorer_hidden: usize,
    /// Channels of the first decoder block (halved in each following block).
    pub decoder_width: usize,
    /// Fraction of locations averaged into the image score.
    pub k_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            scorer_hidden: 128,
            decoder_width: 128,
            k_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    /// A small CPU-friendly configuration for `resolution×resolution` inputs.
    pub fn tiny(resolution: usize, base_width: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                backbone: BackboneKind::Tiny { base_width },
                stages: vec![2, 3, 4],
                input_resolution: resolution,
                finetune: true,
                weights: None,
            },
            scorer_hidden: 4 * base_width,
            decoder_width: 4 * base_width,
            k_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        crate::heads::top_k_count(1, self.k_fraction)?;
        if self.scorer_hidden == 0 || self.decoder_width == 0 {
            return Err(Error::config("head widths must be positive"));
        }
        Ok(())
    }
}

/// Everything the heads produce for a batch.
#[derive(Clone, Debug)]
pub struct HeadOutputs<B: Backend> {
    /// `[B, Ñ]` per-location scores.
    pub score_map: Tensor<B, 2>,
    /// `[B]` top-K image scores.
    pub psi_k: Tensor<B, 1>,
    /// `[B]` anomaly probabilities.
    pub prob: Tensor<B, 1>,
    /// `[B, 1, H_in, W_in]` segmentation masks, when requested.
    pub seg: Option<Tensor<B, 4>>,
}

#[derive(Module, Debug)]
pub struct AnomalyModel<B: Backend> {
    pub encoder: Encoder<B>,
    pub scorer: Scorer<B>,
    pub classifier: ClassifierHead<B>,
    pub decoder: SegDecoder<B>,
    config: Ignored<ModelConfig>,
}

impl<B: Backend> AnomalyModel<B> {
    /// Build with parameters determined by `seed`. Loads pretrained encoder weights when
    /// the config names a file.
    pub fn new(config: &ModelConfig, seed: u64, device: &B::Device) -> Result<Self> {
        config.validate()?;
        // a private generator keeps initialization independent of other threads
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let fused = config.encoder.fused_channels();
        let mut model = Self {
            encoder: Encoder::new(&config.encoder, rng, device)?,
            scorer: Scorer::new(fused, config.scorer_hidden, rng, device),
            classifier: ClassifierHead::new(config.encoder.last_channels(), rng, device),
            decoder: SegDecoder::new(fused, config.decoder_width, rng, device),
            config: Ignored(config.clone()),
        };
        if let Some(path) = &config.encoder.weights {
            model.encoder = load_module(model.encoder, path, device)?;
        }
        Ok(model.set_trainable(config.encoder.finetune))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config.0
    }

    /// Freeze (`false`) or unfreeze (`true`) the encoder's parameters.
    pub fn set_trainable(mut self, finetune: bool) -> Self {
        self.encoder = if finetune {
            self.encoder.map(&mut RequireGrad(true))
        } else {
            self.encoder.no_grad()
        };
        self.config.0.encoder.finetune = finetune;
        self
    }

    pub fn is_finetuning(&self) -> bool {
        self.config.0.encoder.finetune
    }

    pub fn encode(&self, images: Tensor<B, 4>) -> FeatureBundle<B> {
        self.encoder.encode(images)
    }

    /// Run every head on `[B, 3, H, W]` images in `[0, 1]`.
    pub fn forward(&self, images: Tensor<B, 4>, with_seg: bool) -> HeadOutputs<B> {
        let [_, _, h, w] = images.dims();
        let features = self.encode(images);
        let score_map = self.scorer.forward(features.f_co.clone());
        let psi_k = topk_mean(score_map.clone(), self.config.0.k_fraction)
            .expect("k_fraction validated at construction");
        let prob = self.classifier.forward(features.f_last);
        let seg = with_seg.then(|| self.decoder.forward(features.f_co, h, w));
        HeadOutputs {
            score_map,
            psi_k,
            prob,
            seg,
        }
    }

    /// Ids of the parameters an optimizer step may change under the current finetune flag.
    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.is_finetuning() {
            self.encoder.visit(&mut CollectIds(&mut ids));
        }
        self.scorer.visit(&mut CollectIds(&mut ids));
        self.classifier.visit(&mut CollectIds(&mut ids));
        self.decoder.visit(&mut CollectIds(&mut ids));
        ids
    }

    /// All float parameters flattened in visiting order (for probes and tests).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut Flatten(&mut out));
        out
    }

    pub fn encoder_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.visit(&mut Flatten(&mut out));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_module(self.clone(), path)
    }

    /// Load parameters from a checkpoint written by [`AnomalyModel::save`] into a model
    /// built from `config`.
    pub fn load(config: &ModelConfig, path: &Path, device: &B::Device) -> Result<Self> {
        let mut config = config.clone();
        config.encoder.weights = None;
        let model = Self::new(&config, 0, device)?;
        let finetune = model.is_finetuning();
        Ok(load_module(model, path, device)?.set_trainable(finetune))
    }
}

struct CollectIds<'a>(&'a mut Vec<ParamId>);

impl<B: Backend> ModuleVisitor<B> for CollectIds<'_> {
    fn visit_float<const D: usize>(&mut self, id: ParamId, _tensor: &Tensor<B, D>) {
        self.0.push(id);
    }
}

struct Flatten<'a>(&'a mut Vec<f64>);

impl<B: Backend> ModuleVisitor<B> for Flatten<'_> {
    fn visit_float<const D: usize>(&mut self, _id: ParamId, tensor: &Tensor<B, D>) {
        self.0.extend(tensor.to_data().iter::<f64>());
    }
}

fn recorder() -> NamedMpkFileRecorder<DoublePrecisionSettings> {
    NamedMpkFileRecorder::<DoublePrecisionSettings>::new()
}

/// Write any module to a `.mpk` record file (the extension is added if missing).
pub fn save_module<B: Backend, M: Module<B>>(module: M, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    module
        .save_file(path.to_path_buf(), &recorder())
        .map_err(|e| Error::Checkpoint(format!("saving {}: {e}", path.display())))
}

pub fn load_module<B: Backend, M: Module<B>>(module: M, path: &Path, device: &B::Device) -> Result<M> {
    module
        .load_file(path.to_path_buf(), &recorder(), device)
        .map_err(|e| Error::Checkpoint(format!("loading {}: {e}", path.display())))
}
