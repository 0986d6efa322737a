//! The training loop: per-minibatch reference statistics, per-sample losses, burn-in gated
//! instance weights and a reweighted Adam step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use burn::module::{AutodiffModule, ModuleVisitor, ParamId};
use burn::optim::{AdamConfig, GradientsParams, Optimizer};
use burn::record::{DoublePrecisionSettings, NamedMpkFileRecorder, Recorder};
use burn::tensor::backend::{AutodiffBackend, Backend};
use burn::tensor::{ElementConversion, Tensor, TensorData};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_plan, make_training_batch, pseudo_count, stack_images, stack_masks, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{batched, kmeans_soft_targets, sample_reference_stats, Alternation, ReferenceStats};
use crate::model::{AnomalyModel, ModelConfig};
use crate::noise_synth::PseudoAnomalyGenerator;
use crate::reweighting::{DivergenceSpec, WeightVector};

/// Which loss terms are active, following the ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Hard-label deviation loss only.
    #[serde(rename = "DL")]
    Dl,
    /// Reweighted hard-label deviation loss.
    #[serde(rename = "Wt-DL")]
    WtDl,
    /// Deviation loss plus classifier BCE.
    #[serde(rename = "DL-CE")]
    DlCe,
    /// Soft deviation plus classifier BCE.
    #[serde(rename = "SoftDL-CE")]
    SoftDlCe,
    /// Reweighted soft deviation plus BCE.
    #[serde(rename = "Wt-SoftDL-CE")]
    WtSoftDlCe,
    /// Everything, including the segmentation term.
    #[default]
    Proposed,
}

/// Switches derived from an [`AblationVariant`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    /// Soft deviation (classifier probability) instead of hard labels.
    pub soft: bool,
    pub reweight: bool,
    pub bce: bool,
    pub seg: bool,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        Self::Dl,
        Self::WtDl,
        Self::DlCe,
        Self::SoftDlCe,
        Self::WtSoftDlCe,
        Self::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dl => "DL",
            Self::WtDl => "Wt-DL",
            Self::DlCe => "DL-CE",
            Self::SoftDlCe => "SoftDL-CE",
            Self::WtSoftDlCe => "Wt-SoftDL-CE",
            Self::Proposed => "Proposed",
        }
    }

    pub fn toggles(self) -> LossToggles {
        let t = |soft, reweight, bce, seg| LossToggles { soft, reweight, bce, seg };
        match self {
            Self::Dl => t(false, false, false, false),
            Self::WtDl => t(false, true, false, false),
            Self::DlCe => t(false, false, true, false),
            Self::SoftDlCe => t(true, false, true, false),
            Self::WtSoftDlCe => t(true, true, true, false),
            Self::Proposed => t(true, true, true, true),
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|v| v.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::arg(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total minibatch size, pseudo-anomalies included.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (counted from 1) trained with uniform weights.
    pub burn_in: usize,
    pub divergence: DivergenceSpec,
    /// Margin of the deviation hinge.
    pub gamma: f64,
    pub k_fraction: f64,
    /// Draws from the prior per minibatch.
    pub m_reference: usize,
    pub prior_mu: f64,
    pub prior_sigma: f64,
    pub focal_gamma: f64,
    pub alternation: Alternation,
    pub pseudo_ratio: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub variant: AblationVariant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 16,
            learning_rate: 2e-4,
            burn_in: 2,
            divergence: DivergenceSpec::default(),
            gamma: 5.0,
            k_fraction: 0.1,
            m_reference: 5000,
            prior_mu: 0.0,
            prior_sigma: 1.0,
            focal_gamma: 2.0,
            alternation: Alternation::Step,
            pseudo_ratio: 0.5,
            grad_clip: Some(5.0),
            variant: AblationVariant::Proposed,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.burn_in >= self.epochs {
            return Err(Error::config(format!(
                "burn_in ({}) must be smaller than epochs ({})",
                self.burn_in, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.pseudo_ratio) {
            return Err(Error::config("pseudo_ratio must lie in [0, 1)"));
        }
        if self.m_reference < 2 {
            return Err(Error::config("m_reference must be at least 2"));
        }
        if !(self.gamma > 0.0) || !(self.focal_gamma >= 0.0) {
            return Err(Error::config("gamma must be positive and focal_gamma non-negative"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        crate::heads::top_k_count(1, self.k_fraction)?;
        self.divergence.validate()
    }

    pub fn with_variant(mut self, variant: AblationVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// Everything logged for one minibatch; enough to recompute the objective offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: usize,
    /// Pool index of each sample; `None` for pseudo-anomalies.
    pub pool_index: Vec<Option<usize>>,
    pub labels: Vec<u8>,
    pub mu_s: f64,
    pub sigma_s: f64,
    pub used_kmeans: bool,
    pub targets: Vec<u8>,
    pub psi_k: Vec<f64>,
    pub prob: Vec<f64>,
    /// Deviation losses (soft or hard depending on the variant).
    pub l_dev: Vec<f64>,
    /// Empty when the BCE term is off.
    pub l_bce: Vec<f64>,
    /// Empty when the segmentation term is off.
    pub l_seg: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
}

impl BatchRecord {
    /// `Σ w1 l_dev + Σ w2 l_bce + mean l_seg` from the logged values.
    pub fn recomputed_loss(&self) -> f64 {
        let dot = |w: &[f64], l: &[f64]| w.iter().zip(l).map(|(a, b)| a * b).sum::<f64>();
        let seg = if self.l_seg.is_empty() {
            0.0
        } else {
            self.l_seg.iter().sum::<f64>() / self.l_seg.len() as f64
        };
        dot(&self.w1, &self.l_dev) + dot(&self.w2, &self.l_bce) + seg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Loss on the fixed probe batch in inference mode, with uniform weights.
    pub probe_loss: f64,
    pub uniform_weights: bool,
    pub max_weight: f64,
    pub seconds: f64,
}

/// Progress persisted next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: usize,
    pub best_probe_loss: f64,
}

pub struct TrainOutcome<B: AutodiffBackend> {
    pub model: AnomalyModel<B>,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    pub state: TrainState,
}

impl<B: AutodiffBackend> TrainOutcome<B> {
    pub fn final_probe_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.probe_loss)
    }
}

/// Training inputs: the (possibly contaminated) normal pool and the pseudo-anomaly source.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub pool: &'a [ImageSample],
    pub generator: &'a PseudoAnomalyGenerator,
}

/// Where logs and checkpoints go.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.yaml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("contamination_manifest.json")
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.root.join("epochs.jsonl")
    }

    pub fn batch_log(&self) -> PathBuf {
        self.root.join("batches.jsonl")
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epoch:03}.mpk"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.mpk")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.mpk")
    }

    pub fn optimizer_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("optimizer.mpk")
    }
}

/// One minibatch on the device.
pub struct PreparedBatch<B: Backend> {
    pub images: Tensor<B, 4>,
    pub masks: Tensor<B, 4>,
    pub labels: Vec<u8>,
    pub pool_index: Vec<Option<usize>>,
}

impl<B: Backend> PreparedBatch<B> {
    pub fn new(samples: &[ImageSample], pool_index: Vec<Option<usize>>, device: &B::Device) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<_> = samples.iter().map(|s| &s.gt_mask).collect();
        Ok(Self {
            images: stack_images(&images, device)?,
            masks: stack_masks(&masks, device)?,
            labels: samples.iter().map(|s| s.y_contaminated).collect(),
            pool_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-sample losses of one forward pass.
pub struct BatchLosses<B: Backend> {
    pub psi_k: Vec<f64>,
    pub prob: Vec<f64>,
    pub targets: Vec<u8>,
    pub l_dev: Tensor<B, 1>,
    pub l_bce: Option<Tensor<B, 1>>,
    pub l_seg: Option<Tensor<B, 1>>,
}

fn to_vec<B: Backend>(t: &Tensor<B, 1>) -> Vec<f64> {
    t.clone().into_data().iter::<f64>().collect()
}

fn vector<B: Backend>(values: &[f64], device: &B::Device) -> Tensor<B, 1> {
    Tensor::from_data(TensorData::new(values.to_vec(), [values.len()]), device)
}

/// Forward pass plus per-sample losses. `use_kmeans` swaps the BCE targets for the
/// two-means split of the batch's image scores.
pub fn batch_losses<B: Backend>(
    model: &AnomalyModel<B>,
    batch: &PreparedBatch<B>,
    stats: &ReferenceStats,
    use_kmeans: bool,
    config: &TrainConfig,
) -> BatchLosses<B> {
    let toggles = config.variant.toggles();
    let device = batch.images.device();
    let out = model.forward(batch.images.clone(), toggles.seg);
    let psi_k = to_vec(&out.psi_k);
    let prob = to_vec(&out.prob);
    let labels: Vec<f64> = batch.labels.iter().map(|&y| f64::from(y)).collect();
    let dev_target = if toggles.soft {
        out.prob.clone().detach()
    } else {
        vector(&labels, &device)
    };
    let l_dev = batched::soft_deviation(out.psi_k, dev_target, stats, config.gamma);
    let targets = if use_kmeans {
        kmeans_soft_targets(&psi_k, &batch.labels)
    } else {
        batch.labels.clone()
    };
    let l_bce = toggles.bce.then(|| {
        let t: Vec<f64> = targets.iter().map(|&y| f64::from(y)).collect();
        batched::bce(out.prob, vector(&t, &device))
    });
    let l_seg = out
        .seg
        .map(|seg| batched::focal(seg, batch.masks.clone(), config.focal_gamma));
    BatchLosses {
        psi_k,
        prob,
        targets,
        l_dev,
        l_bce,
        l_seg,
    }
}

/// `Σ w1 l_dev + Σ w2 l_bce + mean l_seg` as a one-element tensor.
pub fn combine_losses<B: Backend>(losses: &BatchLosses<B>, w1: &WeightVector, w2: &WeightVector) -> Tensor<B, 1> {
    let device = losses.l_dev.device();
    let mut total = (losses.l_dev.clone() * vector(w1.as_slice(), &device)).sum();
    if let Some(l_bce) = &losses.l_bce {
        total = total + (l_bce.clone() * vector(w2.as_slice(), &device)).sum();
    }
    if let Some(l_seg) = &losses.l_seg {
        total = total + l_seg.clone().mean();
    }
    total
}

struct GradNorm<'a, B> {
    grads: &'a GradientsParams,
    sum_sq: f64,
    _b: PhantomData<B>,
}

impl<B: AutodiffBackend> ModuleVisitor<B> for GradNorm<'_, B> {
    fn visit_float<const D: usize>(&mut self, id: ParamId, _tensor: &Tensor<B, D>) {
        if let Some(g) = self.grads.get::<B::InnerBackend, D>(id) {
            self.sum_sq += g.powf_scalar(2.0).sum().into_scalar().elem::<f64>();
        }
    }
}

struct GradScale<'a, B> {
    grads: &'a mut GradientsParams,
    scale: f64,
    _b: PhantomData<B>,
}

impl<B: AutodiffBackend> ModuleVisitor<B> for GradScale<'_, B> {
    fn visit_float<const D: usize>(&mut self, id: ParamId, _tensor: &Tensor<B, D>) {
        if let Some(g) = self.grads.remove::<B::InnerBackend, D>(id) {
            self.grads.register(id, g.mul_scalar(self.scale));
        }
    }
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<B: AutodiffBackend>(
    model: &AnomalyModel<B>,
    grads: &mut GradientsParams,
    max_norm: Option<f64>,
) -> f64 {
    let mut norm = GradNorm::<B> {
        grads,
        sum_sq: 0.0,
        _b: PhantomData,
    };
    burn::module::Module::visit(model, &mut norm);
    let total = norm.sum_sq.sqrt();
    if let Some(max) = max_norm {
        if total > max {
            let mut scale = GradScale::<B> {
                grads,
                scale: max / total,
                _b: PhantomData,
            };
            burn::module::Module::visit(model, &mut scale);
        }
    }
    total
}

/// Generator for an epoch; depends only on the seed and the epoch so resumed runs replay
/// the same batches.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// A fixed batch built once from the pool, used to track a comparable loss across epochs.
pub fn probe_batch<B: Backend>(
    data: &TrainData<'_>,
    config: &TrainConfig,
    device: &B::Device,
) -> Result<(PreparedBatch<B>, ReferenceStats)> {
    let mut rng = epoch_rng(config.seed, 0);
    let plan = batch_plan(data.pool.len(), config.batch_size, config.pseudo_ratio);
    let (normals, total) = *plan
        .first()
        .ok_or_else(|| Error::config("training pool is too small for one minibatch"))?;
    let mut order: Vec<usize> = (0..data.pool.len()).collect();
    order.shuffle(&mut rng);
    let idx = &order[..normals];
    let members: Vec<&ImageSample> = idx.iter().map(|&i| &data.pool[i]).collect();
    let samples = make_training_batch(&members, total, config.pseudo_ratio, data.generator, &mut rng)?;
    let pool_index = idx.iter().map(|&i| Some(i)).chain(std::iter::repeat_n(None, total - normals)).collect();
    let stats = sample_reference_stats(config.m_reference, config.prior_mu, config.prior_sigma, &mut rng)?;
    Ok((PreparedBatch::new(&samples, pool_index, device)?, stats))
}

/// Uniform-weight loss of `batch` with the model in inference mode.
pub fn probe_loss<B: AutodiffBackend>(
    model: &AnomalyModel<B>,
    batch: &PreparedBatch<B::InnerBackend>,
    stats: &ReferenceStats,
    config: &TrainConfig,
) -> f64 {
    let valid = model.valid();
    let losses = batch_losses(&valid, batch, stats, false, config);
    let u = WeightVector::uniform(batch.len());
    combine_losses(&losses, &u, &u).into_scalar().elem::<f64>()
}

type Adam<B> = burn::optim::adaptor::OptimizerAdaptor<burn::optim::Adam, AnomalyModel<B>, B>;

struct Logs {
    epochs: Option<BufWriter<File>>,
    batches: Option<BufWriter<File>>,
}

impl Logs {
    fn open(paths: Option<&RunPaths>, append: bool) -> Result<Self> {
        let open = |p: PathBuf| -> Result<BufWriter<File>> {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(file))
        };
        Ok(match paths {
            Some(p) => {
                std::fs::create_dir_all(p.checkpoints()).map_err(|e| Error::io(p.checkpoints(), e))?;
                Self {
                    epochs: Some(open(p.epoch_log())?),
                    batches: Some(open(p.batch_log())?),
                }
            }
            None => Self {
                epochs: None,
                batches: None,
            },
        })
    }

    fn write<T: Serialize>(w: &mut Option<BufWriter<File>>, record: &T) -> Result<()> {
        if let Some(w) = w {
            let line = serde_json::to_string(record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.epochs, &mut self.batches].into_iter().flatten() {
            w.flush().map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }
}

/// Train a fresh model. With `paths`, logs and checkpoints are written below its root.
pub fn train<B: AutodiffBackend>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: TrainData<'_>,
    paths: Option<&RunPaths>,
    device: &B::Device,
) -> Result<TrainOutcome<B>> {
    config.validate()?;
    let mut model_config = model_config.clone();
    model_config.k_fraction = config.k_fraction;
    let model = AnomalyModel::<B>::new(&model_config, config.seed, device)?;
    let optim = AdamConfig::new().init::<B, AnomalyModel<B>>();
    let state = TrainState {
        epoch: 0,
        global_step: 0,
        best_probe_loss: f64::INFINITY,
    };
    run(config, model, optim, state, data, paths, device)
}

/// Continue a run from the last checkpoint under `paths`, up to `config.epochs`.
pub fn resume<B: AutodiffBackend>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: TrainData<'_>,
    paths: &RunPaths,
    device: &B::Device,
) -> Result<TrainOutcome<B>> {
    config.validate()?;
    let text = std::fs::read_to_string(paths.state()).map_err(|e| Error::io(paths.state(), e))?;
    let state: TrainState = serde_json::from_str(&text)?;
    let mut model_config = model_config.clone();
    model_config.k_fraction = config.k_fraction;
    let model = AnomalyModel::<B>::load(&model_config, &paths.last_checkpoint(), device)?;
    let record = recorder()
        .load(paths.optimizer_checkpoint(), device)
        .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
    let optim = AdamConfig::new().init::<B, AnomalyModel<B>>().load_record(record);
    run(config, model, optim, state, data, Some(paths), device)
}

fn recorder() -> NamedMpkFileRecorder<DoublePrecisionSettings> {
    NamedMpkFileRecorder::new()
}

fn summarize(values: &[f64]) -> String {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    format!(
        "{values:?} (finite range [{lo}, {hi}], {} non-finite)",
        values.len() - finite.len()
    )
}

#[allow(clippy::too_many_arguments)]
fn run<B: AutodiffBackend>(
    config: &TrainConfig,
    mut model: AnomalyModel<B>,
    mut optim: Adam<B>,
    mut state: TrainState,
    data: TrainData<'_>,
    paths: Option<&RunPaths>,
    device: &B::Device,
) -> Result<TrainOutcome<B>> {
    let toggles = config.variant.toggles();
    let (probe, probe_stats) = probe_batch::<B::InnerBackend>(&data, config, device)?;
    let plan = batch_plan(data.pool.len(), config.batch_size, config.pseudo_ratio);
    let mut logs = Logs::open(paths, state.epoch > 0)?;
    let mut epochs = Vec::new();
    let mut batches = Vec::new();

    for epoch in state.epoch + 1..=config.epochs {
        let started = std::time::Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..data.pool.len()).collect();
        order.shuffle(&mut rng);
        let burn_in = epoch <= config.burn_in;
        let (mut loss_sum, mut max_weight, mut all_uniform) = (0.0, 0.0f64, true);
        let mut cursor = 0;

        for &(normals, total) in &plan {
            let idx = &order[cursor..cursor + normals];
            cursor += normals;
            let members: Vec<&ImageSample> = idx.iter().map(|&i| &data.pool[i]).collect();
            let samples = make_training_batch(&members, total, config.pseudo_ratio, data.generator, &mut rng)?;
            let pool_index = idx
                .iter()
                .map(|&i| Some(i))
                .chain(std::iter::repeat_n(None, pseudo_count(total, config.pseudo_ratio)))
                .collect();
            let batch = PreparedBatch::<B>::new(&samples, pool_index, device)?;

            let stats = sample_reference_stats(config.m_reference, config.prior_mu, config.prior_sigma, &mut rng)?;
            let used_kmeans = toggles.bce && config.alternation.use_kmeans(epoch, state.global_step);
            let losses = batch_losses(&model, &batch, &stats, used_kmeans, config);
            let l_dev = to_vec(&losses.l_dev);
            let l_bce = losses.l_bce.as_ref().map(to_vec).unwrap_or_default();
            let l_seg = losses.l_seg.as_ref().map(to_vec).unwrap_or_default();

            let non_finite = |v: &[f64]| v.iter().any(|x| !x.is_finite());
            if non_finite(&l_dev) || non_finite(&l_bce) || non_finite(&l_seg) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: state.global_step,
                    diagnostic: format!(
                        "psi_k {}; prob {}; mu_s {}; sigma_s {}; l_dev {}; l_bce {}; l_seg {}",
                        summarize(&losses.psi_k),
                        summarize(&losses.prob),
                        stats.mu_s,
                        stats.sigma_s,
                        summarize(&l_dev),
                        summarize(&l_bce),
                        summarize(&l_seg)
                    ),
                });
            }

            let n = batch.len();
            let (w1, w2) = if burn_in || !toggles.reweight {
                (WeightVector::uniform(n), WeightVector::uniform(n))
            } else {
                let w1 = config.divergence.weights(&l_dev)?;
                let w2 = if toggles.bce {
                    config.divergence.weights(&l_bce)?
                } else {
                    WeightVector::uniform(n)
                };
                (w1, w2)
            };
            all_uniform &= w1.is_exactly_uniform() && w2.is_exactly_uniform();
            max_weight = max_weight.max(w1.max()).max(w2.max());

            let total_loss = combine_losses(&losses, &w1, &w2);
            let loss_value = total_loss.clone().into_scalar().elem::<f64>();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: state.global_step,
                    diagnostic: format!("reweighted loss {loss_value}; w1 {:?}; w2 {:?}", w1.as_slice(), w2.as_slice()),
                });
            }
            let grads = total_loss.backward();
            let mut grads = GradientsParams::from_grads(grads, &model);
            let grad_norm = clip_global_norm(&model, &mut grads, config.grad_clip);
            model = optim.step(config.learning_rate, model, grads);

            let record = BatchRecord {
                epoch,
                step: state.global_step,
                pool_index: batch.pool_index.clone(),
                labels: batch.labels.clone(),
                mu_s: stats.mu_s,
                sigma_s: stats.sigma_s,
                used_kmeans,
                targets: losses.targets,
                psi_k: losses.psi_k,
                prob: losses.prob,
                l_dev,
                l_bce: if toggles.bce { l_bce } else { Vec::new() },
                l_seg,
                w1: w1.into_vec(),
                w2: if toggles.bce { w2.into_vec() } else { Vec::new() },
                loss: loss_value,
                grad_norm,
            };
            Logs::write(&mut logs.batches, &record)?;
            batches.push(record);
            loss_sum += loss_value;
            state.global_step += 1;
        }

        let probe_value = probe_loss(&model, &probe, &probe_stats, config);
        let record = EpochRecord {
            epoch,
            steps: plan.len(),
            mean_loss: loss_sum / plan.len().max(1) as f64,
            probe_loss: probe_value,
            uniform_weights: all_uniform,
            max_weight,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, probe {:.4}, max weight {:.3}",
            config.epochs,
            record.mean_loss,
            record.probe_loss,
            record.max_weight
        );
        Logs::write(&mut logs.epochs, &record)?;
        logs.flush()?;
        epochs.push(record);
        state.epoch = epoch;

        if let Some(p) = paths {
            model.save(&p.epoch_checkpoint(epoch))?;
            model.save(&p.last_checkpoint())?;
            if probe_value < state.best_probe_loss {
                state.best_probe_loss = probe_value;
                model.save(&p.best_checkpoint())?;
            }
            recorder()
                .record(optim.to_record(), p.optimizer_checkpoint())
                .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
            let json = serde_json::to_string_pretty(&state)?;
            std::fs::write(p.state(), json).map_err(|e| Error::io(p.state(), e))?;
        } else if probe_value < state.best_probe_loss {
            state.best_probe_loss = probe_value;
        }
    }

    Ok(TrainOutcome {
        model,
        epochs,
        batches,
        state,
    })
}

/// Read a JSON-lines log written by the trainer.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
