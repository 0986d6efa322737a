//! Experiment configuration and a single train-then-evaluate run.

use std::path::{Path, PathBuf};

use burn::backend::{Autodiff, NdArray};
use burn::module::AutodiffModule;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, EncoderConfig};
use crate::data::{inject_contamination, load_category, toy_category, CategoryData, ContaminationSpec, LoadOptions, ToyConfig};
use crate::error::{Error, Result};
use crate::evaluation::{auc_pr, auc_roc, score_test_set, MetricsReport, ScoredSet};
use crate::losses::Alternation;
use crate::model::{AnomalyModel, ModelConfig};
use crate::noise_synth::{AnomalySource, BlendSpec, ProceduralTextures, PseudoAnomalyGenerator, TextureCorpus};
use crate::reweighting::{DivergenceKind, DivergenceSpec};
use crate::trainer::{train, AblationVariant, RunPaths, TrainConfig, TrainData, TrainOutcome};

/// CPU training backend.
pub type TrainBackend = Autodiff<NdArray<f32>>;
pub type EvalBackend = NdArray<f32>;

/// Every knob of a run, as one flat YAML/JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `mvtec`, `visa` or `toy`.
    pub dataset: String,
    pub data_root: Option<PathBuf>,
    pub category: String,
    pub resize: usize,
    pub crop: usize,
    pub toy: ToyConfig,

    pub epsilon: f64,
    pub noise_sigma: f64,
    /// Seed of the contamination draw; defaults to `seed`.
    pub contamination_seed: Option<u64>,

    /// Texture corpus for pseudo-anomalies; procedural textures when unset.
    pub texture_dir: Option<PathBuf>,
    pub perlin_periods: Vec<usize>,
    pub mask_threshold: f32,
    pub beta_range: [f32; 2],
    pub augment_source: bool,

    pub backbone: BackboneKind,
    pub stages: Vec<usize>,
    pub finetune: bool,
    /// Pretrained encoder record (`.mpk`).
    pub weights: Option<PathBuf>,
    pub scorer_hidden: usize,
    pub decoder_width: usize,
    pub k_fraction: f64,

    pub gamma: f64,
    pub m_reference: usize,
    pub focal_gamma: f64,
    pub alternation: Alternation,
    pub divergence: DivergenceKind,
    pub alpha: f64,
    pub lambda: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub burn_in: usize,
    pub pseudo_ratio: f64,
    pub grad_clip: Option<f64>,
    pub variant: AblationVariant,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let blend = BlendSpec::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            dataset: "mvtec".into(),
            data_root: None,
            category: "bottle".into(),
            resize: 256,
            crop: 224,
            toy: ToyConfig::default(),
            epsilon: 0.1,
            noise_sigma: 0.1,
            contamination_seed: None,
            texture_dir: None,
            perlin_periods: blend.perlin_periods,
            mask_threshold: blend.mask_threshold,
            beta_range: blend.beta_range,
            augment_source: blend.augment_source,
            backbone: model.encoder.backbone,
            stages: model.encoder.stages,
            finetune: model.encoder.finetune,
            weights: None,
            scorer_hidden: model.scorer_hidden,
            decoder_width: model.decoder_width,
            k_fraction: train.k_fraction,
            gamma: train.gamma,
            m_reference: train.m_reference,
            focal_gamma: train.focal_gamma,
            alternation: train.alternation,
            divergence: train.divergence.kind,
            alpha: train.divergence.alpha,
            lambda: train.divergence.lambda,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            burn_in: train.burn_in,
            pseudo_ratio: train.pseudo_ratio,
            grad_clip: train.grad_clip,
            variant: train.variant,
            eval_batch_size: 16,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// The synthetic toy task with a small backbone, sized for CPU runs.
    pub fn toy(seed: u64) -> Self {
        let tiny = ModelConfig::tiny(64, 8);
        Self {
            dataset: "toy".into(),
            category: "blobs".into(),
            toy: ToyConfig { seed, ..ToyConfig::default() },
            backbone: tiny.encoder.backbone,
            scorer_hidden: tiny.scorer_hidden,
            decoder_width: tiny.decoder_width,
            epochs: 5,
            burn_in: 2,
            learning_rate: 1e-3,
            m_reference: 5000,
            seed,
            ..Self::default()
        }
    }

    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_yaml::from_str(&text)?)
    }

    pub fn save_yaml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_yaml::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn input_resolution(&self) -> usize {
        if self.dataset == "toy" {
            self.toy.resolution
        } else {
            self.crop
        }
    }

    pub fn blend_spec(&self) -> BlendSpec {
        BlendSpec {
            beta_range: self.beta_range,
            perlin_periods: self.perlin_periods.clone(),
            mask_threshold: self.mask_threshold,
            augment_source: self.augment_source,
        }
    }

    pub fn divergence_spec(&self) -> DivergenceSpec {
        DivergenceSpec {
            kind: self.divergence,
            alpha: self.alpha,
            lambda: self.lambda,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                backbone: self.backbone,
                stages: self.stages.clone(),
                input_resolution: self.input_resolution(),
                finetune: self.finetune,
                weights: self.weights.clone(),
            },
            scorer_hidden: self.scorer_hidden,
            decoder_width: self.decoder_width,
            k_fraction: self.k_fraction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            burn_in: self.burn_in,
            divergence: self.divergence_spec(),
            gamma: self.gamma,
            k_fraction: self.k_fraction,
            m_reference: self.m_reference,
            prior_mu: 0.0,
            prior_sigma: 1.0,
            focal_gamma: self.focal_gamma,
            alternation: self.alternation,
            pseudo_ratio: self.pseudo_ratio,
            grad_clip: self.grad_clip,
            variant: self.variant,
            seed: self.seed,
        }
    }

    pub fn contamination_spec(&self) -> ContaminationSpec {
        ContaminationSpec {
            epsilon: self.epsilon,
            noise_sigma: self.noise_sigma,
            seed: self.contamination_seed.unwrap_or(self.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blend_spec().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.contamination_spec().validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size must be positive"));
        }
        Ok(())
    }

    /// Load (or synthesize) the category named by this config.
    pub fn load_data(&self) -> Result<CategoryData> {
        match self.dataset.as_str() {
            "toy" => toy_category(&self.toy),
            kind => {
                let root = self
                    .data_root
                    .as_deref()
                    .ok_or_else(|| Error::config(format!("dataset {kind} needs data_root")))?;
                let options = LoadOptions {
                    resize: self.resize,
                    crop: self.crop,
                };
                load_category(root, kind.parse()?, &self.category, options)
            }
        }
    }

    pub fn generator(&self) -> Result<PseudoAnomalyGenerator> {
        let source: Box<dyn AnomalySource> = match &self.texture_dir {
            Some(dir) => Box::new(TextureCorpus::open(dir)?),
            None => Box::new(ProceduralTextures),
        };
        PseudoAnomalyGenerator::new(self.blend_spec(), source)
    }
}

/// Result of [`run_experiment`].
pub struct RunResult {
    pub report: MetricsReport,
    pub scored: ScoredSet,
    pub outcome: TrainOutcome<TrainBackend>,
}

fn report_for(config: &ExperimentConfig, scored: &ScoredSet) -> Result<MetricsReport> {
    let n_anom = scored.labels.iter().filter(|&&y| y == 1).count();
    Ok(MetricsReport {
        dataset: config.dataset.clone(),
        category: config.category.clone(),
        epsilon: config.epsilon,
        seed: config.seed,
        variant: config.variant.to_string(),
        divergence: format!("{:?}", config.divergence).to_ascii_lowercase(),
        alpha: config.alpha,
        lambda: config.lambda,
        auc_roc: auc_roc(&scored.scores, &scored.labels)?,
        auc_pr: auc_pr(&scored.scores, &scored.labels)?,
        n_test_normal: scored.labels.len() - n_anom,
        n_test_anomalous: n_anom,
        error: None,
    })
}

/// Contaminate, train and evaluate. With `out`, the run directory receives the config
/// snapshot, contamination manifest, logs, checkpoints and `metrics.json`.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult> {
    config.validate()?;
    let data = config.load_data()?;
    let contaminated = inject_contamination(&data.train_normals, &data.test_anomalies, &config.contamination_spec())?;
    let generator = config.generator()?;
    let paths = out.map(RunPaths::new);
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.root).map_err(|e| Error::io(&p.root, e))?;
        config.save_yaml(&p.config())?;
        contaminated.manifest.save(&p.manifest())?;
    }
    let device = Default::default();
    let outcome = train::<TrainBackend>(
        &config.train_config(),
        &config.model_config(),
        TrainData {
            pool: &contaminated.samples,
            generator: &generator,
        },
        paths.as_ref(),
        &device,
    )?;
    let scored = score_test_set(&outcome.model.valid(), data.test_set(), config.eval_batch_size, &device)?;
    let report = report_for(config, &scored)?;
    if let Some(p) = &paths {
        std::fs::write(p.root.join("metrics.json"), serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&p.root, e))?;
    }
    Ok(RunResult {
        report,
        scored,
        outcome,
    })
}

/// Re-score the final checkpoint of a finished run directory.
pub fn evaluate_run(dir: &Path) -> Result<MetricsReport> {
    let paths = RunPaths::new(dir);
    let config = ExperimentConfig::from_yaml_file(&paths.config())?;
    let data = config.load_data()?;
    let device = Default::default();
    let mut model_config = config.model_config();
    model_config.encoder.weights = None;
    let model = AnomalyModel::<EvalBackend>::load(&model_config, &paths.last_checkpoint(), &device)?;
    let scored = score_test_set(&model, data.test_set(), config.eval_batch_size, &device)?;
    let report = report_for(&config, &scored)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(dir, e))?;
    Ok(report)
}
