//! Dataset ingestion, contamination injection and training-batch assembly.

use std::path::{Path, PathBuf};

use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise_synth::{is_image_file, perlin_noise, AnomalyMask, PseudoAnomalyGenerator};

/// One image with the label the trainer sees and the label it must never see.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image: Image,
    /// Label as seen by training: 0 for unlabeled-normal members, 1 for pseudo-anomalies.
    pub y_contaminated: u8,
    /// Ground truth, kept for evaluation and audits.
    pub y_true: u8,
    pub is_pseudo: bool,
    pub gt_mask: AnomalyMask,
    /// File path or synthetic identifier.
    pub source: String,
}

impl ImageSample {
    /// A member of the unlabeled normal pool.
    pub fn normal(image: Image, source: impl Into<String>) -> Self {
        let (h, w) = image.size();
        Self {
            image,
            y_contaminated: 0,
            y_true: 0,
            is_pseudo: false,
            gt_mask: AnomalyMask::zeros(h, w),
            source: source.into(),
        }
    }

    /// A labeled test anomaly with its defect mask.
    pub fn anomaly(image: Image, mask: AnomalyMask, source: impl Into<String>) -> Self {
        Self {
            image,
            y_contaminated: 1,
            y_true: 1,
            is_pseudo: false,
            gt_mask: mask,
            source: source.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mvtec,
    Visa,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mvtec" | "mvtec_ad" | "mvtec-ad" => Ok(Self::Mvtec),
            "visa" => Ok(Self::Visa),
            other => Err(Error::arg(format!("unknown dataset {other:?}; expected mvtec or visa"))),
        }
    }
}

/// The three splits of one category.
#[derive(Clone, Debug, Default)]
pub struct CategoryData {
    pub train_normals: Vec<ImageSample>,
    pub test_normals: Vec<ImageSample>,
    pub test_anomalies: Vec<ImageSample>,
}

impl CategoryData {
    /// Test set with anomalies after normals.
    pub fn test_set(&self) -> impl Iterator<Item = &ImageSample> {
        self.test_normals.iter().chain(&self.test_anomalies)
    }
}

/// Decode geometry: resize to `resize×resize` then center-crop to `crop×crop`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub resize: usize,
    pub crop: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            resize: 256,
            crop: 224,
        }
    }
}

const MVTEC_LAYOUT: &str = "expected MVTec layout:
  <root>/<category>/train/good/*.png
  <root>/<category>/test/<defect>/*.png          (test/good holds normal test images)
  <root>/<category>/ground_truth/<defect>/*_mask.png";

const VISA_LAYOUT: &str = "expected VisA layout:
  <root>/split_csv/1cls.csv                      (columns object,split,label,image,mask)
  <root>/<category>/Data/Images/{Normal,Anomaly}/*.JPG
  <root>/<category>/Data/Masks/Anomaly/*.png";

/// Load and decode one category. Files are visited in sorted order, so repeated loads
/// produce identical orderings.
pub fn load_category(
    root: &Path,
    kind: DatasetKind,
    category: &str,
    options: LoadOptions,
) -> Result<CategoryData> {
    match kind {
        DatasetKind::Mvtec => load_mvtec(root, category, options),
        DatasetKind::Visa => load_visa(root, category, options),
    }
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_mask(path: &Path, options: LoadOptions) -> Result<AnomalyMask> {
    Ok(AnomalyMask::from_image(&Image::load(path, options.resize, options.crop)?))
}

fn require_dir(dir: &Path, layout: &str) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::config(format!("missing directory {}\n{layout}", dir.display())))
    }
}

fn load_mvtec(root: &Path, category: &str, options: LoadOptions) -> Result<CategoryData> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let test_dir = base.join("test");
    require_dir(&train_dir, MVTEC_LAYOUT)?;
    require_dir(&test_dir, MVTEC_LAYOUT)?;

    let mut data = CategoryData::default();
    for path in sorted_images(&train_dir)? {
        let image = Image::load(&path, options.resize, options.crop)?;
        data.train_normals.push(ImageSample::normal(image, path.display().to_string()));
    }
    for defect_dir in sorted_subdirs(&test_dir)? {
        let defect = defect_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for path in sorted_images(&defect_dir)? {
            let image = Image::load(&path, options.resize, options.crop)?;
            let source = path.display().to_string();
            if defect == "good" {
                let mut sample = ImageSample::normal(image, source);
                sample.y_contaminated = 0;
                data.test_normals.push(sample);
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let mask_path = base
                .join("ground_truth")
                .join(&defect)
                .join(format!("{stem}_mask.png"));
            let mask = if mask_path.is_file() {
                load_mask(&mask_path, options)?
            } else {
                log::warn!("no ground-truth mask for {}", path.display());
                AnomalyMask::zeros(options.crop, options.crop)
            };
            data.test_anomalies.push(ImageSample::anomaly(image, mask, source));
        }
    }
    check_nonempty(&data, &base, MVTEC_LAYOUT)?;
    Ok(data)
}

#[derive(Debug, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
    #[serde(default)]
    mask: Option<String>,
}

fn load_visa(root: &Path, category: &str, options: LoadOptions) -> Result<CategoryData> {
    let split = root.join("split_csv").join("1cls.csv");
    if !split.is_file() {
        return Err(Error::config(format!("missing split file {}\n{VISA_LAYOUT}", split.display())));
    }
    require_dir(&root.join(category), VISA_LAYOUT)?;
    let mut rows: Vec<VisaRow> = csv::Reader::from_path(&split)?
        .deserialize()
        .filter(|r: &std::result::Result<VisaRow, _>| r.as_ref().map_or(true, |r| r.object == category))
        .collect::<std::result::Result<_, _>>()?;
    rows.sort_by(|a, b| a.image.cmp(&b.image));

    let mut data = CategoryData::default();
    for row in rows {
        let path = root.join(&row.image);
        let image = Image::load(&path, options.resize, options.crop)?;
        let source = path.display().to_string();
        let anomalous = row.label.eq_ignore_ascii_case("anomaly");
        match (row.split.as_str(), anomalous) {
            ("train", false) => data.train_normals.push(ImageSample::normal(image, source)),
            ("test", false) => data.test_normals.push(ImageSample::normal(image, source)),
            ("test", true) => {
                let mask = match row.mask.as_deref().filter(|m| !m.is_empty()) {
                    Some(m) => load_mask(&root.join(m), options)?,
                    None => AnomalyMask::zeros(options.crop, options.crop),
                };
                data.test_anomalies.push(ImageSample::anomaly(image, mask, source));
            }
            (split, _) => log::warn!("ignoring {} (split {split:?}, label {:?})", row.image, row.label),
        }
    }
    check_nonempty(&data, &root.join(category), VISA_LAYOUT)?;
    Ok(data)
}

fn check_nonempty(data: &CategoryData, base: &Path, layout: &str) -> Result<()> {
    for (name, n) in [
        ("training normals", data.train_normals.len()),
        ("test normals", data.test_normals.len()),
        ("test anomalies", data.test_anomalies.len()),
    ] {
        if n == 0 {
            return Err(Error::config(format!("no {name} found under {}\n{layout}", base.display())));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    /// Fraction of the normal pool replaced by disguised anomalies, in `[0, 0.5)`.
    pub epsilon: f64,
    /// Std of the pixel noise added to each disguised anomaly.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::arg(format!("epsilon {} outside [0, 0.5)", self.epsilon)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::arg(format!("noise_sigma {} must be non-negative", self.noise_sigma)));
        }
        Ok(())
    }

    /// `⌊ε·n⌋`
    pub fn count(&self, n: usize) -> usize {
        (self.epsilon * n as f64 + 1e-9).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub source: String,
    pub y_true: u8,
    /// Seed of the pixel noise, for disguised anomalies.
    pub noise_seed: Option<u64>,
}

/// Audit record of a contaminated training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationManifest {
    pub spec: ContaminationSpec,
    pub n: usize,
    pub n_contaminated: usize,
    /// Sampled anomalies stay in the test set; this lists how many test images overlap.
    pub test_overlap: usize,
    pub entries: Vec<ManifestEntry>,
}

impl ContaminationManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct ContaminatedSet {
    pub samples: Vec<ImageSample>,
    pub manifest: ContaminationManifest,
}

/// Replace `⌊ε·n⌋` normals with noisy test anomalies labeled as normal.
///
/// Anomalies are drawn without replacement when enough exist. The replaced positions are
/// chosen at random; everything is determined by `spec.seed`.
pub fn inject_contamination(
    train_normals: &[ImageSample],
    test_anomalies: &[ImageSample],
    spec: &ContaminationSpec,
) -> Result<ContaminatedSet> {
    spec.validate()?;
    let n = train_normals.len();
    let count = spec.count(n);
    if count > 0 && test_anomalies.is_empty() {
        return Err(Error::arg("contamination requested but there are no test anomalies to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    positions.truncate(count);
    positions.sort_unstable();

    let mut picks: Vec<usize> = (0..test_anomalies.len()).collect();
    picks.shuffle(&mut rng);
    if count > picks.len() {
        log::warn!(
            "only {} test anomalies for {count} contaminants; sampling with replacement",
            picks.len()
        );
        picks = (0..count).map(|_| rng.random_range(0..test_anomalies.len())).collect();
    }
    picks.truncate(count);

    let mut samples = train_normals.to_vec();
    let mut entries: Vec<ManifestEntry> = samples
        .iter()
        .enumerate()
        .map(|(index, s)| ManifestEntry {
            index,
            source: s.source.clone(),
            y_true: s.y_true,
            noise_seed: None,
        })
        .collect();
    for (&pos, &pick) in positions.iter().zip(&picks) {
        let noise_seed = rng.next_u64();
        let (h, w) = samples[pos].image.size();
        let original = &test_anomalies[pick];
        let image = disguise(&original.image, h, w, spec.noise_sigma, noise_seed)?;
        samples[pos] = ImageSample {
            image,
            y_contaminated: 0,
            y_true: 1,
            is_pseudo: false,
            gt_mask: AnomalyMask::zeros(h, w),
            source: original.source.clone(),
        };
        entries[pos] = ManifestEntry {
            index: pos,
            source: original.source.clone(),
            y_true: 1,
            noise_seed: Some(noise_seed),
        };
    }
    let mut overlap: Vec<usize> = picks.clone();
    overlap.sort_unstable();
    overlap.dedup();
    if !overlap.is_empty() {
        log::warn!(
            "{} test anomalies also appear (noised) in the training set",
            overlap.len()
        );
    }
    Ok(ContaminatedSet {
        samples,
        manifest: ContaminationManifest {
            spec: *spec,
            n,
            n_contaminated: count,
            test_overlap: overlap.len(),
            entries,
        },
    })
}

fn disguise(image: &Image, h: usize, w: usize, sigma: f64, seed: u64) -> Result<Image> {
    let mut out = if image.size() == (h, w) {
        image.clone()
    } else {
        image.resized(h, w)
    };
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma as f32).map_err(|e| Error::arg(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
        out.clamp_unit();
    }
    Ok(out)
}

/// `⌊ratio · batch_size⌋`
pub fn pseudo_count(batch_size: usize, pseudo_ratio: f64) -> usize {
    (pseudo_ratio * batch_size as f64 + 1e-9).floor() as usize
}

/// Split `n` pool members into minibatches: `(normals, total batch size)` per batch, where
/// `normals + ⌊ratio · total⌋ = total`. A trailing remainder becomes the largest batch that
/// fits it; if that batch would hold fewer than two samples it is dropped.
pub fn batch_plan(n: usize, batch_size: usize, pseudo_ratio: f64) -> Vec<(usize, usize)> {
    let per_batch = batch_size - pseudo_count(batch_size, pseudo_ratio);
    let mut plan = vec![(per_batch, batch_size); n / per_batch];
    let rest = n % per_batch;
    if rest > 0 {
        let total = (rest..=batch_size)
            .filter(|&b| b - pseudo_count(b, pseudo_ratio) == rest)
            .max();
        if let Some(total) = total.filter(|&t| t >= 2) {
            plan.push((rest, total));
        }
    }
    plan
}

/// Assemble a minibatch from `normals` (the batch's pool members) plus
/// `⌊ratio · batch_size⌋` pseudo-anomalies synthesized from them in turn.
pub fn make_training_batch(
    normals: &[&ImageSample],
    batch_size: usize,
    pseudo_ratio: f64,
    generator: &PseudoAnomalyGenerator,
    rng: &mut dyn RngCore,
) -> Result<Vec<ImageSample>> {
    if batch_size < 2 {
        return Err(Error::arg(format!("batch size {batch_size} < 2")));
    }
    if !(0.0..1.0).contains(&pseudo_ratio) {
        return Err(Error::arg(format!("pseudo_ratio {pseudo_ratio} outside [0, 1)")));
    }
    let n_pseudo = pseudo_count(batch_size, pseudo_ratio);
    if normals.len() != batch_size - n_pseudo {
        return Err(Error::arg(format!(
            "batch of {batch_size} with {n_pseudo} pseudo-anomalies needs {} normals, got {}",
            batch_size - n_pseudo,
            normals.len()
        )));
    }
    let mut batch: Vec<ImageSample> = normals.iter().map(|&s| s.clone()).collect();
    for i in 0..n_pseudo {
        let base = normals[i % normals.len()];
        let pseudo = generator.generate(&base.image, rng)?;
        batch.push(ImageSample {
            image: pseudo.image,
            y_contaminated: 1,
            y_true: 1,
            is_pseudo: true,
            gt_mask: pseudo.mask,
            source: format!("pseudo:{}", base.source),
        });
    }
    Ok(batch)
}

/// Stack equally sized images into a `[B, C, H, W]` tensor.
pub fn stack_images<B: Backend>(images: &[&Image], device: &B::Device) -> Result<Tensor<B, 4>> {
    let first = images.first().ok_or_else(|| Error::arg("no images to stack"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut flat = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::arg("images in a batch must share their shape"));
        }
        flat.extend_from_slice(img.data());
    }
    Ok(Tensor::from_data(TensorData::new(flat, [images.len(), c, h, w]), device))
}

/// Stack equally sized masks into a `[B, 1, H, W]` tensor of zeros and ones.
pub fn stack_masks<B: Backend>(masks: &[&AnomalyMask], device: &B::Device) -> Result<Tensor<B, 4>> {
    let first = masks.first().ok_or_else(|| Error::arg("no masks to stack"))?;
    let (h, w) = first.size();
    let mut flat = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.size() != (h, w) {
            return Err(Error::arg("masks in a batch must share their shape"));
        }
        flat.extend(m.to_f32());
    }
    Ok(Tensor::from_data(TensorData::new(flat, [masks.len(), 1, h, w]), device))
}

/// A synthetic two-class image set: smooth flat textures as normals, the same textures
/// with compact colour-shifted blobs as anomalies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub resolution: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            resolution: 48,
            n_train: 120,
            n_test_normal: 40,
            n_test_anomalous: 40,
            seed: 0,
        }
    }
}

fn toy_normal(res: usize, rng: &mut ChaCha8Rng) -> Image {
    let base: [f32; 3] = [
        rng.random_range(0.35..0.55),
        rng.random_range(0.35..0.55),
        rng.random_range(0.35..0.55),
    ];
    let grain = perlin_noise(res, res, 4, 4, rng);
    let mut img = Image::filled(res, res, base);
    for y in 0..res {
        for x in 0..res {
            let d = 0.08 * (grain[y * res + x] - 0.5) + 0.01 * (rng.random::<f32>() - 0.5);
            for c in 0..3 {
                img.set(c, y, x, (base[c] + d).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn toy_blobs(img: &mut Image, rng: &mut ChaCha8Rng) -> AnomalyMask {
    let res = img.height();
    let mut values = vec![0u8; res * res];
    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        let r = rng.random_range(res as f32 * 0.06..res as f32 * 0.14);
        let cy = rng.random_range(r..res as f32 - r);
        let cx = rng.random_range(r..res as f32 - r);
        let aspect = rng.random_range(0.6f32..1.6);
        // a moderate shift of the local colour, darker or brighter
        let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let shift: [f32; 3] = std::array::from_fn(|_| sign * rng.random_range(0.12f32..0.3));
        for y in 0..res {
            for x in 0..res {
                let dy = (y as f32 + 0.5 - cy) / (r * aspect);
                let dx = (x as f32 + 0.5 - cx) / r;
                if dy * dy + dx * dx <= 1.0 {
                    values[y * res + x] = 1;
                    for c in 0..3 {
                        img.set(c, y, x, (img.get(c, y, x) + shift[c]).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    AnomalyMask::from_values(res, res, values).expect("binary by construction")
}

/// Generate the toy category deterministically from `config.seed`.
pub fn toy_category(config: &ToyConfig) -> Result<CategoryData> {
    if config.resolution < 16 {
        return Err(Error::arg("toy resolution must be at least 16"));
    }
    if config.n_train == 0 || config.n_test_normal == 0 || config.n_test_anomalous == 0 {
        return Err(Error::arg("toy split sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let res = config.resolution;
    let mut data = CategoryData::default();
    for i in 0..config.n_train {
        data.train_normals.push(ImageSample::normal(toy_normal(res, &mut rng), format!("toy:train/{i}")));
    }
    for i in 0..config.n_test_normal {
        data.test_normals.push(ImageSample::normal(toy_normal(res, &mut rng), format!("toy:test/good/{i}")));
    }
    for i in 0..config.n_test_anomalous {
        let mut img = toy_normal(res, &mut rng);
        let mask = toy_blobs(&mut img, &mut rng);
        data.test_anomalies.push(ImageSample::anomaly(img, mask, format!("toy:test/blob/{i}")));
    }
    Ok(data)
}
