//! Pseudo-anomaly synthesis: thresholded Perlin-noise masks and opacity blending of an
//! unrelated texture into a normal image.
//!
//! The blend is
//!
//! ```text
//! I_p = (1 − M) ⊙ I + β (M ⊙ I_s) + (1 − β)(M ⊙ I)
//! ```
//!
//! evaluated literally per pixel, so pixels outside the mask are bit-identical to the
//! normal image.

use std::f32::consts::{PI, SQRT_2};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// A binary `H×W` mask; every entry is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnomalyMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl AnomalyMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    /// Build from raw values, rejecting anything outside `{0, 1}`.
    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::arg(format!(
                "mask has {} values, expected {}",
                values.len(),
                height * width
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::arg("mask entries must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Binarize a grayscale image: any pixel above one half counts as anomalous.
    pub fn from_image(image: &Image) -> Self {
        let (height, width) = image.size();
        let values = (0..height * width)
            .map(|i| u8::from(image.data()[i] > 0.5))
            .collect();
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.values.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| f32::from(v)).collect()
    }

    /// Nearest-neighbour resize; keeps the mask binary.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.size() {
            return self.clone();
        }
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                values.push(self.get(sy, sx));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn to_image(&self) -> Image {
        Image::new(1, self.height, self.width, self.to_f32()).expect("mask dimensions are valid")
    }
}

/// Parameters of the pseudo-anomaly generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendSpec {
    /// Opacity β is drawn uniformly per image from this closed interval.
    pub beta_range: [f32; 2],
    /// Candidate Perlin lattice periods; one is drawn per axis per mask.
    pub perlin_periods: Vec<usize>,
    /// Threshold on noise normalized to `[0, 1]`; values strictly above it are masked.
    pub mask_threshold: f32,
    /// Randomly rotate/flip the source texture before blending.
    pub augment_source: bool,
}

impl Default for BlendSpec {
    fn default() -> Self {
        Self {
            beta_range: [0.1, 1.0],
            perlin_periods: vec![2, 4, 8, 16],
            mask_threshold: 0.5,
            augment_source: true,
        }
    }
}

impl BlendSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.beta_range;
        if !(0.1..=1.0).contains(&lo) || !(0.1..=1.0).contains(&hi) || lo > hi {
            return Err(Error::arg(format!(
                "beta_range must satisfy 0.1 <= lo <= hi <= 1.0, got [{lo}, {hi}]"
            )));
        }
        if self.perlin_periods.is_empty() || self.perlin_periods.contains(&0) {
            return Err(Error::arg("perlin_periods must be a non-empty list of positive integers"));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::arg(format!(
                "mask_threshold {} outside the normalized noise range [0, 1]",
                self.mask_threshold
            )));
        }
        Ok(())
    }
}

/// 2-D gradient noise on a `period_y × period_x` lattice, normalized to `[0, 1]`.
pub fn perlin_noise(
    height: usize,
    width: usize,
    period_y: usize,
    period_x: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Vec<f32> {
    let gw = period_x + 1;
    let gradients: Vec<(f32, f32)> = (0..(period_y + 1) * gw)
        .map(|_| {
            let angle = rng.random::<f32>() * 2.0 * PI;
            (angle.cos(), angle.sin())
        })
        .collect();
    let fade = |t: f32| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);

    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let gy = y as f32 * period_y as f32 / height as f32;
        let iy = (gy as usize).min(period_y - 1);
        let fy = gy - iy as f32;
        for x in 0..width {
            let gx = x as f32 * period_x as f32 / width as f32;
            let ix = (gx as usize).min(period_x - 1);
            let fx = gx - ix as f32;
            let dot = |cy: usize, cx: usize, dy: f32, dx: f32| {
                let (gxv, gyv) = gradients[cy * gw + cx];
                gxv * dx + gyv * dy
            };
            let n00 = dot(iy, ix, fy, fx);
            let n01 = dot(iy, ix + 1, fy, fx - 1.0);
            let n10 = dot(iy + 1, ix, fy - 1.0, fx);
            let n11 = dot(iy + 1, ix + 1, fy - 1.0, fx - 1.0);
            let (u, v) = (fade(fx), fade(fy));
            let n = lerp(lerp(n00, n01, u), lerp(n10, n11, u), v);
            // |n| <= sqrt(2)/2 for unit gradients
            out.push((n / SQRT_2 + 0.5).clamp(0.0, 1.0));
        }
    }
    out
}

/// Threshold fresh Perlin noise into a binary mask. Deterministic given the rng state.
pub fn generate_perlin_mask(
    height: usize,
    width: usize,
    rng: &mut (impl Rng + ?Sized),
    spec: &BlendSpec,
) -> Result<AnomalyMask> {
    if height == 0 || width == 0 {
        return Err(Error::arg(format!(
            "mask dimensions must be positive, got {height}x{width}"
        )));
    }
    spec.validate()?;
    let py = spec.perlin_periods[rng.random_range(0..spec.perlin_periods.len())];
    let px = spec.perlin_periods[rng.random_range(0..spec.perlin_periods.len())];
    let noise = perlin_noise(height, width, py, px, rng);
    let values = noise
        .iter()
        .map(|&n| u8::from(n > spec.mask_threshold))
        .collect();
    Ok(AnomalyMask {
        height,
        width,
        values,
    })
}

/// Blend `source` into `normal` under `mask` with opacity `beta ∈ [0, 1]`.
pub fn blend_pseudo_anomaly(
    normal: &Image,
    source: &Image,
    mask: &AnomalyMask,
    beta: f32,
) -> Result<Image> {
    if normal.size() != source.size()
        || normal.size() != mask.size()
        || normal.channels() != source.channels()
    {
        return Err(Error::arg(format!(
            "blend inputs disagree in shape: normal {}x{:?}, source {}x{:?}, mask {:?}",
            normal.channels(),
            normal.size(),
            source.channels(),
            source.size(),
            mask.size()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::arg(format!("beta {beta} outside [0, 1]")));
    }
    let plane = mask.values.len();
    let mut out = normal.clone();
    let (ni, si) = (normal.data(), source.data());
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let m = f32::from(mask.values[k % plane]);
        let (i, s) = (ni[k], si[k]);
        *o = (1.0 - m) * i + beta * (m * s) + (1.0 - beta) * (m * i);
    }
    Ok(out)
}

/// Where anomaly source textures come from.
pub trait AnomalySource: Send + Sync {
    /// Draw one RGB source image of the requested size.
    fn sample(&self, height: usize, width: usize, rng: &mut dyn RngCore) -> Result<Image>;
}

/// A directory tree of raster images used as the external texture corpus.
#[derive(Clone, Debug)]
pub struct TextureCorpus {
    root: PathBuf,
    files: Vec<PathBuf>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

impl TextureCorpus {
    /// Index every image file below `root` (sorted, so indices are stable across runs).
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::config(format!(
                "texture_dir {} is not a directory",
                root.display()
            )));
        }
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&root)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && is_image_file(e.path()))
            .map(|e| e.into_path())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!(
                "texture corpus {} contains no images",
                root.display()
            )));
        }
        Ok(Self { root, files })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Uniformly pick a file index.
    pub fn pick(&self, rng: &mut (impl Rng + ?Sized)) -> usize {
        rng.random_range(0..self.files.len())
    }
}

impl AnomalySource for TextureCorpus {
    fn sample(&self, height: usize, width: usize, rng: &mut dyn RngCore) -> Result<Image> {
        sample_source_image(self, height, width, rng)
    }
}

/// Decode a uniformly chosen corpus image resized to `height×width`. Unreadable files are
/// skipped with a warning and another file is drawn.
pub fn sample_source_image(
    corpus: &TextureCorpus,
    height: usize,
    width: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Image> {
    let attempts = 8 * corpus.len().max(1);
    for _ in 0..attempts {
        let path = &corpus.files[corpus.pick(rng)];
        match image::open(path) {
            Ok(img) => {
                let rgb = image::imageops::resize(
                    &img.to_rgb8(),
                    width as u32,
                    height as u32,
                    image::imageops::FilterType::Triangle,
                );
                return Ok(Image::from_rgb8(&rgb));
            }
            Err(e) => log::warn!("skipping unreadable texture {}: {e}", path.display()),
        }
    }
    Err(Error::config(format!(
        "no readable texture found in {} after {attempts} draws",
        corpus.root.display()
    )))
}

/// Randomly generated stripes, checkers, blotches and gradients; needs no files on disk.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProceduralTextures;

impl AnomalySource for ProceduralTextures {
    fn sample(&self, height: usize, width: usize, rng: &mut dyn RngCore) -> Result<Image> {
        let mut color = || -> [f32; 3] { [rng.random(), rng.random(), rng.random()] };
        let (a, b) = (color(), color());
        let kind = rng.random_range(0..4u8);
        let period = rng.random_range(2..=8usize) as f32;
        let angle = rng.random::<f32>() * PI;
        let (ca, sa) = (angle.cos(), angle.sin());
        let blotch = perlin_noise(height, width, 4, 4, rng);
        let mut img = Image::filled(height, width, a);
        for y in 0..height {
            for x in 0..width {
                let t = match kind {
                    0 => {
                        let u = x as f32 * ca + y as f32 * sa;
                        f32::from(((u / period) as i64).rem_euclid(2) == 0)
                    }
                    1 => f32::from((x / period as usize + y / period as usize) % 2 == 0),
                    2 => blotch[y * width + x],
                    _ => (x as f32 * ca + y as f32 * sa).abs() / (height + width) as f32,
                };
                let t = t.clamp(0.0, 1.0);
                for c in 0..3 {
                    img.set(c, y, x, a[c] + t * (b[c] - a[c]));
                }
            }
        }
        Ok(img)
    }
}

/// One synthesized pseudo-anomaly.
#[derive(Clone, Debug)]
pub struct PseudoAnomaly {
    pub image: Image,
    pub mask: AnomalyMask,
    pub beta: f32,
}

/// Couples a [`BlendSpec`] with a texture source.
pub struct PseudoAnomalyGenerator {
    spec: BlendSpec,
    source: Box<dyn AnomalySource>,
}

impl std::fmt::Debug for PseudoAnomalyGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PseudoAnomalyGenerator")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

const MAX_MASK_DRAWS: usize = 32;

impl PseudoAnomalyGenerator {
    pub fn new(spec: BlendSpec, source: Box<dyn AnomalySource>) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, source })
    }

    pub fn spec(&self) -> &BlendSpec {
        &self.spec
    }

    /// Synthesize a pseudo-anomaly from `base`. Masks are redrawn until non-empty; β is
    /// drawn per image.
    pub fn generate(&self, base: &Image, rng: &mut dyn RngCore) -> Result<PseudoAnomaly> {
        let (h, w) = base.size();
        let mut mask = generate_perlin_mask(h, w, rng, &self.spec)?;
        for _ in 1..MAX_MASK_DRAWS {
            if !mask.is_empty() {
                break;
            }
            mask = generate_perlin_mask(h, w, rng, &self.spec)?;
        }
        let mut source = self.source.sample(h, w, rng)?;
        if self.spec.augment_source {
            source = source.rotated(rng.random_range(0..4u8));
            if rng.random_bool(0.5) {
                source = source.flipped_horizontal();
            }
        }
        let [lo, hi] = self.spec.beta_range;
        let beta = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let image = blend_pseudo_anomaly(base, &source, &mask, beta)?;
        Ok(PseudoAnomaly { image, mask, beta })
    }
}
