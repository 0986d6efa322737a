//! Training objectives.
//!
//! Every loss exists twice: a scalar `f64` form that states the formula plainly, and a
//! batched tensor form (in [`batched`]) used for backpropagation. Tests check the two
//! against each other.
//!
//! With standard score `Z = (ψ_K − μ_S) / σ_S`:
//!
//! * deviation: `(1 − y)|Z| + y·max(0, γ − Z)`
//! * soft deviation: the same with `y` replaced by the classifier probability `p`
//! * BCE: `−(1 − ŷ) ln(1 − p) − ŷ ln p`, `p` clamped to `[ε_c, 1 − ε_c]`
//! * focal: `−(1 − p_t)^γ_f ln p_t`, averaged over pixels

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_synth::AnomalyMask;

/// Probability clamp used inside BCE and focal losses.
pub const BCE_EPS: f64 = 1e-7;

/// Sample mean and standard deviation of `m` reference scores drawn from the prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub mu_s: f64,
    pub sigma_s: f64,
    pub m: usize,
    pub prior_mu: f64,
    pub prior_sigma: f64,
}

impl ReferenceStats {
    /// Stats with given moments, bypassing sampling.
    pub fn fixed(mu_s: f64, sigma_s: f64) -> Result<Self> {
        if !(sigma_s > 0.0) || !mu_s.is_finite() || !sigma_s.is_finite() {
            return Err(Error::DegeneratePrior);
        }
        Ok(Self {
            mu_s,
            sigma_s,
            m: 0,
            prior_mu: mu_s,
            prior_sigma: sigma_s,
        })
    }

    /// Standard score of an image score.
    pub fn z(&self, psi_k: f64) -> f64 {
        (psi_k - self.mu_s) / self.sigma_s
    }
}

pub fn sample_reference_stats(
    m: usize,
    prior_mu: f64,
    prior_sigma: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<ReferenceStats> {
    if m < 2 {
        return Err(Error::arg(format!(
            "need at least 2 reference draws for a standard deviation, got {m}"
        )));
    }
    if !(prior_sigma >= 0.0) || !prior_sigma.is_finite() || !prior_mu.is_finite() {
        return Err(Error::arg(format!(
            "prior N({prior_mu}, {prior_sigma}) needs a finite mean and non-negative std"
        )));
    }
    let normal = Normal::new(prior_mu, prior_sigma)
        .map_err(|e| Error::arg(format!("invalid prior N({prior_mu}, {prior_sigma}): {e}")))?;
    let draws: Vec<f64> = (0..m).map(|_| normal.sample(rng)).collect();
    let mu_s = draws.iter().sum::<f64>() / m as f64;
    let var = draws.iter().map(|s| (s - mu_s).powi(2)).sum::<f64>() / (m - 1) as f64;
    let sigma_s = var.sqrt();
    if !(sigma_s > 0.0) {
        return Err(Error::DegeneratePrior);
    }
    Ok(ReferenceStats {
        mu_s,
        sigma_s,
        m,
        prior_mu,
        prior_sigma,
    })
}

/// Hard-label deviation loss; `y` is 0 (normal) or 1 (anomalous).
pub fn deviation_loss(psi_k: f64, y: u8, stats: &ReferenceStats, gamma: f64) -> f64 {
    soft_deviation_loss(psi_k, f64::from(y.min(1)), stats, gamma)
}

/// Deviation loss with a soft label `p ∈ [0, 1]`.
pub fn soft_deviation_loss(psi_k: f64, p: f64, stats: &ReferenceStats, gamma: f64) -> f64 {
    let z = stats.z(psi_k);
    (1.0 - p) * z.abs() + p * (gamma - z).max(0.0)
}

/// Pseudo labels from an exact 1-D 2-means partition of the batch scores: the cluster with
/// the higher centroid is labelled 1. Falls back to `y` when no split exists.
pub fn kmeans_soft_targets(scores: &[f64], y: &[u8]) -> Vec<u8> {
    let n = scores.len();
    if n < 2 || n != y.len() {
        return y.to_vec();
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let sse = |lo: usize, hi: usize| {
        let cnt = (hi - lo) as f64;
        let s = prefix[hi] - prefix[lo];
        (prefix_sq[hi] - prefix_sq[lo]) - s * s / cnt
    };
    let mut best: Option<(f64, usize)> = None;
    for split in 1..n {
        // equal values must share a cluster
        if sorted[split - 1] == sorted[split] {
            continue;
        }
        let cost = sse(0, split) + sse(split, n);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, split));
        }
    }
    match best {
        Some((_, split)) => {
            let boundary = sorted[split];
            scores.iter().map(|&s| u8::from(s >= boundary)).collect()
        }
        None => y.to_vec(),
    }
}

pub fn bce_loss(p: f64, y_hat: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let y = f64::from(y_hat.min(1));
    -(1.0 - y) * (1.0 - p).ln() - y * p.ln()
}

/// Mean per-pixel focal loss between predicted foreground probabilities and a binary mask.
pub fn focal_seg_loss(pred: &[f64], gt: &AnomalyMask, focal_gamma: f64) -> Result<f64> {
    if pred.len() != gt.values().len() {
        return Err(Error::arg(format!(
            "prediction has {} pixels, mask has {}",
            pred.len(),
            gt.values().len()
        )));
    }
    let total: f64 = pred
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let pt = if g == 1 { p } else { 1.0 - p };
            -(1.0 - pt).powf(focal_gamma) * pt.ln()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Which labels feed the BCE term at a given step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// Even global steps use the given labels, odd steps the k-means labels.
    Step,
    /// Even epochs use the given labels, odd epochs the k-means labels.
    Epoch,
    /// Always the given labels.
    Off,
}

impl Alternation {
    /// `true` when the k-means labels should be used.
    pub fn use_kmeans(self, epoch: usize, global_step: usize) -> bool {
        match self {
            Alternation::Step => global_step % 2 == 1,
            Alternation::Epoch => epoch % 2 == 1,
            Alternation::Off => false,
        }
    }
}

/// Tensor forms of the losses, one value per sample.
pub mod batched {
    use burn::tensor::activation::relu;
    use burn::tensor::backend::Backend;
    use burn::tensor::Tensor;

    use super::{ReferenceStats, BCE_EPS};

    /// `[B]` soft deviation losses. `p` may be hard labels for the plain deviation loss.
    pub fn soft_deviation<B: Backend>(
        psi_k: Tensor<B, 1>,
        p: Tensor<B, 1>,
        stats: &ReferenceStats,
        gamma: f64,
    ) -> Tensor<B, 1> {
        let z = psi_k.sub_scalar(stats.mu_s).div_scalar(stats.sigma_s);
        let hinge = relu(z.clone().neg().add_scalar(gamma));
        p.clone().neg().add_scalar(1.0) * z.abs() + p * hinge
    }

    /// `[B]` binary cross-entropies.
    pub fn bce<B: Backend>(p: Tensor<B, 1>, y_hat: Tensor<B, 1>) -> Tensor<B, 1> {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let neg = y_hat.clone().neg().add_scalar(1.0) * p.clone().neg().add_scalar(1.0).log();
        (neg + y_hat * p.log()).neg()
    }

    /// `[B]` focal losses, each the mean over the pixels of one sample.
    pub fn focal<B: Backend>(pred: Tensor<B, 4>, gt: Tensor<B, 4>, focal_gamma: f64) -> Tensor<B, 1> {
        let [b, c, h, w] = pred.dims();
        let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let pt = gt.clone() * p.clone() + gt.neg().add_scalar(1.0) * p.neg().add_scalar(1.0);
        let modulator = pt.clone().neg().add_scalar(1.0).powf_scalar(focal_gamma);
        let per_pixel = (modulator * pt.log()).neg();
        per_pixel.reshape([b, c * h * w]).mean_dim(1).reshape([b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> ReferenceStats {
        ReferenceStats::fixed(0.0, 1.0).unwrap()
    }

    #[test]
    fn deviation_hand_values() {
        let s = unit();
        assert_eq!(deviation_loss(2.0, 0, &s, 5.0), 2.0);
        assert_eq!(deviation_loss(2.0, 1, &s, 5.0), 3.0);
        assert_eq!(deviation_loss(6.0, 1, &s, 5.0), 0.0);
        assert_eq!(soft_deviation_loss(2.0, 0.5, &s, 5.0), 2.5);
    }

    #[test]
    fn soft_reduces_to_hard() {
        let s = ReferenceStats::fixed(0.3, 1.7).unwrap();
        for psi in [-3.0, 0.0, 0.3, 2.0, 9.0] {
            for y in [0u8, 1] {
                assert_eq!(
                    soft_deviation_loss(psi, f64::from(y), &s, 5.0),
                    deviation_loss(psi, y, &s, 5.0)
                );
            }
        }
    }

    #[test]
    fn reference_stats_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_reference_stats(10, 0.0, 0.0, &mut rng),
            Err(Error::DegeneratePrior)
        ));
        assert!(sample_reference_stats(1, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_reference_stats(10, 0.0, -1.0, &mut rng).is_err());
        let a = sample_reference_stats(5000, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_reference_stats(5000, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_stats_concentrate() {
        // |μ_S| has std 1/√5000 ≈ 0.014, σ_S has std ≈ 0.01: 0.05 is a >3.5σ margin
        for seed in 0..20 {
            let s = sample_reference_stats(5000, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(s.mu_s.abs() < 0.05, "seed {seed}: {s:?}");
            assert!((s.sigma_s - 1.0).abs() < 0.05, "seed {seed}: {s:?}");
        }
    }

    #[test]
    fn kmeans_examples() {
        assert_eq!(kmeans_soft_targets(&[0.1, 0.2, 5.0, 5.1], &[0; 4]), vec![0, 0, 1, 1]);
        assert_eq!(kmeans_soft_targets(&[-3.0, -3.0, -3.0, 4.0], &[1, 1, 0, 0]), vec![0, 0, 0, 1]);
        assert_eq!(kmeans_soft_targets(&[2.0; 5], &[0, 1, 0, 1, 1]), vec![0, 1, 0, 1, 1]);
        assert_eq!(kmeans_soft_targets(&[5.1, 0.1, 5.0, 0.2], &[0; 4]), vec![1, 0, 1, 0]);
        assert_eq!(kmeans_soft_targets(&[1.0], &[1]), vec![1]);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1) - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!((bce_loss(0.9, 0) - 2.302_585_092_994_045_7).abs() < 1e-9);
        assert!(bce_loss(0.0, 0) < 1e-6);
        assert!(bce_loss(1.0, 1) < 1e-6);
    }

    #[test]
    fn focal_values() {
        let one = AnomalyMask::ones(1, 1);
        let v = focal_seg_loss(&[0.5], &one, 2.0).unwrap();
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        let zeros = AnomalyMask::zeros(2, 2);
        let pred = [0.1, 0.2, 0.3, 0.05];
        let focal0 = focal_seg_loss(&pred, &zeros, 0.0).unwrap();
        let bce = pred.iter().map(|&p| bce_loss(p, 0)).sum::<f64>() / 4.0;
        assert!((focal0 - bce).abs() < 1e-12);
        assert!(focal_seg_loss(&[1.0 - 1e-12; 4], &AnomalyMask::ones(2, 2), 2.0).unwrap() < 1e-12);
        assert!(focal_seg_loss(&[0.5; 3], &zeros, 2.0).is_err());
    }

    #[test]
    fn alternation_schedule() {
        assert!(!Alternation::Step.use_kmeans(1, 0));
        assert!(Alternation::Step.use_kmeans(1, 1));
        assert!(Alternation::Epoch.use_kmeans(1, 0));
        assert!(!Alternation::Off.use_kmeans(1, 1));
    }
}
