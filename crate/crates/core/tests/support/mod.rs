//! Independent reference implementations used by the integration tests and the acceptance
//! runner. None of these call into the library's own closed forms.

#![allow(dead_code)]

pub mod criteria;

use deviation_ad::data::{toy_category, CategoryData, ToyConfig};
use deviation_ad::noise_synth::{BlendSpec, ProceduralTextures, PseudoAnomalyGenerator};
use deviation_ad::reweighting::{DivergenceKind, DivergenceSpec};

/// Regularized objective `Σ w L + τ·D(w‖u)` on the simplex, with the divergence chosen so
/// its minimizer is the closed form under test. The scale `τ` is what the Lagrangian
/// relaxation assigns to that closed form's temperature `λ`.
pub struct SimplexProblem {
    pub losses: Vec<f64>,
    pub kind: DivergenceKind,
    pub alpha: f64,
    pub tau: f64,
}

impl SimplexProblem {
    /// `None` when the α brackets are not all positive (no interior minimizer).
    pub fn new(losses: &[f64], spec: &DivergenceSpec) -> Option<Self> {
        let n = losses.len() as f64;
        let lambda = spec.lambda;
        let tau = match spec.kind {
            DivergenceKind::Kl => lambda,
            DivergenceKind::ReverseKl => n / losses.iter().map(|l| 1.0 / (l + lambda)).sum::<f64>(),
            DivergenceKind::Alpha => {
                let a = spec.alpha;
                let brackets: Vec<f64> = losses.iter().map(|l| (1.0 - a) * l + lambda).collect();
                if brackets.iter().any(|&b| b <= 0.0) {
                    return None;
                }
                let mean = brackets.iter().map(|b| b.powf(1.0 / (a - 1.0))).sum::<f64>() / n;
                mean.powf(a - 1.0)
            }
        };
        Some(Self {
            losses: losses.to_vec(),
            kind: spec.kind,
            alpha: spec.alpha,
            tau,
        })
    }

    fn n(&self) -> f64 {
        self.losses.len() as f64
    }

    /// Objective value; `+∞` outside the open simplex interior.
    pub fn value(&self, w: &[f64]) -> f64 {
        if w.iter().any(|&x| !(x > 0.0)) {
            return f64::INFINITY;
        }
        let n = self.n();
        let linear: f64 = w.iter().zip(&self.losses).map(|(a, b)| a * b).sum();
        let div: f64 = match self.kind {
            DivergenceKind::Kl => w.iter().map(|&x| x * (n * x).ln()).sum(),
            DivergenceKind::ReverseKl => w.iter().map(|&x| -(n * x).ln() / n).sum(),
            DivergenceKind::Alpha => {
                let a = self.alpha;
                w.iter()
                    .map(|&x| {
                        let t = n * x;
                        (t.powf(a) - 1.0 - a * (t - 1.0)) / (a * (a - 1.0)) / n
                    })
                    .sum()
            }
        };
        linear + self.tau * div
    }

    fn gradient_and_hessian(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let a = self.alpha;
        w.iter()
            .zip(&self.losses)
            .map(|(&x, &l)| match self.kind {
                DivergenceKind::Kl => (l + self.tau * ((n * x).ln() + 1.0), self.tau / x),
                DivergenceKind::ReverseKl => (l - self.tau / (n * x), self.tau / (n * x * x)),
                DivergenceKind::Alpha => {
                    let t = n * x;
                    (
                        l + self.tau * (t.powf(a - 1.0) - 1.0) / (a - 1.0),
                        self.tau * n * t.powf(a - 2.0),
                    )
                }
            })
            .unzip()
    }

    /// Equality-constrained damped Newton from the uniform point.
    pub fn minimize(&self) -> Vec<f64> {
        let len = self.losses.len();
        let mut w = vec![1.0 / len as f64; len];
        for _ in 0..500 {
            let (g, h) = self.gradient_and_hessian(&w);
            let hg: f64 = g.iter().zip(&h).map(|(g, h)| g / h).sum();
            let hi: f64 = h.iter().map(|h| 1.0 / h).sum();
            let nu = -hg / hi;
            let dw: Vec<f64> = g.iter().zip(&h).map(|(g, h)| -(g + nu) / h).collect();
            let decrement: f64 = dw.iter().zip(&h).map(|(d, h)| d * d * h).sum();
            if decrement < 1e-28 {
                break;
            }
            let f0 = self.value(&w);
            let slope: f64 = g.iter().zip(&dw).map(|(g, d)| g * d).sum();
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = w.iter().zip(&dw).map(|(x, d)| x + t * d).collect();
                let f = self.value(&cand);
                if f.is_finite() && f <= f0 + 1e-4 * t * slope {
                    w = cand;
                    break;
                }
                t *= 0.5;
                if t < 1e-20 {
                    return w;
                }
            }
            // re-project the tiny drift off the simplex caused by rounding
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
        }
        w
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc_all_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                hits += 1.0;
            } else if si == sj {
                hits += 0.5;
            }
        }
    }
    hits / pairs
}

/// Average precision by counting at every distinct threshold, O(n²).
pub fn ap_by_thresholds(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// Mean of the `k` largest values by full sort.
pub fn top_k_mean_by_sort(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// Central finite difference of `f` at `x`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-8)
}

/// Optimal 1-D 2-means by trying every threshold between distinct sorted values.
pub fn two_means_by_enumeration(scores: &[f64]) -> Option<Vec<u8>> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let sse = |group: Vec<f64>| {
        let m = group.iter().sum::<f64>() / group.len() as f64;
        group.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let mut best: Option<(f64, f64)> = None;
    for &b in &distinct[1..] {
        let lo: Vec<f64> = scores.iter().copied().filter(|&s| s < b).collect();
        let hi: Vec<f64> = scores.iter().copied().filter(|&s| s >= b).collect();
        let cost = sse(lo) + sse(hi);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, b));
        }
    }
    best.map(|(_, b)| scores.iter().map(|&s| u8::from(s >= b)).collect())
}

/// A small toy category for trainer-level tests.
pub fn small_toy(seed: u64) -> CategoryData {
    toy_category(&ToyConfig {
        resolution: 32,
        n_train: 24,
        n_test_normal: 6,
        n_test_anomalous: 6,
        seed,
    })
    .expect("toy config is valid")
}

pub fn procedural_generator() -> PseudoAnomalyGenerator {
    PseudoAnomalyGenerator::new(BlendSpec::default(), Box::new(ProceduralTextures)).expect("default spec is valid")
}
