//! One function per acceptance criterion. Each returns a short detail line on success and
//! a reason on failure, so the same checks serve the acceptance runner and plain tests.

use std::path::Path;
use std::time::{Duration, Instant};

use burn::backend::{Autodiff, NdArray};
use burn::tensor::{Tensor, TensorData};
use deviation_ad::data::{inject_contamination, ContaminationSpec};
use deviation_ad::evaluation::{auc_pr, auc_roc};
use deviation_ad::experiment::{run_experiment, ExperimentConfig};
use deviation_ad::heads::{top_k_count, topk_mean};
use deviation_ad::image::Image;
use deviation_ad::losses::{
    batched, bce_loss, deviation_loss, focal_seg_loss, kmeans_soft_targets, soft_deviation_loss, ReferenceStats,
};
use deviation_ad::model::ModelConfig;
use deviation_ad::noise_synth::{blend_pseudo_anomaly, AnomalyMask};
use deviation_ad::reweighting::{weights_alpha, weights_kl, weights_reverse_kl, DivergenceSpec};
use deviation_ad::trainer::{read_jsonl, train, AblationVariant, BatchRecord, EpochRecord, RunPaths, TrainConfig, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ap_by_thresholds, auc_all_pairs, central_difference, rel_err, small_toy, top_k_mean_by_sort, SimplexProblem};

pub type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn reweighting_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphas = [-1.5, -0.5, 0.1, 0.5, 0.9, 1.5, 2.0];
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let n = rng.random_range(1..=8);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let lambda = rng.random_range(0.05..3.0);
        let spec = match cases % 3 {
            0 => DivergenceSpec::kl(lambda),
            1 => DivergenceSpec::reverse_kl(lambda),
            _ => DivergenceSpec::alpha(alphas[rng.random_range(0..alphas.len())], lambda),
        };
        let Some(problem) = SimplexProblem::new(&losses, &spec) else {
            continue;
        };
        let closed = spec.weights(&losses).map_err(|e| format!("{spec:?}: {e}"))?;
        let err = max_abs_diff(closed.as_slice(), &problem.minimize());
        ensure(err < 1e-6, || format!("{spec:?} on {losses:?}: error {err:e}"))?;
        worst = worst.max(err);
        cases += 1;
    }

    let mut worst_limit = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let lambda = rng.random_range(0.2..3.0);
        let kl = weights_kl(&losses, lambda).map_err(|e| e.to_string())?;
        let rkl = weights_reverse_kl(&losses, lambda).map_err(|e| e.to_string())?;
        for (a, reference) in [(1.0 - 1e-4, &kl), (1.0 + 1e-4, &kl), (-1e-4, &rkl), (1e-4, &rkl)] {
            let w = weights_alpha(&losses, a, lambda).map_err(|e| e.to_string())?;
            let err = max_abs_diff(w.as_slice(), reference.as_slice());
            ensure(err < 1e-3, || format!("limit α={a} on {losses:?}: error {err:e}"))?;
            worst_limit = worst_limit.max(err);
        }
    }
    Ok(format!("200 cases, max error {worst:.1e}; limits max error {worst_limit:.1e}"))
}

pub fn loss_suite() -> Outcome {
    let s = ReferenceStats::fixed(0.0, 1.0).map_err(|e| e.to_string())?;
    let ln2 = 2f64.ln();
    let focal = focal_seg_loss(&[0.5], &AnomalyMask::ones(1, 1), 2.0).map_err(|e| e.to_string())?;
    let hand = [
        ("deviation y=0", deviation_loss(2.0, 0, &s, 5.0), 2.0),
        ("deviation y=1", deviation_loss(2.0, 1, &s, 5.0), 3.0),
        ("soft deviation p=0.5", soft_deviation_loss(2.0, 0.5, &s, 5.0), 2.5),
        ("bce p=0.5 y=1", bce_loss(0.5, 1), ln2),
        ("bce p=0.9 y=0", bce_loss(0.9, 0), 10f64.ln()),
        ("focal p_t=0.5", focal, 0.25 * ln2),
    ];
    for (name, got, want) in hand {
        ensure((got - want).abs() < 1e-6, || format!("{name}: {got} vs {want}"))?;
    }
    ensure(kmeans_soft_targets(&[0.1, 0.2, 5.0, 5.1], &[0; 4]) == [0, 0, 1, 1], || "k-means case 1".into())?;
    ensure(kmeans_soft_targets(&[-3.0, -3.0, -3.0, 4.0], &[0; 4]) == [0, 0, 0, 1], || "k-means case 2".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let st = ReferenceStats::fixed(rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0)).unwrap();
        let psi = rng.random_range(-15.0..15.0);
        let gamma = rng.random_range(0.5..8.0);
        for y in [0u8, 1] {
            let hard = deviation_loss(psi, y, &st, gamma);
            let soft = soft_deviation_loss(psi, f64::from(y), &st, gamma);
            ensure((hard - soft).abs() < 1e-12, || format!("reduction at p={y}: {soft} vs {hard}"))?;
        }
        let (l0, lh, l1) = (
            soft_deviation_loss(psi, 0.0, &st, gamma),
            soft_deviation_loss(psi, 0.5, &st, gamma),
            soft_deviation_loss(psi, 1.0, &st, gamma),
        );
        ensure((lh - 0.5 * (l0 + l1)).abs() < 1e-9, || format!("collinearity: {l0} {lh} {l1}"))?;
    }
    Ok("hand values, p∈{0,1} reduction and affinity in p".into())
}

type Ad = Autodiff<NdArray<f64>>;

fn tensor1(values: &[f64]) -> Tensor<Ad, 1> {
    Tensor::from_data(TensorData::new(values.to_vec(), [values.len()]), &Default::default())
}

pub fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-6;
    let (mut worst_soft, mut worst_topk) = (0.0f64, 0.0f64);
    let mut configs = 0;
    while configs < 100 {
        let stats = ReferenceStats::fixed(rng.random_range(-1.0..1.0), rng.random_range(0.3..2.0)).unwrap();
        let gamma = rng.random_range(1.0..6.0);

        // soft deviation with respect to ψ_K
        let n = rng.random_range(1..=8);
        let psi: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let near_kink = psi.iter().any(|&x| {
            let z = stats.z(x);
            z.abs() < 1e-3 || (z - gamma).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let x = tensor1(&psi).require_grad();
        let loss = batched::soft_deviation(x.clone(), tensor1(&p), &stats, gamma).sum();
        let grads = loss.backward();
        let got: Vec<f64> = x.grad(&grads).unwrap().into_data().to_vec().unwrap();
        for i in 0..n {
            let fd = central_difference(|v| soft_deviation_loss(v, p[i], &stats, gamma), psi[i], h);
            let err = rel_err(got[i], fd);
            ensure(err < 1e-4, || format!("soft deviation d/dψ at {}: {} vs {fd}", psi[i], got[i]))?;
            worst_soft = worst_soft.max(err);
        }

        // top-K image score, chained into the soft deviation, with respect to the score map
        let batch = rng.random_range(1..=3);
        let locations = rng.random_range(4..=40);
        let k_fraction: f64 = rng.random_range(0.05..0.6);
        let k = top_k_count(locations, k_fraction).unwrap();
        let map: Vec<f64> = (0..batch * locations).map(|_| rng.random_range(-4.0..4.0)).collect();
        let probs: Vec<f64> = (0..batch).map(|_| rng.random()).collect();
        let tie = map.chunks(locations).any(|row| {
            let mut v = row.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            k < locations && v[k - 1] - v[k] < 1e-3
        });
        let kink = map.chunks(locations).any(|row| {
            let z = stats.z(top_k_mean_by_sort(row, k));
            z.abs() < 1e-3 || (z - gamma).abs() < 1e-3
        });
        if tie || kink {
            continue;
        }
        let scores = Tensor::<Ad, 2>::from_data(TensorData::new(map.clone(), [batch, locations]), &Default::default())
            .require_grad();
        let psi_k = topk_mean(scores.clone(), k_fraction).map_err(|e| e.to_string())?;
        let loss = batched::soft_deviation(psi_k, tensor1(&probs), &stats, gamma).sum();
        let grads = loss.backward();
        let got: Vec<f64> = scores.grad(&grads).unwrap().into_data().to_vec().unwrap();
        let objective = |m: &[f64]| -> f64 {
            m.chunks(locations)
                .zip(&probs)
                .map(|(row, &pb)| soft_deviation_loss(top_k_mean_by_sort(row, k), pb, &stats, gamma))
                .sum()
        };
        for j in 0..map.len() {
            let fd = central_difference(
                |v| {
                    let mut m = map.clone();
                    m[j] = v;
                    objective(&m)
                },
                map[j],
                h,
            );
            let err = if fd == 0.0 { got[j].abs() } else { rel_err(got[j], fd) };
            ensure(err < 1e-4, || format!("top-K d/dscore[{j}]: {} vs {fd}", got[j]))?;
            worst_topk = worst_topk.max(err);
        }
        configs += 1;
    }
    Ok(format!("100 configurations; max relative error {worst_soft:.1e} (soft deviation), {worst_topk:.1e} (top-K)"))
}

pub fn blend_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let normal = Image::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap();
        let source = Image::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap();
        let mask = AnomalyMask::from_values(h, w, (0..h * w).map(|_| u8::from(rng.random_bool(0.4))).collect()).unwrap();
        let beta: f32 = rng.random();
        let out = blend_pseudo_anomaly(&normal, &source, &mask, beta).map_err(|e| e.to_string())?;
        let at = |b: f32| blend_pseudo_anomaly(&normal, &source, &mask, b).unwrap();
        let (o0, oh, o1) = (at(0.0), at(0.5), at(1.0));
        let plane = h * w;
        for k in 0..3 * plane {
            let (i, s) = (normal.data()[k], source.data()[k]);
            if mask.values()[k % plane] == 0 {
                ensure(out.data()[k].to_bits() == i.to_bits(), || format!("case {case}: off-mask pixel {k} changed"))?;
            } else {
                let want = i + beta * (s - i);
                ensure((out.data()[k] - want).abs() <= 2e-6, || format!("case {case}: pixel {k} {} vs {want}", out.data()[k]))?;
                ensure(o0.data()[k] == i && o1.data()[k] == s, || format!("case {case}: β endpoints at pixel {k}"))?;
                ensure(
                    (oh.data()[k] - 0.5 * (o0.data()[k] + o1.data()[k])).abs() <= 2e-7,
                    || format!("case {case}: β-collinearity at pixel {k}"),
                )?;
            }
        }
    }
    Ok("1000 cases: off-mask bit-identical, β-collinear on the mask".into())
}

pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=500);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        // a coarse grid forces ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..40u8)) / 7.0).collect();
        let got = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        let err = (got - auc_all_pairs(&scores, &labels)).abs();
        ensure(err < 1e-9, || format!("AUC-ROC error {err:e} on n={n}"))?;
        worst = worst.max(err);
        let ap = auc_pr(&scores, &labels).map_err(|e| e.to_string())?;
        let ap_err = (ap - ap_by_thresholds(&scores, &labels)).abs();
        ensure(ap_err < 1e-9, || format!("AUC-PR error {ap_err:e} on n={n}"))?;

        let mapped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() - 3.0).collect();
        let roc_m = auc_roc(&mapped, &labels).unwrap();
        let pr_m = auc_pr(&mapped, &labels).unwrap();
        ensure((roc_m - got).abs() < 1e-12 && (pr_m - ap).abs() < 1e-12, || "monotone transform changed a metric".into())?;
    }
    let hand = [
        (auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75),
        (auc_pr(&[0.2, 0.9], &[1, 0]).unwrap(), 0.5),
        (auc_pr(&[0.3; 5], &[1, 0, 0, 1, 0]).unwrap(), 0.4),
        (auc_pr(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0),
    ];
    for (got, want) in hand {
        ensure((got - want).abs() < 1e-12, || format!("hand case {got} vs {want}"))?;
    }
    ensure(auc_roc(&[0.1, 0.2], &[1, 1]).is_err(), || "single-class AUC must be undefined".into())?;
    Ok(format!("200 random sets (n ≤ 500), max AUC-ROC error {worst:.1e}; AUC-PR hand cases"))
}

fn conformance_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        burn_in: 1,
        m_reference: 500,
        seed: 17,
        ..TrainConfig::default()
    }
}

pub fn algorithm_conformance(scratch: &Path) -> Outcome {
    type B = Autodiff<NdArray<f64>>;
    let data = small_toy(4);
    let contaminated = inject_contamination(
        &data.train_normals,
        &data.test_anomalies,
        &ContaminationSpec { epsilon: 0.1, noise_sigma: 0.1, seed: 4 },
    )
    .map_err(|e| e.to_string())?;
    let generator = super::procedural_generator();
    let model_config = ModelConfig::tiny(32, 4);
    let train_data = TrainData { pool: &contaminated.samples, generator: &generator };
    let device = Default::default();

    let config = conformance_config(3);
    let paths = RunPaths::new(scratch.join("conformance"));
    let outcome = train::<B>(&config, &model_config, train_data, Some(&paths), &device).map_err(|e| e.to_string())?;
    let batches: Vec<BatchRecord> = read_jsonl(&paths.batch_log()).map_err(|e| e.to_string())?;
    let epochs: Vec<EpochRecord> = read_jsonl(&paths.epoch_log()).map_err(|e| e.to_string())?;
    ensure(batches.len() == outcome.batches.len() && epochs.len() == 3, || "log lengths".into())?;

    let mut reweighted = 0;
    for b in &batches {
        let n = b.labels.len() as f64;
        let uniform = b.w1.iter().chain(&b.w2).all(|&w| w == 1.0 / n);
        if b.epoch <= config.burn_in {
            ensure(uniform, || format!("epoch {} step {} is not uniform", b.epoch, b.step))?;
        } else if !uniform {
            reweighted += 1;
        }
        let err = (b.recomputed_loss() - b.loss).abs();
        ensure(err < 1e-6, || format!("step {}: logged loss {} vs recomputed {}", b.step, b.loss, b.recomputed_loss()))?;
    }
    ensure(epochs.iter().all(|e| e.uniform_weights == (e.epoch <= config.burn_in)), || {
        format!("epoch uniform flags {:?}", epochs.iter().map(|e| e.uniform_weights).collect::<Vec<_>>())
    })?;
    ensure(reweighted > 0, || "no non-uniform weights after burn-in".into())?;

    let twice = conformance_config(2);
    let a = train::<B>(&twice, &model_config, train_data, None, &device).map_err(|e| e.to_string())?;
    let b = train::<B>(&twice, &model_config, train_data, None, &device).map_err(|e| e.to_string())?;
    ensure(a.final_probe_loss() == b.final_probe_loss(), || {
        format!("probe losses differ: {} vs {}", a.final_probe_loss(), b.final_probe_loss())
    })?;
    ensure(a.model.flat_params() == b.model.flat_params(), || "parameters differ between identical runs".into())?;
    Ok(format!(
        "{} logged steps; burn-in uniform; max |loss − recomputed| < 1e-6; 2-epoch determinism",
        batches.len()
    ))
}

/// End-to-end toy reproduction across three seeds.
pub fn end_to_end_toy() -> Outcome {
    let started = Instant::now();
    let mut lines = Vec::new();
    let (mut ordered, mut min_auc) = (0, f64::INFINITY);
    for seed in 0..3u64 {
        let mut aucs = Vec::new();
        for variant in [AblationVariant::Proposed, AblationVariant::Dl] {
            let mut config = ExperimentConfig::toy(seed);
            config.variant = variant;
            config.epsilon = 0.1;
            config.epochs = 5;
            let r = run_experiment(&config, None).map_err(|e| format!("seed {seed} {variant}: {e}"))?;
            aucs.push(r.report.auc_roc);
        }
        let (proposed, dl) = (aucs[0], aucs[1]);
        min_auc = min_auc.min(proposed);
        ordered += usize::from(proposed >= dl);
        lines.push(format!("seed {seed}: Proposed {proposed:.4} vs DL {dl:.4}"));
    }
    let elapsed = started.elapsed();
    let summary = format!("{} ({:.0} s)", lines.join("; "), elapsed.as_secs_f64());
    let mut failures = Vec::new();
    if min_auc < 0.90 {
        failures.push("Proposed AUC-ROC below 0.90".to_string());
    }
    if ordered < 2 {
        failures.push(format!("Proposed ≥ DL on only {ordered} of 3 seeds"));
    }
    if elapsed > Duration::from_secs(15 * 60) {
        failures.push("over 15 min".to_string());
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join(", ")))
    }
}
