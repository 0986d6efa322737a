//! Image-level metrics, test-set scoring and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use burn::tensor::backend::Backend;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, ImageSample};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentConfig};
use crate::model::AnomalyModel;
use crate::trainer::AblationVariant;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::arg(format!("score {s} is NaN")));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::arg(format!("label {y} is not binary")));
    }
    Ok(())
}

/// Indices sorted by ascending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random anomaly outscores a random normal, ties counting one half.
/// Computed from mid-ranks in `O(n log n)`.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC-ROC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for group in tie_groups(scores, false) {
        let mid = next_rank + (group.len() as f64 - 1.0) / 2.0;
        rank_sum += mid * group.iter().filter(|&&i| labels[i] == 1).count() as f64;
        next_rank += group.len() as f64;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over decreasing score thresholds, where tied
/// scores form a single threshold.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for group in tie_groups(scores, true) {
        let hits = group.iter().filter(|&&i| labels[i] == 1).count();
        tp += hits;
        seen += group.len();
        ap += (hits as f64 / n_pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

/// Image scores with the matching ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Score images with the top-K mean of the per-location map. Pass an inference-mode model
/// (`AutodiffModule::valid`) so normalization uses its running statistics.
pub fn score_test_set<'a, B: Backend>(
    model: &AnomalyModel<B>,
    samples: impl IntoIterator<Item = &'a ImageSample>,
    batch_size: usize,
    device: &B::Device,
) -> Result<ScoredSet> {
    let samples: Vec<&ImageSample> = samples.into_iter().collect();
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = stack_images::<B>(&images, device)?;
        let out = model.forward(x, false);
        scores.extend(out.psi_k.into_data().iter::<f64>());
    }
    Ok(ScoredSet {
        scores,
        labels: samples.iter().map(|s| s.y_true).collect(),
    })
}

/// One evaluated training run. Failed sweep cells carry `error` and NaN metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub category: String,
    pub epsilon: f64,
    pub seed: u64,
    pub variant: String,
    pub divergence: String,
    pub alpha: f64,
    pub lambda: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    #[serde(default)]
    pub error: Option<String>,
}

impl MetricsReport {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Write reports as CSV.
pub fn write_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Write reports as JSON lines.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean and spread over seeds of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub category: String,
    pub epsilon: f64,
    pub variant: String,
    pub alpha: f64,
    pub lambda: f64,
    pub runs: usize,
    pub failed: usize,
    pub auc_roc_mean: f64,
    pub auc_roc_std: f64,
    pub auc_pr_mean: f64,
    pub auc_pr_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Average successful runs over seeds per (category, ε, variant, α, λ), then append an
/// unweighted mean over categories labeled `average`.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<AggregateRow> {
    type Key = (String, u64, String, u64, u64);
    let key = |c: &str, r: &MetricsReport| -> Key {
        (
            c.to_string(),
            r.epsilon.to_bits(),
            r.variant.clone(),
            r.alpha.to_bits(),
            r.lambda.to_bits(),
        )
    };
    let mut groups: BTreeMap<Key, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(key(&r.category, r)).or_default().push(r);
    }
    let row = |k: &Key, members: &[&MetricsReport]| {
        let ok: Vec<&&MetricsReport> = members.iter().filter(|r| r.is_ok()).collect();
        let roc: Vec<f64> = ok.iter().map(|r| r.auc_roc).collect();
        let pr: Vec<f64> = ok.iter().map(|r| r.auc_pr).collect();
        let (auc_roc_mean, auc_roc_std) = mean_std(&roc);
        let (auc_pr_mean, auc_pr_std) = mean_std(&pr);
        AggregateRow {
            category: k.0.clone(),
            epsilon: f64::from_bits(k.1),
            variant: k.2.clone(),
            alpha: f64::from_bits(k.3),
            lambda: f64::from_bits(k.4),
            runs: ok.len(),
            failed: members.len() - ok.len(),
            auc_roc_mean,
            auc_roc_std,
            auc_pr_mean,
            auc_pr_std,
        }
    };
    let mut rows: Vec<AggregateRow> = groups.iter().map(|(k, m)| row(k, m)).collect();

    let categories: std::collections::BTreeSet<&str> = reports.iter().map(|r| r.category.as_str()).collect();
    if categories.len() > 1 {
        let mut by_point: BTreeMap<Key, Vec<&AggregateRow>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.runs > 0) {
            let k = ("average".to_string(), r.epsilon.to_bits(), r.variant.clone(), r.alpha.to_bits(), r.lambda.to_bits());
            by_point.entry(k).or_default().push(r);
        }
        let averages: Vec<AggregateRow> = by_point
            .into_iter()
            .map(|(k, members)| {
                let (roc, roc_sd) = mean_std(&members.iter().map(|r| r.auc_roc_mean).collect::<Vec<_>>());
                let (pr, pr_sd) = mean_std(&members.iter().map(|r| r.auc_pr_mean).collect::<Vec<_>>());
                AggregateRow {
                    category: k.0,
                    epsilon: f64::from_bits(k.1),
                    variant: k.2,
                    alpha: f64::from_bits(k.3),
                    lambda: f64::from_bits(k.4),
                    runs: members.len(),
                    failed: 0,
                    auc_roc_mean: roc,
                    auc_roc_std: roc_sd,
                    auc_pr_mean: pr,
                    auc_pr_std: pr_sd,
                }
            })
            .collect();
        rows.extend(averages);
    }
    rows
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A named line for [`line_plot`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Static SVG line chart with markers; NaN points are skipped.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = 0.05 * (x1 - x0);
    let (y_lo, y_hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let y0 = if y_lo.is_finite() { (y_lo - 0.05).min(0.5).max(0.0) } else { 0.0 };
    let y1 = if y_hi.is_finite() { (y_hi + 0.02).min(1.0).max(y0 + 0.1) } else { 1.0 };

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Which hyperparameter a sensitivity sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperParam {
    Lambda,
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperAxis {
    pub param: HyperParam,
    pub values: Vec<f64>,
}

/// A grid of runs: categories × ε × seeds × optional hyperparameter values × variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Settings shared by every cell.
    pub base: ExperimentConfig,
    /// YAML file with the shared settings; overrides `base` when set.
    pub base_config: Option<PathBuf>,
    pub categories: Vec<String>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub hyper: Option<HyperAxis>,
    /// Empty means the variant in `base`.
    pub variants: Vec<AblationVariant>,
    pub out: PathBuf,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: ExperimentConfig::default(),
            base_config: None,
            categories: vec!["bottle".into()],
            epsilons: vec![0.05, 0.1, 0.15, 0.2],
            seeds: vec![0],
            hyper: None,
            variants: Vec::new(),
            out: PathBuf::from("runs/sweep"),
        }
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub id: String,
    pub config: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = serde_yaml::from_str(&text)?;
        if let Some(base) = &spec.base_config {
            let base = if base.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(base)
            } else {
                base.clone()
            };
            spec.base = ExperimentConfig::from_yaml_file(&base)?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.epsilons.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sweep needs nonempty categories, epsilons and seeds"));
        }
        if self.hyper.as_ref().is_some_and(|h| h.values.is_empty()) {
            return Err(Error::config("hyperparameter axis has no values"));
        }
        Ok(())
    }

    /// Expand the grid in a fixed order.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        self.validate()?;
        let variants = if self.variants.is_empty() {
            vec![self.base.variant]
        } else {
            self.variants.clone()
        };
        let hyper: Vec<Option<f64>> = match &self.hyper {
            Some(h) => h.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        };
        let mut cells = Vec::new();
        for category in &self.categories {
            for &epsilon in &self.epsilons {
                for &h in &hyper {
                    for &variant in &variants {
                        for &seed in &self.seeds {
                            let mut config = self.base.clone();
                            config.category = category.clone();
                            config.epsilon = epsilon;
                            config.seed = seed;
                            config.toy.seed = seed;
                            config.variant = variant;
                            let mut id = format!("{category}/eps{epsilon}");
                            if let (Some(v), Some(axis)) = (h, &self.hyper) {
                                match axis.param {
                                    HyperParam::Lambda => config.lambda = v,
                                    HyperParam::Alpha => config.alpha = v,
                                }
                                id.push_str(&format!("-{:?}{v}", axis.param).to_ascii_lowercase());
                            }
                            id.push_str(&format!("/{variant}/seed{seed}"));
                            cells.push(SweepCell { id, config });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Reports of every cell plus their seed averages.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub summary: Vec<AggregateRow>,
}

fn failed_report(config: &ExperimentConfig, err: &Error) -> MetricsReport {
    MetricsReport {
        dataset: config.dataset.clone(),
        category: config.category.clone(),
        epsilon: config.epsilon,
        seed: config.seed,
        variant: config.variant.to_string(),
        divergence: format!("{:?}", config.divergence).to_ascii_lowercase(),
        alpha: config.alpha,
        lambda: config.lambda,
        auc_roc: f64::NAN,
        auc_pr: f64::NAN,
        n_test_normal: 0,
        n_test_anomalous: 0,
        error: Some(err.to_string()),
    }
}

/// Train and evaluate every cell (a failing cell is recorded and the sweep continues),
/// then write `metrics.csv`, `metrics.jsonl`, `summary.csv` and SVG plots below `spec.out`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    let cells = spec.cells()?;
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    std::fs::write(spec.out.join("sweep.yaml"), serde_yaml::to_string(spec)?).map_err(|e| Error::io(&spec.out, e))?;
    let mut reports = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        log::info!("cell {}/{}: {}", i + 1, cells.len(), cell.id);
        let dir = spec.out.join("runs").join(&cell.id);
        match run_experiment(&cell.config, Some(&dir)) {
            Ok(run) => reports.push(run.report),
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.id);
                reports.push(failed_report(&cell.config, &e));
            }
        }
        write_csv(&reports, &spec.out.join("metrics.csv"))?;
    }
    write_jsonl(&reports, &spec.out.join("metrics.jsonl"))?;
    let summary = aggregate(&reports);
    write_aggregate_csv(&summary, &spec.out.join("summary.csv"))?;
    write_plots(spec, &summary)?;
    Ok(SweepOutcome { reports, summary })
}

fn write_plots(spec: &SweepSpec, summary: &[AggregateRow]) -> Result<()> {
    let plots = spec.out.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let metrics: [(&str, fn(&AggregateRow) -> f64); 2] =
        [("auc_roc", |r| r.auc_roc_mean), ("auc_pr", |r| r.auc_pr_mean)];
    let hyper_of = |r: &AggregateRow| match spec.hyper.as_ref().map(|h| h.param) {
        Some(HyperParam::Lambda) => r.lambda,
        Some(HyperParam::Alpha) => r.alpha,
        None => 0.0,
    };
    for (name, metric) in metrics {
        // metric against ε, one line per (category, variant, hyper value)
        let mut lines: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in summary {
            let mut label = format!("{} {}", r.category, r.variant);
            if spec.hyper.is_some() {
                label.push_str(&format!(" {}", hyper_of(r)));
            }
            lines.entry(label).or_default().push((r.epsilon, metric(r)));
        }
        let series = to_series(lines);
        line_plot(&plots.join(format!("{name}_vs_epsilon.svg")), &format!("{name} vs contamination"), "epsilon", name, &series)?;

        if let Some(axis) = &spec.hyper {
            let param = format!("{:?}", axis.param).to_ascii_lowercase();
            let mut lines: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in summary {
                lines
                    .entry(format!("{} {} eps={}", r.category, r.variant, r.epsilon))
                    .or_default()
                    .push((hyper_of(r), metric(r)));
            }
            let series = to_series(lines);
            line_plot(&plots.join(format!("{name}_vs_{param}.svg")), &format!("{name} vs {param}"), &param, name, &series)?;
        }
    }
    Ok(())
}

fn to_series(lines: BTreeMap<String, Vec<(f64, f64)>>) -> Vec<Series> {
    lines
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

/// The ablation grid: a sweep over the loss variants (all six when `variants` is empty),
/// plus `ablation.md` with one row per variant and one column per ε.
pub fn run_ablation(spec: &SweepSpec) -> Result<SweepOutcome> {
    let mut spec = spec.clone();
    if spec.variants.is_empty() {
        spec.variants = AblationVariant::ALL.to_vec();
    }
    let outcome = run_sweep(&spec)?;
    let table = ablation_table(&outcome.summary, &spec.variants);
    std::fs::write(spec.out.join("ablation.md"), table).map_err(|e| Error::io(&spec.out, e))?;
    Ok(outcome)
}

/// Markdown table of mean AUC-ROC: variants as rows, ε as columns, averaged over
/// categories when there are several.
pub fn ablation_table(summary: &[AggregateRow], variants: &[AblationVariant]) -> String {
    let multi = summary.iter().any(|r| r.category == "average");
    let rows: Vec<&AggregateRow> = summary.iter().filter(|r| !multi || r.category == "average").collect();
    let mut eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let mut out = String::from("| Variant |");
    for e in &eps {
        out.push_str(&format!(" AUC-ROC (eps={e}) |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(eps.len()));
    out.push('\n');
    for v in variants {
        out.push_str(&format!("| {v} |"));
        for e in &eps {
            let cell = rows
                .iter()
                .filter(|r| r.variant == v.name() && r.epsilon == *e)
                .map(|r| r.auc_roc_mean)
                .next();
            match cell {
                Some(x) if x.is_finite() => out.push_str(&format!(" {x:.3} |")),
                _ => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out
}
