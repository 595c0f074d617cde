//! Forward-pass latency, validation-set evaluation, and the three-column
//! comparison report.
//!
//! Everything runs on the calling thread; the GEMM backend is built without
//! its threading feature, so latencies are single-threaded by construction.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::architectures::Network;
use crate::error::{contract_err, Error, Result};
use crate::metrics::{self, MetricSummary, PairScores};
use crate::tensor::{Element, Tensor};
use crate::training::{predict_masks, TileSet};

pub const MIN_REPS: usize = 5;
pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_REPS: usize = 20;
pub const THREADS: usize = 1;

/// Wall-clock seconds over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub mean: f64,
    pub reps: usize,
    pub warmup: usize,
    pub input_shape: Vec<usize>,
    pub threads: usize,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64], warmup: usize, input_shape: &[usize]) -> Result<Self> {
        if samples.len() < MIN_REPS {
            return contract_err(format!("latency needs at least {MIN_REPS} repetitions, got {}", samples.len()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            median: metrics::quantile(&sorted, 0.5),
            p10: metrics::quantile(&sorted, 0.1),
            p90: metrics::quantile(&sorted, 0.9),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            reps: samples.len(),
            warmup,
            input_shape: input_shape.to_vec(),
            threads: THREADS,
        })
    }
}

/// Times `f` after `warmup` discarded calls.
pub fn time_fn<R>(mut f: impl FnMut() -> Result<R>, warmup: usize, reps: usize, input_shape: &[usize]) -> Result<LatencyStats> {
    if reps < MIN_REPS {
        return contract_err(format!("latency needs at least {MIN_REPS} repetitions, got {reps}"));
    }
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t.elapsed().as_secs_f64());
    }
    LatencyStats::from_samples(&samples, warmup, input_shape)
}

/// Eval-mode forward latency of `net` on `input`.
pub fn time_forward<T: Element>(net: &Network<T>, input: &Tensor<T>, warmup: usize, reps: usize) -> Result<LatencyStats> {
    time_fn(|| net.predict(input), warmup, reps, input.shape())
}

/// Time to push every tile of a preloaded set through `net` one at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTiming {
    pub tiles: usize,
    /// Statistics of the total time for one pass over the set.
    pub total: LatencyStats,
    /// Median total divided by the tile count.
    pub per_tile_mean: f64,
}

pub fn bench_dataset<T: Element>(net: &Network<T>, set: &TileSet<T>, warmup: usize, reps: usize) -> Result<DatasetTiming> {
    if set.is_empty() {
        return contract_err("cannot benchmark an empty split");
    }
    let inputs: Vec<Tensor<T>> = (0..set.len()).map(|i| set.batch(&[i]).map(|b| b.0)).collect::<Result<_>>()?;
    let shape = inputs[0].shape().to_vec();
    let total = time_fn(
        || {
            for x in &inputs {
                std::hint::black_box(net.predict(x)?);
            }
            Ok(())
        },
        warmup,
        reps,
        &shape,
    )?;
    let per_tile_mean = total.median / set.len() as f64;
    Ok(DatasetTiming { tiles: set.len(), total, per_tile_mean })
}

/// Summaries of every per-tile metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub dsc: MetricSummary,
    pub iou: MetricSummary,
    pub pixel_f1: MetricSummary,
    pub object_f1: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_tile: Vec<PairScores>,
    pub summary: MetricsSection,
}

impl Evaluation {
    pub fn from_masks(preds: &[metrics::Mask], truth: &[metrics::Mask]) -> Result<Self> {
        if preds.len() != truth.len() {
            return contract_err(format!("{} predictions for {} ground-truth masks", preds.len(), truth.len()));
        }
        let per_tile: Vec<PairScores> = preds.iter().zip(truth).map(|(p, g)| metrics::score_pair(p, g)).collect();
        let column = |f: fn(&PairScores) -> f64| metrics::summarize(&per_tile.iter().map(f).collect::<Vec<_>>());
        let summary = MetricsSection {
            dsc: column(|s| s.dsc)?,
            iou: column(|s| s.iou)?,
            pixel_f1: column(|s| s.pixel_f1)?,
            object_f1: column(|s| s.object_f1)?,
        };
        Ok(Self { per_tile, summary })
    }

    pub fn dsc_scores(&self) -> Vec<f64> {
        self.per_tile.iter().map(|s| s.dsc).collect()
    }
}

/// Eval-mode metrics of `net` on every tile of `set`.
pub fn evaluate<T: Element>(net: &Network<T>, set: &TileSet<T>, batch_size: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return contract_err("cannot evaluate an empty split");
    }
    Evaluation::from_masks(&predict_masks(net, set, batch_size)?, &set.masks)
}

/// Per-model section of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub parameters: usize,
    pub metrics: MetricsSection,
    pub dsc_scores: Vec<f64>,
    pub single: Option<LatencyStats>,
    pub dataset: Option<DatasetTiming>,
    pub hyperparameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub hardware: String,
    pub models: Vec<ModelReport>,
}

/// Rows of the comparison grid, in order.
pub const GRID_ROWS: [&str; 12] = [
    "DSC coef. (mean)",
    "DSC coef. (median)",
    "DSC coef. (max)",
    "DSC coef. (percentile 10)",
    "IoU (mean)",
    "IoU (median)",
    "IoU (max)",
    "IoU (percentile 10)",
    "F1 object (mean)",
    "F1 object (median)",
    "F1 object (max)",
    "F1 object (percentile 10)",
];

fn grid_values(m: &MetricsSection) -> [f64; 12] {
    let mut out = [0.0; 12];
    for (k, s) in [m.dsc, m.iou, m.object_f1].iter().enumerate() {
        out[k * 4..k * 4 + 4].copy_from_slice(&[s.mean, s.median, s.max, s.percentile_10]);
    }
    out
}

impl RunReport {
    /// Metric grid, one column per model.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric");
        for m in &self.models {
            write!(out, ",{}", m.name).expect("write to string");
        }
        out.push('\n');
        let cols: Vec<[f64; 12]> = self.models.iter().map(|m| grid_values(&m.metrics)).collect();
        for (r, label) in GRID_ROWS.iter().enumerate() {
            out.push_str(label);
            for c in &cols {
                write!(out, ",{:.6}", c[r]).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// Parameter counts and latencies, one row per model.
    pub fn latency_csv(&self) -> String {
        let mut out = String::from("model,parameters,single_median_s,single_p10_s,single_p90_s,dataset_tiles,dataset_median_s,per_tile_s\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for m in &self.models {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                m.name,
                m.parameters,
                f(m.single.as_ref().map(|s| s.median)),
                f(m.single.as_ref().map(|s| s.p10)),
                f(m.single.as_ref().map(|s| s.p90)),
                m.dataset.as_ref().map(|d| d.tiles.to_string()).unwrap_or_default(),
                f(m.dataset.as_ref().map(|d| d.total.median)),
                f(m.dataset.as_ref().map(|d| d.per_tile_mean)),
            )
            .expect("write to string");
        }
        out
    }

    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Report with every timing removed; identical inputs give identical
    /// bytes.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.hardware.clear();
        for m in &mut r.models {
            m.single = None;
            m.dataset = None;
        }
        r
    }
}

/// CPU model, OS and architecture, for annotating latencies.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu}; {} {}; {THREADS} thread", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub warmup: usize,
    pub reps: usize,
    /// Input for single-sample latency; `None` skips all timing.
    pub latency_input: Option<Vec<usize>>,
    pub batch_size: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { warmup: DEFAULT_WARMUP, reps: DEFAULT_REPS, latency_input: Some(vec![1, 3, 256, 256]), batch_size: 4 }
    }
}

/// A named model with the hyperparameters it was trained with.
pub struct Entry<'a, T> {
    pub name: String,
    pub net: &'a Network<T>,
    pub hyperparameters: serde_json::Value,
}

/// Evaluates and (optionally) times every model on the same tiles.
pub fn compare<T: Element>(models: &[Entry<'_, T>], set: &TileSet<T>, cfg: &CompareConfig) -> Result<RunReport> {
    let Some(first) = set.images.first() else {
        return contract_err("cannot compare on an empty split");
    };
    let (h, w) = (first.shape()[1], first.shape()[2]);
    for e in models {
        let d = e.net.arch().size_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Contract(format!("model {} needs inputs divisible by {d}, tiles are {h}x{w}", e.name)));
        }
    }
    let latency_input = cfg.latency_input.as_ref().map(|shape| Tensor::<T>::full(shape, T::from_f64(0.5)));
    let mut out = Vec::with_capacity(models.len());
    for e in models {
        let eval = evaluate(e.net, set, cfg.batch_size).map_err(|err| Error::Contract(format!("model {}: {err}", e.name)))?;
        let (single, dataset) = match &latency_input {
            Some(x) => (Some(time_forward(e.net, x, cfg.warmup, cfg.reps)?), Some(bench_dataset(e.net, set, 1, MIN_REPS)?)),
            None => (None, None),
        };
        out.push(ModelReport {
            name: e.name.clone(),
            parameters: e.net.count_parameters(),
            dsc_scores: eval.dsc_scores(),
            metrics: eval.summary,
            single,
            dataset,
            hyperparameters: e.hyperparameters.clone(),
        });
    }
    Ok(RunReport { hardware: hardware_descriptor(), models: out })
}

/// Bar chart of per-tile DSC over `[0, 1]`, one series per model.
pub fn dsc_histogram_svg(report: &RunReport, bins: usize) -> Result<String> {
    let series: Vec<(String, Vec<usize>)> =
        report.models.iter().map(|m| Ok((m.name.clone(), metrics::histogram(&m.dsc_scores, bins)?))).collect::<Result<_>>()?;
    let peak = series.iter().flat_map(|s| s.1.iter().copied()).max().unwrap_or(1).max(1);
    let (width, height, pad) = (640.0, 360.0, 40.0);
    let slot = (width - 2.0 * pad) / bins as f64;
    let bar = slot / (series.len().max(1) as f64 + 1.0);
    let colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <title>Distribution of the DSC over images</title>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = height - pad,
        x1 = width - pad,
    );
    for (s, (name, counts)) in series.iter().enumerate() {
        let color = colors[s % colors.len()];
        writeln!(svg, "<g class=\"series\" data-model=\"{name}\" fill=\"{color}\">").expect("write to string");
        for (b, &c) in counts.iter().enumerate() {
            let bar_h = (height - 2.0 * pad) * c as f64 / peak as f64;
            writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" data-bin=\"{b}\" data-count=\"{c}\"/>",
                pad + b as f64 * slot + s as f64 * bar,
                height - pad - bar_h,
                bar,
                bar_h
            )
            .expect("write to string");
        }
        writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{name}</text>\n</g>", width - pad - 80.0, pad + 14.0 * (s as f64 + 1.0))
            .expect("write to string");
    }
    for k in 0..=4 {
        let x = pad + (width - 2.0 * pad) * k as f64 / 4.0;
        writeln!(svg, "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{:.2}</text>", height - pad + 16.0, k as f64 / 4.0)
            .expect("write to string");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads the `data-count` attributes of one series back out of an SVG
/// written by [`dsc_histogram_svg`].
pub fn svg_bin_counts(svg: &str, model: &str) -> Vec<usize> {
    let Some(start) = svg.find(&format!("data-model=\"{model}\"")) else {
        return Vec::new();
    };
    let body = &svg[start..svg[start..].find("</g>").map_or(svg.len(), |e| start + e)];
    body.split("data-count=\"").skip(1).filter_map(|s| s.split('"').next()?.parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Mask;

    #[test]
    fn identity_timing_is_ordered() {
        let s = time_fn(|| Ok(()), 1, 7, &[1]).unwrap();
        assert!(s.median >= 0.0 && s.p10 <= s.median && s.median <= s.p90);
        assert_eq!((s.reps, s.threads), (7, 1));
    }

    #[test]
    fn too_few_reps_is_an_error() {
        assert!(matches!(time_fn(|| Ok(()), 0, 4, &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn quantiles_of_known_samples() {
        let s = LatencyStats::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0], 0, &[1]).unwrap();
        assert_eq!((s.median, s.mean), (3.0, 3.0));
        assert!((s.p10 - 1.4).abs() < 1e-12 && (s.p90 - 4.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let e = Evaluation::from_masks(&[m.clone(), m.clone()], &[m.clone(), m]).unwrap();
        for s in [e.summary.dsc, e.summary.iou, e.summary.pixel_f1, e.summary.object_f1] {
            assert_eq!((s.mean, s.median, s.max, s.percentile_10), (1.0, 1.0, 1.0, 1.0));
        }
    }

    fn report() -> RunReport {
        let m = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let p = Mask::new(1, 4, vec![1, 0, 0, 0]).unwrap();
        let e = Evaluation::from_masks(&[m.clone(), p.clone(), m.clone()], &[m.clone(), m.clone(), m]).unwrap();
        let models = ["unet", "enet", "boxenet"]
            .iter()
            .map(|n| ModelReport {
                name: n.to_string(),
                parameters: 1,
                metrics: e.summary,
                dsc_scores: e.dsc_scores(),
                single: None,
                dataset: None,
                hyperparameters: serde_json::Value::Null,
            })
            .collect();
        RunReport { hardware: String::new(), models }
    }

    #[test]
    fn grid_is_twelve_by_three() {
        let csv = report().metrics_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,unet,enet,boxenet");
        assert_eq!(lines.len(), 13);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
        assert_eq!(lines[1], "DSC coef. (mean),0.888889,0.888889,0.888889");
    }

    #[test]
    fn histogram_counts_every_tile() {
        let svg = dsc_histogram_svg(&report(), 10).unwrap();
        for name in ["unet", "enet", "boxenet"] {
            let counts = svg_bin_counts(&svg, name);
            assert_eq!(counts.len(), 10);
            assert_eq!(counts.iter().sum::<usize>(), 3);
        }
    }
}
