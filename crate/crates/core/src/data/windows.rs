use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::TemporalSignal;
use crate::error::{Error, Result};

/// Per-node congestion thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSpec {
    pub quantile: f64,
    pub thresholds: Vec<f64>,
    /// Class 1 means "congested": the window-mean speed is below the threshold.
    pub positive_class_is_congested: bool,
    pub warnings: Vec<String>,
}

impl PseudoLabelSpec {
    /// Class of a window whose feature-0 mean for `node` is `mean`.
    pub fn label(&self, node: usize, mean: f64) -> usize {
        usize::from(mean < self.thresholds[node])
    }
}

/// One sliding-window sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `N × D × W` inputs.
    pub x: Array3<f64>,
    /// `N × T'` future feature-0 values, in signal units.
    pub y_reg: Array2<f64>,
    pub y_cls: Vec<usize>,
    pub window_start: usize,
}

impl WindowSample {
    pub fn window(&self) -> usize {
        self.x.dim().2
    }

    pub fn horizon(&self) -> usize {
        self.y_reg.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub computed_on: String,
    /// Features whose variance was zero; their std was set to 1.
    pub zero_variance: Vec<usize>,
}

impl NormalizationStats {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            computed_on: "identity".into(),
            zero_variance: Vec::new(),
        }
    }
}

/// Scalar affine map between head outputs and target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Quantile with linear interpolation between order statistics: position
/// `q·(n−1)` in the sorted sample.
pub fn quantile_linear(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn compute_thresholds(signal: &TemporalSignal, q: f64) -> Result<PseudoLabelSpec> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile must lie in (0,1), got {q}")));
    }
    let mut thresholds = Vec::with_capacity(signal.n_nodes());
    let mut warnings = Vec::new();
    for i in 0..signal.n_nodes() {
        let series: Vec<f64> = signal.values.slice(s![i, 0, ..]).to_vec();
        let t = quantile_linear(&series, q);
        if series.iter().all(|v| *v == series[0]) {
            warnings.push(format!("node {i} has a constant series; all its labels are class 0"));
        }
        thresholds.push(t);
    }
    Ok(PseudoLabelSpec {
        quantile: q,
        thresholds,
        positive_class_is_congested: true,
        warnings,
    })
}

pub fn make_windows(
    signal: &TemporalSignal,
    spec: &PseudoLabelSpec,
    window: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if window == 0 || horizon == 0 || stride == 0 {
        return Err(Error::invalid("window, horizon and stride must be at least 1"));
    }
    let total = signal.n_steps();
    if window + horizon > total {
        return Err(Error::invalid(format!(
            "window {window} + horizon {horizon} exceeds series length {total}"
        )));
    }
    if spec.thresholds.len() != signal.n_nodes() {
        return Err(Error::invalid("threshold count does not match node count"));
    }
    let count = (total - window - horizon) / stride + 1;
    let n = signal.n_nodes();
    let samples = (0..count)
        .map(|k| {
            let start = k * stride;
            let x = signal.values.slice(s![.., .., start..start + window]).to_owned();
            let y_reg = signal
                .values
                .slice(s![.., 0, start + window..start + window + horizon])
                .to_owned();
            let y_cls = (0..n)
                .map(|i| {
                    let mean = x.slice(s![i, 0, ..]).mean().unwrap();
                    spec.label(i, mean)
                })
                .collect();
            WindowSample {
                x,
                y_reg,
                y_cls,
                window_start: start,
            }
        })
        .collect();
    Ok(samples)
}

/// Contiguous split in `window_start` order. Train and validation sizes are
/// floored; the remainder goes to test.
pub fn split_chronological(
    mut samples: Vec<WindowSample>,
    ratios: SplitRatios,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>, Vec<WindowSample>)> {
    let total = ratios.train + ratios.val + ratios.test;
    if (total - 1.0).abs() > 1e-9 || ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(Error::invalid(format!("split ratios must be non-negative and sum to 1, got {total}")));
    }
    samples.sort_by_key(|s| s.window_start);
    let n = samples.len();
    let n_train = (n as f64 * ratios.train).floor() as usize;
    let n_val = (n as f64 * ratios.val).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::invalid(format!(
            "{n} samples are too few for non-empty train/val/test splits"
        )));
    }
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok((samples, val, test))
}

/// Drops leading validation and test windows whose inputs overlap the
/// target range of any training window.
pub fn purge_overlap(
    train: &[WindowSample],
    val: &mut Vec<WindowSample>,
    test: &mut Vec<WindowSample>,
) {
    let Some(last) = train.iter().max_by_key(|s| s.window_start) else {
        return;
    };
    let boundary = last.window_start + last.window() + last.horizon();
    val.retain(|s| s.window_start >= boundary);
    test.retain(|s| s.window_start >= boundary);
}

/// Per-feature mean and standard deviation of the inputs of `samples`.
pub fn compute_normalization(samples: &[WindowSample], tag: &str) -> NormalizationStats {
    let d = samples.first().map_or(0, |s| s.x.dim().1);
    let mut mean = vec![0.0; d];
    let mut std = vec![1.0; d];
    let mut zero_variance = Vec::new();
    for f in 0..d {
        let vals: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.x.slice(s![.., f, ..]).iter().copied().collect::<Vec<_>>())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        mean[f] = m;
        if var > 0.0 {
            std[f] = var.sqrt();
        } else {
            zero_variance.push(f);
        }
    }
    NormalizationStats {
        mean,
        std,
        computed_on: tag.to_string(),
        zero_variance,
    }
}

pub fn compute_target_stats(samples: &[WindowSample]) -> TargetStats {
    let vals: Vec<f64> = samples.iter().flat_map(|s| s.y_reg.iter().copied()).collect();
    if vals.is_empty() {
        return TargetStats::default();
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
    TargetStats {
        mean: m,
        std: if var > 0.0 { var.sqrt() } else { 1.0 },
    }
}

/// z-scores the inputs; targets stay in signal units.
pub fn normalize(samples: &[WindowSample], stats: &NormalizationStats) -> Vec<WindowSample> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for f in 0..stats.mean.len() {
                out.x
                    .slice_mut(s![.., f, ..])
                    .mapv_inplace(|v| (v - stats.mean[f]) / stats.std[f]);
            }
            out
        })
        .collect()
}

pub fn denormalize(samples: &[WindowSample], stats: &NormalizationStats) -> Vec<WindowSample> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for f in 0..stats.mean.len() {
                out.x
                    .slice_mut(s![.., f, ..])
                    .mapv_inplace(|v| v * stats.std[f] + stats.mean[f]);
            }
            out
        })
        .collect()
}
