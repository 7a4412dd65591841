//! Forecast metrics, explanation fidelity, and exact discrete
//! mutual-information oracles.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{TemporalSignal, WindowSample};
use crate::error::{Error, Result};
use crate::extractor::top_k;
use crate::model::Model;

/// Targets at or below this magnitude are excluded from MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Absent when every target is below [`MAPE_FLOOR`].
    pub mape_percent: Option<f64>,
    pub n_evaluated: usize,
}

pub fn forecast_metrics(y_hat: &[f64], y_true: &[f64]) -> Result<MetricReport> {
    if y_hat.len() != y_true.len() {
        return Err(Error::invalid(format!(
            "prediction length {} does not match target length {}",
            y_hat.len(),
            y_true.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("no targets to evaluate"));
    }
    let n = y_true.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut n_pct = 0usize;
    for (p, y) in y_hat.iter().zip(y_true) {
        let d = p - y;
        abs += d.abs();
        sq += d * d;
        if y.abs() > MAPE_FLOOR {
            pct += d.abs() / y.abs();
            n_pct += 1;
        }
    }
    let mae = abs / n;
    // Clamp guards against a last-ulp inversion when all errors are equal.
    let rmse = (sq / n).sqrt().max(mae);
    Ok(MetricReport {
        mae,
        rmse,
        mape_percent: (n_pct > 0).then(|| 100.0 * pct / n_pct as f64),
        n_evaluated: y_true.len(),
    })
}

/// Metrics of the model's evaluation-mode forecasts over `samples`.
pub fn evaluate_forecasts(model: &Model, samples: &[WindowSample]) -> Result<MetricReport> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for s in samples {
        preds.extend(model.predict(s)?.iter().copied());
        truth.extend(s.y_reg.iter().copied());
    }
    forecast_metrics(&preds, &truth)
}

/// How the two fidelity numbers are labelled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityConvention {
    /// plus = explanation removed, minus = only the explanation kept.
    #[default]
    Standard,
    /// The swapped labelling: plus = only the explanation kept.
    Paper,
}

impl FidelityConvention {
    /// Maps (removed, kept-only) onto (plus, minus).
    pub fn label(self, removed: f64, kept_only: f64) -> (f64, f64) {
        match self {
            Self::Standard => (removed, kept_only),
            Self::Paper => (kept_only, removed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityVariant {
    Plus,
    Minus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityScore {
    pub percent: f64,
    pub warning: Option<String>,
}

/// Scalar summary of a forecast: the mean over all node-horizon entries.
fn scalarize(y: &Array2<f64>) -> f64 {
    y.mean().unwrap_or(0.0)
}

/// Replaces the inputs of the listed nodes with the train-split feature means.
pub fn mask_nodes(sample: &WindowSample, nodes: &[usize], fill: &[f64]) -> WindowSample {
    let mut out = sample.clone();
    for &i in nodes {
        let mut node = out.x.index_axis_mut(Axis(0), i);
        for (f, mut feature) in node.axis_iter_mut(Axis(0)).enumerate() {
            feature.fill(fill[f]);
        }
    }
    out
}

fn untrained_warning(model: &Model) -> Option<String> {
    (model.trained_epochs == 0).then(|| "model has not been trained; fidelity is not meaningful".to_string())
}

/// `100 · mean_s |f(G_s) − f(G_s with chosen nodes masked)|`, where
/// `choose` picks the nodes to mask for each sample.
pub fn fidelity_with<F>(model: &Model, samples: &[WindowSample], mut choose: F) -> Result<FidelityScore>
where
    F: FnMut(&WindowSample) -> Result<Vec<usize>>,
{
    if samples.is_empty() {
        return Err(Error::invalid("fidelity needs at least one sample"));
    }
    let fill = &model.norm.mean;
    let mut total = 0.0;
    for s in samples {
        let base = scalarize(&model.predict(s)?);
        let masked = mask_nodes(s, &choose(s)?, fill);
        total += (base - scalarize(&model.predict(&masked)?)).abs();
    }
    Ok(FidelityScore {
        percent: 100.0 * total / samples.len() as f64,
        warning: untrained_warning(model),
    })
}

fn check_k(model: &Model, k: usize) -> Result<()> {
    if k == 0 || k > model.n_nodes() {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", model.n_nodes())));
    }
    Ok(())
}

/// Fidelity of each sample's own top-`k` explanation. `Plus` masks the
/// explanation; `Minus` masks its complement.
pub fn fidelity(model: &Model, samples: &[WindowSample], k: usize, variant: FidelityVariant) -> Result<FidelityScore> {
    check_k(model, k)?;
    let n = model.n_nodes();
    fidelity_with(model, samples, |s| {
        let chosen = top_k(&model.explain(s)?.p, k)?;
        Ok(match variant {
            FidelityVariant::Plus => chosen,
            FidelityVariant::Minus => (0..n).filter(|i| !chosen.contains(i)).collect(),
        })
    })
}

/// Fidelity when the same fixed node set is masked in every sample.
pub fn fidelity_of_nodes(model: &Model, samples: &[WindowSample], nodes: &[usize]) -> Result<FidelityScore> {
    if let Some(bad) = nodes.iter().find(|&&i| i >= model.n_nodes()) {
        return Err(Error::invalid(format!("node {bad} out of range")));
    }
    fidelity_with(model, samples, |_| Ok(nodes.to_vec()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    pub ks: Vec<usize>,
    pub fidelity_plus: Vec<f64>,
    pub fidelity_minus: Vec<f64>,
    pub convention: FidelityConvention,
    pub warning: Option<String>,
}

impl FidelityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,fidelity_plus,fidelity_minus\n");
        for ((k, p), m) in self.ks.iter().zip(&self.fidelity_plus).zip(&self.fidelity_minus) {
            out.push_str(&format!("{k},{p:.9e},{m:.9e}\n"));
        }
        out
    }

    /// Fraction of adjacent pairs where plus-fidelity does not decrease.
    pub fn monotone_fraction(&self) -> f64 {
        let pairs = self.fidelity_plus.windows(2);
        let total = pairs.len();
        if total == 0 {
            return 1.0;
        }
        let ok = self.fidelity_plus.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / total as f64
    }
}

/// Fidelity at each `k`, reported in ascending `k` order.
pub fn sparsity_sweep(
    model: &Model,
    samples: &[WindowSample],
    ks: &[usize],
    convention: FidelityConvention,
) -> Result<FidelityCurve> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        check_k(model, k)?;
    }
    // Explanations do not depend on k, so rank once per sample.
    let n = model.n_nodes();
    let mut ranked = Vec::with_capacity(samples.len());
    for s in samples {
        ranked.push(top_k(&model.explain(s)?.p, n)?);
    }
    let mut curve = FidelityCurve {
        convention,
        warning: untrained_warning(model),
        ..FidelityCurve::default()
    };
    for &k in &ks {
        let mut idx = 0;
        let removed = fidelity_with(model, samples, |_| {
            idx += 1;
            Ok(ranked[idx - 1][..k].to_vec())
        })?;
        let mut idx = 0;
        let kept = fidelity_with(model, samples, |_| {
            idx += 1;
            Ok(ranked[idx - 1][k..].to_vec())
        })?;
        let (plus, minus) = convention.label(removed.percent, kept.percent);
        curve.ks.push(k);
        curve.fidelity_plus.push(plus);
        curve.fidelity_minus.push(minus);
    }
    Ok(curve)
}

/// A normalized two-variable discrete distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    table: Array2<f64>,
}

impl DiscreteJoint {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::invalid("empty joint table"));
        }
        if table.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("joint entries must be finite and non-negative"));
        }
        let total = table.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("joint sums to {total}, expected 1")));
        }
        Ok(Self { table })
    }

    /// Normalizes non-negative weights into a joint.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let total = weights.sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights must have a positive sum"));
        }
        Self::new(weights / total)
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.table.sum_axis(Axis(1)).to_vec()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        self.table.sum_axis(Axis(0)).to_vec()
    }

    /// `p(y | x)`; rows with zero mass get the marginal of y.
    pub fn posterior(&self) -> Array2<f64> {
        let px = self.marginal_x();
        let py = self.marginal_y();
        let mut q = self.table.clone();
        for (x, mut row) in q.rows_mut().into_iter().enumerate() {
            if px[x] > 0.0 {
                row /= px[x];
            } else {
                row.assign(&ndarray::ArrayView1::from(&py));
            }
        }
        q
    }
}

/// Exact `Σ p(x,y) ln(p(x,y) / (p(x) p(y)))` in nats, with `0 ln 0 = 0`.
pub fn mutual_information_discrete(joint: &DiscreteJoint) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for ((x, y), &p) in joint.table.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (px[x] * py[y])).ln();
        }
    }
    mi.max(0.0)
}

/// `E_p[ln q(y|x)] − E_p[ln p(y)]` for a candidate posterior `q`.
pub fn variational_bound(joint: &DiscreteJoint, q: &Array2<f64>) -> Result<f64> {
    if q.dim() != joint.table.dim() {
        return Err(Error::invalid("posterior shape does not match the joint"));
    }
    let py = joint.marginal_y();
    let mut bound = 0.0;
    for ((x, y), &p) in joint.table.indexed_iter() {
        if p > 0.0 {
            bound += p * (q[[x, y]].ln() - py[y].ln());
        }
    }
    Ok(bound)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mutual_information: f64,
    pub bound_at_true_posterior: f64,
    /// Largest bound found over the perturbed posteriors.
    pub max_perturbed_bound: f64,
    pub n_perturbations: usize,
    pub equality_holds: bool,
    pub perturbed_never_exceed: bool,
}

/// Checks the variational classification bound on a finite joint: equality
/// at the true posterior, and strictly smaller values for posteriors with one
/// entry per row shifted by ±`delta` and renormalized.
pub fn bound_sanity(joint: &DiscreteJoint) -> BoundReport {
    const DELTA: [f64; 2] = [0.1, -0.1];
    let mi = mutual_information_discrete(joint);
    let truth = joint.posterior();
    let at_truth = variational_bound(joint, &truth).unwrap();
    let (kx, ky) = truth.dim();
    let mut max_perturbed = f64::NEG_INFINITY;
    let mut count = 0;
    let mut never_exceed = true;
    for x in 0..kx {
        for y in 0..ky {
            for d in DELTA {
                let mut q = truth.clone();
                q[[x, y]] = (q[[x, y]] + d).max(1e-12);
                let s = q.row(x).sum();
                q.row_mut(x).mapv_inplace(|v| v / s);
                let b = variational_bound(joint, &q).unwrap();
                count += 1;
                max_perturbed = max_perturbed.max(b);
                // A row with no mass leaves the bound unchanged.
                let row_mass = joint.marginal_x()[x];
                if row_mass > 0.0 && b >= mi {
                    never_exceed = false;
                }
            }
        }
    }
    BoundReport {
        mutual_information: mi,
        bound_at_true_posterior: at_truth,
        max_perturbed_bound: max_perturbed,
        n_perturbations: count,
        equality_holds: (at_truth - mi).abs() <= 1e-9,
        perturbed_never_exceed: never_exceed,
    }
}

/// Per-node, per-time-of-day mean of feature 0 over the first `train_steps`
/// steps.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    /// `N × steps_per_day`.
    pub table: Array2<f64>,
    pub steps_per_day: usize,
}

impl HistoricalAverage {
    pub fn fit(signal: &TemporalSignal, train_steps: usize) -> Result<Self> {
        if signal.step_seconds == 0 || 86_400 % signal.step_seconds != 0 {
            return Err(Error::invalid(format!(
                "step of {}s does not divide a day",
                signal.step_seconds
            )));
        }
        let steps_per_day = (86_400 / signal.step_seconds) as usize;
        let train_steps = train_steps.min(signal.n_steps());
        let n = signal.n_nodes();
        let mut sum = Array2::<f64>::zeros((n, steps_per_day));
        let mut count = Array2::<f64>::zeros((n, steps_per_day));
        for t in 0..train_steps {
            let slot = t % steps_per_day;
            for i in 0..n {
                sum[[i, slot]] += signal.values[[i, 0, t]];
                count[[i, slot]] += 1.0;
            }
        }
        // Slots never seen in training fall back to the node's overall mean.
        let mut table = sum.clone();
        for i in 0..n {
            let node_total: f64 = sum.row(i).sum();
            let node_count: f64 = count.row(i).sum();
            let fallback = if node_count > 0.0 { node_total / node_count } else { 0.0 };
            for slot in 0..steps_per_day {
                let c = count[[i, slot]];
                table[[i, slot]] = if c > 0.0 { sum[[i, slot]] / c } else { fallback };
            }
        }
        Ok(Self { table, steps_per_day })
    }

    /// `N × T'` forecast for a sample.
    pub fn predict(&self, sample: &WindowSample) -> Array2<f64> {
        let start = sample.window_start + sample.window();
        Array2::from_shape_fn(sample.y_reg.dim(), |(i, h)| {
            self.table[[i, (start + h) % self.steps_per_day]]
        })
    }

    pub fn evaluate(&self, samples: &[WindowSample]) -> Result<MetricReport> {
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for s in samples {
            preds.extend(self.predict(s).iter().copied());
            truth.extend(s.y_reg.iter().copied());
        }
        forecast_metrics(&preds, &truth)
    }
}
