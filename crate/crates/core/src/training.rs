//! Loss composition, coefficient-of-variation loss weighting, and the
//! optimization loop.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::encoder::Bound;
use crate::error::{Error, Result};
use crate::evaluation::forecast_metrics;
use crate::extractor::{GateMode, NoiseStats};
use crate::model::{ForwardOptions, Model};
use crate::params::ParameterStore;
use crate::rng::{derive, Stream};
use crate::tape::{max_relative_error, Mat, Tape, Var};

pub const N_LOSSES: usize = 5;
pub const LOSS_NAMES: [&str; N_LOSSES] = ["l_reg", "l_sub", "l_var", "l_con", "l_cls"];

/// The five objective terms. There is deliberately no slot for a
/// prototype–(target, subgraph) information term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub l_reg: f64,
    pub l_sub: f64,
    pub l_var: f64,
    pub l_con: f64,
    pub l_cls: f64,
}

impl LossVector {
    pub fn as_array(&self) -> [f64; N_LOSSES] {
        [self.l_reg, self.l_sub, self.l_var, self.l_con, self.l_cls]
    }

    pub fn from_array(a: [f64; N_LOSSES]) -> Self {
        Self {
            l_reg: a[0],
            l_sub: a[1],
            l_var: a[2],
            l_con: a[3],
            l_cls: a[4],
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.as_array()
            .iter()
            .zip(LOSS_NAMES)
            .find(|(v, _)| !v.is_finite())
            .map(|(_, n)| n)
    }
}

/// `Σ w_i · l_i`.
pub fn total_loss(lv: &LossVector, w: &[f64; N_LOSSES]) -> f64 {
    lv.as_array().iter().zip(w).map(|(l, w)| l * w).sum()
}

pub const COV_WINDOW: usize = 10;
pub const COV_WARMUP: usize = 2;

/// Coefficient-of-variation weighting state.
///
/// Each epoch contributes, per component, the ratio of its loss to the mean
/// of all earlier epoch losses; a component's weight is proportional to
/// `std / |mean|` of its last [`COV_WINDOW`] ratios. During the first
/// [`COV_WARMUP`] epochs, and whenever every coefficient is (near) zero, the
/// weights are uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightState {
    ratios: [VecDeque<f64>; N_LOSSES],
    /// Sum of all earlier epoch losses, for the running mean.
    loss_sums: [f64; N_LOSSES],
    pub weights: [f64; N_LOSSES],
    pub epochs_seen: usize,
    /// Set when the last update fell back to uniform weights after warmup.
    pub fallback: bool,
}

impl Default for WeightState {
    fn default() -> Self {
        Self {
            ratios: Default::default(),
            loss_sums: [0.0; N_LOSSES],
            weights: [1.0 / N_LOSSES as f64; N_LOSSES],
            epochs_seen: 0,
            fallback: false,
        }
    }
}

impl WeightState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state directly from ratio histories (used to probe the rule).
    pub fn from_ratios(history: [Vec<f64>; N_LOSSES], epochs_seen: usize) -> Self {
        let mut state = Self {
            epochs_seen,
            ..Self::default()
        };
        for (slot, h) in state.ratios.iter_mut().zip(history) {
            slot.extend(h);
        }
        state.recompute();
        state
    }

    pub fn coefficients(&self) -> [f64; N_LOSSES] {
        let mut c = [0.0; N_LOSSES];
        for (ci, hist) in c.iter_mut().zip(&self.ratios) {
            if hist.len() < 2 {
                continue;
            }
            let n = hist.len() as f64;
            let mean = hist.iter().sum::<f64>() / n;
            let var = hist.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            if mean.abs() > 1e-12 {
                *ci = var.sqrt() / mean.abs();
            }
        }
        c
    }

    fn recompute(&mut self) {
        let uniform = [1.0 / N_LOSSES as f64; N_LOSSES];
        self.fallback = false;
        if self.epochs_seen <= COV_WARMUP {
            self.weights = uniform;
            return;
        }
        let c = self.coefficients();
        let total: f64 = c.iter().sum();
        if !(total >= 1e-9) || !total.is_finite() {
            self.weights = uniform;
            self.fallback = true;
            return;
        }
        for (w, ci) in self.weights.iter_mut().zip(c) {
            *w = ci / total;
        }
    }

    /// Folds in one epoch's mean losses.
    pub fn update(&mut self, lv: &LossVector) {
        let cur = lv.as_array();
        if self.epochs_seen > 0 {
            for k in 0..N_LOSSES {
                let mean = self.loss_sums[k] / self.epochs_seen as f64;
                let ratio = if mean.abs() > 1e-12 { cur[k] / mean } else { 1.0 };
                let hist = &mut self.ratios[k];
                hist.push_back(ratio);
                if hist.len() > COV_WINDOW {
                    hist.pop_front();
                }
            }
        }
        for k in 0..N_LOSSES {
            self.loss_sums[k] += cur[k];
        }
        self.epochs_seen += 1;
        self.recompute();
    }
}

/// Per-epoch update of the loss weights from epoch-mean losses.
pub fn update_weights(mut state: WeightState, lv: &LossVector) -> WeightState {
    state.update(lv);
    state
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Coefficient-of-variation weights.
    Cov,
    /// Fixed uniform weights.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Soft-gate temperature at the first epoch, annealed linearly to
    /// `temperature_end` at the last.
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Train with hard (straight-through) gates instead of soft ones.
    pub hard_gates: bool,
    pub patience: usize,
    pub weighting: Weighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            temperature_start: 1.0,
            temperature_end: 0.1,
            hard_gates: false,
            patience: 15,
            weighting: Weighting::Cov,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be positive"));
        }
        Ok(())
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.temperature_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.temperature_start + (self.temperature_end - self.temperature_start) * frac
    }

    fn gate(&self, epoch: usize) -> GateMode {
        if self.hard_gates {
            GateMode::Hard
        } else {
            GateMode::Soft {
                temperature: self.temperature(epoch),
            }
        }
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, params: &ParameterStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, m)| Mat::zeros(m.dim())).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads` are in the store's parameter order.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &[Mat]) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossVector,
    /// Weights applied during this epoch.
    pub weights: [f64; N_LOSSES],
    pub val_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_reg,l_sub,l_var,l_con,l_cls,w1,w2,w3,w4,w5,val_mae\n");
        for r in &self.records {
            let mut fields = vec![r.epoch.to_string()];
            fields.extend(r.losses.as_array().iter().map(|v| format!("{v:.9e}")));
            fields.extend(r.weights.iter().map(|v| format!("{v:.9e}")));
            fields.push(format!("{:.9e}", r.val_mae));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Mean absolute error of the model's evaluation-mode forecasts.
pub fn mean_abs_error(model: &Model, samples: &[WindowSample]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for s in samples {
        preds.extend(model.predict(s)?.iter().copied());
        truth.extend(s.y_reg.iter().copied());
    }
    Ok(forecast_metrics(&preds, &truth)?.mae)
}

/// Trains `model` in place. Returns the per-epoch history; the model ends
/// with the parameters of the epoch with the best validation MAE.
pub fn train(model: &mut Model, train: &[WindowSample], val: &[WindowSample], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut adam = Adam::new(cfg.learning_rate, &model.params);
    let mut weights = WeightState::new();
    let mut history = History::default();
    let mut best: Option<(f64, ParameterStore)> = None;
    let mut since_best = 0;
    let names = model.params.names();

    for epoch in 0..cfg.epochs {
        let w = match cfg.weighting {
            Weighting::Cov => weights.weights,
            Weighting::Uniform => [1.0 / N_LOSSES as f64; N_LOSSES],
        };
        let opts = ForwardOptions {
            gate: cfg.gate(epoch),
            frozen_noise: None,
            training: true,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive(cfg.seed, Stream::Shuffle, epoch as u64, 0));

        let mut sums = [0.0; N_LOSSES];
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound = Bound::new(&tape, &model.params);
            let mut total: Option<Var> = None;
            for &i in batch {
                let sample = &train[i];
                let mut rng = derive(cfg.seed, Stream::TrainSample, sample.window_start as u64, epoch as u64);
                let out = model.forward(&tape, &bound, sample, opts, &mut rng)?;
                let vars = out.losses.as_array();
                let values = vars.map(|v| tape.scalar_value(v));
                if let Some(component) = LossVector::from_array(values).first_non_finite() {
                    return Err(Error::NonFiniteLoss { component, epoch });
                }
                for k in 0..N_LOSSES {
                    sums[k] += values[k];
                }
                let mut weighted = tape.scale(vars[0], w[0]);
                for k in 1..N_LOSSES {
                    weighted = tape.add(weighted, tape.scale(vars[k], w[k]));
                }
                total = Some(match total {
                    Some(t) => tape.add(t, weighted),
                    None => weighted,
                });
            }
            let total = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
            let grads = tape.backward(total);
            let grad_list: Vec<Mat> = names
                .iter()
                .zip(model.params.iter())
                .map(|(name, (_, m))| grads.get_or_zeros(bound.var(name), m.dim()))
                .collect();
            adam.step(&mut model.params, &grad_list);
        }

        let epoch_losses = LossVector::from_array(sums.map(|s| s / train.len() as f64));
        model.trained_epochs = epoch + 1;
        let val_mae = if val.is_empty() { f64::NAN } else { mean_abs_error(model, val)? };
        history.records.push(EpochRecord {
            epoch,
            losses: epoch_losses,
            weights: w,
            val_mae,
        });
        weights.update(&epoch_losses);
        log::debug!("epoch {epoch}: {epoch_losses:?} val_mae={val_mae:.4}");

        if val_mae.is_finite() {
            if best.as_ref().is_none_or(|(b, _)| val_mae < *b) {
                best = Some((val_mae, model.params.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max relative error per loss, in [`LOSS_NAMES`] order.
    pub max_relative_error: [f64; N_LOSSES],
    pub n_parameters: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic parameter gradients of each loss with float64 central
/// differences. Soft gates and replacement noise are held fixed by reusing
/// one seed and freezing the noise statistics at the unperturbed point.
pub fn grad_check(model: &Model, sample: &WindowSample, tolerance: f64) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let seed = 0x9c4ec;
    let gate = GateMode::Soft { temperature: 0.7 };

    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params);
    let opts = ForwardOptions {
        gate,
        frozen_noise: None,
        training: false,
    };
    let probe = model.forward(&tape, &bound, sample, opts, &mut derive(seed, Stream::TrainSample, 0, 0))?;
    let frozen: NoiseStats = probe.noise.clone();
    let opts = ForwardOptions {
        frozen_noise: Some(&frozen),
        ..opts
    };

    let losses_at = |params: &ParameterStore| -> Result<[f64; N_LOSSES]> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, params);
        let out = model.forward(&tape, &bound, sample, opts, &mut derive(seed, Stream::TrainSample, 0, 0))?;
        Ok(out.losses.as_array().map(|v| tape.scalar_value(v)))
    };

    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params);
    let out = model.forward(&tape, &bound, sample, opts, &mut derive(seed, Stream::TrainSample, 0, 0))?;
    let analytic: Vec<_> = out.losses.as_array().iter().map(|&l| tape.backward(l)).collect();

    let mut worst = [0.0f64; N_LOSSES];
    let mut perturbed = model.params.clone();
    for name in model.params.names() {
        let base = model.params.get(&name).unwrap().clone();
        let mut numeric: Vec<Mat> = vec![Mat::zeros(base.dim()); N_LOSSES];
        for idx in ndarray::indices(base.dim()) {
            let mut probe = |delta: f64| {
                perturbed.get_mut(&name).unwrap()[idx] = base[idx] + delta;
                losses_at(&perturbed)
            };
            let plus = probe(STEP)?;
            let minus = probe(-STEP)?;
            for k in 0..N_LOSSES {
                numeric[k][idx] = (plus[k] - minus[k]) / (2.0 * STEP);
            }
            perturbed.get_mut(&name).unwrap()[idx] = base[idx];
        }
        for k in 0..N_LOSSES {
            let a = analytic[k].get_or_zeros(bound.var(&name), base.dim());
            worst[k] = worst[k].max(max_relative_error(&a, &numeric[k], FLOOR));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        n_parameters: model.params.n_scalars(),
        tolerance,
        passed: worst.iter().all(|e| *e < tolerance),
    })
}
