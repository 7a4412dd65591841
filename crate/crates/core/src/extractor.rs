//! Stochastic explanatory subgraph: per-node keep-probabilities, sampled
//! gates, noised embeddings, the compression bound, the connectivity
//! penalty and subgraph pooling.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Bound;
use crate::error::{Error, Result};
use crate::params::{glorot, ParameterStore};
use crate::tape::{sigmoid, Mat, Tape, Var};

pub const P_CLAMP: f64 = 1e-6;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const S_FLOOR: f64 = 1e-6;
const ROW_SUM_EPS: f64 = 1e-9;
const POOL_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Bernoulli draws with a straight-through gradient.
    Hard,
    /// Binary-concrete relaxation at the given temperature.
    Soft { temperature: f64 },
}

/// Per-dimension statistics of `H` used to draw the replacement noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseStats {
    /// Column mean and population standard deviation over the node rows.
    pub fn from_embeddings(h: &Mat) -> Result<Self> {
        let n = h.nrows();
        if n < 2 {
            return Err(Error::invalid(
                "noise statistics need at least 2 nodes; pass a graph with N >= 2",
            ));
        }
        let mut mu = Vec::with_capacity(h.ncols());
        let mut sigma = Vec::with_capacity(h.ncols());
        for col in h.columns() {
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            mu.push(m);
            sigma.push(var.sqrt().max(SIGMA_FLOOR));
        }
        Ok(Self { mu, sigma })
    }
}

/// Values of one sample's node selection, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSelection {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub z: Mat,
    pub mu_h: Vec<f64>,
    pub sigma_h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphEmbedding {
    pub z_sub: Vec<f64>,
    /// Node indices ordered by descending keep-probability.
    pub selected_nodes: Vec<usize>,
}

/// Numeric guards that engaged during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExtractorFlags {
    pub s_clamped: bool,
    pub zero_row_in_connectivity: bool,
    pub pool_fallback: bool,
}

pub fn init_extractor(hidden: usize, rng: &mut ChaCha8Rng, store: &mut ParameterStore) {
    store.insert("ext.mlp.w1", glorot(rng, hidden, hidden));
    store.insert("ext.mlp.b1", Mat::zeros((1, hidden)));
    store.insert("ext.mlp.w2", glorot(rng, hidden, 1));
    store.insert("ext.mlp.b2", Mat::zeros((1, 1)));
}

/// `p = clamp(sigmoid(MLP(h_i)))` as an `N × 1` column.
pub fn node_probabilities(tape: &Tape, params: &Bound, h: Var) -> Var {
    let hidden = tape.relu(tape.add_row(tape.matmul(h, params.var("ext.mlp.w1")), params.var("ext.mlp.b1")));
    let logit = tape.add_row(tape.matmul(hidden, params.var("ext.mlp.w2")), params.var("ext.mlp.b2"));
    tape.clamp(tape.sigmoid(logit), P_CLAMP, 1.0 - P_CLAMP)
}

/// Binary-concrete gate for a keep-probability `p`, uniform draw `u` and
/// temperature.
pub fn concrete_gate(p: f64, u: f64, temperature: f64) -> f64 {
    let logit = (p.ln() - (1.0 - p).ln() + u.ln() - (1.0 - u).ln()) / temperature;
    sigmoid(logit)
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12)
}

/// Samples one gate per node. Soft gates are differentiable through the
/// relaxation; hard gates pass the gradient straight through to `p`.
pub fn sample_gates(tape: &Tape, p: Var, mode: GateMode, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = tape.shape(p).0;
    let u: Vec<f64> = (0..n).map(|_| open_unit(rng)).collect();
    match mode {
        GateMode::Hard => {
            let pv = tape.value(p);
            let draws = Mat::from_shape_fn((n, 1), |(i, _)| if u[i] < pv[[i, 0]] { 1.0 } else { 0.0 });
            Ok(tape.straight_through(p, draws))
        }
        GateMode::Soft { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::invalid("soft gates need a positive temperature"));
            }
            let noise = Mat::from_shape_fn((n, 1), |(i, _)| u[i].ln() - (1.0 - u[i]).ln());
            let logit_p = tape.sub(tape.log(p), tape.log(tape.one_minus(p)));
            let shifted = tape.add(logit_p, tape.leaf(noise));
            Ok(tape.sigmoid(tape.scale(shifted, 1.0 / temperature)))
        }
    }
}

/// `z_i = λ_i h_i + (1 − λ_i) ε_i` with `ε_i ~ N(μ_h, σ_h²)` drawn per row.
pub fn noised_embeddings(
    tape: &Tape,
    h: Var,
    lambda: Var,
    stats: &NoiseStats,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (n, d) = tape.shape(h);
    if n < 2 {
        return Err(Error::invalid("noised embeddings need at least 2 nodes"));
    }
    let eps = Mat::from_shape_fn((n, d), |(_, c)| {
        let e: f64 = rng.sample(StandardNormal);
        stats.mu[c] + stats.sigma[c] * e
    });
    let kept = tape.mul_col(h, lambda);
    let replaced = tape.mul_col(tape.leaf(eps), tape.one_minus(lambda));
    Ok(tape.add(kept, replaced))
}

/// Upper bound on the information the subgraph keeps about the input:
/// `−½ log S + S/(2N) + M²/(2N)` with `S = Σ(1−λ_i)²` floored at 1e-6 and
/// `M` the mean over embedding dimensions of `Σ_i λ_i (h_i − μ_h)/σ_h`.
pub fn compression_loss(tape: &Tape, lambda: Var, h: Var, stats: &NoiseStats) -> (Var, bool) {
    let n = tape.shape(h).0 as f64;
    let s_raw = tape.sum(tape.square(tape.one_minus(lambda)));
    let clamped = tape.scalar_value(s_raw) < S_FLOOR;
    let s = tape.clamp(s_raw, S_FLOOR, f64::INFINITY);
    let centered = tape.affine_cols(h, &stats.mu, &stats.sigma);
    let m_vec = tape.matmul(tape.transpose(lambda), centered);
    let m = tape.mean(m_vec);
    let log_term = tape.scale(tape.log(s), -0.5);
    let s_term = tape.scale(s, 1.0 / (2.0 * n));
    let m_term = tape.scale(tape.square(m), 1.0 / (2.0 * n));
    (tape.add(tape.add(log_term, s_term), m_term), clamped)
}

/// `‖rownorm(PᵀAP) − I₂‖_F` with `P` rows `(p_i, 1 − p_i)`.
pub fn connectivity_loss(tape: &Tape, p: Var, adjacency: &Rc<Mat>) -> (Var, bool) {
    let assign = tape.concat_cols(p, tape.one_minus(p));
    let a = tape.leaf(adjacency.as_ref().clone());
    let pap = tape.matmul(tape.matmul(tape.transpose(assign), a), assign);
    let flagged = tape.value(pap).rows().into_iter().any(|r| r.sum() < ROW_SUM_EPS);
    let normalized = tape.row_normalize(pap, ROW_SUM_EPS);
    let diff = tape.sub(normalized, tape.leaf(Mat::eye(2)));
    (tape.sqrt(tape.sum(tape.square(diff))), flagged)
}

/// Gate-weighted mean of the noised embeddings as a `1 × d` row. Falls back
/// to the plain mean when the gates sum to (almost) zero.
pub fn pool_subgraph(tape: &Tape, z: Var, lambda: Var) -> (Var, bool) {
    let total = tape.sum(lambda);
    if tape.scalar_value(total) > POOL_EPS {
        let weighted = tape.matmul(tape.transpose(lambda), z);
        (tape.div_scalar(weighted, total), false)
    } else {
        let n = tape.shape(z).0;
        (tape.block_mean(z, n), true)
    }
}

/// Indices of the `k` largest probabilities, ties broken by ascending index.
pub fn top_k(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("k must lie in 1..={}, got {k}", p.len())));
    }
    Ok(rank_nodes(p).into_iter().take(k).collect())
}

/// All node indices ordered by descending probability (stable on ties).
pub fn rank_nodes(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}
