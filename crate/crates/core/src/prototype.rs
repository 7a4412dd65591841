//! Learnable prototype bank, subgraph–prototype similarity, and the
//! alignment loss tying the pooled subgraph embedding to the bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::encoder::Bound;
use crate::error::{Error, Result};
use crate::extractor::top_k;
use crate::model::Model;
use crate::params::{glorot, ParameterStore};
use crate::tape::{Mat, Tape, Var};

/// Offset in the similarity denominator; bounds γ at `log(1/SIM_EPS)`.
pub const SIM_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `M × d_h`, row `m` is prototype `m`.
    pub vectors: Mat,
    pub class_of: Vec<usize>,
    pub n_classes: usize,
    pub per_class: usize,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `J` consecutive prototypes per class.
    pub fn layout(n_classes: usize, per_class: usize) -> Vec<usize> {
        (0..n_classes * per_class).map(|m| m / per_class).collect()
    }
}

pub fn init_prototypes(n_classes: usize, per_class: usize, hidden: usize, seed: u64) -> Result<PrototypeBank> {
    if n_classes == 0 || per_class == 0 || hidden == 0 {
        return Err(Error::invalid("K, J and d_h must all be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (hidden as f64).sqrt();
    let vectors = Mat::from_shape_fn((n_classes * per_class, hidden), |_| rng.random_range(-1.0..1.0) * scale);
    Ok(PrototypeBank {
        vectors,
        class_of: PrototypeBank::layout(n_classes, per_class),
        n_classes,
        per_class,
    })
}

/// Single-layer map from `z_sub (1 × d)` to the flattened bank `(1 × M·d)`.
pub fn init_alignment_head(hidden: usize, n_prototypes: usize, rng: &mut ChaCha8Rng, store: &mut ParameterStore) {
    store.insert("align.w", glorot(rng, hidden, n_prototypes * hidden));
    store.insert("align.b", Mat::zeros((1, n_prototypes * hidden)));
}

/// `γ_m = log((‖z − v_m‖² + 1) / (‖z − v_m‖² + ε))` as a `1 × M` row.
pub fn similarity(tape: &Tape, z_sub: Var, prototypes: Var) -> Var {
    let d2 = tape.sq_dist(z_sub, prototypes);
    let num = tape.log(tape.add_scalar(d2, 1.0));
    let den = tape.log(tape.add_scalar(d2, SIM_EPS));
    tape.sub(num, den)
}

/// Closed-form similarity at squared distance `d2`.
pub fn similarity_value(d2: f64) -> f64 {
    ((d2 + 1.0) / (d2 + SIM_EPS)).ln()
}

/// Mean squared error between the head's estimate of the flattened bank and
/// the bank itself.
pub fn alignment_loss(tape: &Tape, params: &Bound, z_sub: Var, prototypes: Var) -> Var {
    let (m, d) = tape.shape(prototypes);
    let estimate = tape.add_row(tape.matmul(z_sub, params.var("align.w")), params.var("align.b"));
    let flat = tape.reshape(prototypes, (1, m * d));
    tape.mean(tape.square(tape.sub(estimate, flat)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeGrounding {
    pub prototype: usize,
    pub class: usize,
    pub vector_norm: f64,
    pub window_start: usize,
    pub node_ids: Vec<String>,
    pub nodes: Vec<usize>,
    pub gamma: f64,
}

/// For each prototype, the window whose pooled subgraph embedding is most
/// similar to it, with that window's top-`k` nodes. Ties keep the earliest
/// window.
pub fn nearest_training_subgraph(model: &Model, samples: &[WindowSample], k: usize) -> Result<Vec<PrototypeGrounding>> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot ground prototypes on an empty dataset"));
    }
    let bank = model.prototype_bank();
    let mut best: Vec<Option<(f64, usize, Vec<usize>)>> = vec![None; bank.len()];
    for sample in samples {
        let out = model.explain(sample)?;
        let nodes = top_k(&out.p, k)?;
        for (m, slot) in best.iter_mut().enumerate() {
            let g = out.gamma[m];
            if slot.as_ref().is_none_or(|(bg, _, _)| g > *bg) {
                *slot = Some((g, sample.window_start, nodes.clone()));
            }
        }
    }
    let ids = model.node_ids();
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(m, slot)| {
            let (gamma, window_start, nodes) = slot.unwrap();
            PrototypeGrounding {
                prototype: m,
                class: bank.class_of[m],
                vector_norm: bank.vectors.row(m).dot(&bank.vectors.row(m)).sqrt(),
                window_start,
                node_ids: nodes.iter().map(|&i| ids[i].clone()).collect(),
                nodes,
                gamma,
            }
        })
        .collect())
}
