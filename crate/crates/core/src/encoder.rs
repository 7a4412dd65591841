//! Compact spatio-temporal encoder: an input projection, a stack of
//! graph-mixing + causal dilated temporal convolution blocks, and a mean
//! readout over the remaining time steps.
//!
//! Hidden states are stored time-major: row `t·N + i` holds node `i` at
//! time step `t`, so one matrix product applies a feature map at every
//! (node, time) pair.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot, ParameterStore};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub temporal_kernel: usize,
    /// One dilation per block.
    pub dilations: Vec<usize>,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            n_blocks: 2,
            temporal_kernel: 3,
            dilations: vec![1, 2],
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn with_hidden(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            ..Self::default()
        }
    }

    /// Number of input steps that influence one output step.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|d| (self.temporal_kernel - 1) * d)
            .sum::<usize>()
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be at least 1"));
        }
        if self.temporal_kernel == 0 {
            return Err(Error::invalid("temporal_kernel must be at least 1"));
        }
        if self.dilations.len() != self.n_blocks || self.dilations.contains(&0) {
            return Err(Error::invalid("need one positive dilation per encoder block"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.receptive_field() > window {
            return Err(Error::invalid(format!(
                "encoder receptive field {} exceeds window {window}",
                self.receptive_field()
            )));
        }
        Ok(())
    }
}

/// Parameters registered on a tape, looked up by name.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &Tape, store: &ParameterStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, m)| (name.to_string(), tape.leaf(m.clone())))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

pub fn init_encoder(cfg: &EncoderConfig, n_features: usize, rng: &mut ChaCha8Rng, store: &mut ParameterStore) {
    let d = cfg.hidden_dim;
    store.insert("enc.in.w", glorot(rng, n_features, d));
    store.insert("enc.in.b", Mat::zeros((1, d)));
    for b in 0..cfg.n_blocks {
        store.insert(format!("enc.b{b}.graph.w"), glorot(rng, d, d));
        for j in 0..cfg.temporal_kernel {
            store.insert(format!("enc.b{b}.tconv.w{j}"), glorot(rng, d, d));
        }
        store.insert(format!("enc.b{b}.tconv.b"), Mat::zeros((1, d)));
    }
    store.insert("enc.out.w", glorot(rng, d, d));
    store.insert("enc.out.b", Mat::zeros((1, d)));
}

/// Flattens `N × D × W` into the time-major `(W·N) × D` layout.
pub fn time_major(x: &Array3<f64>) -> Mat {
    let (n, d, w) = x.dim();
    Mat::from_shape_fn((w * n, d), |(row, f)| x[[row % n, f, row / n]])
}

/// Inverted dropout applied during training only.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn check_finite(tape: &Tape, v: Var, block: usize) -> Result<()> {
    if tape.value(v).iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { block })
    }
}

/// One graph-mixing + causal dilated temporal-convolution stage with a
/// residual connection. `hidden` is `(τ·N) × d`; the result has
/// `τ − (kernel − 1)·dilation` time steps.
pub fn encoder_block(
    tape: &Tape,
    params: &Bound,
    block: usize,
    hidden: Var,
    n_nodes: usize,
    a_hat: &Rc<Mat>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let tau = tape.shape(hidden).0 / n_nodes;
    let span = (cfg.temporal_kernel - 1) * cfg.dilations[block];
    if tau <= span {
        return Err(Error::invalid(format!(
            "block {block} needs more than {span} time steps, got {tau}"
        )));
    }
    let tau_out = tau - span;
    let mixed = tape.block_left_mul(a_hat.clone(), hidden);
    let mixed = tape.matmul(mixed, params.var(&format!("enc.b{block}.graph.w")));
    let mut conv: Option<Var> = None;
    for j in 0..cfg.temporal_kernel {
        let tap = tape.row_slice(mixed, j * cfg.dilations[block] * n_nodes, tau_out * n_nodes);
        let term = tape.matmul(tap, params.var(&format!("enc.b{block}.tconv.w{j}")));
        conv = Some(match conv {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let conv = tape.add_row(conv.unwrap(), params.var(&format!("enc.b{block}.tconv.b")));
    let residual = tape.row_slice(hidden, span * n_nodes, tau_out * n_nodes);
    let out = tape.add(tape.relu(conv), residual);
    check_finite(tape, out, block)?;
    Ok(out)
}

/// Runs the block stack and returns the time-major hidden state before the
/// temporal readout.
pub fn encode_sequence(
    tape: &Tape,
    params: &Bound,
    cfg: &EncoderConfig,
    x: &Array3<f64>,
    a_hat: &Rc<Mat>,
    dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let n = x.dim().0;
    let input = tape.leaf(time_major(x));
    let mut hidden = tape.add_row(tape.matmul(input, params.var("enc.in.w")), params.var("enc.in.b"));
    let mut dropout = dropout;
    for b in 0..cfg.n_blocks {
        hidden = encoder_block(tape, params, b, hidden, n, a_hat, cfg)?;
        if let Some(d) = dropout.as_mut().filter(|d| d.rate > 0.0) {
            let keep = 1.0 - d.rate;
            let mask = Mat::from_shape_fn(tape.shape(hidden), |_| {
                if d.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            hidden = tape.mul(hidden, tape.leaf(mask));
        }
    }
    Ok(hidden)
}

/// Window `x (N × D × W)` → node embeddings `H (N × d_h)`.
pub fn encode(
    tape: &Tape,
    params: &Bound,
    cfg: &EncoderConfig,
    x: &Array3<f64>,
    a_hat: &Rc<Mat>,
    dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let n = x.dim().0;
    let hidden = encode_sequence(tape, params, cfg, x, a_hat, dropout)?;
    let steps = tape.shape(hidden).0 / n;
    let pooled = tape.block_mean(hidden, steps);
    let h = tape.add_row(tape.matmul(pooled, params.var("enc.out.w")), params.var("enc.out.b"));
    check_finite(tape, h, cfg.n_blocks)?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StaticGraph;
    use crate::tape::{finite_difference, max_relative_error};
    use rand::SeedableRng;

    fn setup(n: usize, w: usize, d: usize, seed: u64) -> (EncoderConfig, ParameterStore, Array3<f64>, StaticGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig::with_hidden(d);
        let mut store = ParameterStore::new();
        init_encoder(&cfg, 1, &mut rng, &mut store);
        // Non-zero biases so relu masks are not all trivial.
        for (name, m) in store.iter_mut() {
            if name.ends_with(".b") {
                m.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        let x = Array3::from_shape_fn((n, 1, w), |_| rng.random_range(-1.0..1.0));
        let graph = StaticGraph::from_edges(n, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).unwrap();
        (cfg, store, x, graph)
    }

    fn run(cfg: &EncoderConfig, store: &ParameterStore, x: &Array3<f64>, graph: &StaticGraph) -> Mat {
        let tape = Tape::new();
        let bound = Bound::new(&tape, store);
        let a_hat = Rc::new(graph.normalized_adjacency());
        let h = encode(&tape, &bound, cfg, x, &a_hat, None).unwrap();
        tape.value(h)
    }

    #[test]
    fn zero_input_and_zero_readout_give_zero_embeddings() {
        let (cfg, mut store, x, graph) = setup(5, 12, 8, 1);
        store.get_mut("enc.out.w").unwrap().fill(0.0);
        store.get_mut("enc.out.b").unwrap().fill(0.0);
        let h = run(&cfg, &store, &(x * 0.0), &graph);
        assert!(h.iter().all(|v| *v == 0.0));
        assert_eq!(h.dim(), (5, 8));
    }

    #[test]
    fn encode_is_deterministic() {
        let (cfg, store, x, graph) = setup(5, 12, 8, 2);
        assert_eq!(run(&cfg, &store, &x, &graph), run(&cfg, &store, &x, &graph));
    }

    #[test]
    fn permutation_equivariance() {
        let (cfg, store, x, graph) = setup(5, 12, 8, 3);
        let perm = [3, 0, 4, 1, 2];
        let xp = Array3::from_shape_fn(x.dim(), |(i, f, t)| x[[perm[i], f, t]]);
        let h = run(&cfg, &store, &x, &graph);
        let hp = run(&cfg, &store, &xp, &graph.permuted(&perm));
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((hp[[k, c]] - h[[p, c]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalized_adjacency_examples() {
        let empty = StaticGraph::new(Mat::zeros((3, 3)), None).unwrap();
        assert_eq!(empty.normalized_adjacency(), Mat::eye(3));
        let cycle = StaticGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        for row in cycle.normalized_adjacency().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_output_length_shrinks_by_span() {
        let (mut cfg, store, _, graph) = setup(5, 12, 8, 4);
        cfg.dilations = vec![2, 2];
        let tape = Tape::new();
        let bound = Bound::new(&tape, &store);
        let hidden = tape.leaf(Mat::ones((12 * 5, 8)));
        let a_hat = Rc::new(graph.normalized_adjacency());
        let out = encoder_block(&tape, &bound, 0, hidden, 5, &a_hat, &cfg).unwrap();
        assert_eq!(tape.shape(out).0 / 5, 8);
        let short = tape.leaf(Mat::ones((4 * 5, 8)));
        assert!(encoder_block(&tape, &bound, 0, short, 5, &a_hat, &cfg).is_err());
    }

    #[test]
    fn empty_graph_mixing_is_per_node() {
        // With no edges, changing one node's input leaves other nodes' embeddings unchanged.
        let (cfg, store, x, _) = setup(5, 12, 8, 5);
        let graph = StaticGraph::new(Mat::zeros((5, 5)), None).unwrap();
        let mut x2 = x.clone();
        for t in 0..12 {
            x2[[2, 0, t]] += 1.0;
        }
        let a = run(&cfg, &store, &x, &graph);
        let b = run(&cfg, &store, &x2, &graph);
        for i in [0, 1, 3, 4] {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn receptive_field_containment() {
        let (cfg, store, x, graph) = setup(5, 12, 8, 6);
        assert_eq!(cfg.receptive_field(), 7);
        let rf = cfg.receptive_field();
        let last_step = |x: &Array3<f64>| {
            let tape = Tape::new();
            let bound = Bound::new(&tape, &store);
            let a_hat = Rc::new(graph.normalized_adjacency());
            let seq = encode_sequence(&tape, &bound, &cfg, x, &a_hat, None).unwrap();
            let v = tape.value(seq);
            v.slice(ndarray::s![v.nrows() - 5.., ..]).to_owned()
        };
        let mut zeroed = x.clone();
        for i in 0..5 {
            for t in 0..12 - rf {
                zeroed[[i, 0, t]] = 0.0;
            }
        }
        assert_eq!(last_step(&x), last_step(&zeroed));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cfg, store, x, graph) = setup(5, 8, 4, 7);
        let a_hat = Rc::new(graph.normalized_adjacency());
        let probe = |s: &ParameterStore| {
            let tape = Tape::new();
            let bound = Bound::new(&tape, s);
            let h = encode(&tape, &bound, &cfg, &x, &a_hat, None).unwrap();
            tape.scalar_value(tape.sum(h))
        };
        let tape = Tape::new();
        let bound = Bound::new(&tape, &store);
        let h = encode(&tape, &bound, &cfg, &x, &a_hat, None).unwrap();
        let grads = tape.backward(tape.sum(h));
        for name in store.names() {
            let value = store.get(&name).unwrap().clone();
            let analytic = grads.get_or_zeros(bound.var(&name), value.dim());
            let numeric = finite_difference(&value, 1e-5, |p| {
                let mut s = store.clone();
                *s.get_mut(&name).unwrap() = p.clone();
                probe(&s)
            });
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn config_validation() {
        let cfg = EncoderConfig::default();
        assert!(cfg.validate(12).is_ok());
        assert!(cfg.validate(6).is_err());
        let bad = EncoderConfig { dilations: vec![1], ..EncoderConfig::default() };
        assert!(bad.validate(12).is_err());
    }
}
