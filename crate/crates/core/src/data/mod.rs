//! Temporal graph datasets: the static graph, the node signal, pseudo-labels,
//! sliding windows, chronological splits, normalization and the planted
//! synthetic generator.

mod io;
mod synth;
mod windows;

pub use io::{load_dataset, read_signal, write_dataset, LoadOptions};
pub use synth::{generate_synthetic, PlantedSpec};
pub use windows::{
    compute_normalization, compute_target_stats, compute_thresholds, denormalize, make_windows,
    normalize, purge_overlap, quantile_linear, split_chronological, NormalizationStats,
    PseudoLabelSpec, SplitRatios, TargetStats, WindowSample,
};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// A static weighted graph over `N` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticGraph {
    adjacency: Array2<f64>,
    node_ids: Vec<String>,
    /// Number of self-loop entries removed when the graph was built.
    pub self_loops_stripped: usize,
}

impl StaticGraph {
    /// Validates and builds a graph. Self-loops are stripped and counted.
    pub fn new(mut adjacency: Array2<f64>, node_ids: Option<Vec<String>>) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c {
            return Err(Error::Format {
                what: "adjacency",
                detail: format!("not square: {r}x{c}"),
            });
        }
        if r < 2 {
            return Err(Error::invalid(format!("graph needs at least 2 nodes, got {r}")));
        }
        if let Some(bad) = adjacency.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Format {
                what: "adjacency",
                detail: format!("entries must be finite and non-negative, found {bad}"),
            });
        }
        let mut self_loops_stripped = 0;
        for i in 0..r {
            if adjacency[[i, i]] != 0.0 {
                adjacency[[i, i]] = 0.0;
                self_loops_stripped += 1;
            }
        }
        let node_ids = match node_ids {
            Some(ids) if ids.len() != r => {
                return Err(Error::Format {
                    what: "node ids",
                    detail: format!("{} ids for {r} nodes", ids.len()),
                })
            }
            Some(ids) => ids,
            None => (0..r).map(|i| i.to_string()).collect(),
        };
        Ok(Self {
            adjacency,
            node_ids,
            self_loops_stripped,
        })
    }

    /// Builds an unweighted undirected graph from an edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Array2::zeros((n, n));
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u},{v}) out of range for {n} nodes")));
            }
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        Self::new(a, None)
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Array2<f64> {
        let n = self.n_nodes();
        let a_hat = &self.adjacency + &Array2::<f64>::eye(n);
        let inv_sqrt: Vec<f64> = a_hat
            .rows()
            .into_iter()
            .map(|row| 1.0 / row.sum().sqrt())
            .collect();
        Array2::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * a_hat[[i, j]] * inv_sqrt[j])
    }

    /// Reorders nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let a = Array2::from_shape_fn((n, n), |(i, j)| self.adjacency[[perm[i], perm[j]]]);
        let ids = perm.iter().map(|&p| self.node_ids[p].clone()).collect();
        Self {
            adjacency: a,
            node_ids: ids,
            self_loops_stripped: self.self_loops_stripped,
        }
    }
}

/// Node signal over time, stored as `N × D × T_total`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalSignal {
    pub values: Array3<f64>,
    pub step_seconds: u32,
    /// Entries that were missing at load and imputed.
    pub imputed: usize,
}

impl TemporalSignal {
    pub fn new(values: Array3<f64>, step_seconds: u32) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("signal contains non-finite values"));
        }
        Ok(Self {
            values,
            step_seconds,
            imputed: 0,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_features(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_steps(&self) -> usize {
        self.values.dim().2
    }
}
