//! Portable dataset files: `graph.csv`, `signal.bin` and `meta.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{StaticGraph, TemporalSignal};
use crate::error::{Error, Result};

const SIGNAL_MAGIC: &[u8; 5] = b"GTDS1";
const MAX_MISSING_DENSITY: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Treat exact zeros as missing readings (PeMS convention).
    pub zero_is_missing: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            zero_is_missing: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    node_ids: Vec<String>,
}

/// Reads `signal.bin` without imputation.
pub fn read_signal(path: &Path) -> Result<(Array3<f64>, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        what: "signal.bin",
        detail,
    };
    if bytes.len() < 21 || &bytes[..5] != SIGNAL_MAGIC {
        return Err(bad("missing GTDS1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let (n, d, t, step) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    let expected = 21 + 4 * n * d * t;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for N={n} D={d} T={t}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[21..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let arr = Array3::from_shape_vec((n, d, t), values).map_err(|e| bad(e.to_string()))?;
    Ok((arr, step))
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().trim();
    if header != "src,dst,weight" {
        return Err(Error::Format {
            what: "graph.csv",
            detail: format!("expected header `src,dst,weight`, found `{header}`"),
        });
    }
    let mut edges = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let parse_err = || Error::Format {
            what: "graph.csv",
            detail: format!("line {}: `{line}`", lineno + 2),
        };
        if parts.len() != 3 {
            return Err(parse_err());
        }
        let src = parts[0].trim().parse().map_err(|_| parse_err())?;
        let dst = parts[1].trim().parse().map_err(|_| parse_err())?;
        let w: f64 = parts[2].trim().parse().map_err(|_| parse_err())?;
        edges.push((src, dst, w));
    }
    Ok(edges)
}

/// Replaces missing entries per (node, feature) series by the last
/// observation, then leading gaps by the series mean of observed values.
fn impute(values: &mut Array3<f64>, zero_is_missing: bool) -> Result<usize> {
    let is_missing = |v: f64| !v.is_finite() || (zero_is_missing && v == 0.0);
    let missing = values.iter().filter(|v| is_missing(**v)).count();
    let density = missing as f64 / values.len().max(1) as f64;
    if density > MAX_MISSING_DENSITY {
        return Err(Error::TooManyMissing {
            density,
            limit: MAX_MISSING_DENSITY,
        });
    }
    if missing == 0 {
        return Ok(0);
    }
    let (n, d, t) = values.dim();
    for i in 0..n {
        for f in 0..d {
            let observed: Vec<f64> = (0..t)
                .map(|s| values[[i, f, s]])
                .filter(|v| !is_missing(*v))
                .collect();
            let fallback = if observed.is_empty() {
                0.0
            } else {
                observed.iter().sum::<f64>() / observed.len() as f64
            };
            let mut last: Option<f64> = None;
            for s in 0..t {
                let v = values[[i, f, s]];
                if is_missing(v) {
                    values[[i, f, s]] = last.unwrap_or(fallback);
                } else {
                    last = Some(v);
                }
            }
        }
    }
    Ok(missing)
}

/// Loads a dataset in the portable format. `meta.json` is looked up next to
/// the signal file.
pub fn load_dataset(
    signal_path: &Path,
    adjacency_path: &Path,
    options: LoadOptions,
) -> Result<(StaticGraph, TemporalSignal)> {
    let (mut values, step_seconds) = read_signal(signal_path)?;
    let n_signal = values.dim().0;
    let edges = read_edges(adjacency_path)?;

    let meta_path = signal_path.with_file_name("meta.json");
    let node_ids = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str::<Meta>(&text)?.node_ids)
    } else {
        None
    };

    let max_index = edges.iter().map(|&(s, d, _)| s.max(d) + 1).max().unwrap_or(0);
    let n_graph = node_ids.as_ref().map_or(max_index, |ids| ids.len().max(max_index));
    if n_graph > n_signal || (node_ids.is_some() && n_graph != n_signal) {
        return Err(Error::ShapeMismatch {
            adjacency: n_graph,
            signal: n_signal,
        });
    }
    let mut adjacency = Array2::zeros((n_signal, n_signal));
    for (s, d, w) in edges {
        adjacency[[s, d]] = w;
    }
    let graph = StaticGraph::new(adjacency, node_ids)?;

    let imputed = impute(&mut values, options.zero_is_missing)?;
    if imputed > 0 {
        log::info!("imputed {imputed} missing signal entries");
    }
    let mut signal = TemporalSignal::new(values, step_seconds)?;
    signal.imputed = imputed;
    Ok((graph, signal))
}

/// Writes `graph.csv`, `signal.bin` and `meta.json` into `dir`.
pub fn write_dataset(dir: &Path, graph: &StaticGraph, signal: &TemporalSignal) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut csv = String::from("src,dst,weight\n");
    let a = graph.adjacency();
    for i in 0..graph.n_nodes() {
        for j in 0..graph.n_nodes() {
            if a[[i, j]] != 0.0 {
                csv.push_str(&format!("{i},{j},{}\n", a[[i, j]]));
            }
        }
    }
    let graph_path = dir.join("graph.csv");
    fs::write(&graph_path, csv).map_err(|e| Error::io(&graph_path, e))?;

    let (n, d, t) = signal.values.dim();
    let mut buf = Vec::with_capacity(21 + 4 * n * d * t);
    buf.extend_from_slice(SIGNAL_MAGIC);
    for word in [n as u32, d as u32, t as u32, signal.step_seconds] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    // Standard layout iteration is node-major, then feature, then time.
    for v in signal.values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let signal_path = dir.join("signal.bin");
    let mut f = fs::File::create(&signal_path).map_err(|e| Error::io(&signal_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&signal_path, e))?;

    let meta = Meta {
        node_ids: graph.node_ids().to_vec(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}
