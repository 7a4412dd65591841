//! Tabular artifact writers.

use std::fmt::Write;

use crate::data::WindowSample;
use crate::error::Result;
use crate::extractor::rank_nodes;
use crate::model::Model;

/// `window_start,node_id,p,rank,selected_at_k`: the top-`k` nodes of each
/// window, best first. Ranks start at 1.
pub fn explanation_csv(model: &Model, samples: &[WindowSample], k: usize) -> Result<String> {
    crate::extractor::top_k(&vec![0.0; model.n_nodes()], k)?;
    let ids = model.node_ids();
    let mut out = String::from("window_start,node_id,p,rank,selected_at_k\n");
    for s in samples {
        let p = model.explain(s)?.p;
        for (rank, &i) in rank_nodes(&p).iter().take(k).enumerate() {
            writeln!(out, "{},{},{:.9e},{},{}", s.window_start, ids[i], p[i], rank + 1, k).unwrap();
        }
    }
    Ok(out)
}

/// `window_start,node_id,horizon_step,y_true,y_pred` in signal units.
pub fn forecast_csv(model: &Model, samples: &[WindowSample]) -> Result<String> {
    let ids = model.node_ids();
    let mut out = String::from("window_start,node_id,horizon_step,y_true,y_pred\n");
    for s in samples {
        let y_hat = model.predict(s)?;
        for ((i, h), y) in s.y_reg.indexed_iter() {
            writeln!(out, "{},{},{},{:.9e},{:.9e}", s.window_start, ids[i], h + 1, y, y_hat[[i, h]]).unwrap();
        }
    }
    Ok(out)
}
