#![allow(dead_code)]

use gintrip_core::data::*;
use gintrip_core::{EncoderConfig, Model, ModelConfig};

pub struct Planted {
    pub graph: StaticGraph,
    pub truth: Vec<usize>,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn planted(n: usize, informative: usize, sigma: f64, steps: usize, seed: u64) -> Planted {
    let spec = PlantedSpec::random(n, informative, sigma, 8, 4, steps, seed);
    let (graph, signal, truth) = generate_synthetic(&spec).unwrap();
    let labels = compute_thresholds(&signal, 0.1).unwrap();
    let windows = make_windows(&signal, &labels, 8, 4, spec.block_len()).unwrap();
    let (train, val, test) = split_chronological(windows, SplitRatios::default()).unwrap();
    Planted { graph, truth, train, val, test }
}

pub fn model(data: &Planted, hidden: usize, seed: u64) -> Model {
    let config = ModelConfig {
        encoder: EncoderConfig::with_hidden(hidden),
        n_features: 1,
        window: 8,
        horizon: 4,
        n_classes: 2,
        prototypes_per_class: 2,
    };
    let norm = compute_normalization(&data.train, "train");
    let target = compute_target_stats(&data.train);
    Model::new(config, data.graph.clone(), norm, target, seed).unwrap()
}
