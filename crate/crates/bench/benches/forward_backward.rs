use std::hint::black_box;
use std::rc::Rc;

use criterion::{criterion_group, criterion_main, Criterion};
use gintrip_core::data::*;
use gintrip_core::encoder::Bound;
use gintrip_core::extractor::{compression_loss, connectivity_loss, GateMode, NoiseStats};
use gintrip_core::model::ForwardOptions;
use gintrip_core::rng::{derive, Stream};
use gintrip_core::tape::{Mat, Tape};
use gintrip_core::{EncoderConfig, Model, ModelConfig};

fn setup(n: usize, hidden: usize) -> (Model, Vec<WindowSample>) {
    let spec = PlantedSpec::random(n, 5, 0.1, 8, 4, 600, 1);
    let (graph, signal, _) = generate_synthetic(&spec).unwrap();
    let labels = compute_thresholds(&signal, 0.1).unwrap();
    let windows = make_windows(&signal, &labels, 8, 4, spec.block_len()).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig::with_hidden(hidden),
        n_features: 1,
        window: 8,
        horizon: 4,
        n_classes: 2,
        prototypes_per_class: 2,
    };
    let model = Model::new(
        config,
        graph,
        compute_normalization(&windows, "all"),
        compute_target_stats(&windows),
        1,
    )
    .unwrap();
    (model, windows)
}

fn training_step(c: &mut Criterion) {
    let opts = ForwardOptions {
        gate: GateMode::Soft { temperature: 0.5 },
        frozen_noise: None,
        training: true,
    };
    for (n, hidden) in [(20, 16), (50, 32)] {
        let (model, samples) = setup(n, hidden);
        let sample = &samples[0];
        c.bench_function(&format!("forward n={n} d={hidden}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let bound = Bound::new(&tape, &model.params);
                let mut rng = derive(0, Stream::TrainSample, 0, 0);
                let out = model.forward(&tape, &bound, black_box(sample), opts, &mut rng).unwrap();
                tape.scalar_value(out.losses.reg)
            })
        });
        c.bench_function(&format!("forward+backward n={n} d={hidden}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let bound = Bound::new(&tape, &model.params);
                let mut rng = derive(0, Stream::TrainSample, 0, 0);
                let out = model.forward(&tape, &bound, black_box(sample), opts, &mut rng).unwrap();
                let l = out.losses.as_array().into_iter().reduce(|a, b| tape.add(a, b)).unwrap();
                tape.backward(l)
            })
        });
        c.bench_function(&format!("explain n={n} d={hidden}"), |b| {
            b.iter(|| model.explain(black_box(sample)).unwrap())
        });
    }
}

fn losses(c: &mut Criterion) {
    let n = 50;
    let h = Mat::from_shape_fn((n, 32), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5);
    let lambda = Mat::from_shape_fn((n, 1), |(i, _)| (i % 10) as f64 / 10.0);
    let stats = NoiseStats::from_embeddings(&h).unwrap();
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    let adjacency = Rc::new(StaticGraph::from_edges(n, &edges).unwrap().adjacency().clone());
    c.bench_function("compression loss n=50", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (l, _) = compression_loss(&tape, tape.leaf(lambda.clone()), tape.leaf(h.clone()), &stats);
            tape.backward(l)
        })
    });
    c.bench_function("connectivity loss n=50", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (l, _) = connectivity_loss(&tape, tape.leaf(lambda.clone()), &adjacency);
            tape.backward(l)
        })
    });
}

criterion_group!(benches, training_step, losses);
criterion_main!(benches);
