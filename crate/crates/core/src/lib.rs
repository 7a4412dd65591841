//! Interpretable forecasting on temporal graphs.
//!
//! A compact spatio-temporal encoder feeds a stochastic node selector that
//! extracts a sparse, connected explanatory subgraph under an
//! information-bottleneck objective. The pooled subgraph embedding is
//! compared to a learnable prototype bank, and the similarities are fed to a
//! regression head and a pseudo-class head. [`evaluation`] scores the
//! explanations by fidelity over sparsity.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod extractor;
pub mod heads;
pub mod model;
pub mod params;
pub mod prototype;
pub mod rng;
pub mod tape;
pub mod training;

pub use data::{
    NormalizationStats, PlantedSpec, PseudoLabelSpec, SplitRatios, StaticGraph, TargetStats,
    TemporalSignal, WindowSample,
};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use evaluation::{FidelityConvention, FidelityCurve, MetricReport};
pub use extractor::GateMode;
pub use model::{Model, ModelConfig};
pub use params::ParameterStore;
pub use training::{History, LossVector, TrainConfig, WeightState};
