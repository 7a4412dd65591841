//! Run configuration: one JSON document, validated before any compute.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gintrip_core::{EncoderConfig, SplitRatios, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub signal: PathBuf,
    pub graph: PathBuf,
    /// Treat exact zeros as missing readings.
    #[serde(default = "yes")]
    pub zero_is_missing: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub prototypes_per_class: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_classes: 2,
            prototypes_per_class: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Step between consecutive window starts.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub split: SplitRatios,
    /// Quantile for the pseudo-label thresholds.
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_window() -> usize {
    12
}

fn default_horizon() -> usize {
    12
}

fn default_stride() -> usize {
    1
}

fn default_quantile() -> f64 {
    0.1
}

impl RunConfig {
    /// Parses `path`; relative data paths are taken relative to the file.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.signal, &mut cfg.data.graph] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.window == 0 || self.horizon == 0 || self.stride == 0 {
            bail!("window, horizon and stride must be at least 1");
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            bail!("quantile must lie in (0, 1)");
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|r| !(*r >= 0.0)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            bail!("split ratios must be non-negative and sum to 1");
        }
        self.model.encoder.validate(self.window)?;
        if self.model.n_classes < 2 || self.model.prototypes_per_class == 0 {
            bail!("need at least 2 classes and 1 prototype per class");
        }
        self.train.validate()?;
        for p in [&self.data.signal, &self.data.graph] {
            if !p.exists() {
                bail!("dataset file not found: {}", p.display());
            }
        }
        Ok(())
    }
}
