//! The full forecasting + explanation model and its checkpoint mapping.

use std::rc::Rc;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormalizationStats, StaticGraph, TargetStats, WindowSample};
use crate::encoder::{encode, init_encoder, Bound, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::extractor::{
    compression_loss, connectivity_loss, init_extractor, node_probabilities, noised_embeddings,
    pool_subgraph, sample_gates, ExtractorFlags, GateMode, NoiseStats, NodeSelection,
};
use crate::heads::{
    build_features, classification_head, classification_loss, init_heads, regression_head,
    regression_loss,
};
use crate::params::ParameterStore;
use crate::prototype::{alignment_loss, init_alignment_head, init_prototypes, similarity, PrototypeBank};
use crate::rng::{derive, Stream};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_features: usize,
    pub window: usize,
    pub horizon: usize,
    pub n_classes: usize,
    pub prototypes_per_class: usize,
}

impl ModelConfig {
    pub fn n_prototypes(&self) -> usize {
        self.n_classes * self.prototypes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.window)?;
        if self.n_features == 0 || self.horizon == 0 {
            return Err(Error::invalid("n_features and horizon must be at least 1"));
        }
        if self.n_classes < 2 || self.prototypes_per_class == 0 {
            return Err(Error::invalid("need at least 2 classes and 1 prototype per class"));
        }
        Ok(())
    }
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub gate: GateMode,
    /// Use these noise statistics instead of recomputing them from `H`.
    pub frozen_noise: Option<&'a NoiseStats>,
    pub training: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self {
            gate: GateMode::Hard,
            frozen_noise: None,
            training: false,
        }
    }
}

/// Tape handles for the five loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reg: Var,
    pub sub: Var,
    pub var: Var,
    pub con: Var,
    pub cls: Var,
}

impl LossVars {
    pub fn as_array(&self) -> [Var; 5] {
        [self.reg, self.sub, self.var, self.con, self.cls]
    }
}

pub struct ForwardVars {
    pub h: Var,
    pub p: Var,
    pub lambda: Var,
    pub z: Var,
    pub z_sub: Var,
    pub gamma: Var,
    pub y_hat: Var,
    pub logits: Var,
    pub losses: LossVars,
    pub noise: NoiseStats,
    pub flags: ExtractorFlags,
}

/// Detached outputs of one evaluation-mode forward pass.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z_sub: Vec<f64>,
    pub y_hat: Mat,
    pub logits: Mat,
    pub selection: NodeSelection,
}

pub struct Model {
    config: ModelConfig,
    pub params: ParameterStore,
    graph: StaticGraph,
    a_hat: Rc<Mat>,
    adjacency: Rc<Mat>,
    pub norm: NormalizationStats,
    pub target: TargetStats,
    pub trained_epochs: usize,
    /// Seed for evaluation-time gate and noise draws.
    pub eval_seed: u64,
}

fn column(v: Var, tape: &Tape) -> Vec<f64> {
    tape.value(v).iter().copied().collect()
}

impl Model {
    pub fn new(
        config: ModelConfig,
        graph: StaticGraph,
        norm: NormalizationStats,
        target: TargetStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if norm.mean.len() != config.n_features {
            return Err(Error::invalid("normalization stats do not match n_features"));
        }
        let mut rng = derive(seed, Stream::Init, 0, 0);
        let mut params = ParameterStore::new();
        let d = config.encoder.hidden_dim;
        init_encoder(&config.encoder, config.n_features, &mut rng, &mut params);
        init_extractor(d, &mut rng, &mut params);
        let bank = init_prototypes(config.n_classes, config.prototypes_per_class, d, rng.random())?;
        params.insert("proto.vectors", bank.vectors);
        init_alignment_head(d, config.n_prototypes(), &mut rng, &mut params);
        init_heads(d, config.n_prototypes(), config.horizon, config.n_classes, &mut rng, &mut params);
        // Stored in the checkpoint as an f32, so keep it exactly representable.
        Ok(Self::assemble(config, params, graph, norm, target, seed & 0xff_ffff))
    }

    fn assemble(
        config: ModelConfig,
        params: ParameterStore,
        graph: StaticGraph,
        norm: NormalizationStats,
        target: TargetStats,
        eval_seed: u64,
    ) -> Self {
        let a_hat = Rc::new(graph.normalized_adjacency());
        let adjacency = Rc::new(graph.adjacency().clone());
        Self {
            config,
            params,
            graph,
            a_hat,
            adjacency,
            norm,
            target,
            trained_epochs: 0,
            eval_seed,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    pub fn node_ids(&self) -> &[String] {
        self.graph.node_ids()
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn prototype_bank(&self) -> PrototypeBank {
        PrototypeBank {
            vectors: self.params.get("proto.vectors").unwrap().clone(),
            class_of: PrototypeBank::layout(self.config.n_classes, self.config.prototypes_per_class),
            n_classes: self.config.n_classes,
            per_class: self.config.prototypes_per_class,
        }
    }

    fn normalized_input(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (n, d, w) = x.dim();
        if n != self.n_nodes() || d != self.config.n_features || w != self.config.window {
            return Err(Error::invalid(format!(
                "sample shape {n}x{d}x{w} does not match model {}x{}x{}",
                self.n_nodes(),
                self.config.n_features,
                self.config.window
            )));
        }
        let mut out = x.clone();
        for f in 0..d {
            out.index_axis_mut(ndarray::Axis(1), f)
                .mapv_inplace(|v| (v - self.norm.mean[f]) / self.norm.std[f]);
        }
        Ok(out)
    }

    /// Records one sample's forward pass on `tape`. `sample.x` is in signal
    /// units; the model applies its own input normalization.
    pub fn forward(
        &self,
        tape: &Tape,
        params: &Bound,
        sample: &WindowSample,
        opts: ForwardOptions<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardVars> {
        let x = self.normalized_input(&sample.x)?;
        let dropout = (opts.training && self.config.encoder.dropout > 0.0).then(|| Dropout {
            rate: self.config.encoder.dropout,
            rng: &mut *rng,
        });
        let h = encode(tape, params, &self.config.encoder, &x, &self.a_hat, dropout)?;

        let p = node_probabilities(tape, params, h);
        let lambda = sample_gates(tape, p, opts.gate, rng)?;
        let noise = match opts.frozen_noise {
            Some(stats) => stats.clone(),
            None => NoiseStats::from_embeddings(&tape.value(h))?,
        };
        let z = noised_embeddings(tape, h, lambda, &noise, rng)?;
        let (l_sub, s_clamped) = compression_loss(tape, lambda, h, &noise);
        let (l_con, zero_row) = connectivity_loss(tape, p, &self.adjacency);
        let (z_sub, pool_fallback) = pool_subgraph(tape, z, lambda);

        let prototypes = params.var("proto.vectors");
        let gamma = similarity(tape, z_sub, prototypes);
        let l_var = alignment_loss(tape, params, z_sub, prototypes);

        let features = build_features(tape, z, gamma);
        let y_hat = regression_head(tape, params, features, self.target);
        let logits = classification_head(tape, params, features);
        let l_reg = regression_loss(tape, y_hat, tape.leaf(sample.y_reg.clone()));
        let l_cls = classification_loss(tape, logits, &sample.y_cls);

        Ok(ForwardVars {
            h,
            p,
            lambda,
            z,
            z_sub,
            gamma,
            y_hat,
            logits,
            losses: LossVars {
                reg: l_reg,
                sub: l_sub,
                var: l_var,
                con: l_con,
                cls: l_cls,
            },
            noise,
            flags: ExtractorFlags {
                s_clamped,
                zero_row_in_connectivity: zero_row,
                pool_fallback,
            },
        })
    }

    /// Evaluation-mode forward pass with hard gates. Draws depend only on the
    /// model's eval seed and the window start.
    pub fn explain(&self, sample: &WindowSample) -> Result<Explanation> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params);
        let mut rng = derive(self.eval_seed, Stream::EvalSample, sample.window_start as u64, 0);
        let out = self.forward(&tape, &bound, sample, ForwardOptions::eval(), &mut rng)?;
        let selection = NodeSelection {
            p: column(out.p, &tape),
            lambda: column(out.lambda, &tape),
            z: tape.value(out.z),
            mu_h: out.noise.mu.clone(),
            sigma_h: out.noise.sigma.clone(),
        };
        Ok(Explanation {
            p: selection.p.clone(),
            lambda: selection.lambda.clone(),
            gamma: column(out.gamma, &tape),
            z_sub: column(out.z_sub, &tape),
            y_hat: tape.value(out.y_hat),
            logits: tape.value(out.logits),
            selection,
        })
    }

    pub fn predict(&self, sample: &WindowSample) -> Result<Mat> {
        Ok(self.explain(sample)?.y_hat)
    }

    /// Parameters plus the metadata needed to rebuild the model.
    pub fn to_checkpoint(&self) -> ParameterStore {
        let mut store = self.params.clone();
        let row = |v: &[f64]| Mat::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        store.insert("meta.window", row(&[self.config.window as f64]));
        let dil: Vec<f64> = self.config.encoder.dilations.iter().map(|&d| d as f64).collect();
        store.insert("meta.dilations", row(&dil));
        store.insert("meta.norm.mean", row(&self.norm.mean));
        store.insert("meta.norm.std", row(&self.norm.std));
        store.insert("meta.target", row(&[self.target.mean, self.target.std]));
        store.insert("meta.trained_epochs", row(&[self.trained_epochs as f64]));
        store.insert("meta.eval_seed", row(&[self.eval_seed as f64]));
        store
    }

    /// Rebuilds a model from a checkpoint for the given graph.
    pub fn from_checkpoint(store: &ParameterStore, graph: StaticGraph) -> Result<Self> {
        let mismatch = |m: String| Error::CheckpointMismatch(m);
        let scalar = |name: &str| -> Result<f64> { Ok(store.require(name)?[[0, 0]]) };
        let row = |name: &str| -> Result<Vec<f64>> { Ok(store.require(name)?.iter().copied().collect()) };

        let enc_in = store.require("enc.in.w")?;
        let (n_features, hidden) = enc_in.dim();
        let dilations: Vec<usize> = row("meta.dilations")?.iter().map(|&d| d as usize).collect();
        let n_blocks = dilations.len();
        let kernel = (0..)
            .take_while(|j| store.get(&format!("enc.b0.tconv.w{j}")).is_some())
            .count();
        let n_classes = store.require("cls.w2")?.ncols();
        let n_prototypes = store.require("proto.vectors")?.nrows();
        if n_classes == 0 || n_prototypes % n_classes != 0 {
            return Err(mismatch(format!("{n_prototypes} prototypes for {n_classes} classes")));
        }
        let config = ModelConfig {
            encoder: EncoderConfig {
                hidden_dim: hidden,
                n_blocks,
                temporal_kernel: kernel,
                dilations,
                dropout: 0.0,
            },
            n_features,
            window: scalar("meta.window")? as usize,
            horizon: store.require("reg.w2")?.ncols(),
            n_classes,
            prototypes_per_class: n_prototypes / n_classes,
        };
        config.validate().map_err(|e| mismatch(e.to_string()))?;

        let norm_mean = row("meta.norm.mean")?;
        let norm = NormalizationStats {
            std: row("meta.norm.std")?,
            zero_variance: Vec::new(),
            computed_on: "checkpoint".into(),
            mean: norm_mean,
        };
        let target = row("meta.target")?;
        let target = TargetStats {
            mean: target[0],
            std: target[1],
        };
        let trained_epochs = scalar("meta.trained_epochs")? as usize;
        let eval_seed = scalar("meta.eval_seed")? as u64;

        // Params are everything that is not metadata; check against a fresh
        // initialization for names and shapes.
        let mut params = ParameterStore::new();
        for (name, m) in store.iter().filter(|(n, _)| !n.starts_with("meta.")) {
            params.insert(name, m.clone());
        }
        let reference = Model::new(config.clone(), graph.clone(), norm.clone(), target, 0)?;
        if reference.params.names() != params.names() {
            return Err(mismatch("parameter names differ from the model layout".into()));
        }
        for (name, m) in reference.params.iter() {
            let got = params.get(name).unwrap().dim();
            if got != m.dim() {
                return Err(mismatch(format!("`{name}` has shape {got:?}, expected {:?}", m.dim())));
            }
        }
        let mut model = Self::assemble(config, params, graph, norm, target, eval_seed);
        model.trained_epochs = trained_epochs;
        Ok(model)
    }

    /// Checks that a dataset is usable with this model.
    pub fn check_compatible(&self, graph: &StaticGraph, n_features: usize) -> Result<()> {
        if graph.n_nodes() != self.n_nodes() {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} nodes, dataset has {}",
                self.n_nodes(),
                graph.n_nodes()
            )));
        }
        if n_features != self.config.n_features {
            return Err(Error::CheckpointMismatch(format!(
                "encoder expects {} features, dataset has {n_features}",
                self.config.n_features
            )));
        }
        Ok(())
    }
}
