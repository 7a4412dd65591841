//! Command implementations. Each writes its artifacts under an output
//! directory and returns a one-line summary for the terminal.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use gintrip_core::data::{
    compute_normalization, compute_target_stats, compute_thresholds, generate_synthetic, load_dataset,
    make_windows, split_chronological, write_dataset, LoadOptions,
};
use gintrip_core::evaluation::{evaluate_forecasts, sparsity_sweep, HistoricalAverage};
use gintrip_core::export::explanation_csv;
use gintrip_core::prototype::nearest_training_subgraph;
use gintrip_core::training::{train, History};
use gintrip_core::{FidelityConvention, Model, ModelConfig, ParameterStore, PlantedSpec, StaticGraph, WindowSample};
use serde::Serialize;

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.csv";
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub out: Option<PathBuf>,
}

pub struct EvalArgs {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub convention: FidelityConvention,
    pub split: Split,
    pub seed: Option<u64>,
    pub baseline: bool,
    pub out: PathBuf,
}

pub struct ExplainArgs {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    pub split: Split,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub struct SynthArgs {
    pub nodes: usize,
    pub informative: usize,
    pub sigma: f64,
    pub window: usize,
    pub horizon: usize,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

struct Prepared {
    graph: StaticGraph,
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    test: Vec<WindowSample>,
    /// First step not covered by any training window.
    train_end: usize,
    signal: gintrip_core::TemporalSignal,
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let options = LoadOptions {
        zero_is_missing: cfg.data.zero_is_missing,
    };
    let (graph, signal) = load_dataset(&cfg.data.signal, &cfg.data.graph, options)?;
    let labels = compute_thresholds(&signal, cfg.quantile)?;
    for w in &labels.warnings {
        log::warn!("{w}");
    }
    let windows = make_windows(&signal, &labels, cfg.window, cfg.horizon, cfg.stride)?;
    let (train, val, test) = split_chronological(windows, cfg.split)?;
    if train.is_empty() {
        bail!("training split is empty; the series is too short for W={} T'={}", cfg.window, cfg.horizon);
    }
    let train_end = train.last().map_or(0, |s| s.window_start + cfg.window + cfg.horizon);
    Ok(Prepared {
        graph,
        train,
        val,
        test,
        train_end,
        signal,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn cmd_train(config_path: &Path, overrides: TrainOverrides) -> anyhow::Result<String> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = overrides.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr) = overrides.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(out) = overrides.out {
        cfg.out = Some(out);
    }
    let out = cfg.out.clone().ok_or_else(|| anyhow!("no output directory: pass --out or set \"out\""))?;
    cfg.validate()?;

    let data = prepare(&cfg)?;
    let model_config = ModelConfig {
        encoder: cfg.model.encoder.clone(),
        n_features: data.signal.n_features(),
        window: cfg.window,
        horizon: cfg.horizon,
        n_classes: cfg.model.n_classes,
        prototypes_per_class: cfg.model.prototypes_per_class,
    };
    let norm = compute_normalization(&data.train, "train");
    let target = compute_target_stats(&data.train);
    let mut model = Model::new(model_config, data.graph, norm, target, cfg.train.seed)?;
    let history = train(&mut model, &data.train, &data.val, &cfg.train)?;

    create_dir(&out)?;
    model.to_checkpoint().save(&out.join(CHECKPOINT))?;
    write(&out.join(HISTORY), history.to_csv())?;
    let mut resolved = cfg.clone();
    resolved.data.signal = absolute(&cfg.data.signal)?;
    resolved.data.graph = absolute(&cfg.data.graph)?;
    resolved.out = Some(absolute(&out)?);
    write(&out.join(RESOLVED_CONFIG), json(&resolved)?)?;
    Ok(train_summary(&history, &out))
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    p.canonicalize().with_context(|| format!("cannot resolve {}", p.display()))
}

fn train_summary(history: &History, out: &Path) -> String {
    match history.best_epoch {
        Some(best) => format!(
            "trained {} epochs (best {} val_mae {:.4}{}) -> {}",
            history.records.len(),
            best + 1,
            history.records[best].val_mae,
            if history.stopped_early { ", stopped early" } else { "" },
            out.display()
        ),
        None => format!("trained {} epochs -> {}", history.records.len(), out.display()),
    }
}

fn load_model(cfg_path: &Path, checkpoint: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<(RunConfig, Model, Prepared)> {
    let cfg = RunConfig::load(cfg_path)?;
    cfg.validate()?;
    let checkpoint = checkpoint.unwrap_or_else(|| cfg_path.with_file_name(CHECKPOINT));
    let store = ParameterStore::load(&checkpoint)?;
    let data = prepare(&cfg)?;
    let mut model = Model::from_checkpoint(&store, data.graph.clone())?;
    model.check_compatible(&data.graph, data.signal.n_features())?;
    if model.config().window != cfg.window || model.config().horizon != cfg.horizon {
        bail!(
            "checkpoint expects W={} T'={}, config has W={} T'={}",
            model.config().window,
            model.config().horizon,
            cfg.window,
            cfg.horizon
        );
    }
    if let Some(seed) = seed {
        model.eval_seed = seed & 0xff_ffff;
    }
    Ok((cfg, model, data))
}

fn pick(data: &Prepared, split: Split) -> Vec<WindowSample> {
    match split {
        Split::Train => data.train.clone(),
        Split::Val => data.val.clone(),
        Split::Test => data.test.clone(),
        Split::All => data.train.iter().chain(&data.val).chain(&data.test).cloned().collect(),
    }
}

pub fn cmd_eval(args: EvalArgs) -> anyhow::Result<String> {
    let (_, model, data) = load_model(&args.config, args.checkpoint, args.seed)?;
    let samples = pick(&data, args.split);
    if samples.is_empty() {
        bail!("the selected split has no windows");
    }
    let report = evaluate_forecasts(&model, &samples)?;
    create_dir(&args.out)?;
    write(&args.out.join("metrics.json"), json(&report)?)?;
    let mut summary = format!("MAE {:.4} RMSE {:.4}", report.mae, report.rmse);
    if args.baseline {
        let baseline = HistoricalAverage::fit(&data.signal, data.train_end)?.evaluate(&samples)?;
        write(&args.out.join("baseline.json"), json(&baseline)?)?;
        summary.push_str(&format!(" (historical average MAE {:.4})", baseline.mae));
    }
    if !args.ks.is_empty() {
        let curve = sparsity_sweep(&model, &samples, &args.ks, args.convention)?;
        if let Some(w) = &curve.warning {
            log::warn!("{w}");
        }
        write(&args.out.join("fidelity.csv"), curve.to_csv())?;
        summary.push_str(&format!(", fidelity at {} sparsity levels", curve.ks.len()));
    }
    Ok(summary)
}

pub fn cmd_explain(args: ExplainArgs) -> anyhow::Result<String> {
    let (_, model, data) = load_model(&args.config, args.checkpoint, args.seed)?;
    let samples = pick(&data, args.split);
    if samples.is_empty() {
        bail!("the selected split has no windows");
    }
    let csv = explanation_csv(&model, &samples, args.k)?;
    let grounding = nearest_training_subgraph(&model, &data.train, args.k)?;
    create_dir(&args.out)?;
    write(&args.out.join("explanation.csv"), csv)?;
    write(&args.out.join("prototypes.json"), json(&grounding)?)?;
    Ok(format!(
        "explained {} windows at k={} and grounded {} prototypes -> {}",
        samples.len(),
        args.k,
        grounding.len(),
        args.out.display()
    ))
}

#[derive(Serialize)]
struct Truth<'a> {
    informative_nodes: Vec<usize>,
    node_ids: Vec<&'a str>,
    block_len: usize,
    spec: &'a PlantedSpec,
}

pub fn cmd_synth(args: SynthArgs) -> anyhow::Result<String> {
    if args.informative == 0 || args.informative >= args.nodes {
        bail!("--informative must be between 1 and --nodes - 1");
    }
    let spec = PlantedSpec::random(
        args.nodes,
        args.informative,
        args.sigma,
        args.window,
        args.horizon,
        args.steps,
        args.seed,
    );
    let (graph, signal, truth) = generate_synthetic(&spec)?;
    write_dataset(&args.out, &graph, &signal)?;
    let ids = graph.node_ids();
    let record = Truth {
        node_ids: truth.iter().map(|&i| ids[i].as_str()).collect(),
        informative_nodes: truth,
        block_len: spec.block_len(),
        spec: &spec,
    };
    write(&args.out.join("truth.json"), json(&record)?)?;

    // Starter config: windows aligned with the generated blocks.
    let run = serde_json::json!({
        "data": {"signal": "signal.bin", "graph": "graph.csv", "zero_is_missing": false},
        "window": args.window,
        "horizon": args.horizon,
        "stride": spec.block_len(),
        "model": {"encoder": {"hidden_dim": 16}},
    });
    write(&args.out.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    Ok(format!(
        "wrote {} nodes x {} steps, informative {:?} -> {}",
        args.nodes,
        args.steps,
        record.informative_nodes,
        args.out.display()
    ))
}

/// Plain-text summary of a training/evaluation output directory.
pub fn cmd_report(run: &Path) -> anyhow::Result<String> {
    let history_path = run.join(HISTORY);
    let history = fs::read_to_string(&history_path).with_context(|| format!("cannot read {}", history_path.display()))?;
    let rows: Vec<Vec<&str>> = history.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut out = String::new();
    out.push_str(&format!("run: {}\n", run.display()));
    out.push_str(&format!("epochs: {}\n", rows.len()));
    let best = rows
        .iter()
        .filter_map(|r| Some((r.first()?.parse::<usize>().ok()?, r.last()?.parse::<f64>().ok()?)))
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((epoch, mae)) = best {
        out.push_str(&format!("best val MAE: {mae:.4} at epoch {}\n", epoch + 1));
    }
    if let Some(last) = rows.last() {
        out.push_str("final losses:");
        for (name, v) in ["l_reg", "l_sub", "l_var", "l_con", "l_cls"].iter().zip(&last[1..6]) {
            out.push_str(&format!(" {name}={v}"));
        }
        out.push('\n');
        out.push_str(&format!("final weights: {}\n", last[6..11].join(" ")));
    }
    let metrics = run.join("metrics.json");
    if metrics.exists() {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics)?)?;
        out.push_str(&format!("test metrics: {m}\n"));
    }
    let fid = run.join("fidelity.csv");
    if fid.exists() {
        out.push_str("fidelity:\n");
        for line in fs::read_to_string(&fid)?.lines() {
            out.push_str(&format!("  {line}\n"));
        }
    }
    Ok(out.trim_end().to_string())
}
