//! Experiment configuration, command implementations and output plumbing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, sweep, write_metrics, write_sweep_csv, SweepParam};
use crate::losses::LossConfig;
use crate::signal_sim::{gen_dataset, read_signals, split_paths, DatasetConfig, LabeledSignals};
use crate::training::{AugmentConfig, Method, ModelConfig, TrainConfig, TrainData, TrainState};
use crate::visualization::{render_disentanglement, render_learning_curves};

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

/// Training options outside the loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub qg_per_f: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: t.method,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: t.seed,
            eval_every: t.eval_every,
            qg_per_f: t.qg_per_f,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults when `None`) and applies
    /// `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        // Fill defaults first so overrides can target any key.
        let full: ExperimentConfig =
            serde_json::from_value(value.clone()).map_err(|e| Error::config(e.to_string()))?;
        value = serde_json::to_value(&full)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: t.seed,
            eval_every: t.eval_every,
            qg_per_f: t.qg_per_f,
            loss: self.loss,
            augment: t.augment.clone(),
        }
    }
}

/// Sets `section.key[.sub...]` to `value`, parsed as JSON when possible and
/// as a string otherwise. Unknown keys are rejected.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = config;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() < 2 {
        return Err(Error::config(format!("override {path:?} needs section.key")));
    }
    for key in &keys {
        node = match node {
            Value::Object(map) => map
                .get_mut(*key)
                .ok_or_else(|| Error::config(format!("unknown config key {path:?}")))?,
            Value::Array(items) => key
                .parse::<usize>()
                .ok()
                .and_then(|i| items.get_mut(i))
                .ok_or_else(|| Error::config(format!("bad index in config key {path:?}")))?,
            _ => return Err(Error::config(format!("config key {path:?} goes below a value"))),
        };
    }
    *node = parsed;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    args: Vec<String>,
    config: Option<&'a ExperimentConfig>,
    seed: Option<u64>,
    version: String,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn version_string() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_provenance(dir: &Path, command: &str, config: Option<&ExperimentConfig>, seed: Option<u64>, started: u64) -> Result<()> {
    let p = Provenance {
        command,
        args: std::env::args().collect(),
        config,
        seed,
        version: version_string(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&dir.join("provenance.json"), &p)
}

/// Echoes the effective config, which can be passed back via `--config`.
fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    write_json(&dir.join("config.json"), config)
}

/// The split inside a dataset directory written by `gen-data`.
pub fn load_split(data_dir: &Path, split: &str, sample_rate: f64) -> Result<LabeledSignals> {
    let (_, manifest) = split_paths(&data_dir.join(split), split);
    read_signals(&manifest, sample_rate)
}

/// Test splits present in a dataset directory: everything except train and val.
pub fn eval_splits(data_dir: &Path, config: &ExperimentConfig) -> Vec<String> {
    config
        .dataset
        .splits
        .iter()
        .map(|s| s.name.clone())
        .filter(|n| n != TRAIN_SPLIT && n != VAL_SPLIT)
        .filter(|n| split_paths(&data_dir.join(n), n).1.exists())
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "drrff", version, about = "Channel-robust RF fingerprinting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; defaults are used for missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. --set loss.lambda=0.3
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the train, val and test splits
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one method and write a checkpoint
    Train {
        #[arg(long)]
        method: Method,
        /// Dataset directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test_unknown_multipath")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render raw, background, synthetic and difference panels
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test_known")]
        split: String,
        /// First record index
        #[arg(long, default_value_t = 0)]
        i: usize,
        /// Second record index; defaults to the first record of another device
        #[arg(long)]
        j: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 0 shows the real part, 1 the imaginary part
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value = "disentanglement")]
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train repeatedly over values of one loss weight
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test_unknown_multipath")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Average learning curves from history files
    Curves {
        #[arg(long = "history", required = true)]
        history: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<()> {
    let started = unix_now();
    for split in &cfg.dataset.splits {
        let m = gen_dataset(&cfg.dataset, &split.name, seed, &out.join(&split.name))?;
        info!("{}: {} records", split.name, m.records.len());
    }
    write_config(out, cfg)?;
    write_provenance(out, "gen-data", Some(cfg), Some(seed), started)
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainState<f32>> {
    let started = unix_now();
    let sr = cfg.dataset.sample_rate;
    let train = TrainData::<f32>::new(&load_split(data, TRAIN_SPLIT, sr)?)?;
    let evals = eval_splits(data, cfg)
        .into_iter()
        .map(|n| load_split(data, &n, sr).map(|s| (n, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::new(cfg.model.clone(), cfg.train_config(), train.num_classes)?;
    state.fit(&train, &evals)?;
    state.save(out, Some(&serde_json::to_value(cfg)?))?;
    write_config(out, cfg)?;
    write_provenance(out, "train", Some(cfg), Some(cfg.train.seed), started)?;
    Ok(state)
}

pub fn cmd_eval(ckpt: &Path, data: &Path, split: &str, out: &Path, sample_rate: f64) -> Result<()> {
    let started = unix_now();
    let state = TrainState::<f32>::load(ckpt)?;
    let set = load_split(data, split, sample_rate)?;
    let m = evaluate_split(&state.f, &set)?;
    info!("{split}: auc {:.4} eer {:.4}", m.auc, m.eer);
    write_metrics(out, &m)?;
    write_provenance(out, "eval", None, None, started)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_viz(
    ckpt: &Path,
    data: &Path,
    split: &str,
    i: usize,
    j: Option<usize>,
    seed: u64,
    channel: usize,
    out: &Path,
    name: &str,
    sample_rate: f64,
) -> Result<()> {
    let started = unix_now();
    let state = TrainState::<f32>::load(ckpt)?;
    let set = load_split(data, split, sample_rate)?;
    if i >= set.len() {
        return Err(Error::config(format!("record {i} out of range (split has {})", set.len())));
    }
    let j = match j {
        Some(j) => j,
        None => set
            .device_ids
            .iter()
            .position(|&d| d != set.device_ids[i])
            .ok_or_else(|| Error::config("split has a single device; pass --j"))?,
    };
    render_disentanglement(&state, &set, i, j, seed, channel, out, name)?;
    write_provenance(out, "viz", None, Some(seed), started)
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    repeats: usize,
    data: &Path,
    split: &str,
    out: &Path,
) -> Result<()> {
    let started = unix_now();
    let sr = cfg.dataset.sample_rate;
    let train = TrainData::<f32>::new(&load_split(data, TRAIN_SPLIT, sr)?)?;
    let test = load_split(data, split, sr)?;
    let mut base = cfg.train_config();
    base.eval_every = 0;
    let rows = sweep(param, values, repeats, &cfg.model, &base, &train, &test)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    write_config(out, cfg)?;
    write_provenance(out, "sweep", Some(cfg), Some(cfg.train.seed), started)
}

pub fn cmd_curves(history: &[PathBuf], out: &Path) -> Result<()> {
    let started = unix_now();
    render_learning_curves(history, out)?;
    write_provenance(out, "curves", None, None, started)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out, seed } => {
            let c = ExperimentConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_gen_data(&c, &out, seed)
        }
        Command::Train { method, data, out, seed, cfg } => {
            let mut c = ExperimentConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            c.train.method = method;
            if let Some(s) = seed {
                c.train.seed = s;
            }
            c.validate()?;
            cmd_train(&c, &data, &out).map(|_| ())
        }
        Command::Eval { ckpt, data, out, split, cfg } => {
            let c = ExperimentConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_eval(&ckpt, &data, &split, &out, c.dataset.sample_rate)
        }
        Command::Viz { ckpt, data, out, split, i, j, seed, channel, name, cfg } => {
            let c = ExperimentConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_viz(&ckpt, &data, &split, i, j, seed, channel, &out, &name, c.dataset.sample_rate)
        }
        Command::Sweep { param, values, repeats, data, out, split, seed, cfg } => {
            let mut c = ExperimentConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            c.train.method = Method::Dr;
            if let Some(s) = seed {
                c.train.seed = s;
            }
            cmd_sweep(&c, param, &values, repeats, &data, &split, &out)
        }
        Command::Curves { history, out } => cmd_curves(&history, &out),
    }
}
