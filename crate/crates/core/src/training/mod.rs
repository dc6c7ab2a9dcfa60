//! Alternating Q/G and F optimization, and the baseline trainers.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{AugmentConfig, Method, ModelConfig, TrainConfig};

use crate::error::{Error, Result};
use crate::evaluation::evaluate_split;
use crate::losses::{loss_f_grad, loss_g_grad, loss_p_grad, loss_v_grad};
use crate::models::{
    load_checkpoint, save_checkpoint, BackgroundExtractor, CheckpointMeta, Extractor, Generator,
    HypersphereClassifier, CHECKPOINT_FORMAT_VERSION,
};
use crate::nn::{Adam, Mode, Module, Real, Tensor};
use crate::preprocessing::prepare_batch;
use crate::rng::stream;
use crate::signal_sim::{add_awgn, apply_channel, ChannelSpec, ComplexSignal, LabeledSignals};

/// Preprocessed training records.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub signals: Vec<ComplexSignal>,
}

impl<T: Real> TrainData<T> {
    pub fn new(data: &LabeledSignals) -> Result<Self> {
        if data.num_classes < 2 {
            return Err(Error::config("training needs at least two devices"));
        }
        Ok(Self {
            images: prepare_batch(&data.signals.iter().collect::<Vec<_>>())?,
            labels: data.labels.clone(),
            num_classes: data.num_classes,
            signals: data.signals.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (self.images.select(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub loss_f: f64,
    pub loss_q: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_v: Option<f64>,
    pub loss_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub auc: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub method: Method,
    pub seed: u64,
    pub loss_history: Vec<EpochLosses>,
    pub eval_history: Vec<EvalRecord>,
}

impl History {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QgLosses {
    pub loss_v: f64,
    pub loss_p: f64,
    pub loss_q: f64,
    pub loss_g: f64,
}

/// Networks, optimizers and histories of one training run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_classes: usize,
    pub f: Extractor<T>,
    pub w: HypersphereClassifier<T>,
    pub q: Option<BackgroundExtractor<T>>,
    pub g: Option<Generator<T>>,
    opt_f: Adam,
    opt_w: Adam,
    opt_q: Adam,
    opt_g: Adam,
    pub epoch: usize,
    f_steps: u64,
    qg_steps: u64,
    pub loss_history: Vec<EpochLosses>,
    pub eval_history: Vec<EvalRecord>,
}

/// A permutation without fixed points when `n >= 2`.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    for _ in 0..64 {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
    (0..n).map(|i| (i + 1) % n).collect()
}

impl<T: Real> TrainState<T> {
    pub fn new(model: ModelConfig, train: TrainConfig, num_classes: usize) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let seed = train.seed;
        let f = Extractor::new(model.extractor.clone(), &mut stream(seed, "init_f", 0))?;
        let w = HypersphereClassifier::new(
            num_classes,
            model.extractor.embed_dim,
            train.loss.delta,
            &mut stream(seed, "init_w", 0),
        )?;
        let (q, g) = if train.method == Method::Dr {
            (
                Some(BackgroundExtractor::new(model.unet.clone(), &mut stream(seed, "init_q", 0))?),
                Some(Generator::new(
                    model.unet.clone(),
                    model.extractor.embed_dim,
                    &mut stream(seed, "init_g", 0),
                )?),
            )
        } else {
            (None, None)
        };
        let adam = train.adam();
        Ok(Self {
            model,
            train,
            num_classes,
            f,
            w,
            q,
            g,
            opt_f: Adam::new(adam),
            opt_w: Adam::new(adam),
            opt_q: Adam::new(adam),
            opt_g: Adam::new(adam),
            epoch: 0,
            f_steps: 0,
            qg_steps: 0,
            loss_history: Vec::new(),
            eval_history: Vec::new(),
        })
    }

    /// One joint update of Q and G with F and W held fixed.
    pub fn qg_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<QgLosses> {
        let b = x.batch();
        let mut rng = stream(self.train.seed, "qg_noise", self.qg_steps);
        let noise = self.background_generator()?.0.sample_noise(b, &mut rng);
        self.qg_steps += 1;
        let losses = self.qg_gradients(x, labels, &noise)?;
        let (q, g) = match (self.q.as_mut(), self.g.as_mut()) {
            (Some(q), Some(g)) => (q, g),
            _ => unreachable!("checked by qg_gradients"),
        };
        self.opt_q.step(q);
        self.opt_g.step(g);
        Ok(losses)
    }

    /// Leaves the gradients of `L_Q + L_G` in Q and G without updating them.
    /// F and W act as fixed functions here, so they use running statistics.
    pub fn qg_gradients(&mut self, x: &Tensor<T>, labels: &[usize], noise: &Tensor<T>) -> Result<QgLosses> {
        let b = x.batch();
        if b == 0 || labels.len() != b {
            return Err(Error::Shape("qg step needs a non-empty labelled batch".into()));
        }
        let cfg = self.train.loss;
        let k = self.num_classes;
        let f = &mut self.f;
        let w = &mut self.w;
        let (q, g) = match (self.q.as_mut(), self.g.as_mut()) {
            (Some(q), Some(g)) => (q, g),
            _ => return Err(Error::config("this run has no background extractor or generator")),
        };
        q.zero_grad();
        g.zero_grad();

        let (bg, cache_q) = q.forward(x, noise, Mode::Train)?;
        let z = f.embed(x, Mode::Eval)?;
        let (synth, cache_g) = g.forward(&z, &bg, Mode::Train)?;

        let x64 = x.to_f64();
        let (loss_v, mut dbg) = loss_v_grad(&x64, &bg.to_f64())?;

        let (zbg, cache_fbg) = f.forward(&bg, Mode::Eval)?;
        let cache_wbg = w.forward(&zbg)?;
        let (loss_p, dp) = loss_p_grad(cache_wbg.probs(), labels, k, cfg.epsilon)?;
        if cfg.alpha > 0.0 && loss_p > 0.0 {
            let dp: Vec<f64> = dp.iter().map(|v| v * cfg.alpha).collect();
            let dz = w.backward(&cache_wbg, &dp, false);
            let d = f.backward(&cache_fbg, &dz, false)?;
            for (a, v) in dbg.iter_mut().zip(d.data()) {
                *a += v.as_f64();
            }
        }

        let (zs, cache_fs) = f.forward(&synth, Mode::Eval)?;
        let lg = loss_g_grad(&x64, &synth.to_f64(), &z.to_f64(), &zs.to_f64(), cfg.beta)?;
        let dzs = Tensor::from_f64(zs.shape(), &lg.d_synth_embedding)?;
        let mut dsynth = f.backward(&cache_fs, &dzs, false)?;
        for (a, &v) in dsynth.data_mut().iter_mut().zip(&lg.d_synth) {
            *a += T::from_f64_lossy(v);
        }
        let (_, dbg_g) = g.backward(&cache_g, &dsynth, true)?;
        for (a, v) in dbg.iter_mut().zip(dbg_g.data()) {
            *a += v.as_f64();
        }
        q.backward(&cache_q, &Tensor::from_f64(bg.shape(), &dbg)?, true)?;
        Ok(QgLosses {
            loss_v,
            loss_p,
            loss_q: loss_v + cfg.alpha * loss_p,
            loss_g: lg.value,
        })
    }

    /// Synthetic records `G(F(x_i), Q(x_pi(i), n))` for a background-shuffling
    /// permutation `pi`. The result carries no gradient.
    pub fn shuffled_synthesis(&self, x: &Tensor<T>, step: u64) -> Result<Tensor<T>> {
        let (q, g) = match (self.q.as_ref(), self.g.as_ref()) {
            (Some(q), Some(g)) => (q, g),
            _ => return Err(Error::config("this run has no background extractor or generator")),
        };
        let b = x.batch();
        let perm = derangement(b, &mut stream(self.train.seed, "shuffle", step));
        let mut rng = stream(self.train.seed, "f_noise", step);
        let z = self.f.embed(x, Mode::Frozen)?;
        let noise = q.sample_noise(b, &mut rng);
        let (bg, _) = q.forward(&x.select(&perm), &noise, Mode::Frozen)?;
        Ok(g.forward(&z, &bg, Mode::Frozen)?.0)
    }

    /// The F/W update of the disentangling method: raw records plus
    /// background-shuffled synthetic records, both with their own labels.
    pub fn f_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let aug = if self.train.loss.lambda >= 1.0 {
            None
        } else if x.batch() < 2 {
            warn!("batch of one record cannot shuffle backgrounds; using the raw term only");
            None
        } else {
            Some(self.shuffled_synthesis(x, self.f_steps)?)
        };
        self.f_update(x, labels, aug.as_ref())
    }

    /// Updates F and W on raw records and optional augmented copies.
    pub fn f_update(&mut self, x: &Tensor<T>, labels: &[usize], aug: Option<&Tensor<T>>) -> Result<f64> {
        let b = x.batch();
        if b == 0 || labels.len() != b {
            return Err(Error::Shape("f step needs a non-empty labelled batch".into()));
        }
        self.f_steps += 1;
        let k = self.num_classes;
        self.f.zero_grad();
        self.w.zero_grad();
        let (input, lambda) = match aug {
            Some(a) => (Tensor::cat_batch(&[x, a])?, self.train.loss.lambda),
            None => (x.clone(), 1.0),
        };
        let (z, cache_f) = self.f.forward(&input, Mode::Train)?;
        let cache_w = self.w.forward(&z)?;
        let probs = cache_w.probs();
        let (raw, rest) = probs.split_at(b * k);
        let lf = loss_f_grad(raw, aug.map(|_| rest), labels, k, lambda)?;
        let mut dprobs = lf.d_raw;
        dprobs.extend_from_slice(&lf.d_aug);
        dprobs.resize(probs.len(), 0.0);
        let dz = self.w.backward(&cache_w, &dprobs, true);
        self.f.backward(&cache_f, &dz, true)?;
        self.opt_f.step(&mut self.f);
        self.opt_w.step(&mut self.w);
        Ok(lf.value)
    }

    /// Augmented copies for the `awgn` and `fir` baselines, or `None` when
    /// the method augments nothing.
    pub fn baseline_augment(&self, data: &TrainData<T>, idx: &[usize], step: u64) -> Result<Option<Tensor<T>>> {
        let mut rng = stream(self.train.seed, "augment", step);
        let aug = &self.train.augment;
        let signals: Vec<ComplexSignal> = match self.train.method {
            Method::Awgn => match aug.awgn_snr_db {
                Some([lo, hi]) => idx
                    .iter()
                    .map(|&i| {
                        let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                        add_awgn(&data.signals[i], snr, &mut rng)
                    })
                    .collect(),
                None => return Ok(None),
            },
            Method::Fir => {
                let spec = ChannelSpec::multipath(aug.fir_taps, 0.0, None);
                idx.iter()
                    .map(|&i| apply_channel(&data.signals[i], &spec, &mut rng))
                    .collect::<Result<_>>()?
            }
            Method::Ml | Method::Dr => return Ok(None),
        };
        Ok(Some(prepare_batch(&signals.iter().collect::<Vec<_>>())?))
    }

    /// Minibatch order of `epoch`.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.train.seed, "order", epoch as u64));
        order.chunks(self.train.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Runs one epoch and returns its mean losses.
    pub fn run_epoch(&mut self, data: &TrainData<T>) -> Result<EpochLosses> {
        if data.num_classes != self.num_classes {
            return Err(Error::config(format!(
                "model has {} classes, data {}",
                self.num_classes, data.num_classes
            )));
        }
        let batches = self.epoch_batches(data.len(), self.epoch);
        let mut sum_f = 0.0;
        let mut sum_qg = [0.0; 4];
        let mut n_qg = 0usize;
        for idx in &batches {
            let (x, labels) = data.batch(idx);
            if self.train.method == Method::Dr {
                for _ in 0..self.train.qg_per_f {
                    let l = self.qg_step(&x, &labels)?;
                    for (s, v) in sum_qg.iter_mut().zip([l.loss_q, l.loss_g, l.loss_v, l.loss_p]) {
                        *s += v;
                    }
                    n_qg += 1;
                }
                sum_f += self.f_step(&x, &labels)?;
            } else {
                let aug = self.baseline_augment(data, idx, self.f_steps)?;
                sum_f += self.f_update(&x, &labels, aug.as_ref())?;
            }
        }
        self.epoch += 1;
        let mean = |s: f64| (n_qg > 0).then(|| s / n_qg as f64);
        let losses = EpochLosses {
            epoch: self.epoch,
            loss_f: sum_f / batches.len().max(1) as f64,
            loss_q: mean(sum_qg[0]),
            loss_g: mean(sum_qg[1]),
            loss_v: mean(sum_qg[2]),
            loss_p: mean(sum_qg[3]),
        };
        self.loss_history.push(losses.clone());
        Ok(losses)
    }

    pub fn evaluate(&mut self, evals: &[(String, LabeledSignals)]) -> Result<EvalRecord> {
        let mut auc = BTreeMap::new();
        for (name, set) in evals {
            auc.insert(name.clone(), evaluate_split(&self.f, set)?.auc);
        }
        let rec = EvalRecord {
            epoch: self.epoch,
            auc,
        };
        self.eval_history.push(rec.clone());
        Ok(rec)
    }

    /// Trains for the configured number of epochs, evaluating on `evals`
    /// every `eval_every` epochs.
    pub fn fit(&mut self, data: &TrainData<T>, evals: &[(String, LabeledSignals)]) -> Result<()> {
        for _ in 0..self.train.epochs {
            let l = self.run_epoch(data)?;
            let mut line = format!("{} epoch {} loss_f {:.4}", self.train.method, l.epoch, l.loss_f);
            if let (Some(v), Some(p), Some(g)) = (l.loss_v, l.loss_p, l.loss_g) {
                line += &format!(" loss_v {v:.4} loss_p {p:.4} loss_g {g:.4}");
            }
            let every = self.train.eval_every;
            if every > 0 && !evals.is_empty() && (self.epoch % every == 0 || self.epoch == self.train.epochs) {
                for (name, auc) in self.evaluate(evals)?.auc {
                    line += &format!(" {name} {auc:.4}");
                }
            }
            info!("{line}");
        }
        Ok(())
    }

    pub fn history(&self) -> History {
        History {
            method: self.train.method,
            seed: self.train.seed,
            loss_history: self.loss_history.clone(),
            eval_history: self.eval_history.clone(),
        }
    }

    fn meta(&self, extra: Option<&serde_json::Value>) -> Result<CheckpointMeta> {
        let mut loss_history: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for l in &self.loss_history {
            loss_history.entry("loss_f".into()).or_default().push(l.loss_f);
            for (name, v) in [("loss_q", l.loss_q), ("loss_g", l.loss_g), ("loss_v", l.loss_v), ("loss_p", l.loss_p)] {
                if let Some(v) = v {
                    loss_history.entry(name.into()).or_default().push(v);
                }
            }
        }
        let mut config = serde_json::json!({
            "model": self.model,
            "train": self.train,
            "num_classes": self.num_classes,
        });
        if let Some(e) = extra {
            config["experiment"] = e.clone();
        }
        Ok(CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            method: self.train.method.to_string(),
            epoch: self.epoch,
            seed: self.train.seed,
            config,
            loss_history,
        })
    }

    /// Writes `model.bin`, its JSON sidecar and `history.json` into `dir`.
    pub fn save(&self, dir: &Path, experiment: Option<&serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut modules: Vec<(&str, &dyn Module<T>)> = vec![("f", &self.f), ("w", &self.w)];
        if let (Some(q), Some(g)) = (&self.q, &self.g) {
            modules.push(("q", q));
            modules.push(("g", g));
        }
        save_checkpoint(&dir.join("model.bin"), &modules, &self.meta(experiment)?)?;
        let path = dir.join("history.json");
        fs::write(&path, serde_json::to_string_pretty(&self.history())? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Restores networks and histories from a checkpoint blob. Optimizer
    /// moments are not stored, so resumed runs restart them.
    pub fn load(blob: &Path) -> Result<Self> {
        let meta = crate::models::read_meta(blob)?;
        let malformed = |reason: String| Error::Malformed {
            path: blob.to_path_buf(),
            reason,
        };
        let model: ModelConfig = serde_json::from_value(meta.config["model"].clone()).map_err(|e| malformed(e.to_string()))?;
        let train: TrainConfig = serde_json::from_value(meta.config["train"].clone()).map_err(|e| malformed(e.to_string()))?;
        let k = meta.config["num_classes"]
            .as_u64()
            .ok_or_else(|| malformed("missing num_classes".into()))? as usize;
        let mut state = Self::new(model, train, k)?;
        {
            let TrainState { f, w, q, g, .. } = &mut state;
            let mut modules: Vec<(&str, &mut dyn Module<T>)> = vec![("f", f), ("w", w)];
            if let (Some(q), Some(g)) = (q.as_mut(), g.as_mut()) {
                modules.push(("q", q));
                modules.push(("g", g));
            }
            load_checkpoint(blob, &mut modules)?;
        }
        state.epoch = meta.epoch;
        let hist = blob.parent().map(|d| d.join("history.json"));
        if let Some(h) = hist.filter(|p| p.exists()) {
            let h = History::load(&h)?;
            state.loss_history = h.loss_history;
            state.eval_history = h.eval_history;
        }
        Ok(state)
    }

    /// Q and G references for inference.
    pub fn background_generator(&self) -> Result<(&BackgroundExtractor<T>, &Generator<T>)> {
        match (self.q.as_ref(), self.g.as_ref()) {
            (Some(q), Some(g)) => Ok((q, g)),
            _ => Err(Error::config("checkpoint has no background extractor or generator")),
        }
    }

}

/// Trains the disentangling method end to end.
pub fn train_dr<T: Real>(
    data: &TrainData<T>,
    model: &ModelConfig,
    train: &TrainConfig,
    evals: &[(String, LabeledSignals)],
) -> Result<TrainState<T>> {
    if train.method != Method::Dr {
        return Err(Error::config("train_dr needs method dr"));
    }
    let mut s = TrainState::new(model.clone(), train.clone(), data.num_classes)?;
    s.fit(data, evals)?;
    Ok(s)
}

/// Trains F and W alone with the baseline's augmentation.
pub fn train_baseline<T: Real>(
    data: &TrainData<T>,
    model: &ModelConfig,
    train: &TrainConfig,
    evals: &[(String, LabeledSignals)],
) -> Result<TrainState<T>> {
    if train.method == Method::Dr {
        return Err(Error::config("train_baseline needs method ml, awgn or fir"));
    }
    let mut s = TrainState::new(model.clone(), train.clone(), data.num_classes)?;
    s.fit(data, evals)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ExtractorConfig, UnetConfig};
    use crate::signal_sim::{gen_dataset, read_signals, split_paths, DatasetConfig, SplitConfig};
    use proptest::prelude::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                layers: 6,
                embed_dim: 8,
                base_width: 2,
                max_width: 4,
                ..ExtractorConfig::default()
            },
            unet: UnetConfig {
                widths: [2, 4, 4, 4, 4],
                ..UnetConfig::default()
            },
        }
    }

    fn tiny_train(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 2,
            batch_size: 4,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn toy_signals(devices: usize, per_device: usize, seed: u64) -> LabeledSignals {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatasetConfig::default();
        cfg.known_devices = devices;
        cfg.splits = vec![SplitConfig {
            name: "toy".into(),
            num_devices: devices,
            per_device,
            ..cfg.splits[0].clone()
        }];
        gen_dataset(&cfg, "toy", seed, dir.path()).unwrap();
        read_signals(&split_paths(dir.path(), "toy").1, cfg.sample_rate).unwrap()
    }

    fn toy<T: Real>() -> TrainData<T> {
        TrainData::new(&toy_signals(2, 6, 3)).unwrap()
    }

    fn prints(s: &TrainState<f32>) -> [String; 4] {
        [
            s.f.fingerprint(),
            s.w.fingerprint(),
            s.q.as_ref().unwrap().fingerprint(),
            s.g.as_ref().unwrap().fingerprint(),
        ]
    }

    #[test]
    fn qg_step_touches_only_q_and_g() {
        let data = toy::<f32>();
        let mut s = TrainState::new(tiny_model(), tiny_train(Method::Dr), 2).unwrap();
        let (x, y) = data.batch(&[0, 1, 6, 7]);
        let before = prints(&s);
        let l = s.qg_step(&x, &y).unwrap();
        let after = prints(&s);
        assert_eq!(before[..2], after[..2]);
        assert_ne!(before[2], after[2]);
        assert_ne!(before[3], after[3]);
        assert!(l.loss_v.is_finite() && l.loss_g.is_finite() && l.loss_p >= 0.0);

        let trainable = |s: &TrainState<f32>| {
            let mut v = Vec::new();
            for m in [s.q.as_ref().unwrap() as &dyn Module<f32>, s.g.as_ref().unwrap()] {
                m.visit("", &mut |_, p| {
                    if p.trainable {
                        v.extend_from_slice(p.value.data());
                    }
                });
            }
            v
        };
        let frozen = TrainConfig { lr: 0.0, ..tiny_train(Method::Dr) };
        let mut s = TrainState::new(tiny_model(), frozen, 2).unwrap();
        let before = trainable(&s);
        s.qg_step(&x, &y).unwrap();
        assert_eq!(before, trainable(&s));
    }

    #[test]
    fn f_step_touches_only_f_and_w_and_detaches() {
        let data = toy::<f32>();
        let mut s = TrainState::new(tiny_model(), tiny_train(Method::Dr), 2).unwrap();
        let (x, y) = data.batch(&[0, 1, 6, 7]);
        s.qg_step(&x, &y).unwrap();
        s.q.as_mut().unwrap().zero_grad();
        s.g.as_mut().unwrap().zero_grad();
        let before = prints(&s);
        s.f_step(&x, &y).unwrap();
        let after = prints(&s);
        assert_ne!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2..], after[2..]);
        assert_eq!(s.q.as_ref().unwrap().grad_sq_norm(), 0.0);
        assert_eq!(s.g.as_ref().unwrap().grad_sq_norm(), 0.0);
    }

    #[test]
    fn q_gradient_matches_finite_difference() {
        let data = toy::<f64>();
        let (x, _) = data.batch(&[0, 1, 6, 7]);
        let mut s = TrainState::<f64>::new(tiny_model(), tiny_train(Method::Dr), 2).unwrap();
        let noise = s.q.as_ref().unwrap().sample_noise(4, &mut stream(0, "n", 0));
        // Label each record with the class its background is assigned to,
        // which keeps the information hinge active.
        let (bg, _) = s.q.as_ref().unwrap().forward(&x, &noise, Mode::Train).unwrap();
        let probs = s.w.forward(&s.f.embed(&bg, Mode::Eval).unwrap()).unwrap();
        let y: Vec<usize> = probs.probs().chunks(2).map(|p| usize::from(p[1] > p[0])).collect();
        assert!(s.qg_gradients(&x, &y, &noise).unwrap().loss_p > 0.0);

        let mut picked = Vec::new();
        s.q.as_ref().unwrap().visit("", &mut |name, p| {
            if p.trainable && picked.len() < 4 && name.ends_with("weight") {
                let (i, g) = p
                    .grad
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap();
                picked.push((name.to_string(), i, *g));
            }
        });
        // Small step: ReLU and max-pool kinks sit close to the operating point.
        let h = 1e-7;
        for (name, i, g) in picked {
            let mut total = |delta: f64| {
                s.q.as_mut().unwrap().visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                let l = s.qg_gradients(&x, &y, &noise).unwrap();
                l.loss_q + l.loss_g
            };
            let up = total(h);
            let down = total(-2.0 * h);
            total(h);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-3, "{name}[{i}]: analytic {g} numeric {fd}");
        }
    }

    #[test]
    fn lambda_one_alpha_zero_matches_ml_trajectory() {
        let data = toy::<f64>();
        let mut dr = tiny_train(Method::Dr);
        dr.loss.lambda = 1.0;
        dr.loss.alpha = 0.0;
        let ml = TrainConfig { method: Method::Ml, ..dr.clone() };
        let a = train_dr(&data, &tiny_model(), &dr, &[]).unwrap();
        let b = train_baseline(&data, &tiny_model(), &ml, &[]).unwrap();
        assert_eq!(a.f.fingerprint(), b.f.fingerprint());
        assert_eq!(a.w.fingerprint(), b.w.fingerprint());
    }

    #[test]
    fn awgn_without_noise_is_ml() {
        let data = toy::<f32>();
        let mut awgn = tiny_train(Method::Awgn);
        awgn.augment.awgn_snr_db = None;
        let ml = TrainConfig { method: Method::Ml, ..awgn.clone() };
        let a = train_baseline(&data, &tiny_model(), &awgn, &[]).unwrap();
        let b = train_baseline(&data, &tiny_model(), &ml, &[]).unwrap();
        assert_eq!(a.f.fingerprint(), b.f.fingerprint());
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn augmenting_baselines_differ_from_ml() {
        let data = toy::<f32>();
        let ml = train_baseline(&data, &tiny_model(), &tiny_train(Method::Ml), &[]).unwrap();
        for m in [Method::Awgn, Method::Fir] {
            let s = train_baseline(&data, &tiny_model(), &tiny_train(m), &[]).unwrap();
            assert_ne!(s.f.fingerprint(), ml.f.fingerprint(), "{m}");
            assert!(s.q.is_none() && s.g.is_none());
        }
        assert!(train_baseline(&data, &tiny_model(), &tiny_train(Method::Dr), &[]).is_err());
        assert!(train_dr(&data, &tiny_model(), &tiny_train(Method::Ml), &[]).is_err());
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = toy::<f32>();
        let mut cfg = tiny_train(Method::Dr);
        cfg.epochs = 0;
        let s = train_dr(&data, &tiny_model(), &cfg, &[]).unwrap();
        let init = TrainState::<f32>::new(tiny_model(), cfg.clone(), 2).unwrap();
        assert_eq!(prints(&s), prints(&init));
        assert!(s.loss_history.is_empty() && s.eval_history.is_empty());

        cfg.epochs = 3;
        let evals = vec![("toy".to_string(), toy_signals(2, 4, 9))];
        let a = train_dr(&data, &tiny_model(), &cfg, &evals).unwrap();
        let b = train_dr(&data, &tiny_model(), &cfg, &evals).unwrap();
        assert_eq!(a.loss_history.len(), 3);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.eval_history, b.eval_history);
        assert_eq!(a.eval_history.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(a.loss_history.iter().all(|l| l.loss_v.is_some() && l.loss_p.is_some()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = toy::<f32>();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train(Method::Dr);
        cfg.epochs = 1;
        let s = train_dr(&data, &tiny_model(), &cfg, &[]).unwrap();
        s.save(dir.path(), None).unwrap();
        let back = TrainState::<f32>::load(&dir.path().join("model.bin")).unwrap();
        assert_eq!(prints(&s), prints(&back));
        assert_eq!(back.loss_history, s.loss_history);
        assert_eq!(back.epoch, 1);
        let meta = crate::models::read_meta(&dir.path().join("model.bin")).unwrap();
        assert_eq!(meta.method, "dr");

        let ml = train_baseline(&data, &tiny_model(), &TrainConfig { method: Method::Ml, ..cfg }, &[]).unwrap();
        let d2 = dir.path().join("ml");
        ml.save(&d2, None).unwrap();
        let state = crate::models::read_state(&d2.join("model.bin")).unwrap();
        assert!(state.iter().all(|e| e.name.starts_with("f.") || e.name.starts_with("w.")));
        let back = TrainState::<f32>::load(&d2.join("model.bin")).unwrap();
        assert!(back.q.is_none());
        assert_eq!(crate::models::read_meta(&d2.join("model.bin")).unwrap().method, "ml");
    }

    #[test]
    fn ml_fits_separable_toy_task() {
        let data = toy::<f32>();
        let mut cfg = tiny_train(Method::Ml);
        cfg.epochs = 40;
        cfg.lr = 1e-2;
        let s = train_baseline(&data, &tiny_model(), &cfg, &[]).unwrap();
        let last = s.loss_history.last().unwrap().loss_f;
        assert!(last < 0.01, "final loss {last}");
    }

    proptest! {
        #[test]
        fn derangements_have_no_fixed_points(n in 2usize..40, seed in 0u64..1000) {
            let p = derangement(n, &mut stream(seed, "d", 0));
            let mut sorted = p.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert!(p.iter().enumerate().all(|(i, &v)| i != v));
        }
    }
}
