//! Open-set verification: embeddings, pairwise cosine scores, ROC, AUC,
//! EER and hyperparameter sweeps.

mod metrics;
mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{box_stats, eer, pairwise_scores, roc_auc, BoxStats, RocCurve, ScoreSet};
pub use sweep::{sweep, write_sweep_csv, SweepParam, SweepRow};

use crate::error::{Error, Result};
use crate::models::{Extractor, HypersphereClassifier, RffVector};
use crate::nn::{Mode, Real, Tensor};
use crate::preprocessing::prepare_batch;
use crate::signal_sim::LabeledSignals;

const EVAL_BATCH: usize = 64;

/// Inference-mode embeddings of every record, paired with its device id.
pub fn extract_embeddings<T: Real>(f: &Extractor<T>, data: &LabeledSignals) -> Result<Vec<(RffVector, usize)>> {
    let mut out = Vec::with_capacity(data.len());
    for (chunk, ids) in data.signals.chunks(EVAL_BATCH).zip(data.device_ids.chunks(EVAL_BATCH)) {
        let x: Tensor<T> = prepare_batch(&chunk.iter().collect::<Vec<_>>())?;
        let z = f.embed(&x, Mode::Eval)?;
        for (i, &id) in ids.iter().enumerate() {
            out.push((RffVector::new(z.row(i).iter().map(|v| v.as_f64()).collect()), id));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub auc: f64,
    pub eer: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
    /// AUC restricted to pairs whose records share a channel tag, reported
    /// only when a split mixes several tags.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_channel_tag: BTreeMap<String, f64>,
    #[serde(skip)]
    pub roc: Vec<(f64, f64)>,
}

pub fn score_metrics(scores: &ScoreSet) -> Result<SplitMetrics> {
    let (roc, auc) = roc_auc(scores)?;
    Ok(SplitMetrics {
        auc,
        eer: eer(scores)?,
        n_genuine: scores.genuine.len(),
        n_impostor: scores.impostor.len(),
        per_channel_tag: BTreeMap::new(),
        roc: roc.points,
    })
}

pub fn evaluate_split<T: Real>(f: &Extractor<T>, data: &LabeledSignals) -> Result<SplitMetrics> {
    let emb = extract_embeddings(f, data)?;
    let mut m = score_metrics(&pairwise_scores(&emb)?)?;
    let mut tags: Vec<&String> = data.channel_tags.iter().collect();
    tags.sort();
    tags.dedup();
    if tags.len() > 1 {
        for tag in tags {
            let sub: Vec<(RffVector, usize)> = emb
                .iter()
                .zip(&data.channel_tags)
                .filter(|(_, t)| *t == tag)
                .map(|(e, _)| e.clone())
                .collect();
            if let Ok(s) = pairwise_scores(&sub) {
                m.per_channel_tag.insert(tag.clone(), roc_auc(&s)?.1);
            }
        }
    }
    Ok(m)
}

/// Writes `metrics.json` and `roc.csv` into `dir`.
pub fn write_metrics(dir: &Path, m: &SplitMetrics) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(m)? + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join("roc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["fpr", "tpr"])?;
    for (fpr, tpr) in &m.roc {
        w.write_record([fpr.to_string(), tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Fraction of images whose most probable class is the true label.
pub fn classifier_accuracy<T: Real>(
    f: &Extractor<T>,
    w: &HypersphereClassifier<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    if images.batch() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("one label per image required".into()));
    }
    let k = w.num_classes();
    let mut correct = 0;
    for start in (0..labels.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(labels.len());
        let z = f.embed(&images.slice_batch(start, end), Mode::Eval)?;
        let cache = w.forward(&z)?;
        for (i, &y) in labels[start..end].iter().enumerate() {
            let row = &cache.probs()[i * k..(i + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .expect("k >= 2");
            correct += usize::from(best == y);
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}
