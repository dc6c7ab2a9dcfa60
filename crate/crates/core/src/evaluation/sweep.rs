use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{box_stats, evaluate_split, BoxStats};
use crate::error::{Error, Result};
use crate::signal_sim::LabeledSignals;
use crate::training::{ModelConfig, TrainConfig, TrainData, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    Alpha,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::config(format!("cannot sweep {s:?}; expected lambda, alpha or beta"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_value: f64,
    #[serde(flatten)]
    pub stats: BoxStats,
}

/// Trains `repeats` models per value (seeds `base.seed + r`) and summarizes
/// their AUC on `test`.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    repeats: usize,
    model: &ModelConfig,
    base: &TrainConfig,
    data: &TrainData<f32>,
    test: &LabeledSignals,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || repeats == 0 {
        return Err(Error::config("sweep needs at least one value and one repeat"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut aucs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut cfg = base.clone();
            cfg.seed = base.seed + r as u64;
            match param {
                SweepParam::Lambda => cfg.loss.lambda = v,
                SweepParam::Alpha => cfg.loss.alpha = v,
                SweepParam::Beta => cfg.loss.beta = v,
            }
            let mut s = TrainState::new(model.clone(), cfg, data.num_classes)?;
            s.fit(data, &[])?;
            aucs.push(evaluate_split(&s.f, test)?.auc);
        }
        rows.push(SweepRow {
            param_value: v,
            stats: box_stats(&aucs)?,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["param_value", "min", "q1", "median", "q3", "max"])?;
    for r in rows {
        let s = r.stats;
        w.write_record([r.param_value, s.min, s.q1, s.median, s.q3, s.max].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
