use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cosine_distance_slice;
use crate::models::RffVector;

/// Cosine distances of same-device (`genuine`) and cross-device
/// (`impostor`) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::EmptyScores);
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| v.is_nan()) {
            return Err(Error::Shape("score set contains NaN".into()));
        }
        Ok(())
    }
}

/// `(fpr, tpr)` points for thresholds from below every score up to the
/// largest score. A pair is accepted as same-device when `D <= T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Cumulative accepted counts `(genuine, impostor)` at each threshold.
fn sweep_counts(s: &ScoreSet) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, bool)> = s
        .genuine
        .iter()
        .map(|&v| (v, true))
        .chain(s.impostor.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![(0, 0)];
    let (mut g, mut i) = (0, 0);
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        while k < all.len() && all[k].0 == t {
            if all[k].1 {
                g += 1;
            } else {
                i += 1;
            }
            k += 1;
        }
        out.push((g, i));
    }
    out
}

/// ROC curve and area; ties between a genuine and an impostor score earn
/// half credit.
pub fn roc_auc(s: &ScoreSet) -> Result<(RocCurve, f64)> {
    s.validate()?;
    let (ng, ni) = (s.genuine.len(), s.impostor.len());
    let counts = sweep_counts(s);
    let points = counts
        .iter()
        .map(|&(g, i)| (i as f64 / ni as f64, g as f64 / ng as f64))
        .collect();
    // Twice the trapezoid area in count units, kept integral so the result
    // equals the pair-counting definition bit for bit.
    let twice: u128 = counts
        .windows(2)
        .map(|w| ((w[1].1 - w[0].1) as u128) * ((w[0].0 + w[1].0) as u128))
        .sum();
    let auc = twice as f64 / (2.0 * ng as f64 * ni as f64);
    Ok((RocCurve { points }, auc))
}

/// Rate where the false-negative and false-positive curves cross, linearly
/// interpolated between the bracketing thresholds.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let (ng, ni) = (s.genuine.len() as f64, s.impostor.len() as f64);
    let rates: Vec<(f64, f64)> = sweep_counts(s)
        .into_iter()
        .map(|(g, i)| (1.0 - g as f64 / ng, i as f64 / ni))
        .collect();
    for k in 0..rates.len() {
        let (fnr, fpr) = rates[k];
        if fpr >= fnr {
            if k == 0 || fpr == fnr {
                return Ok(fpr);
            }
            let (fnr0, fpr0) = rates[k - 1];
            let d0 = fpr0 - fnr0;
            let d1 = fpr - fnr;
            let t = -d0 / (d1 - d0);
            return Ok(fpr0 + t * (fpr - fpr0));
        }
    }
    // The last threshold accepts everything, so FPR = 1 >= FNR = 0.
    unreachable!("roc sweep ends at fpr = 1")
}

/// Scores all unordered pairs.
pub fn pairwise_scores(embeddings: &[(RffVector, usize)]) -> Result<ScoreSet> {
    if embeddings.len() < 2 {
        return Err(Error::EmptyScores);
    }
    let first = embeddings[0].1;
    if embeddings.iter().all(|(_, l)| *l == first) {
        return Err(Error::MissingImpostors);
    }
    let mut s = ScoreSet {
        genuine: Vec::new(),
        impostor: Vec::new(),
    };
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d = cosine_distance_slice(&embeddings[i].0.values, &embeddings[j].0.values)?;
            if embeddings[i].1 == embeddings[j].1 {
                s.genuine.push(d);
            } else {
                s.impostor.push(d);
            }
        }
    }
    if s.genuine.is_empty() {
        return Err(Error::EmptyScores);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Order statistics with linear interpolation between closest ranks.
pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::config("no values to summarize"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Ok(BoxStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet {
            genuine: g.to_vec(),
            impostor: i.to_vec(),
        }
    }

    /// Pair counting and threshold enumeration, written independently of
    /// the sweep above.
    fn brute(s: &ScoreSet) -> (f64, f64) {
        let mut twice = 0u64;
        for &g in &s.genuine {
            for &i in &s.impostor {
                twice += if g < i { 2 } else if g == i { 1 } else { 0 };
            }
        }
        let (ng, ni) = (s.genuine.len(), s.impostor.len());
        let auc = twice as f64 / (2.0 * ng as f64 * ni as f64);
        let mut ts: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let mut rates = vec![(1.0, 0.0)];
        for t in ts {
            let g = s.genuine.iter().filter(|&&v| v <= t).count();
            let i = s.impostor.iter().filter(|&&v| v <= t).count();
            rates.push((1.0 - g as f64 / ng as f64, i as f64 / ni as f64));
        }
        let k = rates.iter().position(|&(fnr, fpr)| fpr >= fnr).unwrap();
        let (fnr, fpr) = rates[k];
        let e = if k == 0 || fpr == fnr {
            fpr
        } else {
            let (fnr0, fpr0) = rates[k - 1];
            let (d0, d1) = (fpr0 - fnr0, fpr - fnr);
            fpr0 + (-d0 / (d1 - d0)) * (fpr - fpr0)
        };
        (auc, e)
    }

    #[test]
    fn worked_example() {
        let s = set(&[0.1, 0.2], &[0.15, 0.3]);
        assert_eq!(roc_auc(&s).unwrap().1, 0.75);
        assert_eq!(eer(&s).unwrap(), 0.5);
    }

    #[test]
    fn extremes() {
        let sep = set(&[0.1, 0.2], &[0.5, 0.9]);
        assert_eq!(roc_auc(&sep).unwrap().1, 1.0);
        assert_eq!(eer(&sep).unwrap(), 0.0);
        let rev = set(&[0.5, 0.9], &[0.1, 0.2]);
        assert_eq!(roc_auc(&rev).unwrap().1, 0.0);
        let same = set(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
        assert_eq!(eer(&same).unwrap(), 0.5);
        assert_eq!(roc_auc(&same).unwrap().1, 0.5);
        assert!(matches!(roc_auc(&set(&[], &[0.1])), Err(Error::EmptyScores)));
        assert!(eer(&set(&[0.1], &[])).is_err());
    }

    #[test]
    fn pair_counts() {
        let e = |x: f64, l| (RffVector::new(vec![1.0, x]), l);
        let s = pairwise_scores(&[e(0.1, 0), e(0.2, 0), e(0.3, 1), e(0.4, 1)]).unwrap();
        assert_eq!(s.genuine.len(), 2);
        assert_eq!(s.impostor.len(), 4);
        assert!(matches!(
            pairwise_scores(&[e(0.1, 0), e(0.2, 0)]),
            Err(Error::MissingImpostors)
        ));
    }

    #[test]
    fn box_stats_example() {
        let b = box_stats(&[0.96, 0.9, 0.94, 0.98, 0.92]).unwrap();
        assert_eq!((b.min, b.median, b.max), (0.9, 0.94, 0.98));
        assert!((b.q1 - 0.92).abs() < 1e-12 && (b.q3 - 0.96).abs() < 1e-12);
        assert!(box_stats(&[]).is_err());
    }

    fn score_set() -> impl Strategy<Value = ScoreSet> {
        // Coarse grid so ties are common.
        let v = prop::collection::vec((0u32..40).prop_map(|k| k as f64 * 0.05), 1..50);
        (v.clone(), v).prop_map(|(g, i)| ScoreSet { genuine: g, impostor: i })
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in score_set()) {
            let (auc_b, eer_b) = brute(&s);
            let (roc, auc) = roc_auc(&s).unwrap();
            prop_assert_eq!(auc, auc_b);
            prop_assert_eq!(eer(&s).unwrap(), eer_b);
            prop_assert_eq!(roc.points[0], (0.0, 0.0));
            prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn swap_and_monotone_transform(s in score_set()) {
            let auc = roc_auc(&s).unwrap().1;
            let e = eer(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc) && (0.0..=1.0).contains(&e));
            let swapped = set(&s.impostor, &s.genuine);
            prop_assert!((roc_auc(&swapped).unwrap().1 - (1.0 - auc)).abs() < 1e-12);
            let f = |v: &f64| (3.0 * v).exp() + 1.0;
            let t = ScoreSet {
                genuine: s.genuine.iter().map(f).collect(),
                impostor: s.impostor.iter().map(f).collect(),
            };
            prop_assert_eq!(roc_auc(&t).unwrap().1, auc);
        }
    }
}
