//! Training objectives. Every squared norm is an element mean and every
//! logarithm is taken of a probability floored at [`LOG_FLOOR`].
//!
//! Each `*_grad` function returns the loss together with its derivative
//! with respect to the network outputs it consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::RffVector;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha: 10.0,
            beta: 10.0,
            epsilon: 0.0,
            delta: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda must lie in [0, 1]"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.epsilon >= 0.0) {
            return Err(Error::config("alpha, beta and epsilon must be non-negative"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta must be positive"));
        }
        Ok(())
    }
}

pub fn cosine_distance(a: &RffVector, b: &RffVector) -> Result<f64> {
    cosine_distance_slice(&a.values, &b.values)
}

pub fn cosine_distance_slice(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

fn check_probs(probs: &[f64], labels: &[usize], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if labels.is_empty() || probs.len() != labels.len() * k {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels and {k} classes",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// Adds `-w * ln p[i, y_i] / B` to the loss and its gradient to `grad`.
fn nll_into(probs: &[f64], labels: &[usize], k: usize, w: f64, grad: &mut [f64]) -> f64 {
    let b = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[i * k + y];
        loss -= w * p.max(LOG_FLOOR).ln() / b;
        if p > LOG_FLOOR {
            grad[i * k + y] -= w / (b * p);
        }
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossFGrad {
    pub value: f64,
    pub d_raw: Vec<f64>,
    pub d_aug: Vec<f64>,
}

/// Fingerprint loss over raw and augmented class probabilities (row-major
/// `(B, K)`). With `lambda == 1` the augmented term is skipped and
/// `aug_probs` may be `None`.
pub fn loss_f_grad(
    raw_probs: &[f64],
    aug_probs: Option<&[f64]>,
    labels: &[usize],
    k: usize,
    lambda: f64,
) -> Result<LossFGrad> {
    check_probs(raw_probs, labels, k)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda must lie in [0, 1]"));
    }
    let mut d_raw = vec![0.0; raw_probs.len()];
    let mut value = nll_into(raw_probs, labels, k, lambda, &mut d_raw);
    let mut d_aug = Vec::new();
    if lambda < 1.0 {
        let aug = aug_probs.ok_or_else(|| Error::config("augmented probabilities required when lambda < 1"))?;
        check_probs(aug, labels, k)?;
        d_aug = vec![0.0; aug.len()];
        value += nll_into(aug, labels, k, 1.0 - lambda, &mut d_aug);
    }
    Ok(LossFGrad { value, d_raw, d_aug })
}

pub fn loss_f(raw_probs: &[f64], aug_probs: Option<&[f64]>, labels: &[usize], k: usize, lambda: f64) -> Result<f64> {
    Ok(loss_f_grad(raw_probs, aug_probs, labels, k, lambda)?.value)
}

/// Element-mean squared error and its gradient with respect to `b`.
pub fn mse_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mse over {} and {} elements", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let mut value = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = y - x;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((value / n, grad))
}

/// Reconstruction loss of the background extractor; gradient is with
/// respect to `q_out`.
pub fn loss_v_grad(x: &[f64], q_out: &[f64]) -> Result<(f64, Vec<f64>)> {
    mse_grad(x, q_out)
}

pub fn loss_v(x: &[f64], q_out: &[f64]) -> Result<f64> {
    Ok(mse_grad(x, q_out)?.0)
}

/// Device-information penalty on background probabilities.
pub fn loss_p_grad(bg_probs: &[f64], labels: &[usize], k: usize, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_probs(bg_probs, labels, k)?;
    let b = labels.len() as f64;
    let mean_log = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (k as f64 * bg_probs[i * k + y].max(LOG_FLOOR)).ln())
        .sum::<f64>()
        / b;
    let hinge = (mean_log - epsilon).max(0.0);
    let mut grad = vec![0.0; bg_probs.len()];
    if hinge > 0.0 {
        for (i, &y) in labels.iter().enumerate() {
            let p = bg_probs[i * k + y];
            if p > LOG_FLOOR {
                grad[i * k + y] = 2.0 * hinge / (b * p);
            }
        }
    }
    Ok((hinge * hinge, grad))
}

pub fn loss_p(bg_probs: &[f64], labels: &[usize], k: usize, epsilon: f64) -> Result<f64> {
    Ok(loss_p_grad(bg_probs, labels, k, epsilon)?.0)
}

pub fn loss_q(loss_v: f64, loss_p: f64, alpha: f64) -> f64 {
    loss_v + alpha * loss_p
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGGrad {
    pub value: f64,
    pub d_synth: Vec<f64>,
    pub d_synth_embedding: Vec<f64>,
}

/// Generator loss from images and the frozen extractor's embeddings of the
/// raw (`z`) and synthetic (`z_synth`) images.
pub fn loss_g_grad(x: &[f64], synth: &[f64], z: &[f64], z_synth: &[f64], beta: f64) -> Result<LossGGrad> {
    let (rec, d_synth) = mse_grad(x, synth)?;
    let (emb, mut d_emb) = mse_grad(z, z_synth)?;
    d_emb.iter_mut().for_each(|g| *g *= beta);
    Ok(LossGGrad {
        value: rec + beta * emb,
        d_synth,
        d_synth_embedding: d_emb,
    })
}

pub fn loss_g(x: &[f64], synth: &[f64], z: &[f64], z_synth: &[f64], beta: f64) -> Result<f64> {
    Ok(loss_g_grad(x, synth, z, z_synth, beta)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> RffVector {
        RffVector::new(x.to_vec())
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn loss_f_examples() {
        let l = loss_f(&[0.8, 0.2], Some(&[0.5, 0.5]), &[0], 2, 0.5).unwrap();
        assert!((l - 0.4581453659370776).abs() < 1e-12);
        assert!((l - 0.4581).abs() < 1e-4);
        assert_eq!(loss_f(&[1.0, 0.0, 0.0, 1.0], Some(&[1.0, 0.0, 0.0, 1.0]), &[0, 1], 2, 0.5).unwrap(), 0.0);
        // lambda = 1 is the plain negative log-likelihood.
        let raw = [0.7, 0.3, 0.4, 0.6];
        let ml = -(0.7f64.ln() + 0.6f64.ln()) / 2.0;
        assert_eq!(loss_f(&raw, None, &[0, 1], 2, 1.0).unwrap(), ml);
        assert_eq!(loss_f(&raw, Some(&[0.5; 4]), &[0, 1], 2, 1.0).unwrap(), ml);
        assert!(loss_f(&raw, None, &[0, 1], 2, 0.5).is_err());
        assert!(loss_f(&raw, None, &[0, 2], 2, 1.0).is_err());
        assert!(loss_f(&[0.0, 1.0], None, &[0], 2, 1.0).unwrap().is_finite());
    }

    #[test]
    fn loss_v_examples() {
        let x = [0.3, -0.2, 0.5, 0.0];
        assert_eq!(loss_v(&x, &x).unwrap(), 0.0);
        let q: Vec<f64> = x.iter().map(|a| a + 0.1).collect();
        assert!((loss_v(&x, &q).unwrap() - 0.01).abs() < 1e-12);
        let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
        let q2: Vec<f64> = q.iter().chain(&q).copied().collect();
        assert!((loss_v(&x2, &q2).unwrap() - loss_v(&x, &q).unwrap()).abs() < 1e-15);
        assert!(loss_v(&x, &q[..3]).is_err());
    }

    #[test]
    fn loss_p_examples() {
        assert!(loss_p(&[0.25; 8], &[0, 3], 4, 0.0).unwrap().abs() < 1e-15);
        let perfect = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let l = loss_p(&perfect, &[0, 2], 4, 0.0).unwrap();
        assert!((l - 4f64.ln().powi(2)).abs() < 1e-12);
        assert!((l - 1.9218).abs() < 1e-4);
        assert_eq!(loss_p(&perfect, &[0, 2], 4, 2.0).unwrap(), 0.0);
        // Below chance on average.
        assert_eq!(loss_p(&[0.1, 0.9], &[0], 2, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_q_and_g_examples() {
        assert!((loss_q(0.02, 0.5, 10.0) - 5.02).abs() < 1e-12);
        assert_eq!(loss_q(0.3, 7.0, 0.0), 0.3);
        assert_eq!(loss_q(0.0, 0.0, 10.0), 0.0);
        let x = [0.1, 0.2, 0.3];
        let z = [1.0, -1.0];
        assert_eq!(loss_g(&x, &x, &z, &z, 10.0).unwrap(), 0.0);
        let xs: Vec<f64> = x.iter().map(|a| a - 0.1).collect();
        assert!((loss_g(&x, &xs, &z, &z, 10.0).unwrap() - 0.01).abs() < 1e-12);
        let zs = [0.0, 0.0];
        assert!((loss_g(&x, &xs, &z, &zs, 0.0).unwrap() - 0.01).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_differences() {
        let raw = [0.6, 0.3, 0.1, 0.2, 0.5, 0.3];
        let aug = [0.3, 0.3, 0.4, 0.1, 0.1, 0.8];
        let labels = [0, 2];
        let g = loss_f_grad(&raw, Some(&aug), &labels, 3, 0.3).unwrap();
        fd_check(|p| loss_f(p, Some(&aug), &labels, 3, 0.3).unwrap(), &raw, &g.d_raw);
        fd_check(|p| loss_f(&raw, Some(p), &labels, 3, 0.3).unwrap(), &aug, &g.d_aug);

        let bg = [0.7, 0.2, 0.1, 0.1, 0.2, 0.7];
        let (_, gp) = loss_p_grad(&bg, &labels, 3, 0.1).unwrap();
        fd_check(|p| loss_p(p, &labels, 3, 0.1).unwrap(), &bg, &gp);

        let x = [0.1, -0.4, 0.9];
        let s = [0.2, -0.1, 0.5];
        let (_, gv) = loss_v_grad(&x, &s).unwrap();
        fd_check(|p| loss_v(&x, p).unwrap(), &s, &gv);
        let z = [1.0, 2.0];
        let zs = [0.5, 2.5];
        let gg = loss_g_grad(&x, &s, &z, &zs, 3.0).unwrap();
        fd_check(|p| loss_g(&x, p, &z, &zs, 3.0).unwrap(), &s, &gg.d_synth);
        fd_check(|p| loss_g(&x, &s, &z, p, 3.0).unwrap(), &zs, &gg.d_synth_embedding);
    }

    fn prob_rows(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), 1..6).prop_map(|rows| {
            rows.into_iter()
                .flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(move |v| v / s)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn cosine_properties(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let d = cosine_distance_slice(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert!((d - cosine_distance_slice(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!(cosine_distance_slice(&a, &scaled).unwrap() < 1e-12);
        }

        #[test]
        fn penalty_is_non_negative_and_permutation_invariant(
            probs in prob_rows(3),
            eps in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let b = probs.len() / 3;
            let labels: Vec<usize> = (0..b).map(|i| (i + seed as usize) % 3).collect();
            let lp = loss_p(&probs, &labels, 3, eps).unwrap();
            prop_assert!(lp >= 0.0);
            let lf = loss_f(&probs, Some(&probs), &labels, 3, 0.5).unwrap();
            let perm: Vec<usize> = (0..b).rev().collect();
            let pprobs: Vec<f64> = perm.iter().flat_map(|&i| probs[i * 3..i * 3 + 3].to_vec()).collect();
            let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            prop_assert!((loss_p(&pprobs, &plabels, 3, eps).unwrap() - lp).abs() < 1e-12);
            prop_assert!((loss_f(&pprobs, Some(&pprobs), &plabels, 3, 0.5).unwrap() - lf).abs() < 1e-12);
        }
    }
}
