use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Module, Param, Real, Tensor};

/// An RF fingerprint embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffVector {
    pub values: Vec<f64>,
}

impl RffVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Class weight vectors and the hypersphere radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    pub weights: Vec<Vec<f64>>,
    pub delta: f64,
}

impl ClassifierWeights {
    pub fn new(weights: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        let w = Self { weights, delta };
        w.validate()?;
        Ok(w)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("hypersphere radius must be positive"));
        }
        let d = self.weights[0].len();
        for w in &self.weights {
            if w.len() != d {
                return Err(Error::Shape("class weights differ in dimension".into()));
            }
            if l2(w) == 0.0 {
                return Err(Error::DegenerateEmbedding);
            }
        }
        Ok(())
    }
}

/// `delta * z / |z|`.
pub fn hypersphere_project(z: &RffVector, delta: f64) -> Result<RffVector> {
    let n = z.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(RffVector::new(z.values.iter().map(|v| delta * v / n).collect()))
}

/// Softmax over normalized class weights against the projected embedding.
pub fn classifier_prob(z: &RffVector, w: &ClassifierWeights) -> Result<Vec<f64>> {
    w.validate()?;
    if z.dim() != w.weights[0].len() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs classifier dim {}",
            z.dim(),
            w.weights[0].len()
        )));
    }
    let zp = hypersphere_project(z, w.delta)?;
    let logits: Vec<f64> = w
        .weights
        .iter()
        .map(|wj| {
            let n = l2(wj);
            wj.iter().zip(&zp.values).map(|(a, b)| a * b).sum::<f64>() / n
        })
        .collect();
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Trainable normalized softmax head `W`.
#[derive(Debug, Clone)]
pub struct HypersphereClassifier<T> {
    pub weight: Param<T>,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    zhat: Vec<f64>,
    znorm: Vec<f64>,
    what: Vec<f64>,
    wnorm: Vec<f64>,
    probs: Vec<f64>,
    batch: usize,
}

impl ClassifierCache {
    /// Probabilities, row-major `(B, K)`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl<T: Real> HypersphereClassifier<T> {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, dim: usize, delta: f64, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::config("hypersphere radius must be positive"));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            weight: Param::uniform(&[num_classes, dim], bound, rng),
            delta,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn weights(&self) -> ClassifierWeights {
        let d = self.dim();
        ClassifierWeights {
            weights: self.weight.value.to_f64().chunks(d).map(|c| c.to_vec()).collect(),
            delta: self.delta,
        }
    }

    /// Class probabilities for a `(B, d)` batch of embeddings.
    pub fn forward(&self, z: &Tensor<T>) -> Result<ClassifierCache> {
        let (b, d) = z.dims2()?;
        let k = self.num_classes();
        if d != self.dim() {
            return Err(Error::Shape(format!("embedding dim {d} vs classifier {}", self.dim())));
        }
        let (zhat, znorm) = normalize_rows(&z.to_f64(), d)?;
        let (what, wnorm) = normalize_rows(&self.weight.value.to_f64(), d)?;
        let mut probs = Vec::with_capacity(b * k);
        for i in 0..b {
            let zi = &zhat[i * d..(i + 1) * d];
            let logits: Vec<f64> = (0..k)
                .map(|j| {
                    self.delta
                        * what[j * d..(j + 1) * d].iter().zip(zi).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            probs.extend(softmax(&logits));
        }
        Ok(ClassifierCache {
            zhat,
            znorm,
            what,
            wnorm,
            probs,
            batch: b,
        })
    }

    /// Backpropagates `dL/dp` (row-major `(B, K)`) to the embeddings.
    pub fn backward(&mut self, cache: &ClassifierCache, dprobs: &[f64], accumulate: bool) -> Tensor<T> {
        let (b, k, d) = (cache.batch, self.num_classes(), self.dim());
        let mut dz = vec![0.0; b * d];
        let mut dwhat = vec![0.0; k * d];
        for i in 0..b {
            let p = &cache.probs[i * k..(i + 1) * k];
            let g = &dprobs[i * k..(i + 1) * k];
            let inner: f64 = p.iter().zip(g).map(|(a, c)| a * c).sum();
            let zi = &cache.zhat[i * d..(i + 1) * d];
            let mut dzhat = vec![0.0; d];
            for j in 0..k {
                let dl = p[j] * (g[j] - inner) * self.delta;
                if dl == 0.0 {
                    continue;
                }
                let wj = &cache.what[j * d..(j + 1) * d];
                for t in 0..d {
                    dzhat[t] += dl * wj[t];
                    dwhat[j * d + t] += dl * zi[t];
                }
            }
            let proj: f64 = dzhat.iter().zip(zi).map(|(a, c)| a * c).sum();
            for t in 0..d {
                dz[i * d + t] = (dzhat[t] - zi[t] * proj) / cache.znorm[i];
            }
        }
        if accumulate {
            let gw = self.weight.grad.data_mut();
            for j in 0..k {
                let wj = &cache.what[j * d..(j + 1) * d];
                let dw = &dwhat[j * d..(j + 1) * d];
                let proj: f64 = dw.iter().zip(wj).map(|(a, c)| a * c).sum();
                for t in 0..d {
                    gw[j * d + t] += T::from_f64_lossy((dw[t] - wj[t] * proj) / cache.wnorm[j]);
                }
            }
        }
        Tensor::from_f64(&[b, d], &dz).expect("sized")
    }
}

fn normalize_rows(v: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::with_capacity(v.len());
    let mut norms = Vec::with_capacity(v.len() / d);
    for row in v.chunks(d) {
        let n = l2(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        norms.push(n);
        out.extend(row.iter().map(|a| a / n));
    }
    Ok((out, norms))
}

impl<T: Real> Module<T> for HypersphereClassifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}
