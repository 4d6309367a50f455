//! Proxy A-distance between feature sets, via a linear domain classifier.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{self, derive_seed, stream};
use crate::tensor::Tensor;

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;
pub const MIN_PROBE_SAMPLES: usize = 10;

/// Logistic regression on standardised features, trained by full-batch
/// gradient descent on a class-balanced loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LinearProbe {
    /// `y[i]` is true for the second domain.
    pub fn fit(x: &[&[f64]], y: &[bool], steps: usize, lr: f64) -> Result<Self> {
        let n = x.len();
        let n_pos = y.iter().filter(|&&v| v).count();
        if n == 0 || n != y.len() || n_pos == 0 || n_pos == n {
            return Err(Error::contract("probe needs samples from both domains"));
        }
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(*row).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let mut probe = LinearProbe {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardise(r)).collect();
        // Each domain carries half the total weight.
        let w_pos = 0.5 / n_pos as f64;
        let w_neg = 0.5 / (n - n_pos) as f64;
        for _ in 0..steps {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (zi, &yi) in z.iter().zip(y) {
                let p = sigmoid(probe.margin_std(zi));
                let (target, w) = if yi { (1.0, w_pos) } else { (0.0, w_neg) };
                let r = w * (p - target);
                for (g, v) in gw.iter_mut().zip(zi) {
                    *g += r * v;
                }
                gb += r;
            }
            for (wt, g) in probe.weights.iter_mut().zip(&gw) {
                *wt -= lr * g;
            }
            probe.bias -= lr * gb;
        }
        Ok(probe)
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn margin_std(&self, z: &[f64]) -> f64 {
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.margin_std(&self.standardise(x)) > 0.0
    }

    /// Mean of the two per-domain error rates.
    pub fn balanced_error(&self, x: &[&[f64]], y: &[bool]) -> f64 {
        balanced_error(y, &x.iter().map(|r| self.predict(r)).collect::<Vec<_>>())
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn balanced_error(truth: &[bool], predicted: &[bool]) -> f64 {
    let mut wrong = [0usize; 2];
    let mut count = [0usize; 2];
    for (&t, &p) in truth.iter().zip(predicted) {
        count[t as usize] += 1;
        wrong[t as usize] += usize::from(t != p);
    }
    let rate = |k: usize| {
        if count[k] == 0 {
            0.0
        } else {
            wrong[k] as f64 / count[k] as f64
        }
    };
    (rate(0) + rate(1)) / 2.0
}

fn rows(t: &Tensor) -> Result<Vec<&[f64]>> {
    let (n, d) = t.dims2()?;
    Ok((0..n).map(|i| &t.data()[i * d..(i + 1) * d]).collect())
}

/// `max(0, 2(1 - 2 err))` for a probe trained on a seeded half of each set
/// and scored on the other half.
pub fn proxy_a_distance(features_a: &Tensor, features_b: &Tensor, seed: u64) -> Result<f64> {
    let a = rows(features_a)?;
    let b = rows(features_b)?;
    if a.len() < MIN_PROBE_SAMPLES || b.len() < MIN_PROBE_SAMPLES {
        return Err(Error::contract(format!(
            "proxy A-distance needs at least {MIN_PROBE_SAMPLES} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a[0].len() != b[0].len() {
        return Err(Error::ShapeMismatch {
            op: "proxy_a_distance",
            left: features_a.shape().to_vec(),
            right: features_b.shape().to_vec(),
        });
    }
    let mut r = rng::rng(derive_seed(seed, &[stream::PROBE]));
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (set, label) in [(&a, false), (&b, true)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut r);
        let half = set.len() / 2;
        for (k, &i) in idx.iter().enumerate() {
            let dst = if k < half { &mut train } else { &mut test };
            dst.0.push(set[i]);
            dst.1.push(label);
        }
    }
    let probe = LinearProbe::fit(&train.0, &train.1, PROBE_STEPS, PROBE_LR)?;
    let err = probe.balanced_error(&test.0, &test.1);
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

/// Symmetric matrix of pairwise proxy A-distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub domain_ids: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    pub seed: u64,
    pub feature_dim: usize,
}

impl DistanceMatrix {
    /// Mean over the entries above the diagonal.
    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.matrix.len();
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..k {
            for j in i + 1..k {
                sum += self.matrix[i][j];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Seed for the probe between sets `i < j`.
pub fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    derive_seed(seed, &[stream::PROBE, i.min(j) as u64, i.max(j) as u64])
}

/// Pairwise distances between feature sets; pairs are probed in parallel
/// with per-pair seeds, so the result does not depend on scheduling.
pub fn pairwise_distances(
    domain_ids: &[usize],
    features: &[Tensor],
    seed: u64,
) -> Result<DistanceMatrix> {
    let k = features.len();
    if k < 2 || domain_ids.len() != k {
        return Err(Error::contract(
            "pairwise distances need at least 2 labelled sets",
        ));
    }
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let values = exec::map(&pairs, |&(i, j)| {
        proxy_a_distance(&features[i], &features[j], pair_seed(seed, i, j))
    });
    let mut matrix = vec![vec![0.0; k]; k];
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        matrix[i][j] = v;
        matrix[j][i] = v;
    }
    Ok(DistanceMatrix {
        domain_ids: domain_ids.to_vec(),
        matrix,
        seed,
        feature_dim: features[0].dims2()?.1,
    })
}

/// Distances measured for one run, before and after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub run_id: String,
    /// Between source domains.
    pub sources_before: DistanceMatrix,
    pub sources_after: DistanceMatrix,
    /// Each source domain against its augmented copy, indexed like
    /// `sources_before.domain_ids`; empty when no policy was applied.
    pub augmented_before: Vec<f64>,
    pub augmented_after: Vec<f64>,
}

impl DistanceReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }
}
