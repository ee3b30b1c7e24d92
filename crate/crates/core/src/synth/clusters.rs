use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::rng_for;

/// Labelled point clouds for the embedding experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of the class centres.
    pub separation: f64,
    /// Within-class standard deviation before the warp.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 60,
            dim: 16,
            separation: 1.0,
            spread: 0.25,
            seed: 0,
        }
    }
}

/// Points `tanh(A (c_k + spread * e))` for class centre `c_k`, with one
/// random mixing matrix `A` shared by every class. Rows are grouped by class.
pub fn gen_clusters(config: &ClusterConfig) -> Result<(Matrix, Vec<usize>)> {
    if config.classes == 0 || config.per_class == 0 || config.dim == 0 {
        return Err(Error::Validation("cluster counts and dimension must be positive".into()));
    }
    if !(config.separation > 0.0) || !(config.spread >= 0.0) {
        return Err(Error::Validation("separation must be > 0 and spread >= 0".into()));
    }
    let d = config.dim;
    let mut rng = rng_for(config.seed, 0xC1);
    let mix = Matrix::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let centres = Matrix::randn(config.classes, d, config.separation, &mut rng);
    let n = config.classes * config.per_class;
    let mut x = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for k in 0..config.classes {
        for i in 0..config.per_class {
            let raw: Vec<f64> = (0..d)
                .map(|j| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    centres[(k, j)] + config.spread * e
                })
                .collect();
            let row = x.row_mut(k * config.per_class + i);
            for (r, out) in row.iter_mut().enumerate() {
                *out = (0..d).map(|j| mix[(r, j)] * raw[j]).sum::<f64>().tanh();
            }
            labels.push(k);
        }
    }
    Ok((x, labels))
}

/// Deterministic split of row indices into train and test, stratified by
/// label, with `test_fraction` of each class held out.
pub fn split_indices<R: Rng + ?Sized>(labels: &[usize], test_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        let held = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..held]);
        train.extend_from_slice(&idx[held..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Rows of `x` at `idx`.
pub fn select_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| x.row(i)).collect();
    Matrix::from_rows(&rows)
}
