use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Interference added to a modality's features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Stationary white Gaussian noise.
    White,
    /// Broadband noise under a slowly varying random envelope with bursts
    /// (non-stationary wideband, casino-like).
    Modulated,
    /// Equal-power sum of `count` independent structured interferers
    /// (multi-talker babble analog).
    Interferers { count: usize },
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn power(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>() / m.len().max(1) as f64
}

/// One structured interferer: an AR(1) latent pushed through a random
/// tanh map, then normalised to unit power.
fn interferer<R: Rng + ?Sized>(frames: usize, dim: usize, rng: &mut R) -> Matrix {
    let latent_dim = 3;
    let a = Matrix::randn(dim, latent_dim, 1.0, rng);
    let rho: f64 = rng.random_range(0.7..0.95);
    let mut z = vec![0.0; latent_dim];
    let mut out = Matrix::zeros(frames, dim);
    for t in 0..frames {
        for zi in z.iter_mut() {
            *zi = rho * *zi + (1.0 - rho * rho).sqrt() * normal(rng);
        }
        for d in 0..dim {
            let s: f64 = (0..latent_dim).map(|k| a[(d, k)] * z[k]).sum();
            out[(t, d)] = s.tanh();
        }
    }
    let p = power(&out).max(1e-12);
    out.scale(1.0 / p.sqrt())
}

/// Draws a `frames x dim` noise matrix of the given kind.
pub fn generate_noise<R: Rng + ?Sized>(kind: NoiseKind, frames: usize, dim: usize, rng: &mut R) -> Matrix {
    match kind {
        NoiseKind::White => Matrix::randn(frames, dim, 1.0, rng),
        NoiseKind::Modulated => {
            let freq = rng.random_range(0.02..0.12);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut out = Matrix::zeros(frames, dim);
            for t in 0..frames {
                let mut env = 1.0 + 0.8 * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
                if rng.random_bool(0.1) {
                    env += rng.random_range(1.0..3.0);
                }
                for d in 0..dim {
                    out[(t, d)] = env * normal(rng);
                }
            }
            out
        }
        NoiseKind::Interferers { count } => {
            let mut out = Matrix::zeros(frames, dim);
            for _ in 0..count.max(1) {
                out.add_assign(&interferer(frames, dim, rng));
            }
            out
        }
    }
}

/// Rescales `noise` so that `10 log10(P_clean / P_noise) = snr_db` and adds
/// it to `clean`. `snr_db = None` means infinite SNR (clean returned as is).
pub fn mix_at_snr(clean: &Matrix, noise: &Matrix, snr_db: Option<f64>) -> Result<Matrix> {
    if clean.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "clean {:?} vs noise {:?}",
            clean.shape(),
            noise.shape()
        )));
    }
    let Some(snr_db) = snr_db else {
        return Ok(clean.clone());
    };
    let pc = power(clean);
    let pn = power(noise);
    if pc <= 0.0 {
        return Err(Error::Contract("clean signal has zero power".into()));
    }
    if pn <= 0.0 {
        return Err(Error::Contract(format!(
            "zero-power noise cannot reach finite SNR {snr_db} dB"
        )));
    }
    let gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.zip_map(noise, |c, n| c + gain * n))
}
