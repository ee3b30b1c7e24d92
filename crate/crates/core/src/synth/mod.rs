//! Seedable generator of labeled multimodal sequences.
//!
//! A binary activity label follows a two-state Markov chain. A shared
//! content latent tracks the label with lag and noise; each modality adds a
//! private style latent and maps both through a fixed random
//! linear-plus-tanh emission. The audio analog is mixed with interference
//! in every frame, and the video analogs (image, motion) get one corrupted
//! segment per sequence. Everything is a pure function of the config seed.

mod clusters;
mod io;
mod noise;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use clusters::{gen_clusters, select_rows, split_indices, ClusterConfig};
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION};
pub use noise::{generate_noise, mix_at_snr, NoiseKind};

/// SplitMix64 finaliser used to derive independent per-stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub dim: usize,
    /// Scale of the content latent in the emission.
    pub gain: f64,
    /// Std of i.i.d. observation noise added after the emission.
    pub obs_noise: f64,
    /// Interference mixed in at `snr_db` over all frames.
    pub interference: Option<NoiseKind>,
    pub snr_db: Option<f64>,
}

impl ModalityConfig {
    pub fn clean(name: &str, dim: usize, gain: f64, obs_noise: f64) -> Self {
        Self {
            name: name.to_string(),
            dim,
            gain,
            obs_noise,
            interference: None,
            snr_db: None,
        }
    }
}

/// Where the corrupted segment of a sequence lies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SegmentLaw {
    /// No corruption.
    None,
    /// Length uniform in `[min, max]` frames, start uniform over valid offsets.
    Uniform { min: usize, max: usize },
    /// Frames `start..=end` (zero-based, inclusive).
    Fixed { start: usize, end: usize },
}

impl SegmentLaw {
    /// Samples a frame range within `0..frames`.
    pub fn sample<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Result<Range<usize>> {
        match *self {
            SegmentLaw::None => Ok(0..0),
            SegmentLaw::Uniform { min, max } => {
                if min > max || max > frames {
                    return Err(Error::Validation(format!(
                        "segment law [{min}, {max}] outside [0, {frames}]"
                    )));
                }
                let len = rng.random_range(min..=max);
                if len == 0 {
                    return Ok(0..0);
                }
                let start = rng.random_range(0..=frames - len);
                Ok(start..start + len)
            }
            SegmentLaw::Fixed { start, end } => {
                if start > end || end >= frames {
                    return Err(Error::Validation(format!(
                        "fixed segment [{start}, {end}] outside {frames} frames"
                    )));
                }
                Ok(start..end + 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Modalities sharing the corrupted segment (the two video analogs).
    pub modalities: Vec<usize>,
    pub segment: SegmentLaw,
    /// Magnitude of the brightness-like offset applied inside the segment.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub id: String,
    pub sequences: usize,
    pub frames: usize,
    pub modalities: Vec<ModalityConfig>,
    /// P(off -> on) per frame.
    pub p_on: f64,
    /// P(on -> off) per frame.
    pub p_off: f64,
    /// P(y_1 = 1); `None` starts from the stationary distribution.
    pub initial_on: Option<f64>,
    pub content_dim: usize,
    /// AR coefficient of the content latent toward the label mean.
    pub content_smoothing: f64,
    pub content_noise: f64,
    pub style_dim: usize,
    pub style_rho: f64,
    pub corruption: CorruptionConfig,
    /// train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            id: "corrupted-av".to_string(),
            sequences: 200,
            frames: 75,
            modalities: vec![
                ModalityConfig {
                    interference: Some(NoiseKind::Modulated),
                    snr_db: Some(-5.0),
                    ..ModalityConfig::clean("audio", 8, 1.5, 0.1)
                },
                ModalityConfig::clean("image", 8, 0.9, 0.35),
                ModalityConfig::clean("motion", 8, 0.9, 0.35),
            ],
            p_on: 0.04,
            p_off: 0.04,
            initial_on: None,
            content_dim: 2,
            content_smoothing: 0.5,
            content_noise: 0.25,
            style_dim: 2,
            style_rho: 0.9,
            corruption: CorruptionConfig {
                modalities: vec![1, 2],
                segment: SegmentLaw::Uniform { min: 20, max: 30 },
                level: 1.5,
            },
            split: [0.7, 0.2, 0.1],
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Validation("frames must be >= 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Validation("at least one modality is required".into()));
        }
        if self.modalities.iter().any(|m| m.dim == 0) {
            return Err(Error::Validation("modality dims must be >= 1".into()));
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|&s| s < 0.0) {
            return Err(Error::Validation(format!("split ratios {:?} must sum to 1", self.split)));
        }
        for p in [self.p_on, self.p_off] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("transition probability {p} outside [0,1]")));
            }
        }
        if let Some(p) = self.initial_on {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("initial_on {p} outside [0,1]")));
            }
        }
        if let Some(&m) = self.corruption.modalities.iter().find(|&&m| m >= self.modalities.len()) {
            return Err(Error::Validation(format!("corrupted modality {m} does not exist")));
        }
        if let SegmentLaw::Uniform { min, max } = self.corruption.segment {
            if min > max || max > self.frames {
                return Err(Error::Validation("corruption segment law outside [0, T]".into()));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim).collect()
    }

    /// Stationary P(y = 1) of the label chain.
    pub fn stationary_on(&self) -> f64 {
        let s = self.p_on + self.p_off;
        if s == 0.0 {
            self.initial_on.unwrap_or(0.5)
        } else {
            self.p_on / s
        }
    }
}

/// One synchronized multimodal recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalSequence {
    /// Per-modality `frames x dim` features.
    pub x: Vec<Matrix>,
    /// Activity label per frame.
    pub y: Vec<u8>,
    /// Corruption mask per modality and frame.
    pub masks: Vec<Vec<bool>>,
    pub seed: u64,
    pub scenario: String,
}

impl ModalSequence {
    pub fn frames(&self) -> usize {
        self.y.len()
    }

    pub fn modalities(&self) -> usize {
        self.x.len()
    }

    pub fn frame(&self, m: usize, t: usize) -> &[f64] {
        self.x[m].row(t)
    }

    /// Frames `t+1-len ..= t` of modality `m`, concatenated oldest first;
    /// frames before the start repeat frame 0.
    pub fn window(&self, m: usize, t: usize, len: usize) -> Vec<f64> {
        let d = self.x[m].cols();
        let mut out = Vec::with_capacity(len * d);
        for k in (0..len).rev() {
            let src = t.saturating_sub(k);
            out.extend_from_slice(self.x[m].row(src));
        }
        out
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<ModalSequence>,
    pub val: Vec<ModalSequence>,
    pub test: Vec<ModalSequence>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &ModalSequence> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Fixed random emission maps shared by every sequence of a scenario.
struct Emission {
    content: Matrix,
    style: Matrix,
    bias: Vec<f64>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn emissions(config: &ScenarioConfig) -> Vec<Emission> {
    let mut rng = rng_for(config.seed, 0);
    config
        .modalities
        .iter()
        .map(|m| Emission {
            content: Matrix::randn(m.dim, config.content_dim, 1.0, &mut rng),
            style: Matrix::randn(m.dim, config.style_dim, 0.6, &mut rng),
            bias: (0..m.dim).map(|_| 0.2 * normal(&mut rng)).collect(),
        })
        .collect()
}

/// Samples the label chain.
pub fn sample_labels<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Vec<u8> {
    let start = config.initial_on.unwrap_or_else(|| config.stationary_on());
    let mut y = Vec::with_capacity(config.frames);
    let mut on = rng.random_bool(start.clamp(0.0, 1.0));
    for t in 0..config.frames {
        if t > 0 {
            on = if on {
                !rng.random_bool(config.p_off)
            } else {
                rng.random_bool(config.p_on)
            };
        }
        y.push(u8::from(on));
    }
    y
}

fn generate_sequence(config: &ScenarioConfig, maps: &[Emission], index: usize) -> Result<ModalSequence> {
    let seed = derive_seed(config.seed, index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = config.frames;
    let y = sample_labels(config, &mut rng);

    let a = config.content_smoothing;
    let mut content = Matrix::zeros(t_len, config.content_dim);
    let mut s = vec![0.0; config.content_dim];
    for t in 0..t_len {
        let target = if y[t] == 1 { 1.0 } else { -1.0 };
        for (k, sk) in s.iter_mut().enumerate() {
            let prev = if t == 0 { target } else { *sk };
            *sk = a * prev + (1.0 - a) * target + config.content_noise * normal(&mut rng);
            content[(t, k)] = *sk;
        }
    }

    let mut x = Vec::with_capacity(config.modalities.len());
    for (mc, map) in config.modalities.iter().zip(maps) {
        let rho = config.style_rho;
        let mut u = vec![0.0; config.style_dim];
        for ui in u.iter_mut() {
            *ui = normal(&mut rng);
        }
        let mut clean = Matrix::zeros(t_len, mc.dim);
        for t in 0..t_len {
            if t > 0 {
                for ui in u.iter_mut() {
                    *ui = rho * *ui + (1.0 - rho * rho).sqrt() * normal(&mut rng);
                }
            }
            for d in 0..mc.dim {
                let c: f64 = (0..config.content_dim)
                    .map(|k| map.content[(d, k)] * content[(t, k)])
                    .sum();
                let st: f64 = (0..config.style_dim).map(|k| map.style[(d, k)] * u[k]).sum();
                clean[(t, d)] =
                    (mc.gain * c + st + map.bias[d]).tanh() + mc.obs_noise * normal(&mut rng);
            }
        }
        let features = match mc.interference {
            Some(kind) => {
                let n = generate_noise(kind, t_len, mc.dim, &mut rng);
                mix_at_snr(&clean, &n, mc.snr_db)?
            }
            None => clean,
        };
        x.push(features);
    }

    let mut seq = ModalSequence {
        masks: vec![vec![false; t_len]; x.len()],
        x,
        y,
        seed,
        scenario: config.id.clone(),
    };
    let segment = config.corruption.segment.sample(t_len, &mut rng)?;
    for &m in &config.corruption.modalities {
        apply_corruption(&mut seq, m, segment.clone(), config.corruption.level, &mut rng);
    }
    Ok(seq)
}

/// Replaces frames `segment` of modality `m` with an offset plus scaled
/// noise (a brightness patch analog) and records the mask.
pub fn apply_corruption<R: Rng + ?Sized>(
    seq: &mut ModalSequence,
    m: usize,
    segment: Range<usize>,
    level: f64,
    rng: &mut R,
) {
    if segment.is_empty() {
        return;
    }
    let dim = seq.x[m].cols();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let offsets: Vec<f64> = (0..dim)
        .map(|_| sign * level * rng.random_range(0.7..1.3))
        .collect();
    for t in segment {
        for (d, off) in offsets.iter().enumerate() {
            seq.x[m][(t, d)] = off + 0.5 * normal(rng);
        }
        seq.masks[m][t] = true;
    }
}

/// Corrupts one contiguous segment of modality `m` drawn from `law`.
pub fn corrupt_segment(
    seq: &ModalSequence,
    m: usize,
    law: &SegmentLaw,
    level: f64,
    seed: u64,
) -> Result<ModalSequence> {
    if m >= seq.modalities() {
        return Err(Error::Input(format!("modality {m} does not exist")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segment = law.sample(seq.frames(), &mut rng)?;
    let mut out = seq.clone();
    apply_corruption(&mut out, m, segment, level, &mut rng);
    Ok(out)
}

/// Generates every sequence of the scenario and splits them train/val/test.
pub fn gen_scenario(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let maps = emissions(config);
    let mut seqs = (0..config.sequences)
        .map(|i| generate_sequence(config, &maps, i))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng_for(config.seed, u64::MAX));
    let n = seqs.len();
    let n_val = (config.split[1] * n as f64).round() as usize;
    let n_test = (config.split[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);

    let mut slots: Vec<Option<ModalSequence>> = seqs.drain(..).map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<ModalSequence> {
        idx.iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(Dataset { train, val, test })
}
