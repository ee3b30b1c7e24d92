//! Multimodal variational RNN.
//!
//! Latents are split into a shared part `z^s` and one modality-specific part
//! `z^m` per modality. A deterministic recurrence `h` summarises the past;
//! priors are conditioned on `h_{t-1}`, the shared encoder reads every
//! modality and the modality encoders read only their own features, and
//! decoder `m` reads `(z^m, z^s, h_{t-1})` only. Training maximises the
//! reparameterised lower bound with closed-form KL terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::autograd::{optimizer_step, Graph, NodeId, OptimizerConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    gaussian_kl_graph, gaussian_nll_graph, softplus, Activation, DenseLayer, DistributionHead, Gaussian,
    RecurrentCell, SCALE_FLOOR,
};
use crate::statespace::LinearGaussianSSM;
use crate::synth::{derive_seed, ModalSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvrnnConfig {
    pub dims: Vec<usize>,
    pub shared_dim: usize,
    pub specific_dim: usize,
    pub hidden: usize,
    /// Width of the per-modality and latent feature layers.
    pub feature: usize,
    /// Hidden width of each decoder; 0 gives a linear decoder.
    pub decoder_hidden: usize,
    /// Weight of the shared-latent KL (counted once per step).
    pub shared_kl_weight: f64,
    /// One recurrence per latent group instead of a single shared one.
    pub multi_chain: bool,
}

impl Default for MvrnnConfig {
    fn default() -> Self {
        Self {
            dims: vec![8, 8, 8],
            shared_dim: 8,
            specific_dim: 8,
            hidden: 16,
            feature: 16,
            decoder_hidden: 16,
            shared_kl_weight: 1.0,
            multi_chain: false,
        }
    }
}

impl MvrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Validation("MVRNN needs modalities of positive width".into()));
        }
        if self.shared_dim == 0 || self.specific_dim == 0 || self.hidden == 0 || self.feature == 0 {
            return Err(Error::Validation("latent, hidden and feature widths must be positive".into()));
        }
        if !(self.shared_kl_weight >= 0.0) {
            return Err(Error::Validation("shared KL weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-term lower-bound contributions, summed over frames and averaged over
/// samples and sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: Vec<f64>,
    pub kl_specific: Vec<f64>,
    pub kl_shared: f64,
    /// `sum recon - sum kl_specific - shared_kl_weight * kl_shared`.
    pub total: f64,
    /// Smallest per-row KL value seen at any frame.
    pub min_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvrnnModel {
    pub config: MvrnnConfig,
    pub x_features: Vec<DenseLayer>,
    pub z_features: DenseLayer,
    /// One cell, or `M + 1` cells (shared first) in multi-chain mode.
    pub cells: Vec<RecurrentCell>,
    pub prior_shared: DistributionHead,
    pub prior_specific: Vec<DistributionHead>,
    pub enc_shared: DistributionHead,
    pub enc_specific: Vec<DistributionHead>,
    pub dec_hidden: Vec<Option<DenseLayer>>,
    pub decoders: Vec<DistributionHead>,
}

/// Gaussian parameters for every latent group: shared first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParams {
    pub shared: Gaussian,
    pub specific: Vec<Gaussian>,
}

/// Graph nodes of one step.
struct StepNodes {
    recon: Vec<NodeId>,
    kl_specific: Vec<NodeId>,
    kl_shared: NodeId,
    h: Vec<NodeId>,
}

/// Reparameterisation noise for one step.
struct StepNoise {
    shared: Matrix,
    specific: Vec<Matrix>,
}

impl MvrnnModel {
    pub fn new(config: MvrnnConfig) -> Result<Self> {
        config.validate()?;
        let m = config.dims.len();
        let (f, h, ds, dm) = (config.feature, config.hidden, config.shared_dim, config.specific_dim);
        let x_features = config
            .dims
            .iter()
            .enumerate()
            .map(|(i, &d)| DenseLayer::new(format!("mvrnn.fx{i}"), d, f, Activation::Tanh))
            .collect();
        let z_features = DenseLayer::new("mvrnn.fz", ds + m * dm, f, Activation::Tanh);
        let chains = if config.multi_chain { m + 1 } else { 1 };
        let cells = (0..chains)
            .map(|c| RecurrentCell::new(format!("mvrnn.rnn{c}"), m * f + f, h))
            .collect();
        let dec_hidden: Vec<Option<DenseLayer>> = (0..m)
            .map(|i| {
                (config.decoder_hidden > 0).then(|| {
                    DenseLayer::new(
                        format!("mvrnn.dec{i}.h"),
                        dm + ds + h,
                        config.decoder_hidden,
                        Activation::Tanh,
                    )
                })
            })
            .collect();
        let decoders = config
            .dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let input = if config.decoder_hidden > 0 {
                    config.decoder_hidden
                } else {
                    dm + ds + h
                };
                DistributionHead::gaussian(&format!("mvrnn.dec{i}"), input, d)
            })
            .collect();
        Ok(Self {
            prior_shared: DistributionHead::gaussian("mvrnn.prior.s", h, ds),
            prior_specific: (0..m)
                .map(|i| DistributionHead::gaussian(&format!("mvrnn.prior.m{i}"), h, dm))
                .collect(),
            enc_shared: DistributionHead::gaussian("mvrnn.enc.s", m * f + h, ds),
            enc_specific: (0..m)
                .map(|i| DistributionHead::gaussian(&format!("mvrnn.enc.m{i}"), f + h, dm))
                .collect(),
            x_features,
            z_features,
            cells,
            dec_hidden,
            decoders,
            config,
        })
    }

    pub fn modalities(&self) -> usize {
        self.config.dims.len()
    }

    fn heads(&self) -> impl Iterator<Item = &DistributionHead> {
        std::iter::once(&self.prior_shared)
            .chain(&self.prior_specific)
            .chain(std::iter::once(&self.enc_shared))
            .chain(&self.enc_specific)
            .chain(&self.decoders)
    }

    fn dense(&self) -> impl Iterator<Item = &DenseLayer> {
        self.x_features
            .iter()
            .chain(std::iter::once(&self.z_features))
            .chain(self.dec_hidden.iter().flatten())
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for l in self.dense() {
            l.init(store, rng);
        }
        for c in &self.cells {
            c.init(store, rng);
        }
        for h in self.heads() {
            h.init(store, rng);
        }
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        for l in self.dense() {
            l.init_zero(store);
        }
        for c in &self.cells {
            c.init_zero(store);
        }
        for h in self.heads() {
            h.init_zero(store);
        }
    }

    /// Recurrence feeding latent group `group` (0 = shared, `m + 1` =
    /// modality `m`).
    fn chain(&self, group: usize) -> usize {
        if self.config.multi_chain {
            group
        } else {
            0
        }
    }

    fn zero_state(&self, g: &mut Graph, rows: usize) -> Vec<NodeId> {
        (0..self.cells.len())
            .map(|_| g.constant(Matrix::zeros(rows, self.config.hidden)))
            .collect()
    }

    fn noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> StepNoise {
        StepNoise {
            shared: Matrix::randn(rows, self.config.shared_dim, 1.0, rng),
            specific: (0..self.modalities())
                .map(|_| Matrix::randn(rows, self.config.specific_dim, 1.0, rng))
                .collect(),
        }
    }

    fn sample_node(g: &mut Graph, mean: NodeId, std: NodeId, eps: &Matrix) -> Result<NodeId> {
        let e = g.constant(eps.clone());
        let s = g.mul(std, e)?;
        g.add(mean, s)
    }

    fn decoder(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        m: usize,
        zm: NodeId,
        zs: NodeId,
        h: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let input = g.concat(&[zm, zs, h], 1)?;
        let input = match &self.dec_hidden[m] {
            Some(l) => l.forward(g, store, input)?,
            None => input,
        };
        let (mean, std) = self.decoders[m].forward(g, store, input)?;
        Ok((mean, std.expect("gaussian head")))
    }

    fn recurrence(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        fx: &[NodeId],
        z: &[NodeId],
        h: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let zc = g.concat(z, 1)?;
        let fz = self.z_features.forward(g, store, zc)?;
        let mut parts = fx.to_vec();
        parts.push(fz);
        let input = g.concat(&parts, 1)?;
        self.cells
            .iter()
            .zip(h)
            .map(|(c, &hc)| c.forward(g, store, input, hc))
            .collect()
    }

    fn step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: &[NodeId],
        h: &[NodeId],
        noise: &StepNoise,
    ) -> Result<StepNodes> {
        let m = self.modalities();
        if x.len() != m {
            return Err(Error::Contract(format!("{} modalities given, model has {m}", x.len())));
        }
        let fx: Vec<NodeId> = self
            .x_features
            .iter()
            .zip(x)
            .map(|(l, &xi)| l.forward(g, store, xi))
            .collect::<Result<_>>()?;

        let hs = h[self.chain(0)];
        let (mp_s, sp_s) = self.prior_shared.forward(g, store, hs)?;
        let mut enc_in = fx.clone();
        enc_in.push(hs);
        let enc_in = g.concat(&enc_in, 1)?;
        let (mq_s, sq_s) = self.enc_shared.forward(g, store, enc_in)?;
        let (sp_s, sq_s) = (sp_s.expect("gaussian"), sq_s.expect("gaussian"));
        let zs = Self::sample_node(g, mq_s, sq_s, &noise.shared)?;
        let kl_shared = gaussian_kl_graph(g, mq_s, sq_s, mp_s, sp_s)?;

        let mut zm = Vec::with_capacity(m);
        let mut kl_specific = Vec::with_capacity(m);
        let mut recon = Vec::with_capacity(m);
        for i in 0..m {
            let hm = h[self.chain(i + 1)];
            let (mp, sp) = self.prior_specific[i].forward(g, store, hm)?;
            let ein = g.concat(&[fx[i], hm], 1)?;
            let (mq, sq) = self.enc_specific[i].forward(g, store, ein)?;
            let (sp, sq) = (sp.expect("gaussian"), sq.expect("gaussian"));
            let z = Self::sample_node(g, mq, sq, &noise.specific[i])?;
            kl_specific.push(gaussian_kl_graph(g, mq, sq, mp, sp)?);
            let (mx, sx) = self.decoder(g, store, i, z, zs, hm)?;
            let nll = gaussian_nll_graph(g, mx, sx, x[i])?;
            recon.push(g.neg(nll)?);
            zm.push(z);
        }
        let mut zall = vec![zs];
        zall.extend(&zm);
        let h_new = self.recurrence(g, store, &fx, &zall, h)?;
        Ok(StepNodes {
            recon,
            kl_specific,
            kl_shared,
            h: h_new,
        })
    }

    fn check_sequence(&self, seq: &ModalSequence) -> Result<()> {
        if seq.modalities() != self.modalities() {
            return Err(Error::Contract(format!(
                "sequence has {} modalities, model expects {}",
                seq.modalities(),
                self.modalities()
            )));
        }
        for (i, (x, &d)) in seq.x.iter().zip(&self.config.dims).enumerate() {
            if x.cols() != d {
                return Err(Error::Input(format!("modality {i} has width {}, expected {d}", x.cols())));
            }
        }
        if seq.frames() == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        Ok(())
    }

    /// Builds the bound for `seqs` with `samples` trajectories per sequence.
    /// Returns the total node (1x1, per sequence average) and the breakdown.
    fn build_elbo(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        seqs: &[&ModalSequence],
        samples: usize,
        seed: u64,
    ) -> Result<(NodeId, ElboBreakdown)> {
        if samples == 0 {
            return Err(Error::Validation("samples per step must be >= 1".into()));
        }
        if seqs.is_empty() {
            return Err(Error::Contract("no sequences".into()));
        }
        for s in seqs {
            self.check_sequence(s)?;
        }
        let frames = seqs[0].frames();
        if seqs.iter().any(|s| s.frames() != frames) {
            return Err(Error::Input("sequences in a batch must share a length".into()));
        }
        let rows = seqs.len() * samples;
        let m = self.modalities();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = self.zero_state(g, rows);
        let mut recon_acc: Vec<Option<NodeId>> = vec![None; m];
        let mut klm_acc: Vec<Option<NodeId>> = vec![None; m];
        let mut kls_acc: Option<NodeId> = None;
        let mut min_kl = f64::INFINITY;
        let accumulate = |g: &mut Graph, acc: &mut Option<NodeId>, n: NodeId| -> Result<()> {
            *acc = Some(match *acc {
                Some(a) => g.add(a, n)?,
                None => n,
            });
            Ok(())
        };
        for t in 0..frames {
            let x: Vec<NodeId> = (0..m)
                .map(|i| {
                    let d = self.config.dims[i];
                    let mut data = Vec::with_capacity(rows * d);
                    for s in seqs {
                        for _ in 0..samples {
                            data.extend_from_slice(s.frame(i, t));
                        }
                    }
                    g.constant(Matrix::from_vec(rows, d, data))
                })
                .collect();
            let noise = self.noise(rows, &mut rng);
            let step = self.step(g, store, &x, &h, &noise)?;
            let named = std::iter::once(("kl_shared".to_string(), step.kl_shared))
                .chain(step.recon.iter().enumerate().map(|(i, &n)| (format!("recon[{i}]"), n)))
                .chain(step.kl_specific.iter().enumerate().map(|(i, &n)| (format!("kl_specific[{i}]"), n)));
            for (name, n) in named {
                if !g.value(n).is_finite() {
                    return Err(Error::NonFinite { term: name, frame: t });
                }
            }
            for &n in step.kl_specific.iter().chain(std::iter::once(&step.kl_shared)) {
                min_kl = min_kl.min(g.value(n).as_slice().iter().cloned().fold(f64::INFINITY, f64::min));
            }
            for i in 0..m {
                accumulate(g, &mut recon_acc[i], step.recon[i])?;
                accumulate(g, &mut klm_acc[i], step.kl_specific[i])?;
            }
            accumulate(g, &mut kls_acc, step.kl_shared)?;
            h = step.h;
        }
        let mean_of = |g: &mut Graph, n: Option<NodeId>| g.mean(n.expect("at least one frame"));
        let recon: Vec<NodeId> = recon_acc.into_iter().map(|n| mean_of(g, n)).collect::<Result<_>>()?;
        let klm: Vec<NodeId> = klm_acc.into_iter().map(|n| mean_of(g, n)).collect::<Result<_>>()?;
        let kls = mean_of(g, kls_acc)?;
        let mut total = recon[0];
        for &r in &recon[1..] {
            total = g.add(total, r)?;
        }
        for &k in &klm {
            total = g.sub(total, k)?;
        }
        let ks = g.scale(kls, self.config.shared_kl_weight)?;
        total = g.sub(total, ks)?;
        let breakdown = ElboBreakdown {
            recon: recon.iter().map(|&n| g.value(n).item()).collect(),
            kl_specific: klm.iter().map(|&n| g.value(n).item()).collect(),
            kl_shared: g.value(kls).item(),
            total: g.value(total).item(),
            min_kl,
        };
        Ok((total, breakdown))
    }

    /// Lower bound on `log p(x_1..x_T)` for one sequence with `samples`
    /// reparameterised trajectories, seeded by `seed`.
    pub fn elbo_sequence(
        &self,
        store: &ParameterStore,
        seq: &ModalSequence,
        samples: usize,
        seed: u64,
    ) -> Result<ElboBreakdown> {
        let mut g = Graph::new();
        Ok(self.build_elbo(&mut g, store, &[seq], samples, seed)?.1)
    }

    /// Gradient of the negative bound for a minibatch, for verification.
    pub fn elbo_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        seqs: &[&ModalSequence],
        samples: usize,
        seed: u64,
    ) -> Result<NodeId> {
        Ok(self.build_elbo(g, store, seqs, samples, seed)?.0)
    }

    /// One ascent step on the minibatch bound (loss is `-ELBO / T`).
    pub fn train_step(
        &self,
        store: &mut ParameterStore,
        batch: &[&ModalSequence],
        optimizer: &OptimizerConfig,
        samples: usize,
        seed: u64,
    ) -> Result<ElboBreakdown> {
        let mut g = Graph::new();
        let (total, breakdown) = self.build_elbo(&mut g, store, batch, samples, seed)?;
        let frames = batch[0].frames() as f64;
        let loss = g.scale(total, -1.0 / frames)?;
        let grads = g.eval_backward(loss)?;
        optimizer_step(store, &store.gradients_from(&grads), optimizer)?;
        Ok(breakdown)
    }

    /// Gaussian parameters of the priors given `h_prev` (one vector per
    /// recurrence).
    pub fn prior_step(&self, store: &ParameterStore, h_prev: &[Vec<f64>]) -> Result<LatentParams> {
        self.check_h(h_prev)?;
        Ok(LatentParams {
            shared: self.prior_shared.gaussian_params(store, &h_prev[self.chain(0)])?,
            specific: self
                .prior_specific
                .iter()
                .enumerate()
                .map(|(i, head)| head.gaussian_params(store, &h_prev[self.chain(i + 1)]))
                .collect::<Result<_>>()?,
        })
    }

    /// Approximate posterior parameters given the current frame of every
    /// modality.
    pub fn encode_step(&self, store: &ParameterStore, x: &[Vec<f64>], h_prev: &[Vec<f64>]) -> Result<LatentParams> {
        self.check_h(h_prev)?;
        if x.len() != self.modalities() {
            return Err(Error::Contract(format!(
                "{} modalities given, model has {}",
                x.len(),
                self.modalities()
            )));
        }
        let fx: Vec<Vec<f64>> = self
            .x_features
            .iter()
            .zip(x)
            .map(|(l, xi)| l.apply(store, xi))
            .collect::<Result<_>>()?;
        let mut shared_in: Vec<f64> = fx.concat();
        shared_in.extend_from_slice(&h_prev[self.chain(0)]);
        Ok(LatentParams {
            shared: self.enc_shared.gaussian_params(store, &shared_in)?,
            specific: (0..self.modalities())
                .map(|i| {
                    let mut v = fx[i].clone();
                    v.extend_from_slice(&h_prev[self.chain(i + 1)]);
                    self.enc_specific[i].gaussian_params(store, &v)
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Emission distribution of every modality; decoder `m` reads only
    /// `z_specific[m]`, `z_shared` and its recurrence.
    pub fn decode_step(
        &self,
        store: &ParameterStore,
        z_specific: &[Vec<f64>],
        z_shared: &[f64],
        h_prev: &[Vec<f64>],
    ) -> Result<Vec<Gaussian>> {
        self.check_h(h_prev)?;
        if z_specific.len() != self.modalities()
            || z_specific.iter().any(|z| z.len() != self.config.specific_dim)
            || z_shared.len() != self.config.shared_dim
        {
            return Err(Error::Input("latent dimensions do not match the model".into()));
        }
        (0..self.modalities())
            .map(|i| {
                let mut v = z_specific[i].clone();
                v.extend_from_slice(z_shared);
                v.extend_from_slice(&h_prev[self.chain(i + 1)]);
                let v = match &self.dec_hidden[i] {
                    Some(l) => l.apply(store, &v)?,
                    None => v,
                };
                self.decoders[i].gaussian_params(store, &v)
            })
            .collect()
    }

    /// Advances every recurrence given the frame and the sampled latents.
    pub fn recurrence_update(
        &self,
        store: &ParameterStore,
        h_prev: &[Vec<f64>],
        x: &[Vec<f64>],
        z_shared: &[f64],
        z_specific: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_h(h_prev)?;
        let mut input: Vec<f64> = self
            .x_features
            .iter()
            .zip(x)
            .map(|(l, xi)| l.apply(store, xi))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let mut z = z_shared.to_vec();
        for zm in z_specific {
            z.extend_from_slice(zm);
        }
        input.extend(self.z_features.apply(store, &z)?);
        self.cells
            .iter()
            .zip(h_prev)
            .map(|(c, h)| c.step(store, &input, h))
            .collect()
    }

    fn check_h(&self, h: &[Vec<f64>]) -> Result<()> {
        if h.len() != self.cells.len() || h.iter().any(|v| v.len() != self.config.hidden) {
            return Err(Error::Input(format!(
                "expected {} hidden vectors of width {}",
                self.cells.len(),
                self.config.hidden
            )));
        }
        Ok(())
    }

    pub fn initial_hidden(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.config.hidden]; self.cells.len()]
    }

    /// Ancestral sampling of `frames` steps.
    pub fn generate(&self, store: &ParameterStore, frames: usize, seed: u64) -> Result<Generated> {
        if frames == 0 {
            return Err(Error::Input("cannot generate an empty sequence".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.modalities();
        let mut h = self.initial_hidden();
        let mut out = Generated {
            x: self.config.dims.iter().map(|&d| Matrix::zeros(frames, d)).collect(),
            z_shared: Matrix::zeros(frames, self.config.shared_dim),
            z_specific: (0..m).map(|_| Matrix::zeros(frames, self.config.specific_dim)).collect(),
        };
        let draw = |g: &Gaussian, rng: &mut ChaCha8Rng| -> Vec<f64> {
            g.mean
                .iter()
                .zip(&g.std)
                .map(|(mu, s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    mu + s * e
                })
                .collect()
        };
        for t in 0..frames {
            let prior = self.prior_step(store, &h)?;
            let zs = draw(&prior.shared, &mut rng);
            let zm: Vec<Vec<f64>> = prior.specific.iter().map(|p| draw(p, &mut rng)).collect();
            let emissions = self.decode_step(store, &zm, &zs, &h)?;
            let x: Vec<Vec<f64>> = emissions.iter().map(|e| draw(e, &mut rng)).collect();
            out.z_shared.row_mut(t).copy_from_slice(&zs);
            for i in 0..m {
                out.z_specific[i].row_mut(t).copy_from_slice(&zm[i]);
                out.x[i].row_mut(t).copy_from_slice(&x[i]);
            }
            h = self.recurrence_update(store, &h, &x, &zs, &zm)?;
        }
        Ok(out)
    }

    /// The generative model as a linear-Gaussian state-space model, when it
    /// is one: priors must ignore `h` (zero weights, so `z_t` is i.i.d.),
    /// decoders must be linear with zero `h` weights and constant scale.
    /// Returns the model over the centred latents `[z^s; z^1; ...]` and the
    /// offset to subtract from the concatenated observations.
    pub fn linear_gaussian_view(&self, store: &ParameterStore) -> Result<(LinearGaussianSSM, DVector<f64>)> {
        if self.config.decoder_hidden != 0 {
            return Err(Error::Contract("linear view needs linear decoders".into()));
        }
        let (ds, dm, hd) = (self.config.shared_dim, self.config.specific_dim, self.config.hidden);
        let m = self.modalities();
        let n = ds + m * dm;
        let d: usize = self.config.dims.iter().sum();
        let zero = |name: String| -> Result<()> {
            if store.value(&name).max_abs() != 0.0 {
                return Err(Error::Contract(format!("`{name}` must be zero for the linear view")));
            }
            Ok(())
        };
        let head_layers = |h: &DistributionHead| -> (DenseLayer, DenseLayer) {
            match h {
                DistributionHead::Gaussian { mean, pre_scale } => (mean.clone(), pre_scale.clone()),
                DistributionHead::Bernoulli(_) => unreachable!("gaussian heads only"),
            }
        };
        let mut prior_mean = Vec::with_capacity(n);
        let mut prior_var = Vec::with_capacity(n);
        for head in std::iter::once(&self.prior_shared).chain(&self.prior_specific) {
            let (mu, sd) = head_layers(head);
            zero(mu.weight_name())?;
            zero(sd.weight_name())?;
            prior_mean.extend_from_slice(store.value(&mu.bias_name()).as_slice());
            prior_var.extend(
                store
                    .value(&sd.bias_name())
                    .as_slice()
                    .iter()
                    .map(|&b| (softplus(b) + SCALE_FLOOR).powi(2)),
            );
        }
        let mut c = DMatrix::<f64>::zeros(d, n);
        let mut bias = DVector::<f64>::zeros(d);
        let mut obs_var = Vec::with_capacity(d);
        let mut row = 0;
        for (i, head) in self.decoders.iter().enumerate() {
            let (mu, sd) = head_layers(head);
            zero(sd.weight_name())?;
            let w = store.value(&mu.weight_name());
            let di = self.config.dims[i];
            for r in 0..di {
                for k in 0..hd {
                    if w[(r, dm + ds + k)] != 0.0 {
                        return Err(Error::Contract(format!("decoder {i} reads the recurrence")));
                    }
                }
                for k in 0..dm {
                    c[(row + r, ds + i * dm + k)] = w[(r, k)];
                }
                for k in 0..ds {
                    c[(row + r, k)] = w[(r, dm + k)];
                }
                bias[row + r] = store.value(&mu.bias_name()).as_slice()[r];
            }
            obs_var.extend(
                store
                    .value(&sd.bias_name())
                    .as_slice()
                    .iter()
                    .map(|&b| (softplus(b) + SCALE_FLOOR).powi(2)),
            );
            row += di;
        }
        let offset = &c * DVector::from_vec(prior_mean) + bias;
        let gamma = DMatrix::from_diagonal(&DVector::from_vec(prior_var));
        let ssm = LinearGaussianSSM::new(
            DMatrix::zeros(n, n),
            c,
            gamma.clone(),
            DMatrix::from_diagonal(&DVector::from_vec(obs_var)),
            DVector::zeros(n),
            gamma,
        )?;
        Ok((ssm, offset))
    }
}

/// Output of [`MvrnnModel::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub x: Vec<Matrix>,
    pub z_shared: Matrix,
    pub z_specific: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvrnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for MvrnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            samples: 1,
            optimizer: OptimizerConfig::adam(3e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvrnnEpoch {
    pub epoch: usize,
    /// Mean per-sequence bound on the training set with fixed noise.
    pub elbo: f64,
    pub kl_shared: f64,
    pub kl_specific: f64,
    /// Smallest KL value seen during the epoch's updates.
    pub min_kl: f64,
}

/// Mean bound over `seqs` with noise seeded from `seed` (fixed across
/// calls, so it is comparable between epochs).
pub fn evaluate_elbo(
    model: &MvrnnModel,
    store: &ParameterStore,
    seqs: &[ModalSequence],
    samples: usize,
    seed: u64,
) -> Result<ElboBreakdown> {
    if seqs.is_empty() {
        return Err(Error::Contract("no sequences to evaluate".into()));
    }
    let m = model.modalities();
    let mut acc = ElboBreakdown {
        recon: vec![0.0; m],
        kl_specific: vec![0.0; m],
        kl_shared: 0.0,
        total: 0.0,
        min_kl: f64::INFINITY,
    };
    for (i, s) in seqs.iter().enumerate() {
        let e = model.elbo_sequence(store, s, samples, derive_seed(seed, i as u64))?;
        for k in 0..m {
            acc.recon[k] += e.recon[k];
            acc.kl_specific[k] += e.kl_specific[k];
        }
        acc.kl_shared += e.kl_shared;
        acc.total += e.total;
        acc.min_kl = acc.min_kl.min(e.min_kl);
    }
    let n = seqs.len() as f64;
    acc.recon.iter_mut().chain(acc.kl_specific.iter_mut()).for_each(|v| *v /= n);
    acc.kl_shared /= n;
    acc.total /= n;
    Ok(acc)
}

/// Minibatch training; entry 0 of the log is the untrained model.
pub fn train_mvrnn(
    model: &MvrnnModel,
    store: &mut ParameterStore,
    train: &[ModalSequence],
    config: &MvrnnTrainConfig,
) -> Result<Vec<MvrnnEpoch>> {
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let eval_seed = derive_seed(config.seed, u64::MAX);
    let snapshot = |store: &ParameterStore, epoch: usize, min_kl: f64| -> Result<MvrnnEpoch> {
        let e = evaluate_elbo(model, store, train, config.samples, eval_seed)?;
        Ok(MvrnnEpoch {
            epoch,
            elbo: e.total,
            kl_shared: e.kl_shared,
            kl_specific: e.kl_specific.iter().sum(),
            min_kl: min_kl.min(e.min_kl),
        })
    };
    let mut log = vec![snapshot(store, 0, f64::INFINITY)?];
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut min_kl = f64::INFINITY;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ModalSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let b = model.train_step(
                store,
                &batch,
                &config.optimizer,
                config.samples,
                derive_seed(config.seed ^ 0x5eed, step),
            )?;
            min_kl = min_kl.min(b.min_kl);
            step += 1;
        }
        log.push(snapshot(store, epoch, min_kl)?);
    }
    Ok(log)
}
