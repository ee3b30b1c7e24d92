use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{optimizer_step, Graph, NodeId, OptimizerConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::fusion::GateNetwork;
use crate::matrix::Matrix;
use crate::synth::{generate_noise, mix_at_snr, NoiseKind};

use super::SiameseNet;

/// Interference type plus mixing level. The feature axis of each vector
/// plays the role of time for the structured noise kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// `None` means no noise.
    pub snr_db: Option<f64>,
}

impl NoiseModel {
    pub fn apply<R: Rng + ?Sized>(&self, clean: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let noise = generate_noise(self.kind, clean.len(), 1, rng);
        let mixed = mix_at_snr(
            &Matrix::row_vector(clean),
            &Matrix::row_vector(noise.as_slice()),
            self.snr_db,
        )?;
        Ok(mixed.into_vec())
    }

    pub fn apply_rows<R: Rng + ?Sized>(&self, clean: &Matrix, rng: &mut R) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..clean.rows()).map(|i| self.apply(clean.row(i), rng)).collect::<Result<_>>()?;
        Ok(Matrix::from_rows(&rows))
    }
}

/// One-hidden-layer autoencoder trained to undo one noise type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingAutoencoder {
    pub encoder: crate::nn::DenseLayer,
    pub decoder: crate::nn::DenseLayer,
    pub noise: NoiseKind,
}

impl DenoisingAutoencoder {
    pub fn new(name: &str, dim: usize, hidden: usize, noise: NoiseKind) -> Result<Self> {
        use crate::nn::{Activation, DenseLayer};
        if dim == 0 || hidden == 0 {
            return Err(Error::Validation("autoencoder widths must be positive".into()));
        }
        Ok(Self {
            encoder: DenseLayer::new(format!("{name}.enc"), dim, hidden, Activation::Tanh),
            decoder: DenseLayer::new(format!("{name}.dec"), hidden, dim, Activation::Identity),
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.input
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        self.encoder.init(store, rng);
        self.decoder.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        let h = self.encoder.forward(g, store, x)?;
        self.decoder.forward(g, store, h)
    }

    pub fn apply(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        self.decoder.apply(store, &self.encoder.apply(store, x)?)
    }
}

fn mse_graph(g: &mut Graph, a: NodeId, target: &Matrix) -> Result<NodeId> {
    let t = g.constant(target.clone());
    let d = g.sub(a, t)?;
    let s = g.square(d)?;
    g.mean(s)
}

/// Mean squared error between `dae(noisy)` and `clean`.
pub fn dae_loss(dae: &DenoisingAutoencoder, store: &ParameterStore, clean: &Matrix, noisy: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(noisy.clone());
    let out = dae.forward(&mut g, store, x)?;
    let l = mse_graph(&mut g, out, clean)?;
    Ok(g.value(l).item())
}

/// Corrupts `clean` with `noise` and takes one step on the reconstruction
/// error. Returns the loss before the update.
pub fn dae_train_step<R: Rng + ?Sized>(
    dae: &DenoisingAutoencoder,
    store: &mut ParameterStore,
    clean: &Matrix,
    noise: &NoiseModel,
    optimizer: &OptimizerConfig,
    rng: &mut R,
) -> Result<f64> {
    if noise.kind != dae.noise {
        return Err(Error::Contract(format!(
            "autoencoder for {:?} trained on {:?}",
            dae.noise, noise.kind
        )));
    }
    let noisy = noise.apply_rows(clean, rng)?;
    let mut g = Graph::new();
    let x = g.constant(noisy);
    let out = dae.forward(&mut g, store, x)?;
    let loss = mse_graph(&mut g, out, clean)?;
    let value = g.value(loss).item();
    let grads = g.eval_backward(loss)?;
    optimizer_step(store, &store.gradients_from(&grads), optimizer)?;
    Ok(value)
}

/// Autoencoders mixed by a conditional gate that reads the noisy input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedDenoiserBank {
    pub daes: Vec<DenoisingAutoencoder>,
    pub gate: GateNetwork,
}

impl GatedDenoiserBank {
    pub fn new(daes: Vec<DenoisingAutoencoder>, gate_hidden: usize) -> Result<Self> {
        let Some(first) = daes.first() else {
            return Err(Error::Contract("denoiser bank needs at least one autoencoder".into()));
        };
        let dim = first.dim();
        if daes.iter().any(|d| d.dim() != dim) {
            return Err(Error::Validation("autoencoders must share a width".into()));
        }
        if gate_hidden == 0 {
            return Err(Error::Validation("gate width must be positive".into()));
        }
        let gate = GateNetwork::conditional(dim, gate_hidden, daes.len());
        Ok(Self { daes, gate })
    }

    pub fn dim(&self) -> usize {
        self.daes[0].dim()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for d in &self.daes {
            d.init(store, rng);
        }
        self.gate.init(store, rng);
    }

    /// Gate weights (`rows x K`) and every autoencoder output.
    pub fn parts(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let (w, _) = self.gate.forward(g, store, x, None)?;
        let outs = self.daes.iter().map(|d| d.forward(g, store, x)).collect::<Result<_>>()?;
        Ok((w, outs))
    }

    /// `x_hat = sum_k w_k DAE_k(x)` and the weights.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (w, outs) = self.parts(g, store, x)?;
        let mut mix = None;
        for (k, out) in outs.into_iter().enumerate() {
            let wk = g.slice_cols(w, k..k + 1)?;
            let term = g.mul(wk, out)?;
            mix = Some(match mix {
                Some(m) => g.add(m, term)?,
                None => term,
            });
        }
        Ok((mix.expect("non-empty bank"), w))
    }

    /// Gate cross-entropy against the known noise type of each row.
    /// Returns the loss before the update.
    pub fn train_gate_step(
        &self,
        store: &mut ParameterStore,
        noisy: &Matrix,
        noise_ids: &[usize],
        optimizer: &OptimizerConfig,
    ) -> Result<f64> {
        if noise_ids.len() != noisy.rows() || noise_ids.iter().any(|&k| k >= self.daes.len()) {
            return Err(Error::Input("one noise id per row, below the bank size".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(noisy.clone());
        let (w, _) = self.gate.forward(&mut g, store, x, None)?;
        let mut onehot = Matrix::zeros(noisy.rows(), self.daes.len());
        for (r, &k) in noise_ids.iter().enumerate() {
            onehot[(r, k)] = 1.0;
        }
        let t = g.constant(onehot);
        let lw = g.log(w)?;
        let picked = g.mul(t, lw)?;
        let s = g.sum(picked)?;
        let loss = g.scale(s, -1.0 / noisy.rows() as f64)?;
        let value = g.value(loss).item();
        let grads = g.eval_backward(loss)?;
        optimizer_step(store, &store.gradients_from(&grads), optimizer)?;
        Ok(value)
    }
}

/// Direct evaluation of the bank on one vector: `(x_hat, weights)`.
pub fn gated_denoise(bank: &GatedDenoiserBank, store: &ParameterStore, noisy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = crate::fusion::gate_weights(&bank.gate, store, noisy, None)?;
    let mut out = vec![0.0; noisy.len()];
    for (d, &wk) in bank.daes.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(d.apply(store, noisy)?) {
            *o += wk * v;
        }
    }
    Ok((out, w))
}

/// Which side of the denoiser-embedding stack fine-tuning updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Denoisers and gate move; the embedding is held fixed.
    #[default]
    Denoiser,
    Siamese,
    Both,
}

/// `mean_rows |G(clean) - G(bank(noisy))|^2` and its gradients. In
/// [`FinetuneMode::Denoiser`] the network must be frozen and the clean
/// embedding is a constant target.
pub fn finetune_gradients(
    bank: &GatedDenoiserBank,
    bank_store: &ParameterStore,
    net: &SiameseNet,
    net_store: &ParameterStore,
    clean: &Matrix,
    noisy: &Matrix,
    mode: FinetuneMode,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    match (mode, net.frozen) {
        (FinetuneMode::Denoiser, false) => {
            return Err(Error::Contract("fine-tuning the denoisers needs a frozen siamese network".into()));
        }
        (FinetuneMode::Siamese | FinetuneMode::Both, true) => {
            return Err(Error::Contract("this fine-tuning mode updates the siamese network; unfreeze it".into()));
        }
        _ => {}
    }
    if clean.shape() != noisy.shape() {
        return Err(Error::Shape(format!("clean {:?} vs noisy {:?}", clean.shape(), noisy.shape())));
    }
    let mut g = Graph::new();
    let x = g.constant(noisy.clone());
    let (xhat, _) = bank.forward(&mut g, bank_store, x)?;
    let e_hat = net.embed_graph(&mut g, net_store, xhat)?;
    let c = g.constant(clean.clone());
    let e_clean = net.embed_graph(&mut g, net_store, c)?;
    let d = g.sub(e_hat, e_clean)?;
    let d2 = g.row_sq_norm(d)?;
    let loss = g.mean(d2)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            term: "fine-tuning loss".into(),
            frame: 0,
        });
    }
    Ok((value, g.eval_backward(loss)?))
}

/// One fine-tuning update; returns the loss before it.
pub fn finetune_step(
    bank: &GatedDenoiserBank,
    bank_store: &mut ParameterStore,
    net: &SiameseNet,
    net_store: &mut ParameterStore,
    clean: &Matrix,
    noisy: &Matrix,
    mode: FinetuneMode,
    optimizer: &OptimizerConfig,
) -> Result<f64> {
    let (loss, grads) = finetune_gradients(bank, bank_store, net, net_store, clean, noisy, mode)?;
    if mode != FinetuneMode::Siamese {
        optimizer_step(bank_store, &bank_store.gradients_from(&grads), optimizer)?;
    }
    if mode != FinetuneMode::Denoiser {
        optimizer_step(net_store, &net_store.gradients_from(&grads), optimizer)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check_all;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(k: usize, seed: u64) -> (GatedDenoiserBank, ParameterStore) {
        let kinds = [NoiseKind::White, NoiseKind::Modulated, NoiseKind::Interferers { count: 3 }];
        let daes = (0..k)
            .map(|i| DenoisingAutoencoder::new(&format!("dae{i}"), 4, 6, kinds[i]).unwrap())
            .collect();
        let b = GatedDenoiserBank::new(daes, 5).unwrap();
        let mut store = ParameterStore::new();
        b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (b, store)
    }

    #[test]
    fn infinite_snr_is_identity() {
        let nm = NoiseModel {
            kind: NoiseKind::Modulated,
            snr_db: None,
        };
        let x = [0.3, -1.0, 2.0];
        assert_eq!(nm.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), x.to_vec());
    }

    #[test]
    fn single_dae_bank_is_that_dae() {
        let (b, store) = bank(1, 1);
        let x = [0.1, 0.5, -0.3, 0.9];
        let (out, w) = gated_denoise(&b, &store, &x).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(out, b.daes[0].apply(&store, &x).unwrap());
    }

    #[test]
    fn one_hot_gate_selects() {
        let (b, mut store) = bank(3, 2);
        let out = b.gate.out.bias_name();
        let (r, c) = store.value(&b.gate.out.weight_name()).shape();
        *store.value_mut(&b.gate.out.weight_name()).unwrap() = Matrix::zeros(r, c);
        *store.value_mut(&out).unwrap() = Matrix::row_vector(&[-1e4, 1e4, -1e4]);
        let x = [0.2, 0.1, 0.0, -0.4];
        let (y, w) = gated_denoise(&b, &store, &x).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
        assert_eq!(y, b.daes[1].apply(&store, &x).unwrap());
    }

    #[test]
    fn even_gate_averages() {
        let (b, mut store) = bank(2, 3);
        b.gate.out.init_zero(&mut store);
        let x = [0.2, 0.1, 0.0, -0.4];
        let (y, w) = gated_denoise(&b, &store, &x).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let (a, c) = (b.daes[0].apply(&store, &x).unwrap(), b.daes[1].apply(&store, &x).unwrap());
        for i in 0..4 {
            assert!((y[i] - 0.5 * (a[i] + c[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_mixture_matches_direct() {
        let (b, store) = bank(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (y, _) = b.forward(&mut g, &store, xn).unwrap();
        for r in 0..3 {
            let (d, _) = gated_denoise(&b, &store, x.row(r)).unwrap();
            for (a, c) in d.iter().zip(g.value(y).row(r)) {
                assert!((a - c).abs() < 1e-14);
            }
        }
        let s = g.square(y).unwrap();
        let l = g.mean(s).unwrap();
        assert!(finite_diff_check_all(&mut g, l, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn mismatched_noise_rejected() {
        let (b, mut store) = bank(1, 6);
        let nm = NoiseModel {
            kind: NoiseKind::Modulated,
            snr_db: Some(0.0),
        };
        let err = dae_train_step(
            &b.daes[0],
            &mut store,
            &Matrix::filled(2, 4, 0.5),
            &nm,
            &OptimizerConfig::adam(1e-2),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let (b, mut store) = bank(1, 7);
        let nm = NoiseModel {
            kind: NoiseKind::White,
            snr_db: None,
        };
        let clean = Matrix::randn(8, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l: Vec<f64> = (0..3)
            .map(|_| dae_train_step(&b.daes[0], &mut store, &clean, &nm, &OptimizerConfig::sgd(0.0), &mut rng).unwrap())
            .collect();
        assert!(l[0] >= 0.0 && l[0] == l[1] && l[1] == l[2]);
    }

    #[test]
    fn noiseless_dae_learns_identity_on_linear_data() {
        let dae = DenoisingAutoencoder::new("dae", 4, 8, NoiseKind::White).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        dae.init(&mut store, &mut rng);
        let basis = Matrix::randn(2, 4, 0.5, &mut rng);
        let clean = Matrix::randn(64, 2, 1.0, &mut rng).matmul(&basis);
        let nm = NoiseModel {
            kind: NoiseKind::White,
            snr_db: None,
        };
        let opt = OptimizerConfig::adam(1e-2);
        for _ in 0..1500 {
            dae_train_step(&dae, &mut store, &clean, &nm, &opt, &mut rng).unwrap();
        }
        let loss = dae_loss(&dae, &store, &clean, &clean).unwrap();
        assert!(loss < 1e-2, "{loss}");
    }

    #[test]
    fn frozen_siamese_gets_no_gradient() {
        let (b, mut bs) = bank(2, 10);
        let mut net = SiameseNet::new("siam", &[4, 6, 2], 1.0).unwrap();
        let mut ns = ParameterStore::new();
        net.init(&mut ns, &mut ChaCha8Rng::seed_from_u64(11));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let clean = Matrix::randn(5, 4, 0.5, &mut rng);
        let noisy = Matrix::randn(5, 4, 0.5, &mut rng);
        let opt = OptimizerConfig::adam(1e-2);
        assert!(matches!(
            finetune_step(&b, &mut bs, &net, &mut ns, &clean, &noisy, FinetuneMode::Denoiser, &opt),
            Err(Error::Contract(_))
        ));
        net.freeze();
        let (_, grads) = finetune_gradients(&b, &bs, &net, &ns, &clean, &noisy, FinetuneMode::Denoiser).unwrap();
        assert!(ns.gradients_from(&grads).values().all(|g| g.max_abs() == 0.0));
        let before = ns.clone();
        finetune_step(&b, &mut bs, &net, &mut ns, &clean, &noisy, FinetuneMode::Denoiser, &opt).unwrap();
        assert_eq!(before.values(), ns.values());
    }

    #[test]
    fn perfect_denoiser_costs_nothing() {
        let (b, bs) = bank(1, 13);
        let mut net = SiameseNet::new("siam", &[4, 3], 1.0).unwrap();
        let mut ns = ParameterStore::new();
        net.init(&mut ns, &mut ChaCha8Rng::seed_from_u64(14));
        net.freeze();
        let noisy = Matrix::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let rows: Vec<Vec<f64>> = (0..3).map(|r| b.daes[0].apply(&bs, noisy.row(r)).unwrap()).collect();
        let clean = Matrix::from_rows(&rows);
        let (loss, _) = finetune_gradients(&b, &bs, &net, &ns, &clean, &noisy, FinetuneMode::Denoiser).unwrap();
        assert!(loss < 1e-24, "{loss}");
    }
}
