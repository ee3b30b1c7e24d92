use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{OptimizerConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synth::{derive_seed, gen_clusters, rng_for, select_rows, split_indices, ClusterConfig, NoiseKind};

use super::{
    class_distances, dae_train_step, finetune_gradients, finetune_step, gated_denoise, knn_accuracy, train_siamese,
    weighted_center,
    DenoisingAutoencoder, EmbeddingIndex, FinetuneMode, GatedDenoiserBank, NoiseModel, SiameseNet,
    SiameseTrainConfig,
};

/// The four-stage noisy-embedding experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Data layout; its seed is replaced by one derived from `seed`.
    pub clusters: ClusterConfig,
    pub test_fraction: f64,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub margin: f64,
    pub siamese: SiameseTrainConfig,
    /// One autoencoder per entry.
    pub noises: Vec<NoiseModel>,
    pub dae_hidden: usize,
    pub dae_steps: usize,
    pub gate_hidden: usize,
    pub gate_steps: usize,
    pub finetune_steps: usize,
    pub finetune_mode: FinetuneMode,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub k: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let noise = |kind| NoiseModel {
            kind,
            snr_db: Some(-3.0),
        };
        Self {
            clusters: ClusterConfig::default(),
            test_fraction: 0.25,
            embed_hidden: 32,
            embed_dim: 4,
            margin: 1.0,
            siamese: SiameseTrainConfig::default(),
            noises: vec![
                noise(NoiseKind::White),
                noise(NoiseKind::Modulated),
                noise(NoiseKind::Interferers { count: 3 }),
            ],
            dae_hidden: 32,
            dae_steps: 1500,
            gate_hidden: 16,
            gate_steps: 1500,
            finetune_steps: 300,
            finetune_mode: FinetuneMode::Denoiser,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(3e-3),
            k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// kNN accuracy of clean test embeddings.
    pub clean_accuracy: f64,
    /// kNN accuracy when noisy inputs are embedded directly.
    pub noisy_accuracy: f64,
    /// Gated denoising before fine-tuning.
    pub denoised_accuracy_pretrained: f64,
    /// Gated denoising after fine-tuning.
    pub denoised_accuracy: f64,
    /// Queries at the gate-weighted centre of the per-denoiser embeddings.
    pub center_accuracy: f64,
    /// Fraction of noisy test inputs whose largest gate weight names the
    /// true noise type.
    pub gate_accuracy: f64,
    pub intra_distance: f64,
    pub inter_distance: f64,
    pub siamese_loss: Vec<f64>,
    pub dae_final_loss: Vec<f64>,
    pub finetune_loss: Vec<f64>,
    /// Fine-tuning loss on the noisy test set before and after stage 4.
    pub finetune_test_before: f64,
    pub finetune_test_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub net: SiameseNet,
    pub net_store: ParameterStore,
    pub bank: GatedDenoiserBank,
    pub bank_store: ParameterStore,
    pub index: EmbeddingIndex,
}

fn batch<R: Rng + ?Sized>(x: &Matrix, size: usize, rng: &mut R) -> Matrix {
    let idx: Vec<usize> = (0..size.min(x.rows())).map(|_| rng.random_range(0..x.rows())).collect();
    select_rows(x, &idx)
}

/// Noisy copies of `clean` with the noise type of row `r` drawn at random.
fn corrupt<R: Rng + ?Sized>(clean: &Matrix, noises: &[NoiseModel], rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
    let mut rows = Vec::with_capacity(clean.rows());
    let mut ids = Vec::with_capacity(clean.rows());
    for r in 0..clean.rows() {
        let k = rng.random_range(0..noises.len());
        rows.push(noises[k].apply(clean.row(r), rng)?);
        ids.push(k);
    }
    Ok((Matrix::from_rows(&rows), ids))
}

/// Data of one pipeline run, regenerated exactly from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineData {
    pub x_train: Matrix,
    pub y_train: Vec<usize>,
    pub x_test: Matrix,
    pub y_test: Vec<usize>,
    pub noisy_test: Matrix,
    /// Noise type applied to each row of `noisy_test`.
    pub noise_ids: Vec<usize>,
}

pub fn pipeline_data(config: &PipelineConfig) -> Result<PipelineData> {
    if config.noises.is_empty() {
        return Err(Error::Validation("at least one noise model is required".into()));
    }
    let clusters = ClusterConfig {
        seed: derive_seed(config.seed, 1),
        ..config.clusters.clone()
    };
    let (x, y) = gen_clusters(&clusters)?;
    let (train_idx, test_idx) = split_indices(&y, config.test_fraction, &mut rng_for(config.seed, 2));
    let x_test = select_rows(&x, &test_idx);
    let (noisy_test, noise_ids) = corrupt(&x_test, &config.noises, &mut rng_for(config.seed, 7))?;
    Ok(PipelineData {
        x_train: select_rows(&x, &train_idx),
        y_train: train_idx.iter().map(|&i| y[i]).collect(),
        x_test,
        y_test: test_idx.iter().map(|&i| y[i]).collect(),
        noisy_test,
        noise_ids,
    })
}

/// kNN accuracies of a trained pipeline on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEval {
    pub clean_accuracy: f64,
    pub noisy_accuracy: f64,
    pub denoised_accuracy: f64,
    pub center_accuracy: f64,
    pub gate_accuracy: f64,
}

fn denoise_rows(bank: &GatedDenoiserBank, store: &ParameterStore, noisy: &Matrix) -> Result<(Matrix, Vec<Vec<f64>>)> {
    let mut out = Vec::with_capacity(noisy.rows());
    let mut weights = Vec::with_capacity(noisy.rows());
    for r in 0..noisy.rows() {
        let (d, w) = gated_denoise(bank, store, noisy.row(r))?;
        out.push(d);
        weights.push(w);
    }
    Ok((Matrix::from_rows(&out), weights))
}

pub fn evaluate_pipeline(model: &PipelineModel, data: &PipelineData, k: usize) -> Result<PipelineEval> {
    let PipelineModel {
        net,
        net_store,
        bank,
        bank_store,
        index,
    } = model;
    let y = &data.y_test;
    let clean_accuracy = knn_accuracy(index, &net.embed_rows(net_store, &data.x_test)?, y, k)?;
    let noisy_accuracy = knn_accuracy(index, &net.embed_rows(net_store, &data.noisy_test)?, y, k)?;
    let (post, weights) = denoise_rows(bank, bank_store, &data.noisy_test)?;
    let denoised_accuracy = knn_accuracy(index, &net.embed_rows(net_store, &post)?, y, k)?;
    let mut centers = Vec::with_capacity(post.rows());
    let mut gate_hits = 0;
    for (r, w) in weights.iter().enumerate() {
        let per: Vec<Vec<f64>> = bank
            .daes
            .iter()
            .map(|d| net.embed(net_store, &d.apply(bank_store, data.noisy_test.row(r))?))
            .collect::<Result<_>>()?;
        centers.push(weighted_center(&Matrix::from_rows(&per), w)?);
        if crate::fusion::argmax(w) == data.noise_ids[r] {
            gate_hits += 1;
        }
    }
    Ok(PipelineEval {
        clean_accuracy,
        noisy_accuracy,
        denoised_accuracy,
        center_accuracy: knn_accuracy(index, &Matrix::from_rows(&centers), y, k)?,
        gate_accuracy: gate_hits as f64 / data.noise_ids.len().max(1) as f64,
    })
}

/// Stage 1 trains one autoencoder per noise type, stage 2 the gate on known
/// noise types, stage 3 the siamese network on clean data, and stage 4
/// fine-tunes the denoisers through the frozen embedding.
pub fn run_pipeline(config: &PipelineConfig) -> Result<(PipelineReport, PipelineModel)> {
    let data = pipeline_data(config)?;
    let PipelineData {
        x_train,
        y_train,
        x_test,
        y_test,
        noisy_test,
        ..
    } = &data;
    let dim = x_train.cols();

    // Stage 1.
    let daes = config
        .noises
        .iter()
        .enumerate()
        .map(|(k, n)| DenoisingAutoencoder::new(&format!("dae{k}"), dim, config.dae_hidden, n.kind))
        .collect::<Result<Vec<_>>>()?;
    let bank = GatedDenoiserBank::new(daes, config.gate_hidden)?;
    let mut bank_store = ParameterStore::new();
    bank.init(&mut bank_store, &mut rng_for(config.seed, 3));
    let mut rng = rng_for(config.seed, 4);
    let mut dae_final_loss = Vec::with_capacity(bank.daes.len());
    for (dae, noise) in bank.daes.iter().zip(&config.noises) {
        let mut last = 0.0;
        for _ in 0..config.dae_steps {
            let b = batch(x_train, config.batch_size, &mut rng);
            last = dae_train_step(dae, &mut bank_store, &b, noise, &config.optimizer, &mut rng)?;
        }
        dae_final_loss.push(last);
    }

    // Stage 2.
    bank_store.reset_optimizer();
    for _ in 0..config.gate_steps {
        let b = batch(x_train, config.batch_size, &mut rng);
        let (noisy, ids) = corrupt(&b, &config.noises, &mut rng)?;
        bank.train_gate_step(&mut bank_store, &noisy, &ids, &config.optimizer)?;
    }

    // Stage 3.
    let mut net = SiameseNet::new("siam", &[dim, config.embed_hidden, config.embed_dim], config.margin)?;
    let mut net_store = ParameterStore::new();
    net.init(&mut net_store, &mut rng_for(config.seed, 5));
    let siamese_loss = train_siamese(
        &net,
        &mut net_store,
        x_train,
        y_train,
        &SiameseTrainConfig {
            seed: derive_seed(config.seed, 6),
            ..config.siamese.clone()
        },
    )?;
    if config.finetune_mode == FinetuneMode::Denoiser {
        net.freeze();
    }
    let index = EmbeddingIndex::new(net.embed_rows(&net_store, x_train)?, y_train.clone())?;
    let clean_emb = net.embed_rows(&net_store, x_test)?;
    let (intra_distance, inter_distance) = class_distances(&clean_emb, y_test);
    let (pre, _) = denoise_rows(&bank, &bank_store, noisy_test)?;
    let denoised_accuracy_pretrained = knn_accuracy(&index, &net.embed_rows(&net_store, &pre)?, y_test, config.k)?;

    let test_loss = |bank_store: &ParameterStore, net_store: &ParameterStore| -> Result<f64> {
        let eval_net = SiameseNet {
            frozen: true,
            ..net.clone()
        };
        let mode = FinetuneMode::Denoiser;
        Ok(finetune_gradients(&bank, bank_store, &eval_net, net_store, x_test, noisy_test, mode)?.0)
    };
    let finetune_test_before = test_loss(&bank_store, &net_store)?;

    // Stage 4.
    bank_store.reset_optimizer();
    net_store.reset_optimizer();
    let mut finetune_loss = Vec::with_capacity(config.finetune_steps);
    for _ in 0..config.finetune_steps {
        let clean = batch(x_train, config.batch_size, &mut rng);
        let (noisy, _) = corrupt(&clean, &config.noises, &mut rng)?;
        finetune_loss.push(finetune_step(
            &bank,
            &mut bank_store,
            &net,
            &mut net_store,
            &clean,
            &noisy,
            config.finetune_mode,
            &config.optimizer,
        )?);
    }
    let finetune_test_after = test_loss(&bank_store, &net_store)?;
    // The index must follow the embedding if fine-tuning moved it.
    let index = if config.finetune_mode == FinetuneMode::Denoiser {
        index
    } else {
        EmbeddingIndex::new(net.embed_rows(&net_store, x_train)?, y_train.clone())?
    };
    let model = PipelineModel {
        net,
        net_store,
        bank,
        bank_store,
        index,
    };
    let eval = evaluate_pipeline(&model, &data, config.k)?;

    let report = PipelineReport {
        clean_accuracy: eval.clean_accuracy,
        noisy_accuracy: eval.noisy_accuracy,
        denoised_accuracy_pretrained,
        denoised_accuracy: eval.denoised_accuracy,
        center_accuracy: eval.center_accuracy,
        gate_accuracy: eval.gate_accuracy,
        intra_distance,
        inter_distance,
        siamese_loss,
        dae_final_loss,
        finetune_loss,
        finetune_test_before,
        finetune_test_after,
    };
    Ok((report, model))
}
