//! Similarity embeddings: SNE, a siamese contrastive network, denoising
//! autoencoders mixed by a gate, and nearest-neighbour lookup.

mod denoise;
mod pipeline;
mod siamese;
mod sne;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use denoise::{
    dae_loss, dae_train_step, finetune_gradients, finetune_step, gated_denoise, DenoisingAutoencoder, FinetuneMode,
    GatedDenoiserBank, NoiseModel,
};
pub use pipeline::{
    evaluate_pipeline, pipeline_data, run_pipeline, PipelineConfig, PipelineData, PipelineEval, PipelineModel, PipelineReport,
};
pub use siamese::{contrastive_loss, contrastive_loss_graph, train_siamese, SiameseNet, SiameseTrainConfig};
pub use sne::{sne_affinities, sne_cost_grad, sne_cost_graph, sne_embed, sne_insert, Sigma, SneConfig, SneResult};

/// Labelled embedded points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub points: Matrix,
    pub labels: Vec<usize>,
}

impl EmbeddingIndex {
    pub fn new(points: Matrix, labels: Vec<usize>) -> Result<Self> {
        if points.rows() != labels.len() {
            return Err(Error::Input(format!("{} points, {} labels", points.rows(), labels.len())));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Majority label among the `k` nearest points. Ties go to the label with
/// the smaller mean distance among its neighbours, then the smaller id.
pub fn knn_classify(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<usize> {
    if index.is_empty() {
        return Err(Error::Contract("nearest-neighbour index is empty".into()));
    }
    if k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    if query.len() != index.points.cols() {
        return Err(Error::Input(format!(
            "query has width {}, index has {}",
            query.len(),
            index.points.cols()
        )));
    }
    let mut order: Vec<(f64, usize)> = (0..index.len())
        .map(|i| (distance(index.points.row(i), query), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
    for &(d, i) in order.iter().take(k) {
        let e = votes.entry(index.labels[i]).or_default();
        e.0 += 1;
        e.1 += d;
    }
    let best = votes
        .into_iter()
        .map(|(label, (n, total))| (label, n, total / n as f64))
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .expect("k >= 1");
    Ok(best.0)
}

/// Fraction of rows of `queries` whose kNN label equals `labels`.
pub fn knn_accuracy(index: &EmbeddingIndex, queries: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if queries.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Input("one label per query, at least one query".into()));
    }
    let mut hits = 0;
    for (r, &y) in labels.iter().enumerate() {
        if knn_classify(index, queries.row(r), k)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// `sum_k w_k p_k / sum_k w_k` over the rows `p_k` of `points`.
pub fn weighted_center(points: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if weights.len() != points.rows() || !(total > 0.0) {
        return Err(Error::Input("one positive-sum weight per point".into()));
    }
    let mut c = vec![0.0; points.cols()];
    for (r, &w) in weights.iter().enumerate() {
        for (ci, v) in c.iter_mut().zip(points.row(r)) {
            *ci += w * v / total;
        }
    }
    Ok(c)
}

/// Mean Euclidean distance between same-label and different-label pairs.
pub fn class_distances(points: &Matrix, labels: &[usize]) -> (f64, f64) {
    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..points.rows() {
        for j in i + 1..points.rows() {
            let d = distance(points.row(i), points.row(j));
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}
