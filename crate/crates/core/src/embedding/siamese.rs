use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{optimizer_step, Graph, NodeId, OptimizerConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, DenseLayer, DenseStack};

/// Added under the square root of dissimilar-pair distances so the
/// gradient stays finite at zero distance.
const DIST_EPS: f64 = 1e-18;

/// Shared embedding `G_W` applied to both members of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseNet {
    pub encoder: DenseStack,
    pub margin: f64,
    /// Set once training is done; frozen nets enter graphs as constants.
    pub frozen: bool,
}

/// `(1 - y) D^2 + y max(0, m - D)^2` with `y = 0` for similar pairs.
pub fn contrastive_loss(distance: f64, dissimilar: bool, margin: f64) -> f64 {
    if dissimilar {
        (margin - distance).max(0.0).powi(2)
    } else {
        distance * distance
    }
}

/// Mean contrastive loss over paired rows of `e1` and `e2`.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    e1: NodeId,
    e2: NodeId,
    dissimilar: &[bool],
    margin: f64,
) -> Result<NodeId> {
    let rows = g.shape(e1).0;
    if dissimilar.len() != rows {
        return Err(Error::Input(format!("{} labels for {rows} pairs", dissimilar.len())));
    }
    let diff = g.sub(e1, e2)?;
    let d2 = g.row_sq_norm(diff)?;
    let d2e = g.add_scalar(d2, DIST_EPS)?;
    let d = g.sqrt(d2e)?;
    let nd = g.neg(d)?;
    let gap = g.add_scalar(nd, margin)?;
    let hinge = g.relu(gap)?;
    let neg = g.square(hinge)?;
    let y = g.constant(Matrix::column_vector(
        &dissimilar.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>(),
    ));
    let omy = g.one_minus(y)?;
    let a = g.mul(omy, d2)?;
    let b = g.mul(y, neg)?;
    let per = g.add(a, b)?;
    g.mean(per)
}

impl SiameseNet {
    /// Tanh hidden layers and a linear output, `sizes = [in, ..., out]`.
    pub fn new(name: &str, sizes: &[usize], margin: f64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Validation("siamese encoder needs positive input and output widths".into()));
        }
        if !(margin > 0.0) {
            return Err(Error::Validation("margin must be > 0".into()));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Tanh };
                DenseLayer::new(format!("{name}.l{i}"), w[0], w[1], act)
            })
            .collect();
        Ok(Self {
            encoder: DenseStack { layers },
            margin,
            frozen: false,
        })
    }

    pub fn input(&self) -> usize {
        self.encoder.input()
    }

    pub fn output(&self) -> usize {
        self.encoder.output()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        self.encoder.init(store, rng);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn embed_graph(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        if self.frozen {
            self.encoder.forward_frozen(g, store, x)
        } else {
            self.encoder.forward(g, store, x)
        }
    }

    pub fn embed(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.apply(store, x)
    }

    /// Embeds every row of `x`.
    pub fn embed_rows(&self, store: &ParameterStore, x: &Matrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| self.embed(store, x.row(i))).collect::<Result<_>>()?;
        Ok(Matrix::from_rows(&rows))
    }

    pub fn distance(&self, store: &ParameterStore, x1: &[f64], x2: &[f64]) -> Result<f64> {
        let (a, b) = (self.embed(store, x1)?, self.embed(store, x2)?);
        Ok(a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
    }

    pub fn pair_loss(&self, store: &ParameterStore, x1: &[f64], x2: &[f64], dissimilar: bool) -> Result<f64> {
        Ok(contrastive_loss(self.distance(store, x1, x2)?, dissimilar, self.margin))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiameseTrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for SiameseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            pairs_per_epoch: 256,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 0,
        }
    }
}

/// Balanced pairs: even positions similar, odd positions dissimilar.
fn sample_pairs<R: Rng + ?Sized>(labels: &[usize], count: usize, rng: &mut R) -> Result<Vec<(usize, usize, bool)>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let by_class: Vec<Vec<usize>> = (0..classes)
        .map(|k| (0..labels.len()).filter(|&i| labels[i] == k).collect())
        .collect();
    let usable: Vec<usize> = (0..classes).filter(|&k| by_class[k].len() >= 2).collect();
    if usable.is_empty() || by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(Error::Input("pairs need two classes and a class with two points".into()));
    }
    let mut pairs = Vec::with_capacity(count);
    for p in 0..count {
        if p % 2 == 0 {
            let members = &by_class[*usable.choose(rng).expect("non-empty")];
            let picked: Vec<&usize> = members.choose_multiple(rng, 2).collect();
            pairs.push((*picked[0], *picked[1], false));
        } else {
            loop {
                let i = rng.random_range(0..labels.len());
                let j = rng.random_range(0..labels.len());
                if labels[i] != labels[j] {
                    pairs.push((i, j, true));
                    break;
                }
            }
        }
    }
    Ok(pairs)
}

/// Minibatch training on random pairs; returns the mean loss per epoch.
pub fn train_siamese(
    net: &SiameseNet,
    store: &mut ParameterStore,
    x: &Matrix,
    labels: &[usize],
    config: &SiameseTrainConfig,
) -> Result<Vec<f64>> {
    if net.frozen {
        return Err(Error::Contract("cannot train a frozen siamese network".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::Input(format!("{} rows, {} labels", x.rows(), labels.len())));
    }
    if config.batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let pairs = sample_pairs(labels, config.pairs_per_epoch, &mut rng)?;
        let mut total = 0.0;
        for chunk in pairs.chunks(config.batch_size) {
            let a: Vec<&[f64]> = chunk.iter().map(|p| x.row(p.0)).collect();
            let b: Vec<&[f64]> = chunk.iter().map(|p| x.row(p.1)).collect();
            let y: Vec<bool> = chunk.iter().map(|p| p.2).collect();
            let mut g = Graph::new();
            let xa = g.constant(Matrix::from_rows(&a));
            let xb = g.constant(Matrix::from_rows(&b));
            let ea = net.embed_graph(&mut g, store, xa)?;
            let eb = net.embed_graph(&mut g, store, xb)?;
            let loss = contrastive_loss_graph(&mut g, ea, eb, &y, net.margin)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "contrastive loss".into(),
                    frame: 0,
                });
            }
            total += value * chunk.len() as f64;
            let grads = g.eval_backward(loss)?;
            optimizer_step(store, &store.gradients_from(&grads), &config.optimizer)?;
        }
        log.push(total / pairs.len().max(1) as f64);
    }
    Ok(log)
}
