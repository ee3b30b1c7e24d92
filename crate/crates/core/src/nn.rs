//! Differentiable building blocks shared by every model: dense layers, a
//! GRU-style recurrent cell, Bernoulli / diagonal-Gaussian heads and the
//! closed-form likelihood terms they feed.
//!
//! Batched graph evaluation uses the row convention: a batch is a
//! `batch x features` matrix and a dense layer computes `X W^T + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Floor added to every softplus scale.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply_graph(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `activation(W x + b)` with `W: out x in` stored as `<name>.w` and
/// `b: 1 x out` stored as `<name>.b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, input: usize, output: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            activation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        store.init_weight(&self.weight_name(), self.output, self.input, rng);
        store.insert(self.bias_name(), Matrix::zeros(1, self.output));
    }

    /// Zero weights and biases.
    pub fn init_zero(&self, store: &mut ParameterStore) {
        store.insert(self.weight_name(), Matrix::zeros(self.output, self.input));
        store.insert(self.bias_name(), Matrix::zeros(1, self.output));
    }

    /// Pre-activation `X W^T + b`.
    pub fn linear(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        let cols = g.shape(x).1;
        if cols != self.input {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} inputs, got {cols}",
                self.name, self.input
            )));
        }
        let w = store.leaf(g, &self.weight_name());
        let b = store.leaf(g, &self.bias_name());
        let wt = g.transpose(w)?;
        let xw = g.matmul(x, wt)?;
        g.add(xw, b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        let z = self.linear(g, store, x)?;
        self.activation.apply_graph(g, z)
    }

    /// Like [`DenseLayer::forward`] with the parameters entered as constants,
    /// so no gradient reaches them.
    pub fn forward_frozen(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        let cols = g.shape(x).1;
        if cols != self.input {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} inputs, got {cols}",
                self.name, self.input
            )));
        }
        let wt = g.constant(store.value(&self.weight_name()).transpose());
        let b = g.constant(store.value(&self.bias_name()).clone());
        let xw = g.matmul(x, wt)?;
        let z = g.add(xw, b)?;
        self.activation.apply_graph(g, z)
    }

    /// Direct (graph-free) evaluation on one vector.
    pub fn apply(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} inputs, got {}",
                self.name,
                self.input,
                x.len()
            )));
        }
        let w = store.value(&self.weight_name());
        let b = store.value(&self.bias_name());
        Ok((0..self.output)
            .map(|o| {
                let z: f64 = w.row(o).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[(0, o)];
                self.activation.apply(z)
            })
            .collect())
    }
}

/// Free-function form of [`DenseLayer::apply`].
pub fn dense_apply(layer: &DenseLayer, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
    layer.apply(store, x)
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
}

impl DenseStack {
    /// Layers `sizes[0] -> sizes[1] -> ...`, all with `activation`.
    pub fn new(name: &str, sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(format!("{name}.l{i}"), w[0], w[1], activation))
            .collect();
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// Output of every layer, first to last.
    pub fn forward_all(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, store, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        Ok(*self.forward_all(g, store, x)?.last().unwrap_or(&x))
    }

    pub fn forward_frozen(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward_frozen(g, store, h)?;
        }
        Ok(h)
    }

    pub fn apply(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.apply(store, &h)?;
        }
        Ok(h)
    }
}

/// GRU-style cell: `h_t = h_{t-1} + u * (c - h_{t-1})` with
/// `u = sigmoid(x W_u^T + h U_u^T + b_u)`, `r = sigmoid(x W_r^T + h U_r^T + b_r)`
/// and `c = tanh(x W_c^T + (r * h) U_c^T + b_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["u", "r", "c"];

impl RecurrentCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn param_name(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for gate in GATES {
            store.init_weight(&self.param_name("w", gate), self.hidden, self.input, rng);
            store.init_weight(&self.param_name("u", gate), self.hidden, self.hidden, rng);
            store.insert(self.param_name("b", gate), Matrix::zeros(1, self.hidden));
        }
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        for gate in GATES {
            store.insert(self.param_name("w", gate), Matrix::zeros(self.hidden, self.input));
            store.insert(self.param_name("u", gate), Matrix::zeros(self.hidden, self.hidden));
            store.insert(self.param_name("b", gate), Matrix::zeros(1, self.hidden));
        }
    }

    fn affine(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        gate: &str,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let w = store.leaf(g, &self.param_name("w", gate));
        let u = store.leaf(g, &self.param_name("u", gate));
        let b = store.leaf(g, &self.param_name("b", gate));
        let wt = g.transpose(w)?;
        let ut = g.transpose(u)?;
        let xw = g.matmul(x, wt)?;
        let hu = g.matmul(h, ut)?;
        let s = g.add(xw, hu)?;
        g.add(s, b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId, h: NodeId) -> Result<NodeId> {
        if g.shape(x).1 != self.input || g.shape(h).1 != self.hidden {
            return Err(Error::Shape(format!(
                "cell `{}` expects ({}, {}), got ({}, {})",
                self.name,
                self.input,
                self.hidden,
                g.shape(x).1,
                g.shape(h).1
            )));
        }
        let u_pre = self.affine(g, store, "u", x, h)?;
        let u = g.sigmoid(u_pre)?;
        let r_pre = self.affine(g, store, "r", x, h)?;
        let r = g.sigmoid(r_pre)?;
        let rh = g.mul(r, h)?;
        let c_pre = self.affine(g, store, "c", x, rh)?;
        let c = g.tanh(c_pre)?;
        let diff = g.sub(c, h)?;
        let step = g.mul(u, diff)?;
        g.add(h, step)
    }

    /// Direct evaluation of one step on vectors.
    pub fn step(&self, store: &ParameterStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input || h.len() != self.hidden {
            return Err(Error::Shape(format!(
                "cell `{}` expects ({}, {}), got ({}, {})",
                self.name,
                self.input,
                self.hidden,
                x.len(),
                h.len()
            )));
        }
        let affine = |gate: &str, hin: &[f64]| -> Vec<f64> {
            let w = store.value(&self.param_name("w", gate));
            let u = store.value(&self.param_name("u", gate));
            let b = store.value(&self.param_name("b", gate));
            (0..self.hidden)
                .map(|k| {
                    let xw: f64 = w.row(k).iter().zip(x).map(|(a, b)| a * b).sum();
                    let hu: f64 = u.row(k).iter().zip(hin).map(|(a, b)| a * b).sum();
                    xw + hu + b[(0, k)]
                })
                .collect()
        };
        let u: Vec<f64> = affine("u", h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = affine("r", h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = affine("c", &rh).into_iter().map(f64::tanh).collect();
        Ok((0..self.hidden).map(|k| h[k] + u[k] * (c[k] - h[k])).collect())
    }
}

/// Free-function form of [`RecurrentCell::step`].
pub fn recurrent_step(cell: &RecurrentCell, store: &ParameterStore, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    cell.step(store, x, h_prev)
}

/// Diagonal Gaussian parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        Self { mean, std }
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Shape("gaussian mean/std length mismatch".into()));
        }
        if let Some(&s) = self.std.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Input(format!("gaussian scale must be positive, got {s}")));
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(-gaussian_nll(self, x)?)
    }
}

/// Parameterisation of a predictive head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistributionHead {
    Bernoulli(DenseLayer),
    /// `mean` is linear; `scale = softplus(pre_scale) + SCALE_FLOOR`.
    Gaussian { mean: DenseLayer, pre_scale: DenseLayer },
}

impl DistributionHead {
    pub fn bernoulli(name: &str, input: usize) -> Self {
        DistributionHead::Bernoulli(DenseLayer::new(format!("{name}.p"), input, 1, Activation::Sigmoid))
    }

    pub fn gaussian(name: &str, input: usize, output: usize) -> Self {
        DistributionHead::Gaussian {
            mean: DenseLayer::new(format!("{name}.mu"), input, output, Activation::Identity),
            pre_scale: DenseLayer::new(format!("{name}.sd"), input, output, Activation::Identity),
        }
    }

    pub fn layers(&self) -> Vec<&DenseLayer> {
        match self {
            DistributionHead::Bernoulli(l) => vec![l],
            DistributionHead::Gaussian { mean, pre_scale } => vec![mean, pre_scale],
        }
    }

    pub fn input(&self) -> usize {
        self.layers()[0].input
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for l in self.layers() {
            l.init(store, rng);
        }
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        for l in self.layers() {
            l.init_zero(store);
        }
    }

    /// Bernoulli: one `rows x 1` probability node. Gaussian: `(mean, std)`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        match self {
            DistributionHead::Bernoulli(l) => Ok((l.forward(g, store, x)?, None)),
            DistributionHead::Gaussian { mean, pre_scale } => {
                let mu = mean.forward(g, store, x)?;
                let pre = pre_scale.forward(g, store, x)?;
                let sp = g.softplus(pre)?;
                let sd = g.add_scalar(sp, SCALE_FLOOR)?;
                Ok((mu, Some(sd)))
            }
        }
    }

    pub fn gaussian_params(&self, store: &ParameterStore, x: &[f64]) -> Result<Gaussian> {
        match self {
            DistributionHead::Gaussian { mean, pre_scale } => Ok(Gaussian {
                mean: mean.apply(store, x)?,
                std: pre_scale
                    .apply(store, x)?
                    .into_iter()
                    .map(|v| softplus(v) + SCALE_FLOOR)
                    .collect(),
            }),
            DistributionHead::Bernoulli(_) => Err(Error::Contract("not a gaussian head".into())),
        }
    }

    pub fn bernoulli_prob(&self, store: &ParameterStore, x: &[f64]) -> Result<f64> {
        match self {
            DistributionHead::Bernoulli(l) => Ok(l.apply(store, x)?[0]),
            DistributionHead::Gaussian { .. } => Err(Error::Contract("not a bernoulli head".into())),
        }
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn bernoulli_nll(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean Bernoulli NLL of a `rows x 1` probability node against labels.
///
/// Inside the graph the clamp is realised as the affine squash
/// `PROB_CLAMP + (1 - 2 PROB_CLAMP) p`, which keeps the loss differentiable.
pub fn bernoulli_nll_graph(g: &mut Graph, p: NodeId, labels: &[f64]) -> Result<NodeId> {
    let per_row = bernoulli_nll_rows(g, p, labels)?;
    g.mean(per_row)
}

/// Per-row Bernoulli NLL, `rows x 1`.
pub fn bernoulli_nll_rows(g: &mut Graph, p: NodeId, labels: &[f64]) -> Result<NodeId> {
    if g.shape(p) != (labels.len(), 1) {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs {} labels",
            g.shape(p),
            labels.len()
        )));
    }
    let squashed = g.scale(p, 1.0 - 2.0 * PROB_CLAMP)?;
    let q = g.add_scalar(squashed, PROB_CLAMP)?;
    let lp = g.log(q)?;
    let omq = g.one_minus(q)?;
    let lq = g.log(omq)?;
    let y = g.constant(Matrix::column_vector(labels));
    let omy = g.constant(Matrix::column_vector(
        &labels.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
    ));
    let a = g.mul(y, lp)?;
    let b = g.mul(omy, lq)?;
    let s = g.add(a, b)?;
    g.neg(s)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Negative log-density of `x` under the diagonal Gaussian `q`.
pub fn gaussian_nll(q: &Gaussian, x: &[f64]) -> Result<f64> {
    q.validate()?;
    if x.len() != q.dim() {
        return Err(Error::Shape(format!("x has {} dims, gaussian {}", x.len(), q.dim())));
    }
    Ok(q.mean
        .iter()
        .zip(&q.std)
        .zip(x)
        .map(|((m, s), xi)| HALF_LN_2PI + s.ln() + (xi - m).powi(2) / (2.0 * s * s))
        .sum())
}

/// Closed-form `KL(q || p)` summed over dimensions.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    if q.dim() != p.dim() {
        return Err(Error::Shape("KL between gaussians of different dims".into()));
    }
    Ok((0..q.dim())
        .map(|i| {
            let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Both terms at once: `nll` of `x` under `q` (if given) and `KL(q || p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTerms {
    pub nll: Option<f64>,
    pub kl: f64,
}

pub fn gaussian_nll_kl(q: &Gaussian, p: &Gaussian, x: Option<&[f64]>) -> Result<GaussianTerms> {
    Ok(GaussianTerms {
        nll: x.map(|x| gaussian_nll(q, x)).transpose()?,
        kl: gaussian_kl(q, p)?,
    })
}

/// Per-row Gaussian NLL, `rows x 1`.
pub fn gaussian_nll_graph(g: &mut Graph, mean: NodeId, std: NodeId, x: NodeId) -> Result<NodeId> {
    let d = g.shape(mean).1 as f64;
    let diff = g.sub(x, mean)?;
    let d2 = g.square(diff)?;
    let var = g.square(std)?;
    let two_var = g.scale(var, 2.0)?;
    let quad = g.div(d2, two_var)?;
    let ls = g.log(std)?;
    let per = g.add(quad, ls)?;
    let rows = g.sum_rows(per)?;
    g.add_scalar(rows, HALF_LN_2PI * d)
}

/// Per-row closed-form `KL(q || p)`, `rows x 1`.
pub fn gaussian_kl_graph(
    g: &mut Graph,
    mean_q: NodeId,
    std_q: NodeId,
    mean_p: NodeId,
    std_p: NodeId,
) -> Result<NodeId> {
    let d = g.shape(mean_q).1 as f64;
    let lp = g.log(std_p)?;
    let lq = g.log(std_q)?;
    let log_ratio = g.sub(lp, lq)?;
    let vq = g.square(std_q)?;
    let dm = g.sub(mean_q, mean_p)?;
    let dm2 = g.square(dm)?;
    let num = g.add(vq, dm2)?;
    let vp = g.square(std_p)?;
    let den = g.scale(vp, 2.0)?;
    let frac = g.div(num, den)?;
    let per = g.add(log_ratio, frac)?;
    let rows = g.sum_rows(per)?;
    g.add_scalar(rows, -0.5 * d)
}
