use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Matrix,
    /// First-moment slot (Adam).
    pub m: Matrix,
    /// Second-moment slot (Adam).
    pub v: Matrix,
}

/// Named trainable matrices together with their optimizer slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let (r, c) = value.shape();
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            },
        );
    }

    /// Glorot-style normal initialisation for a `rows x cols` weight.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let scale = (2.0 / (rows + cols) as f64).sqrt();
        self.insert(name, Matrix::randn(rows, cols, scale, rng));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Panics if the parameter does not exist; model code only asks for
    /// names it registered itself.
    pub fn value(&self, name: &str) -> &Matrix {
        match self.entries.get(name) {
            Some(e) => &e.value,
            None => panic!("parameter `{name}` is not registered"),
        }
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds the parameter as a trainable leaf of `g`.
    pub fn leaf(&self, g: &mut Graph, name: &str) -> usize {
        g.param(name, self.value(name))
    }

    /// Values only, without optimizer state.
    pub fn values(&self) -> BTreeMap<String, Matrix> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    /// Clears optimizer slots and the step counter.
    pub fn reset_optimizer(&mut self) {
        for e in self.entries.values_mut() {
            let (r, c) = e.value.shape();
            e.m = Matrix::zeros(r, c);
            e.v = Matrix::zeros(r, c);
        }
        self.step = 0;
    }

    /// Gradients from `grads` restricted to this store, zero-filled for
    /// parameters the graph never touched.
    pub fn gradients_from(&self, grads: &BTreeMap<String, Matrix>) -> BTreeMap<String, Matrix> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let g = grads.get(k).cloned().unwrap_or_else(|| {
                    let (r, c) = e.value.shape();
                    Matrix::zeros(r, c)
                });
                (k.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::Adam,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            rule: UpdateRule::Sgd,
            lr,
            clip_norm: None,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Applies one update to every parameter of `store`.
///
/// `grads` must be keyed exactly like the store.
pub fn optimizer_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Matrix>,
    config: &OptimizerConfig,
) -> Result<()> {
    for name in store.entries.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for `{name}`")))?;
        if g.shape() != store.entries[name].value.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                g.shape(),
                store.entries[name].value.shape()
            )));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !store.entries.contains_key(*k)) {
        return Err(Error::Contract(format!("gradient for unknown parameter `{extra}`")));
    }

    let clip = match config.clip_norm {
        Some(max) => {
            let norm = grads
                .values()
                .flat_map(|g| g.as_slice())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    store.step += 1;
    let t = store.step as i32;
    for (name, entry) in store.entries.iter_mut() {
        let g = &grads[name];
        match config.rule {
            UpdateRule::Sgd => {
                for (p, &gi) in entry.value.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *p -= config.lr * clip * gi;
                }
            }
            UpdateRule::Adam => {
                let bc1 = 1.0 - config.beta1.powi(t);
                let bc2 = 1.0 - config.beta2.powi(t);
                let value = entry.value.as_mut_slice();
                let m = entry.m.as_mut_slice();
                let v = entry.v.as_mut_slice();
                for i in 0..value.len() {
                    let gi = g.as_slice()[i] * clip;
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
                    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    value[i] -= config.lr * mhat / (vhat.sqrt() + config.eps);
                }
            }
        }
    }
    match store.entries.iter().find(|(_, e)| !e.value.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite {
            term: format!("parameter `{name}`"),
            frame: store.step as usize,
        }),
        None => Ok(()),
    }
}
