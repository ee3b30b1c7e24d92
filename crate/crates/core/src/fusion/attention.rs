use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Bilinear attention over a bounded window of past hidden states:
/// `e_k = q W^a h_k^T`, `a = softmax(e)`, `c = sum_k a_k h_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttention {
    pub name: String,
    pub dim: usize,
    pub window: usize,
}

impl TemporalAttention {
    pub fn new(name: impl Into<String>, dim: usize, window: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            window: window.max(1),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.wa", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        store.insert(self.weight_name(), Matrix::randn(self.dim, self.dim, 0.1, rng));
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        store.insert(self.weight_name(), Matrix::zeros(self.dim, self.dim));
    }

    /// Batched form: `query` and each key are `rows x dim`; returns the
    /// context (`rows x dim`) and the weights (`rows x keys`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        query: NodeId,
        keys: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        if keys.is_empty() {
            return Err(Error::Contract("temporal attention over an empty window".into()));
        }
        let wa = store.leaf(g, &self.weight_name());
        let qw = g.matmul(query, wa)?;
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            let prod = g.mul(qw, k)?;
            scores.push(g.sum_rows(prod)?);
        }
        let e = g.concat(&scores, 1)?;
        let a = g.softmax(e)?;
        let mut ctx: Option<NodeId> = None;
        for (i, &k) in keys.iter().enumerate() {
            let ai = g.slice_cols(a, i..i + 1)?;
            let term = g.mul(ai, k)?;
            ctx = Some(match ctx {
                Some(c) => g.add(c, term)?,
                None => term,
            });
        }
        Ok((ctx.expect("nonempty keys"), a))
    }
}

/// Context vector for one query over `keys`.
pub fn temporal_attend(
    att: &TemporalAttention,
    store: &ParameterStore,
    query: &[f64],
    keys: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Contract("temporal attention over an empty window".into()));
    }
    for v in std::iter::once(query).chain(keys.iter().map(Vec::as_slice)) {
        if v.len() != att.dim {
            return Err(Error::Dimension {
                node: 0,
                op: "temporal_attend",
                detail: format!("vector of length {} for attention dim {}", v.len(), att.dim),
            });
        }
    }
    let mut g = Graph::new();
    let q = g.constant(Matrix::row_vector(query));
    let k: Vec<NodeId> = keys.iter().map(|k| g.constant(Matrix::row_vector(k))).collect();
    let (ctx, _) = att.forward(&mut g, store, q, &k)?;
    Ok(g.value(ctx).as_slice().to_vec())
}
