//! Distance-based co-learning regularizer.
//!
//! The first `n` units of a designated hidden layer of every expert are
//! pulled toward their shared mean:
//! `L = sum_m lambda_m * ||z*_m - mean||^2`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// How the shared mean is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MeanMode {
    /// Per-sample mean across experts, differentiated through.
    Batch,
    /// Per-sample mean across experts, treated as a constant target.
    BatchDetached,
    /// Exponential moving average of minibatch means (`state = decay * state +
    /// (1 - decay) * batch`), treated as a constant target.
    MovingAverage { decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoLearnConfig {
    /// Index of the designated feature layer in each expert's stack;
    /// `None` picks the last feature layer.
    pub layer: Option<usize>,
    /// Number of leading units that are shared; `None` uses half the width.
    pub shared_units: Option<usize>,
    /// Per-modality weights; a single entry is broadcast to all experts.
    pub lambda: Vec<f64>,
    pub mean: MeanMode,
}

impl Default for CoLearnConfig {
    fn default() -> Self {
        Self {
            layer: None,
            shared_units: None,
            lambda: vec![0.1],
            mean: MeanMode::Batch,
        }
    }
}

impl CoLearnConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda: vec![lambda],
            ..Self::default()
        }
    }

    /// Weights expanded to `experts` entries.
    pub fn lambdas(&self, experts: usize) -> Result<Vec<f64>> {
        let l = match self.lambda.len() {
            1 => vec![self.lambda[0]; experts],
            n if n == experts => self.lambda.clone(),
            n => {
                return Err(Error::Validation(format!(
                    "{n} co-learning weights for {experts} experts"
                )))
            }
        };
        if l.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Validation("co-learning weights must be >= 0".into()));
        }
        Ok(l)
    }

    pub fn units(&self, width: usize) -> Result<usize> {
        let n = self.shared_units.unwrap_or((width / 2).max(1));
        if n == 0 || n > width {
            return Err(Error::Validation(format!("shared units {n} vs layer width {width}")));
        }
        Ok(n)
    }
}

/// Loss for one sample: `z_star[m]` are the shared units of expert `m`.
///
/// With `target = None` the shared mean is the average of the `z_star`;
/// otherwise `target` (a moving average) is used. Returns the loss and the
/// mean that was used.
pub fn colearn_loss(z_star: &[Vec<f64>], lambda: &[f64], target: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    let n = z_star.first().map_or(0, Vec::len);
    if z_star.iter().any(|z| z.len() != n) {
        return Err(Error::Contract("shared-unit vectors differ in length".into()));
    }
    if lambda.len() != z_star.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} experts",
            lambda.len(),
            z_star.len()
        )));
    }
    let mean = match target {
        Some(t) => {
            if t.len() != n {
                return Err(Error::Contract("target length differs from shared units".into()));
            }
            t.to_vec()
        }
        None => (0..n)
            .map(|i| z_star.iter().map(|z| z[i]).sum::<f64>() / z_star.len() as f64)
            .collect(),
    };
    let loss = z_star
        .iter()
        .zip(lambda)
        .map(|(z, l)| l * z.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok((loss, mean))
}

/// `state * decay + (1 - decay) * batch_mean`.
pub fn update_shared_mean(state: &[f64], batch_mean: &[f64], decay: f64) -> Vec<f64> {
    state
        .iter()
        .zip(batch_mean)
        .map(|(s, b)| decay * s + (1.0 - decay) * b)
        .collect()
}

/// Graph form: `z_star[m]` are `rows x n` nodes. Returns the row-averaged
/// loss (1x1) and the per-row mean node.
pub fn colearn_loss_graph(
    g: &mut Graph,
    z_star: &[NodeId],
    lambda: &[f64],
    mode: MeanMode,
    target: Option<&Matrix>,
) -> Result<(NodeId, NodeId)> {
    if z_star.is_empty() || lambda.len() != z_star.len() {
        return Err(Error::Contract("co-learning needs one weight per expert".into()));
    }
    let shape = g.shape(z_star[0]);
    if z_star.iter().any(|&z| g.shape(z) != shape) {
        return Err(Error::Contract("shared-unit blocks differ in shape".into()));
    }
    let mean = match (mode, target) {
        (MeanMode::MovingAverage { .. }, Some(t)) => {
            if t.shape() != (1, shape.1) {
                return Err(Error::Contract("moving mean has wrong width".into()));
            }
            g.constant(t.clone())
        }
        (MeanMode::MovingAverage { .. }, None) => {
            return Err(Error::Contract("moving-average mode needs a target".into()))
        }
        (MeanMode::Batch, _) => {
            let mut acc = z_star[0];
            for &z in &z_star[1..] {
                acc = g.add(acc, z)?;
            }
            g.scale(acc, 1.0 / z_star.len() as f64)?
        }
        (MeanMode::BatchDetached, _) => {
            let mut m = g.value(z_star[0]).clone();
            for &z in &z_star[1..] {
                m.add_assign(g.value(z));
            }
            g.constant(m.scale(1.0 / z_star.len() as f64))
        }
    };
    let mut total: Option<NodeId> = None;
    for (&z, &l) in z_star.iter().zip(lambda) {
        let d = g.sub(z, mean)?;
        let sq = g.row_sq_norm(d)?;
        let term = g.scale(sq, l)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let loss = g.mean(total.expect("at least one expert"))?;
    Ok((loss, mean))
}
