use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::PROB_CLAMP;
use crate::synth::ModalSequence;

use super::{FrameBatch, FusionModel};

/// Smallest term kept when every expert assigns zero likelihood to a frame.
const RESP_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub iterations: usize,
    /// Gradient steps on the expected complete-data objective per iteration.
    pub m_steps: usize,
    /// Initial step size; adapted by backtracking.
    pub step_size: f64,
    pub max_halvings: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            m_steps: 5,
            step_size: 0.5,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmLog {
    /// Observed-data log-likelihood before the first iteration and after
    /// each iteration.
    pub loglik: Vec<f64>,
    /// Frames whose responsibilities had to be renormalised after clamping.
    pub clamp_events: usize,
    pub accepted_steps: usize,
}

/// `r_m ∝ w_m p_m(y)`, normalised over `m`. The flag reports whether the
/// terms underflowed and were clamped before renormalising.
pub fn responsibilities(weights: &[f64], probs: &[f64], y: u8) -> (Vec<f64>, bool) {
    let terms: Vec<f64> = weights
        .iter()
        .zip(probs)
        .map(|(w, p)| w * if y == 1 { *p } else { 1.0 - p })
        .collect();
    let total: f64 = terms.iter().sum();
    if total > 0.0 && total.is_finite() {
        return (terms.iter().map(|t| t / total).collect(), false);
    }
    let clamped: Vec<f64> = terms.iter().map(|t| t.max(RESP_FLOOR)).collect();
    let total: f64 = clamped.iter().sum();
    (clamped.iter().map(|t| t / total).collect(), true)
}

/// Expert likelihoods are squashed into `[PROB_CLAMP, 1 - PROB_CLAMP]`, as
/// in gradient training.
fn squash(p: f64) -> f64 {
    PROB_CLAMP + (1.0 - 2.0 * PROB_CLAMP) * p
}

fn observed_loglik(w: &Matrix, p: &Matrix, labels: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let mix: f64 = (0..w.cols())
            .map(|m| {
                let q = squash(p[(r, m)]);
                w[(r, m)] * if y > 0.5 { q } else { 1.0 - q }
            })
            .sum();
        ll += mix.ln();
    }
    ll
}

/// `-Q / N` with `Q = sum_t sum_m r_tm [ln w_m + ln p_m(y_t)]`.
fn neg_expected(
    g: &mut Graph,
    model: &FusionModel,
    store: &ParameterStore,
    batch: &FrameBatch,
    resp: &Matrix,
) -> Result<(NodeId, NodeId, NodeId)> {
    let nodes = model.step_graph(g, store, &batch.input, None)?;
    let sq = g.scale(nodes.probs, 1.0 - 2.0 * PROB_CLAMP)?;
    let q = g.add_scalar(sq, PROB_CLAMP)?;
    let lq = g.log(q)?;
    let omq = g.one_minus(q)?;
    let lomq = g.log(omq)?;
    let y = g.constant(Matrix::column_vector(&batch.labels));
    let omy = g.constant(Matrix::column_vector(
        &batch.labels.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
    ));
    let a = g.mul(y, lq)?;
    let b = g.mul(omy, lomq)?;
    let ly = g.add(a, b)?;
    let lw = g.log(nodes.weights)?;
    let both = g.add(lw, ly)?;
    let r = g.constant(resp.clone());
    let weighted = g.mul(r, both)?;
    let total = g.sum(weighted)?;
    let obj = g.scale(total, -1.0 / batch.len() as f64)?;
    Ok((obj, nodes.weights, nodes.probs))
}

fn objective_value(model: &FusionModel, store: &ParameterStore, batch: &FrameBatch, resp: &Matrix) -> Option<f64> {
    let mut g = Graph::new();
    neg_expected(&mut g, model, store, batch, resp)
        .ok()
        .map(|(o, _, _)| g.value(o).item())
        .filter(|v| v.is_finite())
}

/// Generalised EM for the conditional variant: the E-step computes
/// responsibilities, the M-step takes backtracking gradient steps that never
/// decrease the expected complete-data log-likelihood, so the observed-data
/// log-likelihood is non-decreasing.
pub fn em_fit_conditional(
    model: &FusionModel,
    store: &mut ParameterStore,
    seqs: &[ModalSequence],
    config: &EmConfig,
) -> Result<EmLog> {
    if model.variant().is_stateful() {
        return Err(Error::Contract("EM fitting requires the conditional variant".into()));
    }
    let refs: Vec<&ModalSequence> = seqs.iter().collect();
    let batch = FrameBatch::from_sequences(model, &refs)?;
    if batch.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let m = model.num_experts();
    let mut log = EmLog {
        loglik: Vec::with_capacity(config.iterations + 1),
        clamp_events: 0,
        accepted_steps: 0,
    };
    let mut eta = config.step_size;
    for iter in 0..=config.iterations {
        // E-step at the current parameters.
        let mut g = Graph::new();
        let nodes = model.step_graph(&mut g, store, &batch.input, None)?;
        let w = g.value(nodes.weights).clone();
        let p = g.value(nodes.probs).clone();
        log.loglik.push(observed_loglik(&w, &p, &batch.labels));
        if iter == config.iterations {
            break;
        }
        let mut resp = Matrix::zeros(batch.len(), m);
        for r in 0..batch.len() {
            let q: Vec<f64> = p.row(r).iter().map(|&v| squash(v)).collect();
            let (rr, clamped) = responsibilities(w.row(r), &q, u8::from(batch.labels[r] > 0.5));
            if clamped {
                log.clamp_events += 1;
            }
            resp.row_mut(r).copy_from_slice(&rr);
        }

        // M-step.
        for _ in 0..config.m_steps {
            let mut g = Graph::new();
            let (obj, _, _) = neg_expected(&mut g, model, store, &batch, &resp)?;
            let current = g.value(obj).item();
            let grads = store.gradients_from(&g.eval_backward(obj)?);
            let mut accepted = false;
            for _ in 0..config.max_halvings {
                let mut trial = store.clone();
                for (name, gr) in &grads {
                    let v = trial.value_mut(name).expect("gradient keyed by store");
                    for (x, d) in v.as_mut_slice().iter_mut().zip(gr.as_slice()) {
                        *x -= eta * d;
                    }
                }
                match objective_value(model, &trial, &batch, &resp) {
                    Some(v) if v <= current => {
                        *store = trial;
                        eta *= 1.5;
                        accepted = true;
                        break;
                    }
                    _ => eta *= 0.5,
                }
            }
            if !accepted {
                break;
            }
            log.accepted_steps += 1;
        }
    }
    Ok(log)
}
