use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{optimizer_step, Graph, NodeId, OptimizerConfig, ParameterStore};
use crate::colearn::{colearn_loss_graph, update_shared_mean, CoLearnConfig, MeanMode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{bernoulli_nll, bernoulli_nll_graph};
use crate::synth::{rng_for, ModalSequence};

use super::{FrameBatch, FusionModel, StepInput, StepNodes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frames per minibatch for the conditional variant, sequences for the
    /// stateful ones.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Truncated backpropagation window in frames (stateful variants).
    pub tbptt: usize,
    pub colearn: Option<CoLearnConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(3e-3),
            tbptt: 5,
            colearn: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Fused NLL plus co-learning loss over the whole training set.
    pub loss: f64,
    pub nll: f64,
    pub colearn: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Entry 0 is the untrained model, entry `k` follows epoch `k`.
    pub epochs: Vec<EpochLog>,
    pub updates: u64,
}

/// Metrics of a model over a set of sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub nll: f64,
    pub accuracy: f64,
    pub colearn: f64,
    pub expert_accuracy: Vec<f64>,
    /// Mean gate weight of each expert on frames where its modality is
    /// corrupted (`None` when there are no such frames).
    pub gate_inside: Vec<Option<f64>>,
    pub gate_outside: Vec<Option<f64>>,
    /// Mean across-expert sample variance of the shared units.
    pub shared_variance: f64,
}

struct Colearn {
    layer: Option<usize>,
    units: usize,
    lambda: Vec<f64>,
    mode: MeanMode,
    target: Option<Matrix>,
}

impl Colearn {
    fn new(model: &FusionModel, cfg: &CoLearnConfig) -> Result<Self> {
        let width = model.experts[0].features.layers[layer_index(model, cfg.layer)?].output;
        for e in &model.experts {
            if e.features.layers[layer_index(model, cfg.layer)?].output != width {
                return Err(Error::Validation("co-learned layers differ in width".into()));
            }
        }
        let units = cfg.units(width)?;
        let target = match cfg.mean {
            MeanMode::MovingAverage { decay } => {
                if !(0.0..=1.0).contains(&decay) {
                    return Err(Error::Validation(format!("decay {decay} outside [0, 1]")));
                }
                Some(Matrix::zeros(1, units))
            }
            _ => None,
        };
        Ok(Self {
            layer: cfg.layer,
            units,
            lambda: cfg.lambdas(model.num_experts())?,
            mode: cfg.mean,
            target,
        })
    }

    fn shared(&self, g: &mut Graph, model: &FusionModel, nodes: &StepNodes) -> Result<Vec<NodeId>> {
        let li = layer_index(model, self.layer)?;
        nodes
            .features
            .iter()
            .map(|f| g.slice_cols(f[li], 0..self.units))
            .collect()
    }

    fn term(&self, g: &mut Graph, model: &FusionModel, nodes: &StepNodes) -> Result<(NodeId, Vec<NodeId>)> {
        let z = self.shared(g, model, nodes)?;
        let (loss, _) = colearn_loss_graph(g, &z, &self.lambda, self.mode, self.target.as_ref())?;
        Ok((loss, z))
    }

    fn observe(&mut self, g: &Graph, z: &[NodeId]) {
        if let (MeanMode::MovingAverage { decay }, Some(t)) = (self.mode, self.target.as_mut()) {
            let mut sum = vec![0.0; self.units];
            let mut count = 0.0;
            for &n in z {
                let v = g.value(n);
                for r in 0..v.rows() {
                    for (s, x) in sum.iter_mut().zip(v.row(r)) {
                        *s += x;
                    }
                    count += 1.0;
                }
            }
            let batch: Vec<f64> = sum.iter().map(|s| s / count).collect();
            *t = Matrix::row_vector(&update_shared_mean(t.as_slice(), &batch, decay));
        }
    }
}

fn layer_index(model: &FusionModel, layer: Option<usize>) -> Result<usize> {
    let n = model.experts[0].features.layers.len();
    match layer {
        None => Ok(n - 1),
        Some(l) if l < n => Ok(l),
        Some(l) => Err(Error::Validation(format!("layer {l} beyond {n} feature layers"))),
    }
}

fn check_nonempty(seqs: &[ModalSequence]) -> Result<()> {
    if seqs.is_empty() || seqs.iter().all(|s| s.frames() == 0) {
        return Err(Error::Contract("training set is empty".into()));
    }
    Ok(())
}

fn equal_lengths(seqs: &[&ModalSequence]) -> Result<usize> {
    let t = seqs[0].frames();
    if seqs.iter().any(|s| s.frames() != t) {
        return Err(Error::Input("stateful variants need equal-length sequences".into()));
    }
    Ok(t)
}

fn apply_grads(
    g: &mut Graph,
    loss: NodeId,
    store: &mut ParameterStore,
    opt: &OptimizerConfig,
    updates: u64,
) -> Result<()> {
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            term: "training loss".into(),
            frame: updates as usize,
        });
    }
    let grads = g.eval_backward(loss)?;
    optimizer_step(store, &store.gradients_from(&grads), opt)
}

/// Minibatch gradient training of the fused Bernoulli likelihood, with an
/// optional co-learning penalty.
pub fn train_gradient(
    model: &FusionModel,
    store: &mut ParameterStore,
    train: &[ModalSequence],
    config: &TrainConfig,
) -> Result<TrainLog> {
    check_nonempty(train)?;
    if config.batch_size == 0 || config.tbptt == 0 {
        return Err(Error::Validation("batch size and truncation window must be >= 1".into()));
    }
    let mut colearn = config.colearn.as_ref().map(|c| Colearn::new(model, c)).transpose()?;
    let refs: Vec<&ModalSequence> = train.iter().collect();
    let snapshot = |store: &ParameterStore, epoch: usize| -> Result<EpochLog> {
        let r = evaluate(model, store, &refs, config.colearn.as_ref())?;
        let colearn = if config.colearn.is_some() { r.colearn } else { 0.0 };
        Ok(EpochLog {
            epoch,
            loss: r.nll + colearn,
            nll: r.nll,
            colearn,
            accuracy: r.accuracy,
        })
    };
    let mut log = TrainLog {
        epochs: vec![snapshot(store, 0)?],
        updates: 0,
    };
    let frames = if model.variant().is_stateful() {
        None
    } else {
        Some(FrameBatch::from_sequences(model, &refs)?)
    };
    for epoch in 1..=config.epochs {
        let mut rng = rng_for(config.seed, epoch as u64);
        match &frames {
            Some(batch) => {
                let mut idx: Vec<usize> = (0..batch.len()).collect();
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(config.batch_size) {
                    let mb = batch.select(chunk);
                    let mut g = Graph::new();
                    let nodes = model.step_graph(&mut g, store, &mb.input, None)?;
                    let mut loss = bernoulli_nll_graph(&mut g, nodes.fused, &mb.labels)?;
                    let mut shared = Vec::new();
                    if let Some(c) = &colearn {
                        let (cl, z) = c.term(&mut g, model, &nodes)?;
                        loss = g.add(loss, cl)?;
                        shared = z;
                    }
                    apply_grads(&mut g, loss, store, &config.optimizer, log.updates)?;
                    if let Some(c) = colearn.as_mut() {
                        c.observe(&g, &shared);
                    }
                    log.updates += 1;
                }
            }
            None => {
                let mut order: Vec<usize> = (0..refs.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(config.batch_size) {
                    let seqs: Vec<&ModalSequence> = chunk.iter().map(|&i| refs[i]).collect();
                    let len = equal_lengths(&seqs)?;
                    let mut state = model.initial_state(seqs.len()).expect("stateful");
                    for start in (0..len).step_by(config.tbptt) {
                        let end = (start + config.tbptt).min(len);
                        let mut g = Graph::new();
                        let mut gs = state.to_graph(&mut g);
                        let mut terms = Vec::new();
                        let mut shared = Vec::new();
                        for t in start..end {
                            let input = StepInput::at_frame(model, &seqs, t)?;
                            let nodes = model.step_graph(&mut g, store, &input, Some(&mut gs))?;
                            let labels: Vec<f64> = seqs.iter().map(|s| f64::from(s.y[t])).collect();
                            let mut l = bernoulli_nll_graph(&mut g, nodes.fused, &labels)?;
                            if let Some(c) = &colearn {
                                let (cl, z) = c.term(&mut g, model, &nodes)?;
                                l = g.add(l, cl)?;
                                shared.extend(z);
                            }
                            terms.push(l);
                        }
                        let stacked = g.concat(&terms, 0)?;
                        let loss = g.mean(stacked)?;
                        apply_grads(&mut g, loss, store, &config.optimizer, log.updates)?;
                        if let Some(c) = colearn.as_mut() {
                            c.observe(&g, &shared);
                        }
                        log.updates += 1;
                        state = gs.values(&g);
                    }
                }
            }
        }
        log.epochs.push(snapshot(store, epoch)?);
    }
    Ok(log)
}

/// Runs the model over `seqs` and calls `visit` for every built step with
/// the labels and masks of its rows.
fn forward_pass(
    model: &FusionModel,
    store: &ParameterStore,
    seqs: &[&ModalSequence],
    mut visit: impl FnMut(&mut Graph, &StepNodes, &[f64], &[Vec<bool>]) -> Result<()>,
) -> Result<()> {
    if model.variant().is_stateful() {
        for chunk in seqs.chunks(64) {
            let len = equal_lengths(chunk)?;
            let mut state = model.initial_state(chunk.len()).expect("stateful");
            for t in 0..len {
                let input = StepInput::at_frame(model, chunk, t)?;
                let mut g = Graph::new();
                let mut gs = state.to_graph(&mut g);
                let nodes = model.step_graph(&mut g, store, &input, Some(&mut gs))?;
                let labels: Vec<f64> = chunk.iter().map(|s| f64::from(s.y[t])).collect();
                let masks: Vec<Vec<bool>> = model
                    .experts
                    .iter()
                    .map(|e| chunk.iter().map(|s| s.masks[e.modality][t]).collect())
                    .collect();
                visit(&mut g, &nodes, &labels, &masks)?;
                state = gs.values(&g);
            }
        }
    } else {
        for chunk in seqs.chunks(32) {
            let batch = FrameBatch::from_sequences(model, chunk)?;
            let mut g = Graph::new();
            let nodes = model.step_graph(&mut g, store, &batch.input, None)?;
            visit(&mut g, &nodes, &batch.labels, &batch.masks)?;
        }
    }
    Ok(())
}

/// Accuracy, likelihood and gate statistics over `seqs`. `colearn` selects
/// the shared units used for the co-learning statistics (defaults apply when
/// absent).
pub fn evaluate(
    model: &FusionModel,
    store: &ParameterStore,
    seqs: &[&ModalSequence],
    colearn: Option<&CoLearnConfig>,
) -> Result<EvalReport> {
    let m = model.num_experts();
    let default = CoLearnConfig::default();
    let cl_cfg = colearn.unwrap_or(&default);
    let cl = Colearn::new(model, cl_cfg)?;
    let mut frames = 0usize;
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut expert_correct = vec![0usize; m];
    let mut inside = vec![(0.0, 0usize); m];
    let mut outside = vec![(0.0, 0usize); m];
    let mut colearn_sum = 0.0;
    let mut var_sum = 0.0;
    forward_pass(model, store, seqs, |g, nodes, labels, masks| {
        let fused = g.value(nodes.fused).clone();
        let w = g.value(nodes.weights).clone();
        let p = g.value(nodes.probs).clone();
        let (cl_loss, z) = cl.term(g, model, nodes)?;
        let rows = labels.len();
        colearn_sum += g.value(cl_loss).item() * rows as f64;
        for r in 0..rows {
            let y = labels[r];
            frames += 1;
            nll += bernoulli_nll(fused[(r, 0)], y);
            if (fused[(r, 0)] > 0.5) == (y > 0.5) {
                correct += 1;
            }
            for i in 0..m {
                if (p[(r, i)] > 0.5) == (y > 0.5) {
                    expert_correct[i] += 1;
                }
                let slot = if masks[i][r] { &mut inside[i] } else { &mut outside[i] };
                slot.0 += w[(r, i)];
                slot.1 += 1;
            }
            let mut v = 0.0;
            for u in 0..cl.units {
                let vals: Vec<f64> = z.iter().map(|&n| g.value(n)[(r, u)]).collect();
                let mean = vals.iter().sum::<f64>() / m as f64;
                if m > 1 {
                    v += vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
                }
            }
            var_sum += v / cl.units as f64;
        }
        Ok(())
    })?;
    if frames == 0 {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let n = frames as f64;
    let mean_of = |s: &(f64, usize)| (s.1 > 0).then(|| s.0 / s.1 as f64);
    Ok(EvalReport {
        frames,
        nll: nll / n,
        accuracy: correct as f64 / n,
        colearn: colearn_sum / n,
        expert_accuracy: expert_correct.iter().map(|&c| c as f64 / n).collect(),
        gate_inside: inside.iter().map(mean_of).collect(),
        gate_outside: outside.iter().map(mean_of).collect(),
        shared_variance: var_sum / n,
    })
}
