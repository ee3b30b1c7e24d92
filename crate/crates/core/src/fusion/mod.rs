//! Attention-based fusion of per-modality experts.
//!
//! Each modality has an expert that predicts `P(y_t = 1)` from its own
//! features only. A gate reads all modalities and produces a simplex over
//! experts; the fused prediction is the gate-weighted mixture of the expert
//! Bernoulli probabilities. Three variants differ in which histories the
//! components may read:
//!
//! * `Conditional`: experts see a short window of their own frames, the gate
//!   sees the current frames. Stateless.
//! * `Markov`: experts and gate each carry a recurrent hidden state.
//! * `Recurrent`: like `Markov`, and each expert also attends over a bounded
//!   window of its own past hidden states.

mod attention;
mod data;
mod em;
mod train;

pub use attention::{temporal_attend, TemporalAttention};
pub use data::{FrameBatch, StepInput};
pub use em::{em_fit_conditional, responsibilities, EmConfig, EmLog};
pub use train::{evaluate, train_gradient, EpochLog, EvalReport, TrainConfig, TrainLog};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, DenseLayer, DenseStack, DistributionHead, RecurrentCell};
use crate::synth::ModalSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Conditional,
    Markov,
    Recurrent,
}

impl Variant {
    pub fn is_stateful(self) -> bool {
        !matches!(self, Variant::Conditional)
    }
}

/// What the gate reads besides its own state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateTaps {
    /// Current raw frame of every modality.
    pub raw: bool,
    /// Last feature layer of every expert.
    pub expert_features: bool,
}

impl Default for GateTaps {
    fn default() -> Self {
        Self {
            raw: true,
            expert_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub variant: Variant,
    /// Modality indices of the data that this model fuses.
    pub modalities: Vec<usize>,
    /// Feature width of each fused modality.
    pub dims: Vec<usize>,
    /// Frames per expert input window (conditional variant).
    pub context: usize,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: usize,
    /// Recurrent state width for experts and gate (stateful variants).
    pub state_dim: usize,
    pub attention_window: usize,
    pub taps: GateTaps,
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Conditional,
            modalities: vec![0, 1, 2],
            dims: vec![8, 8, 8],
            context: 5,
            expert_hidden: vec![16, 8],
            gate_hidden: 16,
            state_dim: 8,
            attention_window: 25,
            taps: GateTaps::default(),
            temperature: 1.0,
        }
    }
}

impl FusionConfig {
    /// Single-expert model over data modality `m`.
    pub fn unimodal(m: usize, dim: usize) -> Self {
        Self {
            modalities: vec![m],
            dims: vec![dim],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Validation("fusion needs at least one modality".into()));
        }
        if self.modalities.len() != self.dims.len() {
            return Err(Error::Validation("one feature width per modality required".into()));
        }
        if self.dims.contains(&0) || self.expert_hidden.is_empty() || self.expert_hidden.contains(&0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        if self.context == 0 || self.gate_hidden == 0 || self.state_dim == 0 {
            return Err(Error::Validation("context, gate and state widths must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("gate temperature must be positive".into()));
        }
        if !self.taps.raw && !self.taps.expert_features {
            return Err(Error::Validation("gate must read raw frames or expert features".into()));
        }
        Ok(())
    }
}

/// Per-modality predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertNetwork {
    pub modality: usize,
    pub input: usize,
    pub rnn: Option<RecurrentCell>,
    pub attention: Option<TemporalAttention>,
    pub features: DenseStack,
    pub head: DistributionHead,
}

impl ExpertNetwork {
    fn new(index: usize, modality: usize, config: &FusionConfig) -> Self {
        let name = format!("expert{index}");
        let d = config.dims[index];
        let (input, rnn, attention, feat_in) = match config.variant {
            Variant::Conditional => (d * config.context, None, None, d * config.context),
            Variant::Markov => (
                d,
                Some(RecurrentCell::new(format!("{name}.rnn"), d, config.state_dim)),
                None,
                config.state_dim,
            ),
            Variant::Recurrent => (
                d,
                Some(RecurrentCell::new(format!("{name}.rnn"), d, config.state_dim)),
                Some(TemporalAttention::new(
                    format!("{name}.att"),
                    config.state_dim,
                    config.attention_window,
                )),
                2 * config.state_dim,
            ),
        };
        let mut sizes = vec![feat_in];
        sizes.extend_from_slice(&config.expert_hidden);
        let features = DenseStack::new(&format!("{name}.f"), &sizes, Activation::Tanh);
        let head = DistributionHead::bernoulli(&format!("{name}.head"), features.output());
        Self {
            modality,
            input,
            rnn,
            attention,
            features,
            head,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        if let Some(c) = &self.rnn {
            c.init(store, rng);
        }
        if let Some(a) = &self.attention {
            a.init(store, rng);
        }
        self.features.init(store, rng);
        self.head.init(store, rng);
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        if let Some(c) = &self.rnn {
            c.init_zero(store);
        }
        if let Some(a) = &self.attention {
            a.init_zero(store);
        }
        for l in &self.features.layers {
            l.init_zero(store);
        }
        self.head.init_zero(store);
    }

    /// Width of the layer the gate taps.
    pub fn feature_width(&self) -> usize {
        self.features.output()
    }

    /// One step. `memory` holds the attention window (recurrent variant) and
    /// is updated in place. Returns the probability, every feature layer
    /// output and the new hidden state.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: NodeId,
        hidden: Option<NodeId>,
        memory: Option<&mut Vec<NodeId>>,
    ) -> Result<(NodeId, Vec<NodeId>, Option<NodeId>)> {
        let (feat_in, h_new) = match (&self.rnn, hidden) {
            (None, _) => (x, None),
            (Some(cell), Some(h)) => {
                let h_new = cell.forward(g, store, x, h)?;
                let input = match (&self.attention, memory) {
                    (Some(att), Some(mem)) => {
                        mem.push(h_new);
                        if mem.len() > att.window {
                            mem.remove(0);
                        }
                        let (ctx, _) = att.forward(g, store, h_new, mem)?;
                        g.concat(&[h_new, ctx], 1)?
                    }
                    (Some(_), None) => return Err(Error::Contract("attention memory missing".into())),
                    (None, _) => h_new,
                };
                (input, Some(h_new))
            }
            (Some(_), None) => return Err(Error::Contract("recurrent expert needs a hidden state".into())),
        };
        let feats = self.features.forward_all(g, store, feat_in)?;
        let (p, _) = self.head.forward(g, store, *feats.last().expect("nonempty stack"))?;
        Ok((p, feats, h_new))
    }
}

/// Simplex-valued gate over the experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNetwork {
    pub input: usize,
    pub hidden: Option<DenseLayer>,
    pub rnn: Option<RecurrentCell>,
    pub out: DenseLayer,
    pub temperature: f64,
}

impl GateNetwork {
    fn new(config: &FusionConfig, feature_widths: &[usize]) -> Self {
        let mut input = 0;
        if config.taps.raw {
            input += config.dims.iter().sum::<usize>();
        }
        if config.taps.expert_features {
            input += feature_widths.iter().sum::<usize>();
        }
        let m = config.dims.len();
        let (hidden, rnn, width) = if config.variant.is_stateful() {
            (
                None,
                Some(RecurrentCell::new("gate.rnn", input, config.state_dim)),
                config.state_dim,
            )
        } else {
            (
                Some(DenseLayer::new("gate.h", input, config.gate_hidden, Activation::Tanh)),
                None,
                config.gate_hidden,
            )
        };
        Self {
            input,
            hidden,
            rnn,
            out: DenseLayer::new("gate.out", width, m, Activation::Identity),
            temperature: config.temperature,
        }
    }

    /// Stateless gate over `experts` outputs reading an `input`-wide vector.
    pub fn conditional(input: usize, hidden: usize, experts: usize) -> Self {
        Self {
            input,
            hidden: Some(DenseLayer::new("gate.h", input, hidden, Activation::Tanh)),
            rnn: None,
            out: DenseLayer::new("gate.out", hidden, experts, Activation::Identity),
            temperature: 1.0,
        }
    }

    pub fn experts(&self) -> usize {
        self.out.output
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        if let Some(h) = &self.hidden {
            h.init(store, rng);
        }
        if let Some(c) = &self.rnn {
            c.init(store, rng);
        }
        // Uniform mixture at the start, so every expert first learns to
        // predict on its own.
        self.out.init_zero(store);
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        if let Some(h) = &self.hidden {
            h.init_zero(store);
        }
        if let Some(c) = &self.rnn {
            c.init_zero(store);
        }
        self.out.init_zero(store);
    }

    /// Returns the weights (`rows x M`) and the new gate state.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        input: NodeId,
        hidden: Option<NodeId>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let (h, state) = match (&self.rnn, &self.hidden, hidden) {
            (Some(cell), _, Some(prev)) => {
                let h = cell.forward(g, store, input, prev)?;
                (h, Some(h))
            }
            (Some(_), _, None) => return Err(Error::Contract("recurrent gate needs a hidden state".into())),
            (None, Some(layer), _) => (layer.forward(g, store, input)?, None),
            (None, None, _) => (input, None),
        };
        let logits = self.out.forward(g, store, h)?;
        let scaled = if self.temperature == 1.0 {
            logits
        } else {
            g.scale(logits, 1.0 / self.temperature)?
        };
        Ok((g.softmax(scaled)?, state))
    }
}

/// Recurrent state carried between frames (stateful variants).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub expert_h: Vec<Matrix>,
    pub gate_h: Matrix,
    /// Attention window per expert, oldest first (recurrent variant).
    pub memory: Vec<Vec<Matrix>>,
}

/// [`FusionState`] materialised in a graph.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub expert_h: Vec<NodeId>,
    pub gate_h: NodeId,
    pub memory: Vec<Vec<NodeId>>,
}

impl FusionState {
    /// Constants in `g`; gradients are not propagated into earlier windows.
    pub fn to_graph(&self, g: &mut Graph) -> GraphState {
        GraphState {
            expert_h: self.expert_h.iter().map(|h| g.constant(h.clone())).collect(),
            gate_h: g.constant(self.gate_h.clone()),
            memory: self
                .memory
                .iter()
                .map(|m| m.iter().map(|h| g.constant(h.clone())).collect())
                .collect(),
        }
    }
}

impl GraphState {
    pub fn values(&self, g: &Graph) -> FusionState {
        FusionState {
            expert_h: self.expert_h.iter().map(|&h| g.value(h).clone()).collect(),
            gate_h: g.value(self.gate_h).clone(),
            memory: self
                .memory
                .iter()
                .map(|m| m.iter().map(|&h| g.value(h).clone()).collect())
                .collect(),
        }
    }
}

/// Graph nodes produced by one fusion step.
#[derive(Debug, Clone)]
pub struct StepNodes {
    /// Gate weights, `rows x M`.
    pub weights: NodeId,
    /// Expert probabilities, `rows x M`.
    pub probs: NodeId,
    /// Fused probability, `rows x 1`.
    pub fused: NodeId,
    /// Feature layer outputs per expert.
    pub features: Vec<Vec<NodeId>>,
}

/// Values of one fusion step for a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutput {
    pub fused: f64,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub state: Option<FusionState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub experts: Vec<ExpertNetwork>,
    pub gate: GateNetwork,
}

impl FusionModel {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let experts: Vec<ExpertNetwork> = config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| ExpertNetwork::new(i, m, &config))
            .collect();
        let widths: Vec<usize> = experts.iter().map(ExpertNetwork::feature_width).collect();
        let gate = GateNetwork::new(&config, &widths);
        Ok(Self { config, experts, gate })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for e in &self.experts {
            e.init(store, rng);
        }
        self.gate.init(store, rng);
    }

    pub fn init_zero(&self, store: &mut ParameterStore) {
        for e in &self.experts {
            e.init_zero(store);
        }
        self.gate.init_zero(store);
    }

    /// Zero state for `rows` parallel sequences; `None` for the conditional
    /// variant.
    pub fn initial_state(&self, rows: usize) -> Option<FusionState> {
        if !self.variant().is_stateful() {
            return None;
        }
        let h = Matrix::zeros(rows, self.config.state_dim);
        Some(FusionState {
            expert_h: vec![h.clone(); self.num_experts()],
            gate_h: h,
            memory: vec![Vec::new(); self.num_experts()],
        })
    }

    /// Builds one step into `g`. `state` must be present exactly for the
    /// stateful variants and is advanced in place.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        input: &StepInput,
        mut state: Option<&mut GraphState>,
    ) -> Result<StepNodes> {
        if self.variant().is_stateful() != state.is_some() {
            return Err(Error::Contract(format!(
                "{:?} variant called {} a recurrent state",
                self.variant(),
                if state.is_some() { "with" } else { "without" }
            )));
        }
        input.check(self)?;
        let mut probs = Vec::with_capacity(self.num_experts());
        let mut features = Vec::with_capacity(self.num_experts());
        for (i, expert) in self.experts.iter().enumerate() {
            let x = g.constant(input.expert_in[i].clone());
            let (hidden, memory) = match state.as_deref_mut() {
                Some(s) => (Some(s.expert_h[i]), Some(&mut s.memory[i])),
                None => (None, None),
            };
            let memory = if expert.attention.is_some() { memory } else { None };
            let (p, feats, h_new) = expert.forward(g, store, x, hidden, memory)?;
            if let (Some(s), Some(h)) = (state.as_deref_mut(), h_new) {
                s.expert_h[i] = h;
            }
            probs.push(p);
            features.push(feats);
        }

        let mut gate_parts = Vec::new();
        if self.config.taps.raw {
            for raw in &input.raw {
                gate_parts.push(g.constant(raw.clone()));
            }
        }
        if self.config.taps.expert_features {
            for f in &features {
                gate_parts.push(*f.last().expect("nonempty stack"));
            }
        }
        let gate_in = g.concat(&gate_parts, 1)?;
        let (weights, gate_h) = self
            .gate
            .forward(g, store, gate_in, state.as_deref().map(|s| s.gate_h))?;
        if let (Some(s), Some(h)) = (state, gate_h) {
            s.gate_h = h;
        }
        let probs = g.concat(&probs, 1)?;
        let mixed = g.mul(weights, probs)?;
        let fused = g.sum_rows(mixed)?;
        Ok(StepNodes {
            weights,
            probs,
            fused,
            features,
        })
    }

    /// One frame for a single sequence. `input` must have one row.
    pub fn fuse_step(
        &self,
        store: &ParameterStore,
        input: &StepInput,
        state: Option<&FusionState>,
    ) -> Result<FuseOutput> {
        if input.rows() != 1 {
            return Err(Error::Contract("fuse_step takes one row".into()));
        }
        let mut g = Graph::new();
        let mut gs = state.map(|s| s.to_graph(&mut g));
        let nodes = self.step_graph(&mut g, store, input, gs.as_mut())?;
        Ok(FuseOutput {
            fused: g.value(nodes.fused).item(),
            weights: g.value(nodes.weights).as_slice().to_vec(),
            probs: g.value(nodes.probs).as_slice().to_vec(),
            state: gs.map(|s| s.values(&g)),
        })
    }

    /// Per-frame outputs over whole sequences (all rows advanced together).
    /// Returns, per sequence, `(fused, weights, probs)` for every frame.
    pub fn run_sequences(&self, store: &ParameterStore, seqs: &[&ModalSequence]) -> Result<Vec<SequenceOutput>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.num_experts();
        if !self.variant().is_stateful() {
            return seqs
                .iter()
                .map(|s| {
                    let batch = FrameBatch::from_sequences(self, &[*s])?;
                    let mut g = Graph::new();
                    let nodes = self.step_graph(&mut g, store, &batch.input, None)?;
                    Ok(SequenceOutput::from_values(
                        g.value(nodes.fused),
                        g.value(nodes.weights),
                        g.value(nodes.probs),
                        m,
                    ))
                })
                .collect();
        }
        let frames = seqs[0].frames();
        if seqs.iter().any(|s| s.frames() != frames) {
            return Err(Error::Input("sequences in a batch must share a length".into()));
        }
        let mut out = vec![SequenceOutput::default(); seqs.len()];
        let mut state = self.initial_state(seqs.len()).expect("stateful");
        for t in 0..frames {
            let input = StepInput::at_frame(self, seqs, t)?;
            let mut g = Graph::new();
            let mut gs = state.to_graph(&mut g);
            let nodes = self.step_graph(&mut g, store, &input, Some(&mut gs))?;
            let (f, w, p) = (g.value(nodes.fused), g.value(nodes.weights), g.value(nodes.probs));
            for (r, o) in out.iter_mut().enumerate() {
                o.fused.push(f[(r, 0)]);
                o.weights.push(w.row(r).to_vec());
                o.probs.push(p.row(r).to_vec());
            }
            state = gs.values(&g);
        }
        Ok(out)
    }
}

/// Frame-by-frame outputs for one sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceOutput {
    pub fused: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl SequenceOutput {
    fn from_values(fused: &Matrix, weights: &Matrix, probs: &Matrix, m: usize) -> Self {
        let rows = fused.rows();
        debug_assert_eq!(weights.cols(), m);
        Self {
            fused: fused.as_slice().to_vec(),
            weights: (0..rows).map(|r| weights.row(r).to_vec()).collect(),
            probs: (0..rows).map(|r| probs.row(r).to_vec()).collect(),
        }
    }
}

/// Probability of one expert for the given history. For the conditional
/// variant `history` is the flattened context window; for the stateful
/// variants it is the current frame and `state` must be supplied.
pub fn expert_predict(
    model: &FusionModel,
    store: &ParameterStore,
    expert: usize,
    history: &[f64],
    state: Option<&FusionState>,
) -> Result<f64> {
    let e = model
        .experts
        .get(expert)
        .ok_or_else(|| Error::Input(format!("no expert {expert}")))?;
    if history.len() != e.input {
        return Err(Error::Dimension {
            node: 0,
            op: "expert_predict",
            detail: format!("history of width {} for expert input {}", history.len(), e.input),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(Matrix::row_vector(history));
    let (hidden, mut memory) = match (model.variant().is_stateful(), state) {
        (false, None) => (None, None),
        (true, Some(s)) => {
            let gs = s.to_graph(&mut g);
            (Some(gs.expert_h[expert]), Some(gs.memory[expert].clone()))
        }
        _ => return Err(Error::Contract("state does not match the variant".into())),
    };
    let mem = if e.attention.is_some() { memory.as_mut() } else { None };
    let (p, _, _) = e.forward(&mut g, store, x, hidden, mem)?;
    Ok(g.value(p).item())
}

/// Gate weights for one row of gate input (raw frames and/or expert
/// features, concatenated in expert order).
pub fn gate_weights(
    gate: &GateNetwork,
    store: &ParameterStore,
    features: &[f64],
    hidden: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if features.iter().chain(hidden.into_iter().flatten()).any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in gate features".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(Matrix::row_vector(features));
    let h = hidden.map(|h| g.constant(Matrix::row_vector(h)));
    let (w, _) = gate.forward(&mut g, store, x, h)?;
    Ok(g.value(w).as_slice().to_vec())
}

/// Index of the largest weight; ties go to the lowest index.
pub fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in w.iter().enumerate() {
        if v > w[best] {
            best = i;
        }
    }
    best
}
