use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synth::ModalSequence;

use super::FusionModel;

/// Per-expert inputs for one step; every matrix has one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// What each expert reads: a flattened context window (conditional) or
    /// the current frame (stateful variants).
    pub expert_in: Vec<Matrix>,
    /// Current frame of each fused modality, read by the gate.
    pub raw: Vec<Matrix>,
}

impl StepInput {
    pub fn rows(&self) -> usize {
        self.expert_in.first().map_or(0, Matrix::rows)
    }

    /// Frame `t` of every sequence in `seqs`, one row each.
    pub fn at_frame(model: &FusionModel, seqs: &[&ModalSequence], t: usize) -> Result<Self> {
        let mut expert_in = Vec::with_capacity(model.num_experts());
        let mut raw = Vec::with_capacity(model.num_experts());
        for e in &model.experts {
            let mut xin = Vec::with_capacity(seqs.len() * e.input);
            let mut xr = Vec::new();
            for s in seqs {
                check_sequence(s, e.modality, t)?;
                if model.variant().is_stateful() {
                    xin.extend_from_slice(s.frame(e.modality, t));
                } else {
                    xin.extend(s.window(e.modality, t, model.config.context));
                }
                xr.extend_from_slice(s.frame(e.modality, t));
            }
            let d = xr.len() / seqs.len().max(1);
            expert_in.push(Matrix::from_vec(seqs.len(), xin.len() / seqs.len().max(1), xin));
            raw.push(Matrix::from_vec(seqs.len(), d, xr));
        }
        let input = Self { expert_in, raw };
        input.check(model)?;
        Ok(input)
    }

    pub(crate) fn check(&self, model: &FusionModel) -> Result<()> {
        if self.expert_in.len() != model.num_experts() || self.raw.len() != model.num_experts() {
            return Err(Error::Contract(format!(
                "{} expert inputs for {} experts",
                self.expert_in.len(),
                model.num_experts()
            )));
        }
        let rows = self.rows();
        for (i, e) in model.experts.iter().enumerate() {
            let want = [(e.input, &self.expert_in[i]), (model.config.dims[i], &self.raw[i])];
            for (width, m) in want {
                if m.cols() != width || m.rows() != rows {
                    return Err(Error::Dimension {
                        node: 0,
                        op: "expert input",
                        detail: format!(
                            "expert {i} got {}x{}, expects {rows}x{width}",
                            m.rows(),
                            m.cols()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Rows `idx` of every matrix.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            expert_in: self.expert_in.iter().map(|m| select_rows(m, idx)).collect(),
            raw: self.raw.iter().map(|m| select_rows(m, idx)).collect(),
        }
    }
}

fn check_sequence(s: &ModalSequence, m: usize, t: usize) -> Result<()> {
    if m >= s.modalities() {
        return Err(Error::Input(format!("sequence has no modality {m}")));
    }
    if t >= s.frames() {
        return Err(Error::Input(format!("frame {t} beyond sequence length {}", s.frames())));
    }
    Ok(())
}

fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols(), data)
}

/// Every frame of a set of sequences as independent rows (conditional
/// variant only).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub input: StepInput,
    pub labels: Vec<f64>,
    /// Corruption mask per fused modality and row.
    pub masks: Vec<Vec<bool>>,
}

impl FrameBatch {
    pub fn from_sequences(model: &FusionModel, seqs: &[&ModalSequence]) -> Result<Self> {
        if model.variant().is_stateful() {
            return Err(Error::Contract("frame batches are for the conditional variant".into()));
        }
        let m = model.num_experts();
        let mut parts: Vec<StepInput> = Vec::new();
        let mut labels = Vec::new();
        let mut masks = vec![Vec::new(); m];
        for s in seqs {
            for t in 0..s.frames() {
                parts.push(StepInput::at_frame(model, &[*s], t)?);
                labels.push(f64::from(s.y[t]));
                for (i, e) in model.experts.iter().enumerate() {
                    masks[i].push(s.masks[e.modality][t]);
                }
            }
        }
        let stack = |get: &dyn Fn(&StepInput) -> &Matrix, width: usize| {
            let mut data = Vec::with_capacity(parts.len() * width);
            for p in &parts {
                data.extend_from_slice(get(p).as_slice());
            }
            Matrix::from_vec(parts.len(), width, data)
        };
        let input = StepInput {
            expert_in: (0..m)
                .map(|i| stack(&|p| &p.expert_in[i], model.experts[i].input))
                .collect(),
            raw: (0..m).map(|i| stack(&|p| &p.raw[i], model.config.dims[i])).collect(),
        };
        Ok(Self { input, labels, masks })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            input: self.input.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: self
                .masks
                .iter()
                .map(|m| idx.iter().map(|&i| m[i]).collect())
                .collect(),
        }
    }
}
