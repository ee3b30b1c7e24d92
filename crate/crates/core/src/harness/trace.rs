//! Per-frame attention traces of fusion models.
//!
//! CSV columns, with `M` the number of experts in model order:
//! `frame, w_1..w_M, p_1..p_M, fused, label, mask_1..mask_M`, where `w` are
//! gate weights, `p` expert probabilities of `y = 1`, `fused` the mixture
//! probability and `mask_m` is 1 on frames where expert `m`'s modality is
//! corrupted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::ModalSequence;

use super::SavedModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub frame: usize,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub fused: f64,
    pub label: u8,
    pub masks: Vec<bool>,
}

pub fn emit_attention_trace(model: &SavedModel, seq: &ModalSequence) -> Result<Vec<TraceRow>> {
    let SavedModel::Fusion { model, store } = model else {
        return Err(Error::Contract(format!(
            "attention traces need a fusion model, got {}",
            model.family()
        )));
    };
    let out = model
        .run_sequences(store, &[seq])?
        .pop()
        .ok_or_else(|| Error::Contract("no output for sequence".into()))?;
    let modalities = &model.config.modalities;
    Ok((0..seq.frames())
        .map(|t| TraceRow {
            frame: t,
            weights: out.weights[t].clone(),
            probs: out.probs[t].clone(),
            fused: out.fused[t],
            label: seq.y[t],
            masks: modalities.iter().map(|&m| seq.masks[m][t]).collect(),
        })
        .collect())
}

pub fn trace_header(experts: usize) -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    h.extend((1..=experts).map(|m| format!("w_{m}")));
    h.extend((1..=experts).map(|m| format!("p_{m}")));
    h.push("fused".into());
    h.push("label".into());
    h.extend((1..=experts).map(|m| format!("mask_{m}")));
    h
}

pub fn trace_csv(rows: &[TraceRow]) -> Result<String> {
    let experts = rows.first().map_or(0, |r| r.weights.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(trace_header(experts)).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![r.frame.to_string()];
        rec.extend(r.weights.iter().chain(&r.probs).map(f64::to_string));
        rec.push(r.fused.to_string());
        rec.push(r.label.to_string());
        rec.extend(r.masks.iter().map(|&b| u8::from(b).to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of ASCII fields"))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
