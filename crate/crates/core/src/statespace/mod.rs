//! Exact inference for discrete and linear-Gaussian state-space models.
//!
//! These serve as oracles and baselines for the learned models: scaled
//! forward-backward for HMMs (including multimodal HMMs flattened to a
//! product state space), Kalman filtering and RTS smoothing, and a
//! brute-force joint-Gaussian conditioning oracle.

mod hmm;
mod kalman;

pub use hmm::{
    flatten_multimodal, hmm_forward_backward, sequence_likelihood, Chain, DiscreteHMM, Emission,
    ForwardBackward, MultimodalHMM, Observation, MAX_FLAT_STATES,
};
pub use kalman::{
    exact_gaussian_posterior_oracle, kalman_filter, kalman_smooth, FilterResult, GaussianBelief,
    LinearGaussianSSM, ORACLE_LIMIT,
};
