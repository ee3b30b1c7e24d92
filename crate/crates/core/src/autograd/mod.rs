//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every trainable model in the crate is expressed on [`Graph`]. Graphs are
//! built per unroll (define-by-run), parameters live in a
//! [`ParameterStore`], and [`finite_diff_check`] is the verification oracle
//! used throughout the test suite.

mod check;
mod graph;
mod optim;

pub use check::{finite_diff_check, finite_diff_check_all};
pub use graph::{Graph, NodeId, Op, ValueNode};
pub use optim::{optimizer_step, OptimizerConfig, ParamEntry, ParameterStore, UpdateRule};
