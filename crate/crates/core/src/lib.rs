//! Sensitivity-guided AC optimal power flow with particle swarm optimization.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod netmodel;
pub mod opf;
pub mod powerflow;
pub mod pso;
pub mod sensitivity;
