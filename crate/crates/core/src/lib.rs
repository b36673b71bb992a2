//! Desk-scale asynchronous RL post-training stack.
// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod envsim;
pub mod exec;
pub mod klmath;
pub mod quant;
pub mod reconciler;
pub mod reward;
pub mod rollout;
pub mod runner;
pub mod sched;
pub mod sync;
pub mod toylm;
pub mod vocab;

pub use exec::Exec;
