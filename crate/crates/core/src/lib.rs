//! Multi-agent hedging backtest engine.
//!
//! Per-asset-class analyst agents with tiered vector memory decide daily
//! trades; a manager runs periodic budget allocation (return / risk / CVaR
//! trade-off on the simplex), cycle-end experience sharing and
//! trigger-driven crisis conferences. Decisions come from deterministic
//! rule policies or from a chat model behind a record/replay gateway.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod exec;
pub mod allocator;
pub mod conferences;
pub mod engine;
pub mod gateway;
pub mod market;
pub mod memory;
pub mod metrics;
pub mod policy;
pub mod synth;

pub use exec::Execution;
