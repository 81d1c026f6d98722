//! softsim: compile counting temporal-logic formulas into concrete softmax
//! transformers, execute them, and verify numerically that sharpened soft
//! attention reproduces hard-attention behaviour within explicit error
//! budgets.
//!
//! The crate has three legs:
//!
//! * a formula language with an exact reference evaluator ([`logic`]) and a
//!   compiler from formulas to transformer specs ([`compiler`]) driven by
//!   either temperature scaling or unbounded position features;
//! * executable transformer semantics ([`transformer`]) plus machinery that
//!   converts average-hard attention models to temperature-scaled softmax
//!   ones and verifies the approximation layer by layer ([`ahat`]);
//! * numeric bound checks for every approximation step ([`bounds`]) and a
//!   small prefix-sum program interpreter with a balanced-bracket program
//!   and its stack oracle ([`srasp`]).

pub mod ahat;
pub mod bounds;
pub mod cli;
pub mod compiler;
pub mod fixtures;
pub mod logic;
pub mod report;
pub mod srasp;
pub mod transformer;
pub mod verify;

/// Crate version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
