//! Compiler and execution sandbox turning BPMN collaborations into
//! interpreter-executable contract packages with multi-method transactions.

pub mod bpmn;
pub mod canonical;
pub mod codegen;
pub mod cost;
pub mod fixtures;
pub mod fsm;
pub mod graph;
pub mod ledger;
pub mod ops;
pub mod pipeline;
pub mod plan;
pub mod runtime;
pub mod sese;
