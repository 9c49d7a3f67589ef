//! Validation harness for reproducing prognostics and health management
//! papers: typed configuration binding, an assumption ledger, a shared data
//! protocol, a small autodiff trainer, a pre-training sanity ladder, a
//! bounded repair loop, evaluation and a resumable phase controller.

pub mod assumptions;
pub mod binding;
pub mod components;
pub mod data;
pub mod tree;
pub mod trainer;
pub mod evaluator;
pub mod runtime;
pub mod verification;
pub mod repair;
pub mod control;
pub mod workflow;
