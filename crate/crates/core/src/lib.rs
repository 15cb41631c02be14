//! Module-wise expert pruning for LoRA mixture-of-experts fine-tuning.
//!
//! A tiny frozen transformer carries a bank of low-rank experts on each of
//! its seven projections per layer. Training runs in three phases: dense
//! exploration with a load-balancing penalty while discrete routing counts
//! accumulate, a one-shot per-module prune that physically slices expert
//! stacks, gate rows and optimizer moments, then specialization on the
//! survivors with the penalty switched off.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod error;
pub mod exec;
pub mod moe_adapter;
pub mod numerics;
pub mod optimizer;
pub mod pruner;
pub mod routing_ledger;
pub mod synthetic_tasks;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, Model, ModuleId, ProjKind, TokenBatch};
pub use error::{Error, Result};
pub use moe_adapter::{ExpertBank, RoutingDecision};
pub use numerics::{Matrix, Tape, Var};
pub use optimizer::{AdamW, AdamWConfig, OptimizerState};
pub use pruner::{PruneReport, PruningPlan};
pub use routing_ledger::RoutingLedger;
pub use trainer::{PhaseConfig, RunArtifacts};
