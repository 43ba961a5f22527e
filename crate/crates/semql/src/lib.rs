//! semql: a desk-scale semantic SQL engine.
//!
//! SQL queries may contain AI operators (AI_FILTER, AI_CLASSIFY, AI_COMPLETE,
//! AI_AGG, AI_SUMMARIZE_AGG) whose predicates and transforms are evaluated by
//! a pluggable model provider. The optimizer treats model-call cost as the
//! primary objective: it reorders predicates, places AI predicates relative
//! to joins, and rewrites eligible semantic joins into multi-label
//! classification. All providers can be deterministic, so every optimization
//! is verifiable offline by exact call counting.

pub mod agg;
pub mod cascade;
pub mod data;
pub mod exec;
pub mod ingest;
pub mod models;
pub mod parser;
pub mod planner;

pub use data::{Table, Value};
