//! Early exit for chain-of-thought reasoning.
//!
//! The crate is organised around the life cycle of a reasoning trace:
//!
//! * [`trace`] holds the trace data model, its line-delimited file formats and
//!   per-token label assignment.
//! * [`features`] carries per-token feature vectors (binary `OPTX` sidecars and
//!   the online log-probability features).
//! * [`analysis`] computes Token-Confidence and the signal studies built on it.
//! * [`llm`] is the uniform completion interface plus a deterministic scripted
//!   model used for offline runs.
//! * [`curation`] finds the earliest arrival of the final answer in a trace and
//!   assembles labeled datasets.
//! * [`probe`] is the per-token exit classifier and its trainer.
//! * [`exit`] is the online decision rule, live sessions, hindsight-optimal
//!   length search and the truncation sweep.
//! * [`baselines`] implements the comparison policies.
//! * [`report`] aggregates outcomes into benchmark tables and Pareto fronts.
//!
//! Data-parallel loops go through [`exec`]; with the `parallel` feature they
//! fan out over rayon, otherwise they run sequentially with identical results.

// NaN must fail range checks, so negated comparisons are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod answer;
pub mod baselines;
pub mod curation;
pub mod exec;
pub mod exit;
pub mod features;
pub mod llm;
pub mod probe;
pub mod report;
pub mod synth;
pub mod trace;

pub use exec::ExecMode;
pub use trace::{AnswerPosition, LabeledTrace, TokenRecord, TopKEntry, Trace};
