//! Two-phase label mining for large text corpora.
//!
//! Phase one builds a label taxonomy with an LLM: documents are summarized,
//! then a generate/update/review prompt chain folds minibatches of summaries
//! into a candidate taxonomy, with multiple trials and LLM-judged selection.
//! Phase two scales labeling: the LLM annotates a sample against the chosen
//! taxonomy, and those pseudo-labels train lightweight classifiers over text
//! embeddings that can label the full corpus cheaply. An embedding-clustering
//! baseline and an evaluation suite (agreement statistics, pairwise accuracy
//! judgments, classification reports) round out the pipeline.
//!
//! Every stage runs against a pluggable chat backend; deterministic offline
//! mocks make the whole pipeline testable without a network.

pub mod annotate;
pub mod classify;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod induce;
pub mod taxonomy;

pub use error::{Error, Result};
