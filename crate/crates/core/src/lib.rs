//! Core library for an open-coding workbench: labeled quote datasets,
//! prompt rendering, model calls with a replay cache, code-similarity
//! metrics, readability profiles, inter-rater agreement and experiment runs.

pub mod agreement;
pub mod corpus;
pub mod fixtures;
pub mod experiment;
pub mod gateway;
pub mod prompting;
pub mod readability;
pub mod stats;
pub mod text_metrics;

pub use corpus::{Dataset, QuoteCodePair, Split};
pub use prompting::{PromptTemplate, ShotCount, Terminator};
pub use stats::MeanStd;
pub use text_metrics::{Prf, RougeScores};
