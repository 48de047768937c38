//! Segment-level attribution toolkit for long reasoning traces.
//!
//! A trace is split into segments at transition keywords, every chain-of-thought
//! token receives an integrated-gradients score against the probability of the
//! ground-truth answer, and segments are ranked by attribution strength and
//! filtered by direction consistency. The selected segments become per-token
//! loss masks for selective finetuning, pruned traces, or analysis reports.
//!
//! Modules follow the data flow:
//!
//! - [`trace`]: corpus records, tokens and segments
//! - [`segmenter`]: keyword profiles, text splitting, token alignment
//! - [`grad_oracle`]: the differentiable scorer interface, the built-in reference
//!   model, sampling, finite-difference checks and the attribution dump format
//! - [`attribution`]: integrated gradients along the baseline path
//! - [`scoring`]: segment strength, consistency and normalization
//! - [`selection`]: ranking, cumulative threshold and consistency filter
//! - [`masking`]: loss masks and full/selective cross-entropy
//! - [`baselines`]: competing importance measures, ablation selectors, pruning
//! - [`analytics`]: perplexity/entropy, repetition BLEU, strength CDF,
//!   decision-segment statistics and the truncation judge client
//! - [`pipeline`]: staged runs with artifact handoff and manifests
//! - [`synth`]: toy arithmetic traces with injected redundancy

pub mod analytics;
pub mod attribution;
pub mod baselines;
pub mod error;
pub mod grad_oracle;
pub mod linalg;
pub mod masking;
pub mod ndjson;
pub mod pipeline;
pub mod scoring;
pub mod segmenter;
pub mod selection;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
