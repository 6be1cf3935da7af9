//! Claim-level hallucination detection for image-text pairs, with tool
//! evidence, and an evaluation harness for annotated benchmarks.

pub mod digest;
pub mod gateway;
pub mod model;
pub mod prompt;
pub mod repair;
pub mod stages;
pub mod tools;
pub mod cache;
pub mod executor;
pub mod metrics;
pub mod bench;
pub mod cli;
