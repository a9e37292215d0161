//! Synthetic cloning of image-classification datasets.
//!
//! The pipeline runs from a WordNet class set to evaluation numbers:
//!
//! 1. [`catalog`] loads synset metadata (lemmas, hypernyms, definitions).
//! 2. [`prompt`] renders prompt templates and compiles a deterministic,
//!    seeded [`prompt::GenerationPlan`].
//! 3. [`generation`] executes the plan against a text-to-image backend
//!    and [`store`] records every image in an append-only manifest.
//! 4. [`trainer`] trains an encoder and linear classifier from scratch.
//! 5. [`evaluator`] scores top-k accuracy (optionally class-restricted),
//!    extracts features and runs linear probes; [`analysis`] computes
//!    representation statistics over extracted features.
//! 6. [`report`] records run manifests and renders reports as tables or
//!    spider charts.
//!
//! Data-parallel sections go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to sequential loops otherwise.

pub mod analysis;
pub mod catalog;
pub mod error;
pub mod evaluator;
pub mod generation;
pub mod imaging;
pub mod nn;
pub mod par;
pub mod prompt;
pub mod report;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
