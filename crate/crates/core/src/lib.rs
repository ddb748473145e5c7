//! Gully detection from multi-year aerial image collages using
//! vision-language models: dataset ingest, collage construction, model
//! backends, answer pipelines, metrics, a small MLP and question-subset search.

pub mod backend;
pub mod collage;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod mlp;
pub mod pipeline;
pub mod prompts;
pub mod qopt;
pub mod questions;
