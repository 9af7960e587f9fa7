//! Batch geospatial embedding engine: imagery providers, model registry,
//! orchestration pipeline, export store, and fixtures.
//!
//! The `geoembed-core` crate carries the platform-independent kernel
//! (specs, geodesy, reference model math); this crate adds IO, providers,
//! concurrency, and the CLI.

pub mod cli;
pub mod engine;
pub mod export;
pub mod fixtures;
pub mod provider;
pub mod ras;
pub mod registry;
pub mod store;
pub mod viz;

pub use geoembed_core as core;
