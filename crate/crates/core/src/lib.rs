//! Core math and data model for the geoembed engine: request specs and
//! validation, canonical serialization and hashing, footprint geometry,
//! raster compositing and resampling, the deterministic mock scene
//! catalog, reference embedding math, and a small PCA.
//!
//! This crate is `no_std` + `alloc`; all IO, threading, and file formats
//! live in the companion `geoembed` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod canonical;
pub mod geo;
pub mod hashing;
pub mod mock;
pub mod model;
pub mod pca;
pub mod raster;
pub mod spec;
