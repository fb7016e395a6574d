//! Core algorithms for vision-based imminent-fall prediction from skeletal
//! time series: pose smoothing and normalization, biomechanical feature
//! extraction, skeleton-graph construction, a dual-stream spatio-temporal
//! graph model with body attention and cross-attention fusion, training,
//! evaluation metrics and protocols, attention interpretability, and a
//! deterministic synthetic-data generator.
//!
//! This crate is `no_std`-compatible (with `alloc`); all file formats, IO,
//! and the CLI live in the companion `fallcast` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod biomech;
pub mod graph;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod pose;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod train;
pub mod window;

pub use autodiff::{real, Real, Tensor};
