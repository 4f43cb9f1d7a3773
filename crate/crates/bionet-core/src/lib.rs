//! Choroid segmentation pipeline for OCT B-scans.
//!
//! A global multi-layer segmentation module coarsely partitions the scan
//! into retinal bands; its output, concatenated with the raw image, feeds a
//! local module that segments the choroid. A thickness-regression network,
//! pretrained on ground-truth masks and then frozen, plugs into the local
//! objective as a biomarker regularizer that sharpens the fuzzy lower
//! boundary.
//!
//! The crate covers the whole loop: synthetic phantom data with exact
//! ground truth ([`phantom`], [`dataset`]), the evaluation suite
//! ([`metrics`]), differentiable losses ([`losses`]), the networks and
//! their deterministic f64 training engine ([`nn`]) and the two-stage
//! training harness ([`training`]).

pub mod dataset;
pub mod domain;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod training;

pub use domain::{
    validate_sample, BScan, BoundaryCurve, ChoroidMask, DomainError, LayerLabelMap, Sample,
    Thickness,
};
pub use metrics::MetricsReport;
pub use phantom::PhantomConfig;
