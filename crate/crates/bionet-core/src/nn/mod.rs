//! The three networks of the pipeline and their training machinery.
//!
//! A global multi-layer segmenter and a local choroid segmenter share one
//! U-Net implementation; the thickness regressor is a small strided conv
//! trunk with a regression head. All math is f64 with hand-written backward
//! passes, which keeps gradients checkable against finite differences and
//! makes determinism and freeze contracts straightforward: a network's
//! parameters hash to a digest, and a frozen network must keep its digest
//! bitwise unchanged.

pub mod adam;
pub mod bio;
pub mod cascade;
pub mod checkpoint;
pub mod layers;
pub mod ops;
pub mod unet;

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use adam::Adam;
pub use bio::{BioRegressor, BioTape};
pub use cascade::{cascade_forward, Cascade, CascadeOutput};
pub use unet::{SegHead, Unet};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("input has {got} channels, network expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial dims {h}x{w} not divisible by 2^{depth}")]
    IndivisibleDims { h: usize, w: usize, depth: usize },
    #[error("checkpoint i/o failed on {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error("checkpoint schema {0} unsupported (expected {expected})", expected = checkpoint::SCHEMA_VERSION)]
    UnsupportedSchema(u32),
    #[error("operation requires a frozen network")]
    NotFrozen,
}

/// Architecture hyper-parameters shared by the segmentation networks and
/// the thickness regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel count at full resolution; doubles per downsampling level.
    pub base_width: usize,
    /// Number of 2x downsampling levels.
    pub depth: usize,
    /// Hidden width of the thickness regression head.
    pub bio_head_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 12,
            base_width: 64,
            depth: 4,
            bio_head_width: 64,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NetworkError::BadConfig("channel counts must be positive".into()));
        }
        if self.base_width == 0 || self.bio_head_width == 0 {
            return Err(NetworkError::BadConfig("widths must be positive".into()));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(NetworkError::BadConfig(format!(
                "depth {} outside 1..=8",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Stable named access to a network's parameters (and their gradient
/// buffers), visited in a fixed order. Digests, checkpoints and the
/// optimizer all build on this.
pub trait Params {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));
    fn visit_params_with_grads_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    );
    fn zero_grads(&mut self);
}

/// SHA-256 over parameter names, shapes and raw little-endian f64 bytes,
/// in visitation order. Bitwise equality of parameters iff equal digests.
pub fn param_digest<P: Params + ?Sized>(net: &P) -> String {
    let mut hasher = Sha256::new();
    net.visit_params(&mut |name, view| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &d in view.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in view.iter() {
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn param_count<P: Params + ?Sized>(net: &P) -> usize {
    let mut count = 0;
    net.visit_params(&mut |_, view| count += view.len());
    count
}

/// Builds a segmentation U-Net; `head` picks 12-way channel normalization
/// (global module) or a per-pixel sigmoid (local module).
pub fn build_unet(
    config: &NetworkConfig,
    head: SegHead,
    seed: u64,
) -> Result<Unet, NetworkError> {
    Unet::new(config, head, seed)
}

/// Builds the thickness regression network (single-channel input).
pub fn build_bio_net(config: &NetworkConfig, seed: u64) -> Result<BioRegressor, NetworkError> {
    BioRegressor::new(config, seed)
}
