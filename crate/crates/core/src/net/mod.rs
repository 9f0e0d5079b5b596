//! Neural architecture: shared extractor, per-user channel-aware
//! sub-encoders, channel-aware fusion, receivers, and the baseline and
//! ablation variants built from the same parts.

pub mod blocks;
pub mod config;
pub mod layers;
pub mod model;

pub use blocks::{reparameterize, Gcf, GcfTrace, Latent, Lca, LcaTrace, Receiver, Tce, SIGMA_FLOOR};
pub use config::{Head, ModelConfig, SoftmaxAxis, Variant};
pub use model::{BroadcastModel, ChannelMode, ForwardPass, LatentMode, LCA_DEPTH};

use crate::error::{Error, Result};
use crate::graph::Var;

/// Mean and standard deviation of one user's Gaussian latent, `(B, c2)` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentStats {
    pub mu: Var,
    pub sigma: Var,
}

/// Network input for an SNR in dB: `dB / 10`, i.e. `log10` of the linear
/// SNR, which keeps the conditioning near unit scale.
pub fn snr_feature(snr_db: f64) -> f64 {
    snr_db / 10.0
}

/// Per-user SNRs in dB, one entry per user.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrVector(Vec<f64>);

impl SnrVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("snr", "SNR vector must not be empty"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::config("snr", format!("SNR must be finite, got {bad}")));
        }
        Ok(SnrVector(values))
    }

    pub fn uniform(n: usize, snr_db: f64) -> Result<Self> {
        Self::new(vec![snr_db; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, user: usize) -> f64 {
        self.0[user]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}
