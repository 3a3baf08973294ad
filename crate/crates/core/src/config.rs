//! Run configuration shared by all commands, and the config hash embedded in
//! every output artifact.

use crate::flow::Tvl1Params;
use crate::model::BlockConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget at which lr is multiplied by lr_decay.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay: f64,
    pub dropout: f64,
    /// Fraction of samples held out for validation (seeded shuffle per class).
    pub val_fraction: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_at: vec![0.6, 0.85],
            lr_decay: 0.1,
            dropout: 0.0,
            val_fraction: 0.2,
        }
    }
}

/// Semantic parameters of a full run. Worker count lives outside so that it
/// can never influence outputs or the config hash.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Patch side length l; ignored when adaptive_alpha is set.
    pub patch_side: usize,
    /// When set, l is derived from the mean bone length scaled by alpha.
    pub adaptive_alpha: Option<f32>,
    /// Downsampled patch resolution mu.
    pub mu: usize,
    pub temporal_factor: usize,
    pub target_len: usize,
    /// Joint selection preset: "synth7", "pose14", or "none".
    pub joint_preset: String,
    pub tvl1: Tvl1Params,
    pub blocks: Vec<BlockConfig>,
    pub temporal_kernel: usize,
    pub train: TrainParams,
    pub blend_weights: (f64, f64),
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            patch_side: 32,
            adaptive_alpha: None,
            mu: 8,
            temporal_factor: 2,
            target_len: 64,
            joint_preset: "none".into(),
            tvl1: Tvl1Params::default(),
            blocks: vec![
                BlockConfig { channels: 16, temporal_stride: 1 },
                BlockConfig { channels: 32, temporal_stride: 1 },
                BlockConfig { channels: 32, temporal_stride: 2 },
                BlockConfig { channels: 64, temporal_stride: 2 },
            ],
            temporal_kernel: 5,
            train: TrainParams::default(),
            blend_weights: (0.5, 0.5),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Stable 64-bit digest of the canonical JSON serialization.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
