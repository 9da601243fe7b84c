//! In-memory checkpoint contents: named parameter tensors, the curriculum
//! state and a fingerprint of the configuration that produced them. The
//! on-disk archive format lives in the companion crate.

use crate::config::PipelineConfig;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Current curriculum position plus everything a bit-exact resume needs
/// besides the tensors themselves.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurriculumState {
    /// Active phase, 1..=3.
    pub phase: u8,
    /// Completed epochs (the next epoch to run).
    pub epoch: u32,
    /// Global epoch at which the current phase started.
    pub phase_start_epoch: u32,
    pub active_losses: Vec<String>,
    /// Per-loss epoch means, appended once per epoch.
    pub loss_history: BTreeMap<String, Vec<f64>>,
    pub rng_seed: u64,
    /// Set when training stopped because the lr schedule reached zero.
    pub halted: bool,
}

#[derive(Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub config_fingerprint: String,
    pub state: CurriculumState,
    pub tensors: BTreeMap<String, Tensor>,
}

/// FNV-1a over the canonical JSON encoding of the configuration.
pub fn config_fingerprint(cfg: &PipelineConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialises");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{:016x}", hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(config_fingerprint(&a), config_fingerprint(&b));
        b.train.lr = 0.001;
        assert_ne!(config_fingerprint(&a), config_fingerprint(&b));
    }
}
