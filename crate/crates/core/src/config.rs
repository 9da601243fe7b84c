//! Configuration for every subsystem. All keys are namespaced the same way
//! in the TOML config file the CLI reads (audio.*, gen.*, disc.*, loss.*,
//! train.*); defaults here are the documented defaults.

use crate::nn::NormKind;
use serde::{Deserialize, Serialize};

fn default_sample_rate() -> u32 {
    16_000
}
fn default_fps() -> u32 {
    25
}
fn default_window_ms() -> u32 {
    200
}
fn default_n_mfcc() -> usize {
    13
}
fn default_hop_ms() -> u32 {
    10
}
fn default_analysis_ms() -> u32 {
    25
}
fn default_n_mels() -> usize {
    26
}
fn default_audio_dim() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub fps: u32,
    pub window_ms: u32,
    pub n_mfcc: usize,
    pub hop_ms: u32,
    pub analysis_ms: u32,
    pub n_mels: usize,
    /// Content embedding width fed to the generator.
    pub encoder_dim: usize,
    /// Optional pretrained content-encoder weights (named-tensor archive).
    pub encoder_weights: Option<String>,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: default_sample_rate(),
            fps: default_fps(),
            window_ms: default_window_ms(),
            n_mfcc: default_n_mfcc(),
            hop_ms: default_hop_ms(),
            analysis_ms: default_analysis_ms(),
            n_mels: default_n_mels(),
            encoder_dim: default_audio_dim(),
            encoder_weights: None,
        }
    }
}

impl AudioConfig {
    pub fn window_len(&self) -> usize {
        (self.window_ms as usize * self.sample_rate as usize) / 1000
    }
    pub fn hop_len(&self) -> usize {
        (self.hop_ms as usize * self.sample_rate as usize) / 1000
    }
    pub fn analysis_len(&self) -> usize {
        (self.analysis_ms as usize * self.sample_rate as usize) / 1000
    }
    /// MFCC rows per window under this config (20 at the defaults).
    pub fn mfcc_frames(&self) -> usize {
        self.window_len().div_ceil(self.hop_len())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenConfig {
    /// Output side length; power of two in [64, 256].
    pub resolution: usize,
    /// Channel width scale; the trunk starts at 8x this (capped at 512).
    pub base_channels: usize,
    pub audio_dim: usize,
    pub norm: NormKind,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            resolution: 64,
            base_channels: 64,
            audio_dim: default_audio_dim(),
            norm: NormKind::Instance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiscConfig {
    /// First-layer channel width of the frame discriminator.
    pub base_channels: usize,
    /// Frames per temporal window (the sync window shares it).
    pub temporal_window: usize,
    /// Side length the sync video stream sees (224 paper-faithful, 64 desk).
    pub sync_resolution: usize,
    /// Minimum audio/video offset (frames) for a negative sync pair.
    pub sync_negative_shift: usize,
    pub norm: NormKind,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            base_channels: 32,
            temporal_window: 5,
            sync_resolution: 64,
            sync_negative_shift: 8,
            norm: NormKind::Instance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_gan: f64,
    pub lambda_fm: f64,
    pub lambda_pl: f64,
    pub lambda_rl: f64,
    pub lambda_cl: f64,
    pub lambda_tal: f64,
    pub lambda_bl: f64,
    pub margin: f64,
    /// Optional pretrained perceptual-extractor weights.
    pub extractor_weights: Option<String>,
    /// When false the blink loss is reported but its gradient is cut.
    pub blink_gradient: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_gan: 1.0,
            lambda_fm: 10.0,
            lambda_pl: 10.0,
            lambda_rl: 50.0,
            lambda_cl: 1.0,
            lambda_tal: 1.0,
            lambda_bl: 5.0,
            margin: 1.0,
            extractor_weights: None,
            blink_gradient: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Optimisation steps per epoch; 0 means one full pass over all samples.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs at constant lr before the linear decay starts.
    pub lr_constant_epochs: u32,
    /// Epochs over which lr decays linearly to zero.
    pub lr_decay_epochs: u32,
    /// Smallest epoch count a phase may run before a plateau can advance it.
    pub min_epochs_per_phase: u32,
    /// Hard epoch cap per phase, in phase order.
    pub max_epochs_per_phase: [u32; 3],
    /// Relative spread threshold for the plateau rule; 0 disables plateaus.
    pub plateau_rel_tol: f64,
    pub plateau_window: usize,
    /// Which clip frame poses as the identity input during training.
    pub identity_frame: usize,
    /// Restart the lr clock at each phase boundary instead of running it
    /// globally.
    pub lr_restart_per_phase: bool,
    /// Cap on the curriculum (1, 2 or 3 phases) used by the ablation rows.
    pub max_phase: u8,
    /// Freeze sync-stream weights after phase 2 instead of training jointly.
    pub freeze_sync_after_phase2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            steps_per_epoch: 0,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.90,
            lr_constant_epochs: 50,
            lr_decay_epochs: 100,
            min_epochs_per_phase: 3,
            max_epochs_per_phase: [50, 50, 50],
            plateau_rel_tol: 0.01,
            plateau_window: 5,
            identity_frame: 0,
            lr_restart_per_phase: false,
            max_phase: 3,
            freeze_sync_after_phase2: false,
        }
    }
}

/// The whole pipeline configuration, one table per namespace.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    pub audio: AudioConfig,
    pub gen: GenConfig,
    pub disc: DiscConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.audio.sample_rate, 16_000);
        assert_eq!(c.audio.fps, 25);
        assert_eq!(c.audio.window_ms, 200);
        assert_eq!(c.audio.n_mfcc, 13);
        assert_eq!(c.audio.window_len(), 3200);
        assert_eq!(c.audio.mfcc_frames(), 20);
        assert_eq!(c.gen.resolution, 64);
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.train.beta1, 0.0);
        assert_eq!(c.train.beta2, 0.90);
        assert_eq!(c.loss.margin, 1.0);
    }
}
