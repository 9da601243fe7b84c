//! One-shot adaptation of a trained generator to an unseen identity: a few
//! epochs of perceptual-loss fine-tuning against the identity image itself
//! (the only ground-truth pixel source available at inference time).
//! Discriminators are untouched and the source checkpoint is never mutated.

use crate::audio::{frame_windows, AudioError, ContentEncoder, Waveform};
use crate::autograd::Var;
use crate::checkpoint::CheckpointData;
use crate::config::PipelineConfig;
use crate::generator::{tile_batch, GenError, SpadeGenerator};
use crate::image::IdentityImage;
use crate::losses::{perceptual_loss, ConvPyramidExtractor};
use crate::nn::{Adam, ParamSet};
use crate::tensor::Tensor;
use crate::trainer::Trainer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("identity image is {got}x{got} but the checkpoint was trained at {want}x{want}")]
    ResolutionMismatch { got: usize, want: usize },
    #[error("checkpoint is from phase {phase}; adaptation expects phase >= 2 (override to force)")]
    UntrainedCheckpoint { phase: u8 },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    AllGenerator,
    ModulationOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub scope: AdaptScope,
    /// Accept phase-1 checkpoints too.
    pub allow_untrained: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            epochs: 5,
            lr: 0.0002,
            scope: AdaptScope::AllGenerator,
            allow_untrained: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// Perceptual loss over the clip before any update.
    pub initial_loss: f64,
    /// Same measurement after the final epoch.
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// Fine-tune the generator from `ckpt` on one unseen identity and return the
/// derived parameter set plus the endpoint measurements.
pub fn adapt(
    cfg: &PipelineConfig,
    ckpt: &CheckpointData,
    unseen: &IdentityImage,
    audio: &Waveform,
    acfg: &AdaptationConfig,
) -> Result<(CheckpointData, AdaptOutcome), AdaptError> {
    if unseen.resolution() != cfg.gen.resolution {
        return Err(AdaptError::ResolutionMismatch {
            got: unseen.resolution(),
            want: cfg.gen.resolution,
        });
    }
    if ckpt.state.phase < 2 && !acfg.allow_untrained {
        return Err(AdaptError::UntrainedCheckpoint { phase: ckpt.state.phase });
    }

    // Rebuild the full model from the checkpoint; only generator weights
    // will move.
    let trainer = Trainer::from_checkpoint(cfg, ckpt).map_err(|e| AdaptError::Checkpoint(e.to_string()))?;
    let generator = &trainer.generator;
    let encoder = &trainer.encoder;
    let extractor = &trainer.extractor;

    let windows = frame_windows(audio, cfg.audio.fps, cfg.audio.window_ms, &cfg.audio)?;
    let res = cfg.gen.resolution;
    let id_one = unseen.pixels().reshaped(&[1, 3, res, res]);

    let tuned: ParamSet = match acfg.scope {
        AdaptScope::AllGenerator => generator.params.subset(|_| true),
        AdaptScope::ModulationOnly => generator
            .params
            .subset(|name| name.contains(".spade") || name.contains(".gamma") || name.contains(".beta")),
    };
    let mut opt = Adam::new(&tuned, cfg.train.beta1, cfg.train.beta2);

    let eval_loss = |generator: &SpadeGenerator, encoder: &ContentEncoder, extractor: &ConvPyramidExtractor| -> Result<f64, AdaptError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in windows.chunks(8) {
            let (emb, id) = embed_chunk(encoder, chunk, &id_one, &cfg.audio)?;
            let frames = generator.forward_batch(&emb, &id)?;
            let target = Var::input(tile_batch(&id_one, chunk.len()));
            total += perceptual_loss(&target, &frames, extractor, 1.0).item() * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count as f64)
    };

    let initial_loss = eval_loss(generator, encoder, extractor)?;
    for _ in 0..acfg.epochs {
        for chunk in windows.chunks(cfg.train.batch_size.max(1)) {
            let (emb, id) = embed_chunk(encoder, chunk, &id_one, &cfg.audio)?;
            let frames = trainer.generator.forward_batch(&emb, &id)?;
            let target = Var::input(tile_batch(&id_one, chunk.len()));
            tuned.zero_grads();
            trainer.encoder.params.zero_grads();
            let loss = perceptual_loss(&target, &frames, &trainer.extractor, 1.0);
            loss.backward();
            opt.step(&tuned, acfg.lr);
            trainer.encoder.params.zero_grads();
        }
    }
    let final_loss = eval_loss(&trainer.generator, &trainer.encoder, &trainer.extractor)?;

    // Derived checkpoint: generator tensors updated, everything else copied.
    let mut derived = ckpt.clone();
    for (name, value) in trainer.generator.params.export() {
        derived.tensors.insert(format!("gen.{}", name), value);
    }
    Ok((derived, AdaptOutcome { initial_loss, final_loss, epochs_run: acfg.epochs }))
}

fn embed_chunk(
    encoder: &ContentEncoder,
    chunk: &[crate::audio::AudioWindow],
    id_one: &Tensor,
    audio_cfg: &crate::config::AudioConfig,
) -> Result<(Var, Var), AdaptError> {
    let n = chunk.len();
    let fpw = audio_cfg.mfcc_frames();
    let mut mfcc = Vec::with_capacity(n * fpw * audio_cfg.n_mfcc);
    for w in chunk {
        mfcc.extend_from_slice(w.mfcc.data());
    }
    let mfcc = Var::input(Tensor::from_vec(&[n, fpw, audio_cfg.n_mfcc], mfcc));
    let emb = encoder.encode_batch(&mfcc).detach();
    let id = Var::input(tile_batch(id_one, n));
    Ok((emb, id))
}
