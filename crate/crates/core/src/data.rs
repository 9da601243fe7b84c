//! In-memory training corpus. Frames are kept as 8-bit buffers and decoded
//! to [-1, 1] tensors per batch; per-window MFCC matrices are precomputed
//! once per clip.

use crate::audio::{frame_windows, AudioError, Waveform};
use crate::config::AudioConfig;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("clip `{clip}`: {frames} frames but {windows} audio windows")]
    WindowMismatch { clip: String, frames: usize, windows: usize },
    #[error("clip `{clip}`: landmark rows ({rows}) do not match frame count ({frames})")]
    LandmarkMismatch { clip: String, rows: usize, frames: usize },
    #[error("clip `{clip}`: audio error: {source}")]
    Audio { clip: String, source: AudioError },
    #[error("corpus is empty")]
    Empty,
}

/// One aligned clip: frames at a fixed fps paired with its waveform and,
/// optionally, per-frame eye landmarks (12 points as x,y pairs, pixels).
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    /// Per frame: 3 * res * res bytes, channel-major.
    pub frames: Vec<Vec<u8>>,
    pub resolution: usize,
    pub audio: Waveform,
    pub landmarks: Option<Vec<[f64; 24]>>,
}

impl Clip {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Frame k as a [3, res, res] tensor in [-1, 1].
    pub fn frame_tensor(&self, k: usize) -> Tensor {
        let r = self.resolution;
        Tensor::from_vec(
            &[3, r, r],
            self.frames[k].iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
        )
    }

    /// Ground-truth landmarks of frame k as [12, 2].
    pub fn landmark_tensor(&self, k: usize) -> Option<Tensor> {
        self.landmarks
            .as_ref()
            .map(|rows| Tensor::from_vec(&[12, 2], rows[k].to_vec()))
    }
}

/// Validated corpus with per-clip precomputed MFCC windows.
pub struct Corpus {
    pub clips: Vec<Clip>,
    /// Per clip, per frame: [mfcc_frames, n_mfcc].
    pub mfcc: Vec<Vec<Tensor>>,
    pub audio_cfg: AudioConfig,
}

impl Corpus {
    /// Builds the window set of every clip and enforces the framing
    /// invariants: window count equals frame count exactly, and landmark
    /// rows (when present) match too.
    pub fn new(clips: Vec<Clip>, audio_cfg: &AudioConfig) -> Result<Corpus, DataError> {
        if clips.is_empty() {
            return Err(DataError::Empty);
        }
        let mut mfcc = Vec::with_capacity(clips.len());
        for clip in &clips {
            let windows = frame_windows(&clip.audio, audio_cfg.fps, audio_cfg.window_ms, audio_cfg)
                .map_err(|source| DataError::Audio { clip: clip.id.clone(), source })?;
            if windows.len() != clip.n_frames() {
                return Err(DataError::WindowMismatch {
                    clip: clip.id.clone(),
                    frames: clip.n_frames(),
                    windows: windows.len(),
                });
            }
            if let Some(lm) = &clip.landmarks {
                if lm.len() != clip.n_frames() {
                    return Err(DataError::LandmarkMismatch {
                        clip: clip.id.clone(),
                        rows: lm.len(),
                        frames: clip.n_frames(),
                    });
                }
            }
            mfcc.push(windows.into_iter().map(|w| w.mfcc).collect());
        }
        Ok(Corpus { clips, mfcc, audio_cfg: audio_cfg.clone() })
    }

    pub fn resolution(&self) -> usize {
        self.clips[0].resolution
    }

    pub fn all_have_landmarks(&self) -> bool {
        self.clips.iter().all(|c| c.landmarks.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn flat_clip(id: &str, n_frames: usize, res: usize, with_landmarks: bool) -> Clip {
        let sr = 16_000usize;
        let n = n_frames * sr / 25;
        let audio = Waveform::new(
            (0..n).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect(),
            sr as u32,
        )
        .unwrap();
        Clip {
            id: id.to_string(),
            frames: vec![vec![100u8; 3 * res * res]; n_frames],
            resolution: res,
            audio,
            landmarks: with_landmarks.then(|| vec![[10.0; 24]; n_frames]),
        }
    }

    #[test]
    fn corpus_checks_window_count() {
        let cfg = AudioConfig::default();
        let good = flat_clip("a", 25, 64, false);
        assert!(Corpus::new(vec![good], &cfg).is_ok());

        let mut bad = flat_clip("b", 25, 64, false);
        bad.frames.truncate(20);
        assert!(matches!(
            Corpus::new(vec![bad], &cfg),
            Err(DataError::WindowMismatch { frames: 20, windows: 25, .. })
        ));
    }

    #[test]
    fn corpus_checks_landmark_rows() {
        let cfg = AudioConfig::default();
        let mut clip = flat_clip("c", 25, 64, true);
        clip.landmarks.as_mut().unwrap().truncate(7);
        assert!(matches!(
            Corpus::new(vec![clip], &cfg),
            Err(DataError::LandmarkMismatch { rows: 7, frames: 25, .. })
        ));
    }

    #[test]
    fn frame_tensor_range() {
        let clip = flat_clip("d", 2, 8, false);
        let t = clip.frame_tensor(0);
        assert_eq!(t.shape(), &[3, 8, 8]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
