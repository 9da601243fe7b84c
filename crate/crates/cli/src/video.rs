//! Frame-sequence assembly: numbered lossless frames plus a sidecar
//! descriptor. Container muxing is left to an external tool so no codec
//! touches the pixels the metrics read.

use crate::png;
use a2v_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("{frames} frames do not match {expected} expected from {duration_s:.3} s at {fps} fps")]
    CountMismatch { frames: usize, expected: usize, duration_s: f64, fps: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Encode(String),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoDescriptor {
    pub fps: u32,
    pub audio_path: String,
    pub frame_count: usize,
    /// External muxing hook, e.g. ffmpeg's image2 demuxer over this pattern.
    pub frame_pattern: String,
}

/// Write frames (each [3,h,w] in [-1,1]) as numbered PNGs plus
/// `video.json`, checking the frame count against the audio duration.
pub fn assemble_video(
    frames: &[Tensor],
    audio_duration_s: f64,
    audio_path: &str,
    fps: u32,
    out_dir: &Path,
) -> Result<PathBuf, VideoError> {
    let expected = (audio_duration_s * fps as f64).round() as usize;
    if frames.len() != expected {
        return Err(VideoError::CountMismatch {
            frames: frames.len(),
            expected,
            duration_s: audio_duration_s,
            fps,
        });
    }
    fs::create_dir_all(out_dir)?;
    for (i, frame) in frames.iter().enumerate() {
        png::write_frame_unit(&out_dir.join(format!("frame_{:05}.png", i)), frame)
            .map_err(|e| VideoError::Encode(e.to_string()))?;
    }
    let descriptor = VideoDescriptor {
        fps,
        audio_path: audio_path.to_string(),
        frame_count: frames.len(),
        frame_pattern: "frame_%05d.png".to_string(),
    };
    let path = out_dir.join("video.json");
    fs::write(&path, serde_json::to_string_pretty(&descriptor).expect("descriptor serialises"))?;
    Ok(path)
}
