//! Clip manifests: parsing, per-entry validation and decoding into the
//! in-memory corpus. No operation downstream ever sees an invalid entry.

use crate::png;
use crate::wav::read_wav_mono16;
use a2v_core::config::AudioConfig;
use a2v_core::data::{Clip, Corpus, DataError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("manifest syntax: {0}")]
    Syntax(String),
    #[error(transparent)]
    Corpus(#[from] DataError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipManifestEntry {
    pub clip_id: String,
    /// Directory of numbered frame images, relative to the manifest.
    pub frames_path: String,
    /// 16-bit PCM mono WAV, relative to the manifest.
    pub audio_path: String,
    pub fps: u32,
    /// Optional per-frame eye landmarks: one line per frame, 24 numbers.
    #[serde(default)]
    pub landmarks_path: Option<String>,
    #[serde(default)]
    pub identity_frame: usize,
    /// Faces are aligned upstream; ingestion trusts this declaration.
    #[serde(default = "default_true")]
    pub aligned: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub entries: Vec<ClipManifestEntry>,
}

/// Why one entry was rejected.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryErrorKind {
    MissingFile { path: String },
    FrameAudioMismatch { frames: usize, expected: usize },
    LandmarkRows { rows: usize, frames: usize },
    BadAudio { reason: String },
    BadLandmarks { reason: String },
    NoFrames,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntryError {
    pub clip_id: String,
    #[serde(flatten)]
    pub kind: EntryErrorKind,
}

/// A validated entry with everything needed to decode it later.
#[derive(Debug, Clone)]
pub struct ValidatedEntry {
    pub entry: ClipManifestEntry,
    pub frame_files: Vec<PathBuf>,
    pub audio_file: PathBuf,
    pub landmark_file: Option<PathBuf>,
    pub n_frames: usize,
}

#[derive(Debug)]
pub struct ManifestReport {
    pub valid: Vec<ValidatedEntry>,
    pub errors: Vec<EntryError>,
}

/// Frame/audio counts may disagree by at most one frame (rounding in real
/// datasets); anything worse is a hard per-entry error.
pub const FRAME_COUNT_TOLERANCE: usize = 1;

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, EntryErrorKind> {
    let entries = fs::read_dir(dir)
        .map_err(|_| EntryErrorKind::MissingFile { path: dir.display().to_string() })?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(EntryErrorKind::NoFrames);
    }
    Ok(frames)
}

fn parse_landmarks(path: &Path) -> Result<Vec<[f64; 24]>, EntryErrorKind> {
    let text = fs::read_to_string(path)
        .map_err(|_| EntryErrorKind::MissingFile { path: path.display().to_string() })?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let vals = vals.map_err(|e| EntryErrorKind::BadLandmarks {
            reason: format!("line {}: {}", ln + 1, e),
        })?;
        if vals.len() != 24 {
            return Err(EntryErrorKind::BadLandmarks {
                reason: format!("line {}: expected 24 numbers, got {}", ln + 1, vals.len()),
            });
        }
        rows.push(std::array::from_fn(|i| vals[i]));
    }
    Ok(rows)
}

fn validate_entry(base: &Path, entry: &ClipManifestEntry) -> Result<ValidatedEntry, EntryErrorKind> {
    let frames_dir = base.join(&entry.frames_path);
    let frame_files = list_frames(&frames_dir)?;
    let audio_file = base.join(&entry.audio_path);
    if !audio_file.is_file() {
        return Err(EntryErrorKind::MissingFile { path: audio_file.display().to_string() });
    }
    let wav = read_wav_mono16(&audio_file)
        .map_err(|e| EntryErrorKind::BadAudio { reason: e.to_string() })?;
    let expected = (wav.duration_s() * entry.fps as f64).round() as usize;
    if frame_files.len().abs_diff(expected) > FRAME_COUNT_TOLERANCE {
        return Err(EntryErrorKind::FrameAudioMismatch { frames: frame_files.len(), expected });
    }
    let landmark_file = match &entry.landmarks_path {
        Some(rel) => {
            let path = base.join(rel);
            let rows = parse_landmarks(&path)?;
            if rows.len() != frame_files.len() {
                return Err(EntryErrorKind::LandmarkRows {
                    rows: rows.len(),
                    frames: frame_files.len(),
                });
            }
            Some(path)
        }
        None => None,
    };
    Ok(ValidatedEntry {
        entry: entry.clone(),
        n_frames: frame_files.len(),
        frame_files,
        audio_file,
        landmark_file,
    })
}

/// Parse and validate a manifest; syntax failures abort, per-entry failures
/// are collected as diagnostics while valid entries pass through.
pub fn load_manifest(path: &Path) -> Result<ManifestReport, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| ManifestError::Syntax(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut valid = Vec::new();
    let mut errors = Vec::new();
    for entry in &file.entries {
        match validate_entry(&base, entry) {
            Ok(v) => valid.push(v),
            Err(kind) => errors.push(EntryError { clip_id: entry.clip_id.clone(), kind }),
        }
    }
    Ok(ManifestReport { valid, errors })
}

/// Decode validated entries into the in-memory corpus.
pub fn load_corpus(entries: &[ValidatedEntry], audio_cfg: &AudioConfig) -> Result<Corpus, ManifestError> {
    let mut clips = Vec::with_capacity(entries.len());
    for v in entries {
        let mut frames = Vec::with_capacity(v.frame_files.len());
        let mut resolution = 0usize;
        for f in &v.frame_files {
            let (raw, w, h) = png::read_rgb(f).map_err(|e| ManifestError::Unreadable {
                path: f.display().to_string(),
                reason: e.to_string(),
            })?;
            resolution = h as usize;
            debug_assert_eq!(w, h, "frames must be square");
            frames.push(png::interleaved_to_chw(&raw, w as usize, h as usize));
        }
        let audio = read_wav_mono16(&v.audio_file).map_err(|e| ManifestError::Unreadable {
            path: v.audio_file.display().to_string(),
            reason: e.to_string(),
        })?;
        let landmarks = match &v.landmark_file {
            Some(p) => Some(parse_landmarks(p).map_err(|e| ManifestError::Syntax(format!("{:?}", e)))?),
            None => None,
        };
        clips.push(Clip {
            id: v.entry.clip_id.clone(),
            frames,
            resolution,
            audio,
            landmarks,
        });
    }
    Ok(Corpus::new(clips, audio_cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_synthetic_corpus;

    #[test]
    fn synthetic_manifest_validates_clean() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic_corpus(3, 11, dir.path()).unwrap();
        let report = load_manifest(&manifest).unwrap();
        assert_eq!(report.valid.len(), 3);
        assert!(report.errors.is_empty());

        let corpus = load_corpus(&report.valid, &AudioConfig::default()).unwrap();
        assert_eq!(corpus.clips.len(), 3);
        assert!(corpus.all_have_landmarks());
        // window count equals frame count is enforced by Corpus::new
    }

    #[test]
    fn missing_wav_rejected_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic_corpus(2, 12, dir.path()).unwrap();
        fs::remove_file(dir.path().join("clip_0001/audio.wav")).unwrap();
        let report = load_manifest(&manifest).unwrap();
        assert_eq!(report.valid.len(), 1);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].clip_id, "clip_0001");
        assert!(matches!(report.errors[0].kind, EntryErrorKind::MissingFile { .. }));
    }

    #[test]
    fn frame_audio_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic_corpus(1, 13, dir.path()).unwrap();
        // delete frames beyond the tolerance
        let frames_dir = dir.path().join("clip_0000/frames");
        let mut files: Vec<_> = fs::read_dir(&frames_dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let n = files.len();
        for f in &files[n - 5..] {
            fs::remove_file(f).unwrap();
        }
        // landmarks row count now also mismatches; frame/audio check fires first
        let report = load_manifest(&manifest).unwrap();
        assert!(report.valid.is_empty());
        assert!(matches!(
            report.errors[0].kind,
            EntryErrorKind::FrameAudioMismatch { expected, frames } if frames + 5 == expected
        ));
    }

    #[test]
    fn one_frame_slack_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic_corpus(1, 14, dir.path()).unwrap();
        let frames_dir = dir.path().join("clip_0000/frames");
        let mut files: Vec<_> = fs::read_dir(&frames_dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        fs::remove_file(files.last().unwrap()).unwrap();
        // trim the landmark file to match
        let lm_path = dir.path().join("clip_0000/landmarks.txt");
        let text = fs::read_to_string(&lm_path).unwrap();
        let keep: Vec<&str> = text.lines().take(files.len() - 1).collect();
        fs::write(&lm_path, keep.join("\n") + "\n").unwrap();
        let report = load_manifest(&manifest).unwrap();
        assert_eq!(report.valid.len(), 1, "{:?}", report.errors);
    }

    #[test]
    fn syntax_error_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::Syntax(_))));
    }

    #[test]
    fn landmark_row_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic_corpus(1, 15, dir.path()).unwrap();
        let lm_path = dir.path().join("clip_0000/landmarks.txt");
        let text = fs::read_to_string(&lm_path).unwrap();
        let truncated: Vec<&str> = text.lines().take(3).collect();
        fs::write(&lm_path, truncated.join("\n") + "\n").unwrap();
        let report = load_manifest(&manifest).unwrap();
        assert!(matches!(report.errors[0].kind, EntryErrorKind::LandmarkRows { rows: 3, .. }));
    }
}
