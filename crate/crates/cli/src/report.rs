//! The `evaluate` pipeline: pair generated and reference clips, run the
//! metric suite and emit a line-delimited report (one record per clip plus
//! an aggregate line).

use crate::manifest::load_manifest;
use crate::png;
use a2v_core::image::luma;
use a2v_core::losses::{ear, EyePoints, FeatureExtractor};
use a2v_core::metrics::{acd, cpbd, detect_blinks, psnr, ssim, IdentityEmbedder};
use a2v_core::tensor::Tensor;
use a2v_core::Var;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0}")]
    Input(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frames: usize,
    pub ssim: Option<f64>,
    pub psnr_db: Option<f64>,
    /// Frames at infinite PSNR (identical pairs), excluded from the mean.
    pub psnr_excluded_frames: usize,
    pub cpbd: Option<f64>,
    pub acd_cosine: Option<f64>,
    pub acd_euclidean: Option<f64>,
    pub same_identity_cosine: Option<bool>,
    pub same_identity_euclidean: Option<bool>,
    pub blink_count_ref: Option<usize>,
    pub blink_count_gen: Option<usize>,
    /// Reserved; populated from an external predictions file when given.
    pub wer: Option<f64>,
    pub embedder: String,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AggregateRecord {
    pub aggregate: bool,
    pub clips: usize,
    pub clips_with_errors: usize,
    pub ssim_mean: Option<f64>,
    pub psnr_db_mean: Option<f64>,
    pub cpbd_mean: Option<f64>,
    pub acd_cosine_mean: Option<f64>,
    pub acd_euclidean_mean: Option<f64>,
    pub embedder: String,
}

/// One side of the comparison: ordered frame paths per clip id.
pub type ClipSet = BTreeMap<String, Vec<PathBuf>>;

fn pngs_in(dir: &Path) -> Vec<PathBuf> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    frames.sort();
    frames
}

/// Accepts a manifest (.json), a directory of PNGs (one clip) or a directory
/// of clip subdirectories (each with PNGs directly or under frames/).
pub fn discover_clips(path: &Path) -> Result<ClipSet, ReportError> {
    let mut out = ClipSet::new();
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        let report = load_manifest(path).map_err(|e| ReportError::Input(e.to_string()))?;
        if !report.errors.is_empty() {
            return Err(ReportError::Input(format!(
                "manifest has {} invalid entries",
                report.errors.len()
            )));
        }
        for v in report.valid {
            out.insert(v.entry.clip_id.clone(), v.frame_files);
        }
        return Ok(out);
    }
    if !path.is_dir() {
        return Err(ReportError::Input(format!("{} is not a directory or manifest", path.display())));
    }
    let direct = pngs_in(path);
    if !direct.is_empty() {
        out.insert(
            path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into()),
            direct,
        );
        return Ok(out);
    }
    for entry in fs::read_dir(path)? {
        let sub = entry?.path();
        if !sub.is_dir() {
            continue;
        }
        let frames = {
            let nested = sub.join("frames");
            if nested.is_dir() {
                pngs_in(&nested)
            } else {
                pngs_in(&sub)
            }
        };
        if !frames.is_empty() {
            out.insert(sub.file_name().unwrap().to_string_lossy().into_owned(), frames);
        }
    }
    if out.is_empty() {
        return Err(ReportError::Input(format!("no clips found under {}", path.display())));
    }
    Ok(out)
}

/// Mean-pooled features of a frozen extractor as the identity embedding.
pub struct ExtractorEmbedder<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub label: String,
}

impl IdentityEmbedder for ExtractorEmbedder<'_> {
    fn embed(&self, frame: &Tensor) -> Vec<f64> {
        let s = frame.shape();
        let unit = frame.map(|v| v / 127.5 - 1.0);
        let x = Var::input(unit.reshaped(&[1, s[0], s[1], s[2]]));
        let mut out = Vec::new();
        for level in self.extractor.features(&x) {
            let v = level.value();
            let dims = v.shape().to_vec();
            let (c, hw) = (dims[1], dims[2] * dims[3]);
            for ch in 0..c {
                out.push(v.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64);
            }
        }
        out
    }

    fn name(&self) -> &str {
        &self.label
    }
}

/// Per-frame EAR series from a landmarks file (mean of both eyes).
pub fn ear_series_from_landmarks(rows: &[[f64; 24]]) -> Vec<f64> {
    rows.iter()
        .map(|lm| {
            let left: EyePoints = std::array::from_fn(|i| [lm[2 * i], lm[2 * i + 1]]);
            let right: EyePoints = std::array::from_fn(|i| [lm[12 + 2 * i], lm[13 + 2 * i]]);
            let l = ear(&left).unwrap_or(0.0);
            let r = ear(&right).unwrap_or(0.0);
            0.5 * (l + r)
        })
        .collect()
}

pub struct EvalInputs<'a> {
    pub generated: ClipSet,
    pub reference: ClipSet,
    pub embedder: &'a dyn IdentityEmbedder,
    /// EAR series per clip id for the reference side (from landmarks).
    pub ref_ears: BTreeMap<String, Vec<f64>>,
    /// EAR series per clip id for the generated side (from a regressor).
    pub gen_ears: BTreeMap<String, Vec<f64>>,
    /// External word-error-rate figures keyed by clip id.
    pub wer: BTreeMap<String, f64>,
}

fn eval_clip(
    id: &str,
    gen_frames: &[PathBuf],
    ref_frames: &[PathBuf],
    inputs: &EvalInputs,
) -> ClipRecord {
    let mut record = ClipRecord {
        clip_id: id.to_string(),
        frames: gen_frames.len(),
        ssim: None,
        psnr_db: None,
        psnr_excluded_frames: 0,
        cpbd: None,
        acd_cosine: None,
        acd_euclidean: None,
        same_identity_cosine: None,
        same_identity_euclidean: None,
        blink_count_ref: inputs.ref_ears.get(id).and_then(|e| detect_blinks(e).ok()),
        blink_count_gen: inputs.gen_ears.get(id).and_then(|e| detect_blinks(e).ok()),
        wer: inputs.wer.get(id).copied(),
        embedder: inputs.embedder.name().to_string(),
        error: None,
    };
    if gen_frames.len() != ref_frames.len() {
        record.error = Some(format!(
            "frame count mismatch: generated {} vs reference {}",
            gen_frames.len(),
            ref_frames.len()
        ));
        return record;
    }
    let mut gen_t = Vec::with_capacity(gen_frames.len());
    let mut ref_t = Vec::with_capacity(ref_frames.len());
    for (g, r) in gen_frames.iter().zip(ref_frames.iter()) {
        match (png::read_frame_255(g), png::read_frame_255(r)) {
            (Ok(a), Ok(b)) => {
                gen_t.push(a);
                ref_t.push(b);
            }
            (Err(e), _) | (_, Err(e)) => {
                record.error = Some(e.to_string());
                return record;
            }
        }
    }
    let mut ssim_acc = 0.0;
    let mut psnr_acc = 0.0;
    let mut psnr_n = 0usize;
    let mut cpbd_acc = 0.0;
    let mut cpbd_n = 0usize;
    for (g, r) in gen_t.iter().zip(ref_t.iter()) {
        match ssim(g, r) {
            Ok(s) => ssim_acc += s,
            Err(e) => {
                record.error = Some(e.to_string());
                return record;
            }
        }
        match psnr(g, r) {
            Ok(p) if p.is_finite() => {
                psnr_acc += p;
                psnr_n += 1;
            }
            Ok(_) => record.psnr_excluded_frames += 1,
            Err(e) => {
                record.error = Some(e.to_string());
                return record;
            }
        }
        if let Ok(c) = cpbd(&luma(g)) {
            cpbd_acc += c;
            cpbd_n += 1;
        }
    }
    record.ssim = Some(ssim_acc / gen_t.len() as f64);
    record.psnr_db = (psnr_n > 0).then(|| psnr_acc / psnr_n as f64);
    record.cpbd = (cpbd_n > 0).then(|| cpbd_acc / cpbd_n as f64);
    match acd(&gen_t, &ref_t, inputs.embedder) {
        Ok(r) => {
            record.acd_cosine = Some(r.cosine);
            record.acd_euclidean = Some(r.euclidean);
            record.same_identity_cosine = Some(r.same_identity_cosine);
            record.same_identity_euclidean = Some(r.same_identity_euclidean);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Run the whole comparison; returns all records plus the aggregate.
pub fn evaluate(inputs: &EvalInputs) -> (Vec<ClipRecord>, AggregateRecord) {
    let mut records = Vec::new();
    for (id, gen_frames) in &inputs.generated {
        match inputs.reference.get(id) {
            Some(ref_frames) => records.push(eval_clip(id, gen_frames, ref_frames, inputs)),
            None => records.push(ClipRecord {
                clip_id: id.clone(),
                frames: gen_frames.len(),
                ssim: None,
                psnr_db: None,
                psnr_excluded_frames: 0,
                cpbd: None,
                acd_cosine: None,
                acd_euclidean: None,
                same_identity_cosine: None,
                same_identity_euclidean: None,
                blink_count_ref: None,
                blink_count_gen: None,
                wer: None,
                embedder: inputs.embedder.name().to_string(),
                error: Some("no matching reference clip".to_string()),
            }),
        }
    }
    let ok: Vec<&ClipRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let mean_of = |f: &dyn Fn(&ClipRecord) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let aggregate = AggregateRecord {
        aggregate: true,
        clips: records.len(),
        clips_with_errors: records.iter().filter(|r| r.error.is_some()).count(),
        ssim_mean: mean_of(&|r| r.ssim),
        psnr_db_mean: mean_of(&|r| r.psnr_db),
        cpbd_mean: mean_of(&|r| r.cpbd),
        acd_cosine_mean: mean_of(&|r| r.acd_cosine),
        acd_euclidean_mean: mean_of(&|r| r.acd_euclidean),
        embedder: inputs.embedder.name().to_string(),
    };
    (records, aggregate)
}

/// Write the line-delimited report: one record per clip, aggregate last.
pub fn write_report(
    path: &Path,
    records: &[ClipRecord],
    aggregate: &AggregateRecord,
) -> Result<(), ReportError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(aggregate).expect("aggregate serialises"));
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}
