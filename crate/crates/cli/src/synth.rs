//! Procedural desk-scale corpus: 64x64 face-like clips whose mouth aperture
//! tracks the short-window amplitude of a generated multi-tone waveform,
//! with scripted eye blinks and exact ground-truth landmarks. Deterministic
//! per seed down to the file bytes.

use crate::manifest::{ClipManifestEntry, ManifestFile};
use crate::png;
use crate::wav::write_wav_mono16;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub const SYNTH_RESOLUTION: usize = 64;
pub const SYNTH_FPS: u32 = 25;
pub const SYNTH_SAMPLE_RATE: u32 = 16_000;
/// RMS that maps to a fully open mouth.
pub const APERTURE_FULL_RMS: f64 = 0.4;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Encode(String),
}

struct IdentityParams {
    skin: [f64; 3],
    background: [f64; 3],
    face_center: (f64, f64),
    face_radii: (f64, f64),
    eye_y: f64,
    eye_dx: f64,
    eye_radius: f64,
    eye_open: f64,
    mouth_y: f64,
    mouth_half_width: f64,
    mouth_max_half_height: f64,
    carriers: Vec<(f64, f64)>, // (freq hz, weight)
    env_freqs: (f64, f64),
    env_phases: (f64, f64),
}

fn identity_params(rng: &mut ChaCha20Rng) -> IdentityParams {
    let n_carriers = rng.gen_range(2..=3);
    IdentityParams {
        skin: [
            rng.gen_range(170.0..235.0),
            rng.gen_range(130.0..200.0),
            rng.gen_range(110.0..180.0),
        ],
        background: [
            rng.gen_range(15.0..60.0),
            rng.gen_range(15.0..60.0),
            rng.gen_range(25.0..80.0),
        ],
        face_center: (32.0 + rng.gen_range(-1.5..1.5), 31.0 + rng.gen_range(-1.5..1.5)),
        face_radii: (rng.gen_range(18.0..23.0), rng.gen_range(23.0..28.0)),
        eye_y: rng.gen_range(-0.42..-0.3),
        eye_dx: rng.gen_range(0.38..0.52),
        eye_radius: rng.gen_range(3.5..5.5),
        eye_open: rng.gen_range(1.3..2.2),
        mouth_y: rng.gen_range(0.42..0.55),
        mouth_half_width: rng.gen_range(7.0..11.0),
        mouth_max_half_height: rng.gen_range(4.0..7.0),
        carriers: (0..n_carriers)
            .map(|_| (rng.gen_range(200.0..800.0), rng.gen_range(0.6..1.0)))
            .collect(),
        env_freqs: (rng.gen_range(0.8..1.7), rng.gen_range(0.3..0.9)),
        env_phases: (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)),
    }
}

/// Waveform samples for one clip, already quantised to the 16-bit grid so
/// the WAV round trip is exact.
fn synth_audio(p: &IdentityParams, n_samples: usize) -> Vec<f64> {
    let weight_sum: f64 = p.carriers.iter().map(|c| c.1).sum();
    (0..n_samples)
        .map(|i| {
            let t = i as f64 / SYNTH_SAMPLE_RATE as f64;
            let env = 0.12
                + 0.78
                    * (0.5 + 0.5 * (2.0 * std::f64::consts::PI * p.env_freqs.0 * t + p.env_phases.0).sin())
                    * (0.5 + 0.5 * (2.0 * std::f64::consts::PI * p.env_freqs.1 * t + p.env_phases.1).sin());
            let mix: f64 = p
                .carriers
                .iter()
                .map(|&(f, w)| w * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum::<f64>()
                / weight_sum;
            let s = 0.9 * env * mix;
            (s * 32767.0).round() / 32767.0
        })
        .collect()
}

/// RMS of the stride-long slice centred like the video frame.
pub fn frame_rms(samples: &[f64], frame: usize) -> f64 {
    let stride = (SYNTH_SAMPLE_RATE / SYNTH_FPS) as usize;
    let center = stride / 2 + frame * stride;
    let lo = center.saturating_sub(stride / 2);
    let hi = (center + stride / 2).min(samples.len());
    let sum: f64 = samples[lo..hi].iter().map(|s| s * s).sum();
    (sum / (hi - lo) as f64).sqrt()
}

pub fn aperture_fraction(rms: f64) -> f64 {
    (rms / APERTURE_FULL_RMS).clamp(0.04, 1.0)
}

fn ellipse_alpha(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    if rx <= 0.0 || ry <= 0.0 {
        return 0.0;
    }
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    ((1.0 - d) * rx.min(ry).max(1.0)).clamp(0.0, 1.0)
}

struct FrameGeometry {
    eye_half_aperture: f64,
    mouth_half_height: f64,
}

fn render_frame(p: &IdentityParams, geo: &FrameGeometry) -> Vec<u8> {
    let res = SYNTH_RESOLUTION;
    let (cx, cy) = p.face_center;
    let (rx, ry) = p.face_radii;
    let eye_dy = p.eye_y * ry;
    let eye_dx = p.eye_dx * rx;
    let mouth_cy = cy + p.mouth_y * ry;
    let dark = [25.0, 12.0, 12.0];
    let brow = [60.0, 40.0, 30.0];
    let mut out = vec![0u8; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = p.background;
            // face
            let a = ellipse_alpha(fx, fy, cx, cy, rx, ry);
            for c in 0..3 {
                color[c] = color[c] * (1.0 - a) + p.skin[c] * a;
            }
            // eyes and brows
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                let ey = cy + eye_dy;
                let a = ellipse_alpha(fx, fy, ex, ey, p.eye_radius, geo.eye_half_aperture.max(0.15));
                for c in 0..3 {
                    color[c] = color[c] * (1.0 - a) + dark[c] * a;
                }
                let a = ellipse_alpha(fx, fy, ex, ey - p.eye_radius - 1.5, p.eye_radius * 1.1, 0.9);
                for c in 0..3 {
                    color[c] = color[c] * (1.0 - a) + brow[c] * a;
                }
            }
            // mouth
            let a = ellipse_alpha(
                fx,
                fy,
                cx,
                mouth_cy,
                p.mouth_half_width,
                geo.mouth_half_height.max(0.4),
            );
            for c in 0..3 {
                color[c] = color[c] * (1.0 - a) + dark[c] * a;
            }
            for c in 0..3 {
                out[c * res * res + y * res + x] = color[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Eye landmarks of one frame in the lower-lid/upper-lid layout the EAR
/// formula expects; 12 points, left eye then right eye.
fn frame_landmarks(p: &IdentityParams, eye_half_aperture: f64) -> [f64; 24] {
    let (cx, cy) = p.face_center;
    let (rx, ry) = p.face_radii;
    let ey = cy + p.eye_y * ry;
    let a = eye_half_aperture;
    let mut out = [0.0; 24];
    for (e, side) in [-1.0f64, 1.0].iter().enumerate() {
        let ex = cx + side * p.eye_dx * rx;
        let r = p.eye_radius;
        let pts = [
            [ex - r, ey],
            [ex - 0.4 * r, ey - a],
            [ex + 0.4 * r, ey - a],
            [ex + r, ey],
            [ex + 0.4 * r, ey + a],
            [ex - 0.4 * r, ey + a],
        ];
        for (i, pt) in pts.iter().enumerate() {
            out[e * 12 + 2 * i] = pt[0];
            out[e * 12 + 2 * i + 1] = pt[1];
        }
    }
    out
}

/// Render one clip's files under `dir`; returns the manifest entry.
fn synth_clip(
    dir: &Path,
    clip_id: &str,
    rng: &mut ChaCha20Rng,
) -> Result<ClipManifestEntry, SynthError> {
    let p = identity_params(rng);
    let n_frames = rng.gen_range(25..=40usize);
    let n_samples = n_frames * (SYNTH_SAMPLE_RATE / SYNTH_FPS) as usize;
    let samples = synth_audio(&p, n_samples);

    // blink script: 2-3 frame dips at 8-20 frame intervals
    let mut blink = vec![false; n_frames];
    let mut next = rng.gen_range(5..18usize);
    while next < n_frames {
        let len = rng.gen_range(2..=3usize);
        for k in next..(next + len).min(n_frames) {
            blink[k] = true;
        }
        next += len + rng.gen_range(8..20usize);
    }

    let clip_dir = dir.join(clip_id);
    let frames_dir = clip_dir.join("frames");
    fs::create_dir_all(&frames_dir)?;

    let mut landmark_lines = String::new();
    for k in 0..n_frames {
        let aperture = aperture_fraction(frame_rms(&samples, k));
        let eye_half = if blink[k] { p.eye_open * 0.1 } else { p.eye_open };
        let geo = FrameGeometry {
            eye_half_aperture: eye_half,
            mouth_half_height: aperture * p.mouth_max_half_height,
        };
        let frame = render_frame(&p, &geo);
        png::write_rgb(
            &frames_dir.join(format!("frame_{:05}.png", k)),
            &png::chw_to_interleaved(&frame, SYNTH_RESOLUTION, SYNTH_RESOLUTION),
            SYNTH_RESOLUTION as u32,
            SYNTH_RESOLUTION as u32,
        )
        .map_err(|e| SynthError::Encode(e.to_string()))?;
        let lm = frame_landmarks(&p, eye_half);
        for (i, v) in lm.iter().enumerate() {
            if i > 0 {
                landmark_lines.push(' ');
            }
            let _ = write!(landmark_lines, "{}", v);
        }
        landmark_lines.push('\n');
    }
    let audio_path = clip_dir.join("audio.wav");
    write_wav_mono16(&audio_path, &samples, SYNTH_SAMPLE_RATE)
        .map_err(|e| SynthError::Encode(e.to_string()))?;
    let landmarks_path = clip_dir.join("landmarks.txt");
    fs::write(&landmarks_path, landmark_lines)?;

    Ok(ClipManifestEntry {
        clip_id: clip_id.to_string(),
        frames_path: format!("{}/frames", clip_id),
        audio_path: format!("{}/audio.wav", clip_id),
        fps: SYNTH_FPS,
        landmarks_path: Some(format!("{}/landmarks.txt", clip_id)),
        identity_frame: 0,
        aligned: true,
    })
}

/// Generate `n_clips` clips under `out_dir` and write `manifest.json`.
/// Byte-identical output for identical (n_clips, seed).
pub fn make_synthetic_corpus(n_clips: usize, seed: u64, out_dir: &Path) -> Result<PathBuf, SynthError> {
    assert!(n_clips >= 1, "need at least one clip");
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x5EED_0000 + i as u64);
        entries.push(synth_clip(out_dir, &format!("clip_{:04}", i), &mut rng)?);
    }
    let manifest_path = out_dir.join("manifest.json");
    let file = ManifestFile { entries };
    fs::write(&manifest_path, serde_json::to_string_pretty(&file).expect("manifest serialises"))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use a2v_core::losses::{ear, EyePoints};

    fn eye_from(lm: &[f64; 24], offset: usize) -> EyePoints {
        std::array::from_fn(|i| [lm[offset + 2 * i], lm[offset + 2 * i + 1]])
    }

    #[test]
    fn landmark_ear_drops_during_blink() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p = identity_params(&mut rng);
        let open = frame_landmarks(&p, p.eye_open);
        let shut = frame_landmarks(&p, p.eye_open * 0.1);
        let ear_open = ear(&eye_from(&open, 0)).unwrap();
        let ear_shut = ear(&eye_from(&shut, 0)).unwrap();
        assert!(ear_shut < 0.5 * ear_open, "{} !< 0.5*{}", ear_shut, ear_open);
    }

    #[test]
    fn mouth_height_tracks_rms() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = identity_params(&mut rng);
        let n_frames = 40;
        let samples = synth_audio(&p, n_frames * 640);
        let rms: Vec<f64> = (0..n_frames).map(|k| frame_rms(&samples, k)).collect();
        let heights: Vec<f64> =
            rms.iter().map(|&r| aperture_fraction(r) * p.mouth_max_half_height).collect();
        let r = pearson(&rms, &heights);
        assert!(r > 0.9, "pearson {}", r);
    }

    pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt()).max(1e-12)
    }

    #[test]
    fn corpus_deterministic_per_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        make_synthetic_corpus(2, 3, dir_a.path()).unwrap();
        make_synthetic_corpus(2, 3, dir_b.path()).unwrap();
        // byte-compare every file
        let mut paths: Vec<PathBuf> = Vec::new();
        collect_files(dir_a.path(), &mut paths);
        assert!(!paths.is_empty());
        for p in paths {
            let rel = p.strip_prefix(dir_a.path()).unwrap();
            let other = dir_b.path().join(rel);
            assert_eq!(
                fs::read(&p).unwrap(),
                fs::read(&other).unwrap(),
                "file {:?} differs between identical seeds",
                rel
            );
        }
        // a different seed diverges
        let dir_c = tempfile::tempdir().unwrap();
        make_synthetic_corpus(2, 4, dir_c.path()).unwrap();
        let a0 = fs::read(dir_a.path().join("clip_0000/audio.wav")).unwrap();
        let c0 = fs::read(dir_c.path().join("clip_0000/audio.wav")).unwrap();
        assert_ne!(a0, c0);
    }

    fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                collect_files(&path, out);
            } else {
                out.push(path);
            }
        }
    }
}
