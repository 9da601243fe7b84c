//! Audio frontend: waveform framing into per-video-frame windows, MFCC
//! extraction and the trainable content encoder.
//!
//! Framing convention: the window for video frame `k` is centred at sample
//! `stride/2 + k*stride` (mid-exposure of the frame), where
//! `stride = sample_rate / fps`. Samples outside the waveform read as zero.
//! MFCC frames inside a window follow the same half-offset convention at hop
//! granularity, which yields exactly `window_len / hop_len` rows (20 at the
//! defaults) instead of the off-by-one of left-aligned framing.

use crate::autograd::Var;
use crate::config::AudioConfig;
use crate::nn::{Conv2d, Dense, ParamSet};
use crate::tensor::Tensor;
use rand::Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate {sample_rate} is not divisible by fps {fps}; resample before framing")]
    NonDivisible { sample_rate: u32, fps: u32 },
    #[error("waveform of {samples} samples is shorter than one stride ({stride})")]
    EmptyAudio { samples: usize, stride: usize },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid window configuration: {0}")]
    InvalidWindow(String),
    #[error("encoder weights incompatible: {0}")]
    WeightsShapeMismatch(String),
}

/// A mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Waveform, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidWaveform("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(AudioError::InvalidWaveform("empty sample buffer".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidWaveform(format!("sample {} out of [-1,1]", bad)));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One 200 ms (by default) slice of audio centred on a video frame.
#[derive(Debug, Clone)]
pub struct AudioWindow {
    pub frame_index: usize,
    pub center_sample: i64,
    pub samples: Vec<f64>,
    /// [n_mfcc_frames, 13]
    pub mfcc: Tensor,
}

/// stride = sample_rate / fps, exact division required.
pub fn compute_stride(sample_rate: u32, fps: u32) -> Result<usize, AudioError> {
    if sample_rate == 0 || fps == 0 {
        return Err(AudioError::InvalidWindow("sample_rate and fps must be positive".into()));
    }
    if sample_rate % fps != 0 {
        return Err(AudioError::NonDivisible { sample_rate, fps });
    }
    Ok((sample_rate / fps) as usize)
}

/// Slice a waveform into one overlapping window per video frame.
pub fn frame_windows(
    w: &Waveform,
    fps: u32,
    window_ms: u32,
    cfg: &AudioConfig,
) -> Result<Vec<AudioWindow>, AudioError> {
    let stride = compute_stride(w.sample_rate(), fps)?;
    let window_len = (window_ms as usize * w.sample_rate() as usize) / 1000;
    if window_len == 0 || window_len % 2 != 0 {
        return Err(AudioError::InvalidWindow(format!(
            "window of {} samples must be a positive even length",
            window_len
        )));
    }
    if w.samples().len() < stride {
        return Err(AudioError::EmptyAudio { samples: w.samples().len(), stride });
    }
    let n_frames = (w.duration_s() * fps as f64).round() as usize;
    let extractor = MfccExtractor::new(cfg);
    let half = (window_len / 2) as i64;
    let mut out = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let center = (stride / 2 + k * stride) as i64;
        let mut samples = vec![0.0; window_len];
        for (j, s) in samples.iter_mut().enumerate() {
            let idx = center - half + j as i64;
            if idx >= 0 && (idx as usize) < w.samples().len() {
                *s = w.samples()[idx as usize];
            }
        }
        let mfcc = extractor.extract(&samples);
        out.push(AudioWindow { frame_index: k, center_sample: center, samples, mfcc });
    }
    Ok(out)
}

/// Precomputed FFT plan, analysis window, mel filterbank and DCT basis.
pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    hann: Vec<f64>,
    /// [n_mels][n_bins] triangular weights.
    mel_filters: Vec<Vec<f64>>,
    /// [n_mfcc][n_mels] orthonormal DCT-II rows.
    dct: Vec<Vec<f64>>,
    analysis_len: usize,
    hop_len: usize,
    n_mfcc: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MfccExtractor {
    pub fn new(cfg: &AudioConfig) -> MfccExtractor {
        let analysis_len = cfg.analysis_len();
        let hop_len = cfg.hop_len();
        let n_bins = analysis_len / 2 + 1;
        let sr = cfg.sample_rate as f64;

        // Periodic Hann window.
        let hann: Vec<f64> = (0..analysis_len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / analysis_len as f64).cos())
            .collect();

        // Triangular mel filterbank from 0 Hz to Nyquist.
        let mel_max = hz_to_mel(sr / 2.0);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sr / analysis_len as f64;
        let mut mel_filters = Vec::with_capacity(cfg.n_mels);
        for m in 1..=cfg.n_mels {
            let (lo, mid, hi) = (points[m - 1], points[m], points[m + 1]);
            let mut row = vec![0.0; n_bins];
            for (k, r) in row.iter_mut().enumerate() {
                let f = bin_hz(k);
                if f > lo && f < hi {
                    *r = if f <= mid { (f - lo) / (mid - lo) } else { (hi - f) / (hi - mid) };
                }
            }
            mel_filters.push(row);
        }

        // Orthonormal DCT-II.
        let m_total = cfg.n_mels as f64;
        let mut dct = Vec::with_capacity(cfg.n_mfcc);
        for j in 0..cfg.n_mfcc {
            let scale = if j == 0 { (1.0 / m_total).sqrt() } else { (2.0 / m_total).sqrt() };
            dct.push(
                (0..cfg.n_mels)
                    .map(|m| {
                        scale
                            * (std::f64::consts::PI * j as f64 * (2.0 * m as f64 + 1.0)
                                / (2.0 * m_total))
                                .cos()
                    })
                    .collect(),
            );
        }

        MfccExtractor {
            fft: FftPlanner::new().plan_fft_forward(analysis_len),
            hann,
            mel_filters,
            dct,
            analysis_len,
            hop_len,
            n_mfcc: cfg.n_mfcc,
        }
    }

    /// Number of MFCC rows produced for a slice of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop_len)
    }

    /// MFCC matrix [frames, n_mfcc] of a window slice. Deterministic.
    pub fn extract(&self, samples: &[f64]) -> Tensor {
        let n_frames = self.frames_for(samples.len());
        let n_bins = self.analysis_len / 2 + 1;
        let half = (self.analysis_len / 2) as i64;
        let mut out = Vec::with_capacity(n_frames * self.n_mfcc);
        let mut buf = vec![Complex::new(0.0, 0.0); self.analysis_len];
        for t in 0..n_frames {
            let center = (t * self.hop_len + self.hop_len / 2) as i64;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = center - half + j as i64;
                let s = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *b = Complex::new(s * self.hann[j], 0.0);
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
            for row in &self.dct {
                let mut acc = 0.0;
                for (m, filt) in self.mel_filters.iter().enumerate() {
                    let energy: f64 = filt.iter().zip(power.iter()).map(|(w, p)| w * p).sum();
                    acc += row[m] * energy.max(1e-10).ln();
                }
                out.push(acc);
            }
        }
        Tensor::from_vec(&[n_frames, self.n_mfcc], out)
    }
}

/// Convenience wrapper over a fresh extractor.
pub fn compute_mfcc(samples: &[f64], cfg: &AudioConfig) -> Tensor {
    MfccExtractor::new(cfg).extract(samples)
}

/// Content embedding of one audio window.
#[derive(Debug, Clone)]
pub struct ContentEmbedding {
    pub vector: Vec<f64>,
    pub frame_index: usize,
}

/// Small trainable stand-in for a pretrained speech model: two convolutions
/// over the MFCC matrix followed by a bidirectional recurrent layer and a
/// projection. A load hook accepts externally exported feature weights.
pub struct ContentEncoder {
    pub params: ParamSet,
    conv1: Conv2d,
    conv2: Conv2d,
    // Recurrent cell, one set per direction.
    rnn_fwd: RnnCell,
    rnn_bwd: RnnCell,
    proj: Dense,
    mfcc_frames: usize,
    n_mfcc: usize,
    hidden: usize,
    pub out_dim: usize,
}

struct RnnCell {
    wx: Dense,      // input -> hidden (bias carried here)
    wh: Var,        // hidden -> hidden [h, h]
}

impl RnnCell {
    fn new(params: &mut ParamSet, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> RnnCell {
        let wx = Dense::new(params, &format!("{}.wx", name), in_dim, hidden, rng, true);
        let wh = params.register(
            &format!("{}.wh", name),
            crate::nn::randn_tensor(&[hidden, hidden], 0.02, rng),
            true,
        );
        RnnCell { wx, wh }
    }

    fn step(&self, x: &Var, h: &Var) -> Var {
        self.wx.forward(x).add(&h.matmul(&self.wh)).tanh_act()
    }
}

impl ContentEncoder {
    pub fn new(cfg: &AudioConfig, rng: &mut impl Rng) -> ContentEncoder {
        let mut params = ParamSet::new();
        let conv1 = Conv2d::new(&mut params, "conv1", 1, 8, 3, 1, 1, rng, true);
        let conv2 = Conv2d::new(&mut params, "conv2", 8, 16, 3, 1, 1, rng, true);
        let feat = 16 * cfg.n_mfcc;
        let hidden = 64;
        let rnn_fwd = RnnCell::new(&mut params, "rnn_fwd", feat, hidden, rng);
        let rnn_bwd = RnnCell::new(&mut params, "rnn_bwd", feat, hidden, rng);
        let proj = Dense::new(&mut params, "proj", 2 * hidden, cfg.encoder_dim, rng, true);
        ContentEncoder {
            params,
            conv1,
            conv2,
            rnn_fwd,
            rnn_bwd,
            proj,
            mfcc_frames: cfg.mfcc_frames(),
            n_mfcc: cfg.n_mfcc,
            hidden,
            out_dim: cfg.encoder_dim,
        }
    }

    /// Zero the projection layer (used to verify zero propagation).
    pub fn zero_final_layer(&self) {
        self.proj.zero();
    }

    /// Batched differentiable forward: mfcc [n, frames, n_mfcc] -> [n, out_dim].
    pub fn encode_batch(&self, mfcc: &Var) -> Var {
        let shape = mfcc.shape();
        assert_eq!(shape.len(), 3, "expected [n, frames, coeffs]");
        let (n, t, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(t, self.mfcc_frames, "mfcc frame count");
        assert_eq!(c, self.n_mfcc, "mfcc coefficient count");
        let x = mfcc.reshape(&[n, 1, t, c]);
        let feat = self.conv2.forward(&self.conv1.forward(&x).relu()).relu(); // [n,16,t,c]
        // Per-timestep feature vectors.
        let steps: Vec<Var> = (0..t)
            .map(|ti| feat.narrow(2, ti, 1).reshape(&[n, 16 * c]))
            .collect();
        let zeros = Var::input(Tensor::zeros(&[n, self.hidden]));
        let mut h_f = zeros.clone();
        for step in &steps {
            h_f = self.rnn_fwd.step(step, &h_f);
        }
        let mut h_b = zeros;
        for step in steps.iter().rev() {
            h_b = self.rnn_bwd.step(step, &h_b);
        }
        self.proj.forward(&Var::concat(&[h_f, h_b], 1))
    }

    /// Non-graph convenience for a single window.
    pub fn encode(&self, mfcc: &Tensor, frame_index: usize) -> ContentEmbedding {
        let shape = mfcc.shape().to_vec();
        let v = Var::input(mfcc.reshaped(&[1, shape[0], shape[1]]));
        let out = self.encode_batch(&v).value();
        ContentEmbedding { vector: out.data().to_vec(), frame_index }
    }

    /// Load externally exported weights; every tensor must match by name and
    /// shape.
    pub fn load_weights(&self, tensors: &BTreeMap<String, Tensor>) -> Result<(), AudioError> {
        self.params.load(tensors).map_err(AudioError::WeightsShapeMismatch)
    }
}
