//! Quantitative evaluation: PSNR, SSIM, CPBD sharpness, average content
//! distance and EAR-based blink counting. All functions use the 8-bit
//! 0..255 value convention (held as f64) and are pure.

use crate::image::luma;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image of {got} pixels per side is below the minimum {want}")]
    TooSmall { got: usize, want: usize },
    #[error("no block passed the edge-density threshold")]
    NoEdges,
    #[error("frame sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence of {0} values is too short (minimum {1})")]
    TooShort(usize, usize),
}

/// 10 log10(255^2 / MSE) over all channels; +inf for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;

fn to_gray(t: &Tensor) -> Result<Tensor, MetricError> {
    match t.shape() {
        [3, _, _] => Ok(luma(t)),
        [_, _] => Ok(t.clone()),
        s => Err(MetricError::ShapeMismatch(s.to_vec(), vec![3, 0, 0])),
    }
}

/// Mean local SSIM over valid 11x11 windows (Gaussian sigma 1.5,
/// C1 = (0.01*255)^2, C2 = (0.03*255)^2) after grayscale conversion.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let ga = to_gray(a)?;
    let gb = to_gray(b)?;
    let (h, w) = (ga.shape()[0], ga.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall { got: h.min(w), want: SSIM_WINDOW });
    }
    // normalised Gaussian window
    let sigma = 1.5;
    let half = (SSIM_WINDOW / 2) as isize;
    let mut win = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as isize - half;
            let dx = j as isize - half;
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            win[i][j] = v;
            total += v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let c1 = (0.01 * 255.0) * (0.01 * 255.0);
    let c2 = (0.03 * 255.0) * (0.03 * 255.0);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let pa = ga.data()[(y + i) * w + (x + j)];
                    let pb = gb.data()[(y + i) * w + (x + j)];
                    mx += win[i][j] * pa;
                    my += win[i][j] * pb;
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let pa = ga.data()[(y + i) * w + (x + j)] - mx;
                    let pb = gb.data()[(y + i) * w + (x + j)] - my;
                    vx += win[i][j] * pa * pa;
                    vy += win[i][j] * pb * pb;
                    cov += win[i][j] * pa * pb;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

pub const CPBD_BETA: f64 = 3.6;
pub const CPBD_P_JNB: f64 = 0.63;
pub const CPBD_BLOCK: usize = 64;
pub const CPBD_EDGE_DENSITY: f64 = 0.002;

/// Cumulative probability of blur detection: Sobel edges, Marziliano edge
/// widths along rows, probability of blur P = 1 - exp(-(w / w_jnb)^beta)
/// with the just-noticeable width picked per block contrast, and the
/// fraction of probability mass at P <= 0.63 over blocks whose edge density
/// exceeds 0.2%.
pub fn cpbd(a: &Tensor) -> Result<f64, MetricError> {
    let g = to_gray(a)?;
    let (h, w) = (g.shape()[0], g.shape()[1]);
    if h < CPBD_BLOCK || w < CPBD_BLOCK {
        return Err(MetricError::TooSmall { got: h.min(w), want: CPBD_BLOCK });
    }
    let px = |y: usize, x: usize| g.data()[y * w + x];

    // Horizontal Sobel response (vertical edges), normalised to pixel units.
    let mut grad = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            grad[y * w + x] = gx / 8.0;
        }
    }
    let mean_mag = grad.iter().map(|v| v.abs()).sum::<f64>() / (h * w) as f64;
    let threshold = (2.0 * mean_mag).max(8.0);
    let is_edge: Vec<bool> = grad.iter().map(|v| v.abs() >= threshold).collect();

    // Marziliano width: distance between the intensity extrema flanking the
    // edge along its row.
    let edge_width = |y: usize, x: usize| -> f64 {
        let rising = grad[y * w + x] > 0.0;
        let mut left = x;
        while left > 0 {
            let next = px(y, left - 1);
            let cur = px(y, left);
            let keep = if rising { next < cur } else { next > cur };
            if !keep {
                break;
            }
            left -= 1;
        }
        let mut right = x;
        while right < w - 1 {
            let next = px(y, right + 1);
            let cur = px(y, right);
            let keep = if rising { next > cur } else { next < cur };
            if !keep {
                break;
            }
            right += 1;
        }
        (right - left) as f64
    };

    let mut blur_probs: Vec<f64> = Vec::new();
    let by = h / CPBD_BLOCK;
    let bx = w / CPBD_BLOCK;
    for block_y in 0..by {
        for block_x in 0..bx {
            let y0 = block_y * CPBD_BLOCK;
            let x0 = block_x * CPBD_BLOCK;
            let mut edges = Vec::new();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in y0..y0 + CPBD_BLOCK {
                for x in x0..x0 + CPBD_BLOCK {
                    lo = lo.min(px(y, x));
                    hi = hi.max(px(y, x));
                    if is_edge[y * w + x] {
                        edges.push((y, x));
                    }
                }
            }
            let density = edges.len() as f64 / (CPBD_BLOCK * CPBD_BLOCK) as f64;
            if density <= CPBD_EDGE_DENSITY {
                continue;
            }
            let w_jnb = if hi - lo <= 50.0 { 5.0 } else { 3.0 };
            for (y, x) in edges {
                let width = edge_width(y, x);
                blur_probs.push(1.0 - (-(width / w_jnb).powf(CPBD_BETA)).exp());
            }
        }
    }
    if blur_probs.is_empty() {
        return Err(MetricError::NoEdges);
    }
    let sharp = blur_probs.iter().filter(|&&p| p <= CPBD_P_JNB).count();
    Ok(sharp as f64 / blur_probs.len() as f64)
}

/// Pluggable identity embedding for the content-distance metric.
pub trait IdentityEmbedder {
    fn embed(&self, frame: &Tensor) -> Vec<f64>;
    /// Label recorded with every report: published thresholds only apply to
    /// a compatible external embedder.
    fn name(&self) -> &str;
}

pub const ACD_COSINE_THRESHOLD: f64 = 0.02;
pub const ACD_EUCLIDEAN_THRESHOLD: f64 = 0.20;

#[derive(Debug, Clone, PartialEq)]
pub struct AcdResult {
    pub cosine: f64,
    pub euclidean: f64,
    pub same_identity_cosine: bool,
    pub same_identity_euclidean: bool,
}

/// Mean pairwise cosine / euclidean distance between matched frame
/// embeddings, with the standard identity-verdict thresholds.
pub fn acd(
    gen_frames: &[Tensor],
    real_frames: &[Tensor],
    embedder: &dyn IdentityEmbedder,
) -> Result<AcdResult, MetricError> {
    if gen_frames.len() != real_frames.len() {
        return Err(MetricError::LengthMismatch(gen_frames.len(), real_frames.len()));
    }
    if gen_frames.is_empty() {
        return Err(MetricError::LengthMismatch(0, 0));
    }
    let mut cos_acc = 0.0;
    let mut euc_acc = 0.0;
    for (g, r) in gen_frames.iter().zip(real_frames.iter()) {
        let eg = embedder.embed(g);
        let er = embedder.embed(r);
        let dot: f64 = eg.iter().zip(er.iter()).map(|(a, b)| a * b).sum();
        let ng: f64 = eg.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nr: f64 = er.iter().map(|v| v * v).sum::<f64>().sqrt();
        cos_acc += if ng < 1e-12 && nr < 1e-12 {
            0.0
        } else if ng < 1e-12 || nr < 1e-12 {
            1.0
        } else {
            1.0 - dot / (ng * nr)
        };
        euc_acc += eg.iter().zip(er.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    let n = gen_frames.len() as f64;
    let cosine = cos_acc / n;
    let euclidean = euc_acc / n;
    Ok(AcdResult {
        cosine,
        euclidean,
        same_identity_cosine: cosine <= ACD_COSINE_THRESHOLD,
        same_identity_euclidean: euclidean <= ACD_EUCLIDEAN_THRESHOLD,
    })
}

pub const BLINK_MEDIAN_WINDOW: usize = 25;
pub const BLINK_DROP_FACTOR: f64 = 0.75;

/// Count maximal runs where EAR falls below 0.75x the rolling median
/// (window of 25 frames, centred, clamped at the ends).
pub fn detect_blinks(ear_sequence: &[f64]) -> Result<usize, MetricError> {
    let n = ear_sequence.len();
    if n < 3 {
        return Err(MetricError::TooShort(n, 3));
    }
    let half = BLINK_MEDIAN_WINDOW / 2;
    let mut below = vec![false; n];
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let mut window: Vec<f64> = ear_sequence[lo..hi].to_vec();
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = window.len();
        let median = if m % 2 == 1 {
            window[m / 2]
        } else {
            0.5 * (window[m / 2 - 1] + window[m / 2])
        };
        below[i] = ear_sequence[i] < BLINK_DROP_FACTOR * median;
    }
    let mut count = 0;
    let mut in_run = false;
    for b in below {
        if b && !in_run {
            count += 1;
        }
        in_run = b;
    }
    Ok(count)
}
