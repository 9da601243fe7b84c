//! Lossless frame IO: frames live on disk as individual PNGs so metrics stay
//! bit-exact (no codec involved).

use a2v_core::tensor::Tensor;
use image::{ImageReader, RgbImage};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("{path}: {reason}")]
    Bad { path: String, reason: String },
}

fn bad(path: &Path, reason: impl std::fmt::Display) -> PngError {
    PngError::Bad { path: path.display().to_string(), reason: reason.to_string() }
}

/// Read an RGB png into interleaved bytes plus dimensions.
pub fn read_rgb(path: &Path) -> Result<(Vec<u8>, u32, u32), PngError> {
    let img = ImageReader::open(path)
        .map_err(|e| bad(path, e))?
        .decode()
        .map_err(|e| bad(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w, h))
}

pub fn write_rgb(path: &Path, data: &[u8], w: u32, h: u32) -> Result<(), PngError> {
    let img: RgbImage =
        RgbImage::from_raw(w, h, data.to_vec()).ok_or_else(|| bad(path, "buffer size mismatch"))?;
    img.save(path).map_err(|e| bad(path, e))
}

/// Interleaved RGB bytes -> channel-major buffer (the in-memory clip layout).
pub fn interleaved_to_chw(data: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0u8; 3 * w * h];
    for i in 0..w * h {
        out[i] = data[3 * i];
        out[w * h + i] = data[3 * i + 1];
        out[2 * w * h + i] = data[3 * i + 2];
    }
    out
}

pub fn chw_to_interleaved(data: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0u8; 3 * w * h];
    for i in 0..w * h {
        out[3 * i] = data[i];
        out[3 * i + 1] = data[w * h + i];
        out[3 * i + 2] = data[2 * w * h + i];
    }
    out
}

/// Read a frame PNG as a [3, h, w] tensor in [-1, 1].
pub fn read_frame_unit(path: &Path) -> Result<Tensor, PngError> {
    let (raw, w, h) = read_rgb(path)?;
    let chw = interleaved_to_chw(&raw, w as usize, h as usize);
    Ok(Tensor::from_vec(
        &[3, h as usize, w as usize],
        chw.iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
    ))
}

/// Read a frame PNG as a [3, h, w] tensor in the 0..255 metric convention.
pub fn read_frame_255(path: &Path) -> Result<Tensor, PngError> {
    let (raw, w, h) = read_rgb(path)?;
    let chw = interleaved_to_chw(&raw, w as usize, h as usize);
    Ok(Tensor::from_vec(&[3, h as usize, w as usize], chw.iter().map(|&b| b as f64).collect()))
}

/// Quantise a [-1, 1] chw tensor to 8-bit and write it as a PNG.
pub fn write_frame_unit(path: &Path, t: &Tensor) -> Result<(), PngError> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let chw: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    write_rgb(path, &chw_to_interleaved(&chw, w, h), w as u32, h as u32)
}
