//! Upsampling generator modulated by spatially-adaptive normalisation over
//! the identity-image pyramid. The audio content embedding seeds the 4x4
//! latent; the identity enters only through the modulation branches.

use crate::audio::{frame_windows, AudioError, ContentEncoder};
use crate::autograd::Var;
use crate::config::{AudioConfig, GenConfig};
use crate::image::IdentityImage;
use crate::nn::{normalize, Conv2d, Dense, NormKind, ParamSet};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("conditioning resolution {cond}x{cond} does not match activations {act}x{act}")]
    ShapeMismatch { cond: usize, act: usize },
    #[error("embedding dimension {got} does not match configured {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("identity resolution {got} does not match configured {want}")]
    ResolutionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// One generated frame in [-1, 1].
#[derive(Debug, Clone)]
pub struct GeneratedFrame {
    pub pixels: Tensor, // [3, h, w]
    pub frame_index: usize,
}

/// Modulation parameters of one normalisation site: a shared hidden
/// convolution over the conditioning image and the zero-initialised
/// per-pixel scale/shift heads.
pub struct SpadeParams {
    pub hidden: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub norm: NormKind,
}

impl SpadeParams {
    fn new(params: &mut ParamSet, name: &str, channels: usize, norm: NormKind, rng: &mut impl Rng) -> SpadeParams {
        let hidden_ch = 16;
        SpadeParams {
            hidden: Conv2d::new(params, &format!("{}.hidden", name), 3, hidden_ch, 3, 1, 1, rng, true),
            gamma: Conv2d::new_zeroed(params, &format!("{}.gamma", name), hidden_ch, channels, 3, 1, 1, true),
            beta: Conv2d::new_zeroed(params, &format!("{}.beta", name), hidden_ch, channels, 3, 1, 1, true),
            norm,
        }
    }
}

/// norm(x) * (1 + gamma(cond)) + beta(cond), elementwise per pixel/channel.
pub fn spade_normalize(x: &Var, cond: &Var, params: &SpadeParams) -> Result<Var, GenError> {
    let xs = x.shape();
    let cs = cond.shape();
    if xs[2] != cs[2] || xs[3] != cs[3] {
        return Err(GenError::ShapeMismatch { cond: cs[2], act: xs[2] });
    }
    let normed = normalize(x, params.norm, NORM_EPS);
    let hidden = params.hidden.forward(cond).relu();
    let gamma = params.gamma.forward(&hidden);
    let beta = params.beta.forward(&hidden);
    Ok(normed.mul(&gamma.add_scalar(1.0)).add(&beta))
}

/// Plain normalisation path used to verify the zero-modulation identity.
fn plain_normalize(x: &Var, params: &SpadeParams) -> Var {
    normalize(x, params.norm, NORM_EPS)
}

struct SpadeResBlock {
    spade1: SpadeParams,
    conv1: Conv2d,
    spade2: SpadeParams,
    conv2: Conv2d,
    skip: Option<(SpadeParams, Conv2d)>,
}

impl SpadeResBlock {
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> SpadeResBlock {
        SpadeResBlock {
            spade1: SpadeParams::new(params, &format!("{}.spade1", name), cin, norm, rng),
            conv1: Conv2d::new(params, &format!("{}.conv1", name), cin, cout, 3, 1, 1, rng, true),
            spade2: SpadeParams::new(params, &format!("{}.spade2", name), cout, norm, rng),
            conv2: Conv2d::new(params, &format!("{}.conv2", name), cout, cout, 3, 1, 1, rng, true),
            skip: if cin != cout {
                Some((
                    SpadeParams::new(params, &format!("{}.spade_s", name), cin, norm, rng),
                    Conv2d::new(params, &format!("{}.conv_s", name), cin, cout, 1, 1, 0, rng, true),
                ))
            } else {
                None
            },
        }
    }

    fn forward(&self, x: &Var, cond: &Var, modulated: bool) -> Result<Var, GenError> {
        let site = |x: &Var, p: &SpadeParams| -> Result<Var, GenError> {
            if modulated {
                spade_normalize(x, cond, p)
            } else {
                Ok(plain_normalize(x, p))
            }
        };
        let h = self.conv1.forward(&site(x, &self.spade1)?.leaky_relu(0.2));
        let h = self.conv2.forward(&site(&h, &self.spade2)?.leaky_relu(0.2));
        let s = match &self.skip {
            Some((sp, conv)) => conv.forward(&site(x, sp)?),
            None => x.clone(),
        };
        Ok(s.add(&h))
    }
}

pub struct SpadeGenerator {
    pub params: ParamSet,
    pub cfg: GenConfig,
    seed_fc: Dense,
    blocks: Vec<SpadeResBlock>,
    head: Conv2d,
    c0: usize,
}

impl SpadeGenerator {
    pub fn new(cfg: &GenConfig, rng: &mut impl Rng) -> SpadeGenerator {
        assert!(cfg.resolution.is_power_of_two() && (64..=256).contains(&cfg.resolution));
        let mut params = ParamSet::new();
        let c0 = (cfg.base_channels * 8).min(512);
        let ch = |side: usize| -> usize { (c0 * 4 / side).max(16.min(c0)) };
        let seed_fc = Dense::new(&mut params, "seed", cfg.audio_dim, c0 * 16, rng, true);
        let mut blocks = Vec::new();
        let mut side = 4;
        let mut cin = c0;
        let mut i = 0;
        while side < cfg.resolution {
            side *= 2;
            let cout = ch(side);
            blocks.push(SpadeResBlock::new(&mut params, &format!("block{}", i), cin, cout, cfg.norm, rng));
            cin = cout;
            i += 1;
        }
        let head = Conv2d::new(&mut params, "head", cin, 3, 3, 1, 1, rng, true);
        SpadeGenerator { params, cfg: cfg.clone(), seed_fc, blocks, head, c0 }
    }

    /// Batched differentiable forward.
    ///
    /// `emb`: [n, audio_dim]; `identity`: [n, 3, res, res] in [-1, 1].
    /// Returns [n, 3, res, res] in (-1, 1).
    pub fn forward_batch(&self, emb: &Var, identity: &Var) -> Result<Var, GenError> {
        self.forward_inner(emb, identity, true)
    }

    /// Same trunk with the modulation branches disabled (plain normalisation).
    pub fn forward_batch_unmodulated(&self, emb: &Var, identity: &Var) -> Result<Var, GenError> {
        self.forward_inner(emb, identity, false)
    }

    fn forward_inner(&self, emb: &Var, identity: &Var, modulated: bool) -> Result<Var, GenError> {
        let es = emb.shape();
        if es.len() != 2 || es[1] != self.cfg.audio_dim {
            return Err(GenError::DimensionMismatch {
                got: *es.last().unwrap_or(&0),
                want: self.cfg.audio_dim,
            });
        }
        let ids = identity.shape();
        if ids[2] != self.cfg.resolution || ids[3] != self.cfg.resolution {
            return Err(GenError::ResolutionMismatch { got: ids[2], want: self.cfg.resolution });
        }
        let n = es[0];
        // Conditioning pyramid, fine to coarse by halving.
        let mut levels = vec![identity.clone()];
        let mut side = self.cfg.resolution;
        while side > 8 {
            levels.push(levels.last().unwrap().avg_pool2());
            side /= 2;
        }
        levels.reverse(); // coarse (8) .. fine (resolution)

        let mut x = self.seed_fc.forward(emb).reshape(&[n, self.c0, 4, 4]);
        for (block, cond) in self.blocks.iter().zip(levels.iter()) {
            x = block.forward(&x.upsample2(), cond, modulated)?;
        }
        Ok(self.head.forward(&x.leaky_relu(0.2)).tanh_act())
    }

    /// One frame from one embedding (inference convenience).
    pub fn generate_frame(
        &self,
        embedding: &[f64],
        identity: &IdentityImage,
        frame_index: usize,
    ) -> Result<GeneratedFrame, GenError> {
        if embedding.len() != self.cfg.audio_dim {
            return Err(GenError::DimensionMismatch { got: embedding.len(), want: self.cfg.audio_dim });
        }
        let emb = Var::input(Tensor::from_vec(&[1, self.cfg.audio_dim], embedding.to_vec()));
        let res = identity.resolution();
        let id = Var::input(identity.pixels().reshaped(&[1, 3, res, res]));
        let out = self.forward_batch(&emb, &id)?.value();
        Ok(GeneratedFrame {
            pixels: out.reshaped(&[3, self.cfg.resolution, self.cfg.resolution]),
            frame_index,
        })
    }

    /// Frame sequence for a whole waveform: one frame per audio window.
    pub fn generate_video(
        &self,
        waveform: &crate::audio::Waveform,
        identity: &IdentityImage,
        encoder: &ContentEncoder,
        audio_cfg: &AudioConfig,
    ) -> Result<Vec<GeneratedFrame>, GenError> {
        let windows = frame_windows(waveform, audio_cfg.fps, audio_cfg.window_ms, audio_cfg)?;
        let mut frames = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(8) {
            let n = chunk.len();
            let fpw = audio_cfg.mfcc_frames();
            let mut mfcc = Vec::with_capacity(n * fpw * audio_cfg.n_mfcc);
            for w in chunk {
                mfcc.extend_from_slice(w.mfcc.data());
            }
            let mfcc = Var::input(Tensor::from_vec(&[n, fpw, audio_cfg.n_mfcc], mfcc));
            let emb = encoder.encode_batch(&mfcc);
            let res = identity.resolution();
            let id_one = identity.pixels().reshaped(&[1, 3, res, res]);
            let id = Var::input(tile_batch(&id_one, n));
            let out = self.forward_batch(&emb, &id)?.value();
            let hw = self.cfg.resolution * self.cfg.resolution;
            for (j, w) in chunk.iter().enumerate() {
                let pix = Tensor::from_vec(
                    &[3, self.cfg.resolution, self.cfg.resolution],
                    out.data()[j * 3 * hw..(j + 1) * 3 * hw].to_vec(),
                );
                frames.push(GeneratedFrame { pixels: pix, frame_index: w.frame_index });
            }
        }
        Ok(frames)
    }
}

/// Repeat a [1, c, h, w] tensor n times along the batch axis.
pub fn tile_batch(t: &Tensor, n: usize) -> Tensor {
    let shape = t.shape().to_vec();
    assert_eq!(shape[0], 1);
    let mut out_shape = shape.clone();
    out_shape[0] = n;
    let mut data = Vec::with_capacity(t.numel() * n);
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&out_shape, data)
}
