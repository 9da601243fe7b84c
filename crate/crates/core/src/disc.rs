//! The three adversaries: a multi-scale frame discriminator, a multi-scale
//! temporal discriminator over channel-stacked frame windows, and the
//! two-stream synchronisation discriminator with unit-norm embeddings.

use crate::autograd::{l2_normalize_rows, Var};
use crate::config::DiscConfig;
use crate::nn::{normalize, Conv2d, Dense, NormKind, ParamSet};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("input of {got}x{got} does not match configured resolution {want}x{want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("temporal window needs {want} frames, got {got}")]
    ShortWindow { got: usize, want: usize },
    #[error("expected an mfcc matrix of {want:?}, got {got:?}")]
    BadMfcc { got: Vec<usize>, want: Vec<usize> },
}

/// Patch score maps and the per-layer activations used for feature matching.
/// One entry per scale, coarse information at later indices pooled from the
/// same single forward pass.
pub struct DiscriminatorOutput {
    pub score_maps: Vec<Var>,
    pub features: Vec<Vec<Var>>,
}

/// L consecutive frames ending at `t`, channel-stacked.
#[derive(Debug, Clone)]
pub struct TemporalWindow {
    pub frames: Tensor, // [l*3, h, w]
    pub t: usize,
    pub len: usize,
}

impl TemporalWindow {
    pub fn new(frames: &[Tensor], t: usize, l: usize) -> Result<TemporalWindow, DiscError> {
        if frames.len() != l {
            return Err(DiscError::ShortWindow { got: frames.len(), want: l });
        }
        let s = frames[0].shape().to_vec();
        let mut data = Vec::with_capacity(l * frames[0].numel());
        for f in frames {
            assert_eq!(f.shape(), s.as_slice(), "temporal window frames must share shapes");
            data.extend_from_slice(f.data());
        }
        Ok(TemporalWindow { frames: Tensor::from_vec(&[l * 3, s[1], s[2]], data), t, len: l })
    }
}

/// A (video embedding, audio embedding, label) triple for contrastive
/// training; both embeddings are unit-norm.
#[derive(Debug, Clone)]
pub struct SyncPair {
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub y: bool,
}

impl SyncPair {
    /// Euclidean distance between the two embeddings; lies in [0, 2] for
    /// unit-norm inputs.
    pub fn d(&self) -> f64 {
        self.v
            .iter()
            .zip(self.a.iter())
            .map(|(v, a)| (v - a) * (v - a))
            .sum::<f64>()
            .sqrt()
    }
}

struct PatchNet {
    convs: Vec<Conv2d>,
    score: Conv2d,
    norm: NormKind,
}

impl PatchNet {
    fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        base: usize,
        rng: &mut impl Rng,
    ) -> PatchNet {
        let c = [base, base * 2, (base * 4).min(256), (base * 4).min(256)];
        let convs = vec![
            Conv2d::new(params, &format!("{}.conv1", name), in_ch, c[0], 4, 2, 1, rng, true),
            Conv2d::new(params, &format!("{}.conv2", name), c[0], c[1], 4, 2, 1, rng, true),
            Conv2d::new(params, &format!("{}.conv3", name), c[1], c[2], 4, 2, 1, rng, true),
            Conv2d::new(params, &format!("{}.conv4", name), c[2], c[3], 3, 1, 1, rng, true),
        ];
        let score = Conv2d::new(params, &format!("{}.score", name), c[3], 1, 3, 1, 1, rng, true);
        PatchNet { convs, score, norm: NormKind::Instance }
    }

    /// Returns (patch logits, the four post-activation feature maps).
    fn forward(&self, x: &Var) -> (Var, Vec<Var>) {
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h);
            if i > 0 {
                h = normalize(&h, self.norm, NORM_EPS);
            }
            h = h.leaky_relu(0.2);
            feats.push(h.clone());
        }
        (self.score.forward(&h), feats)
    }
}

/// Three identically structured patch discriminators over an image pyramid
/// of scales {1, 1/2, 1/4}, conditioned on the identity image by channel
/// concatenation.
pub struct FrameDiscriminator {
    pub params: ParamSet,
    nets: Vec<PatchNet>,
    resolution: usize,
}

impl FrameDiscriminator {
    pub fn new(cfg: &DiscConfig, resolution: usize, rng: &mut impl Rng) -> FrameDiscriminator {
        let mut params = ParamSet::new();
        let nets = (0..3)
            .map(|i| PatchNet::new(&mut params, &format!("scale{}", i), 6, cfg.base_channels, rng))
            .collect();
        FrameDiscriminator { params, nets, resolution }
    }

    /// frame, identity: [n, 3, res, res].
    pub fn forward(&self, frame: &Var, identity: &Var) -> Result<DiscriminatorOutput, DiscError> {
        let s = frame.shape();
        if s[2] != self.resolution || s[3] != self.resolution {
            return Err(DiscError::ShapeMismatch { got: s[2], want: self.resolution });
        }
        let mut x = Var::concat(&[frame.clone(), identity.clone()], 1);
        let mut score_maps = Vec::with_capacity(3);
        let mut features = Vec::with_capacity(3);
        for net in &self.nets {
            let (score, feats) = net.forward(&x);
            score_maps.push(score);
            features.push(feats);
            x = x.avg_pool2();
        }
        Ok(DiscriminatorOutput { score_maps, features })
    }
}

/// Channel-stacked convolutions over an L-frame window at two spatial
/// scales; 2D stacking keeps variable-length clips viable with a sliding
/// window.
pub struct TemporalDiscriminator {
    pub params: ParamSet,
    nets: Vec<PatchNet>,
    pub window: usize,
    resolution: usize,
}

impl TemporalDiscriminator {
    pub fn new(cfg: &DiscConfig, resolution: usize, rng: &mut impl Rng) -> TemporalDiscriminator {
        let mut params = ParamSet::new();
        let in_ch = cfg.temporal_window * 3;
        let nets = (0..2)
            .map(|i| PatchNet::new(&mut params, &format!("tscale{}", i), in_ch, cfg.base_channels, rng))
            .collect();
        TemporalDiscriminator { params, nets, window: cfg.temporal_window, resolution }
    }

    /// window: [n, l*3, res, res].
    pub fn forward(&self, window: &Var) -> Result<DiscriminatorOutput, DiscError> {
        let s = window.shape();
        if s[1] != self.window * 3 {
            return Err(DiscError::ShortWindow { got: s[1] / 3, want: self.window });
        }
        if s[2] != self.resolution || s[3] != self.resolution {
            return Err(DiscError::ShapeMismatch { got: s[2], want: self.resolution });
        }
        let mut x = window.clone();
        let mut score_maps = Vec::with_capacity(2);
        let mut features = Vec::with_capacity(2);
        for net in &self.nets {
            let (score, feats) = net.forward(&x);
            score_maps.push(score);
            features.push(feats);
            x = x.avg_pool2();
        }
        Ok(DiscriminatorOutput { score_maps, features })
    }
}

/// Two-stream synchronisation network: strided convolutions over the
/// lower-half frame window on one side, convolutions over the MFCC matrix on
/// the other, both projected to unit-norm 256-d embeddings.
pub struct SyncDiscriminator {
    pub params: ParamSet,
    video_convs: Vec<Conv2d>,
    video_fc: Dense,
    audio_convs: Vec<Conv2d>,
    audio_fc: Dense,
    pub window: usize,
    pub sync_resolution: usize,
    mfcc_shape: [usize; 2],
    pub embed_dim: usize,
}

impl SyncDiscriminator {
    pub fn new(cfg: &DiscConfig, mfcc_frames: usize, n_mfcc: usize, rng: &mut impl Rng) -> SyncDiscriminator {
        let mut params = ParamSet::new();
        let embed_dim = 256;
        // Video stream: stride-2 blocks until the map is at most 4x4.
        let mut video_convs = Vec::new();
        let mut side = cfg.sync_resolution;
        let mut cin = cfg.temporal_window * 3;
        let mut i = 0;
        while side > 4 {
            let cout = (32 << i.min(2)).min(128);
            video_convs.push(Conv2d::new(
                &mut params,
                &format!("video.conv{}", i),
                cin,
                cout,
                4,
                2,
                1,
                rng,
                true,
            ));
            cin = cout;
            side = (side + 2 - 4) / 2 + 1;
            i += 1;
        }
        let video_fc = Dense::new(&mut params, "video.fc", cin * side * side, embed_dim, rng, true);

        let mut audio_convs = Vec::new();
        let (mut fh, mut fw) = (mfcc_frames, n_mfcc);
        let mut cin = 1;
        for j in 0..3 {
            let cout = (32 << j).min(128);
            audio_convs.push(Conv2d::new(
                &mut params,
                &format!("audio.conv{}", j),
                cin,
                cout,
                3,
                2,
                1,
                rng,
                true,
            ));
            cin = cout;
            fh = (fh + 2 - 3) / 2 + 1;
            fw = (fw + 2 - 3) / 2 + 1;
        }
        let audio_fc = Dense::new(&mut params, "audio.fc", cin * fh * fw, embed_dim, rng, true);
        // Nonzero projection biases keep embeddings unit-norm even for
        // all-zero inputs (silence windows).
        video_fc.bias.set_value(crate::nn::randn_tensor(&[embed_dim], 0.02, rng));
        audio_fc.bias.set_value(crate::nn::randn_tensor(&[embed_dim], 0.02, rng));

        SyncDiscriminator {
            params,
            video_convs,
            video_fc,
            audio_convs,
            audio_fc,
            window: cfg.temporal_window,
            sync_resolution: cfg.sync_resolution,
            mfcc_shape: [mfcc_frames, n_mfcc],
            embed_dim,
        }
    }

    /// crops: [n, l*3, sync, sync] lower-half crops -> [n, 256] unit-norm.
    pub fn embed_video(&self, crops: &Var) -> Result<Var, DiscError> {
        let s = crops.shape();
        if s[1] != self.window * 3 {
            return Err(DiscError::ShortWindow { got: s[1] / 3, want: self.window });
        }
        if s[2] != self.sync_resolution || s[3] != self.sync_resolution {
            return Err(DiscError::ShapeMismatch { got: s[2], want: self.sync_resolution });
        }
        let n = s[0];
        let mut h = crops.clone();
        for conv in &self.video_convs {
            h = conv.forward(&h).leaky_relu(0.2);
        }
        let flat = h.numel() / n;
        Ok(l2_normalize_rows(&self.video_fc.forward(&h.reshape(&[n, flat]))))
    }

    /// mfcc: [n, frames, coeffs] -> [n, 256] unit-norm.
    pub fn embed_audio(&self, mfcc: &Var) -> Result<Var, DiscError> {
        let s = mfcc.shape();
        if s.len() != 3 || s[1] != self.mfcc_shape[0] || s[2] != self.mfcc_shape[1] {
            return Err(DiscError::BadMfcc { got: s.clone(), want: self.mfcc_shape.to_vec() });
        }
        let n = s[0];
        let mut h = mfcc.reshape(&[n, 1, s[1], s[2]]);
        for conv in &self.audio_convs {
            h = conv.forward(&h).leaky_relu(0.2);
        }
        let flat = h.numel() / n;
        Ok(l2_normalize_rows(&self.audio_fc.forward(&h.reshape(&[n, flat]))))
    }
}

/// Crop rows [h/2, h) of every frame in a channel-stacked window and resize
/// to the sync resolution. Differentiable, so the generator can learn
/// through it.
pub fn crop_lower_half_resized(window: &Var, sync_resolution: usize) -> Var {
    let s = window.shape();
    let h = s[2];
    window
        .narrow(2, h / 2, h - h / 2)
        .resize_nearest(sync_resolution, sync_resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn_tensor, seeded_rng};

    fn cfg() -> DiscConfig {
        DiscConfig { base_channels: 8, ..DiscConfig::default() }
    }

    #[test]
    fn frame_disc_pyramid_contract() {
        let d = FrameDiscriminator::new(&cfg(), 64, &mut seeded_rng(1, 2));
        let frame = Var::input(randn_tensor(&[1, 3, 64, 64], 0.5, &mut seeded_rng(2, 2)));
        let id = Var::input(randn_tensor(&[1, 3, 64, 64], 0.5, &mut seeded_rng(3, 2)));
        let out = d.forward(&frame, &id).unwrap();
        assert_eq!(out.score_maps.len(), 3);
        assert_eq!(out.features.len(), 3);
        for feats in &out.features {
            assert_eq!(feats.len(), 4);
        }
        // pyramid halves: score spatial sides shrink by 2 per scale
        let sides: Vec<usize> = out.score_maps.iter().map(|m| m.shape()[2]).collect();
        assert_eq!(sides, vec![8, 4, 2]);
        for m in &out.score_maps {
            assert!(m.value().is_finite());
        }
    }

    #[test]
    fn frame_disc_deterministic_and_shape_checked() {
        let d = FrameDiscriminator::new(&cfg(), 64, &mut seeded_rng(4, 2));
        let frame = Var::input(randn_tensor(&[1, 3, 64, 64], 0.5, &mut seeded_rng(5, 2)));
        let id = Var::input(randn_tensor(&[1, 3, 64, 64], 0.5, &mut seeded_rng(6, 2)));
        let a = d.forward(&frame, &id).unwrap();
        let b = d.forward(&frame, &id).unwrap();
        for (x, y) in a.score_maps.iter().zip(b.score_maps.iter()) {
            assert_eq!(x.value(), y.value());
        }
        let small = Var::input(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(matches!(d.forward(&small, &small), Err(DiscError::ShapeMismatch { .. })));
    }

    #[test]
    fn temporal_disc_two_scales_and_short_window() {
        let c = cfg();
        let d = TemporalDiscriminator::new(&c, 64, &mut seeded_rng(7, 2));
        let win = Var::input(randn_tensor(&[1, 15, 64, 64], 0.5, &mut seeded_rng(8, 2)));
        let out = d.forward(&win).unwrap();
        assert_eq!(out.score_maps.len(), 2);
        assert!(out.score_maps.iter().all(|m| m.value().is_finite()));

        let frames: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[3, 64, 64])).collect();
        assert!(matches!(
            TemporalWindow::new(&frames, 3, 5),
            Err(DiscError::ShortWindow { got: 4, want: 5 })
        ));
        let bad = Var::input(Tensor::zeros(&[1, 12, 64, 64]));
        assert!(matches!(d.forward(&bad), Err(DiscError::ShortWindow { got: 4, want: 5 })));
    }

    #[test]
    fn sync_embeddings_unit_norm_and_deterministic() {
        let c = cfg();
        let d = SyncDiscriminator::new(&c, 20, 13, &mut seeded_rng(9, 2));
        let crops = Var::input(randn_tensor(&[2, 15, 64, 64], 0.5, &mut seeded_rng(10, 2)));
        let v = d.embed_video(&crops).unwrap();
        assert_eq!(v.shape(), vec![2, 256]);
        for r in 0..2 {
            let n: f64 =
                v.value().data()[r * 256..(r + 1) * 256].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let v2 = d.embed_video(&crops).unwrap();
        assert_eq!(v.value(), v2.value());

        let mfcc = Var::input(Tensor::zeros(&[1, 20, 13]));
        let a = d.embed_audio(&mfcc).unwrap();
        assert!(a.value().is_finite());
        let n: f64 = a.value().data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        let a2 = d.embed_audio(&mfcc).unwrap();
        assert_eq!(a.value(), a2.value());

        let bad = Var::input(Tensor::zeros(&[1, 10, 13]));
        assert!(matches!(d.embed_audio(&bad), Err(DiscError::BadMfcc { .. })));
    }

    #[test]
    fn sync_pair_distance_range() {
        let mut v = vec![0.0; 256];
        v[0] = 1.0;
        let mut a = vec![0.0; 256];
        a[1] = 1.0;
        let p = SyncPair { v: v.clone(), a, y: false };
        assert!((p.d() - std::f64::consts::SQRT_2).abs() < 1e-12);
        let q = SyncPair { v: v.clone(), a: v, y: true };
        assert_eq!(q.d(), 0.0);
    }

    #[test]
    fn crop_lower_half_shapes() {
        let win = Var::input(randn_tensor(&[1, 15, 64, 64], 0.5, &mut seeded_rng(11, 2)));
        let crops = crop_lower_half_resized(&win, 64);
        assert_eq!(crops.shape(), vec![1, 15, 64, 64]);
        // the crop only sees the lower half
        let mut top_heavy = Tensor::zeros(&[1, 15, 64, 64]);
        for ch in 0..15 {
            for y in 0..32 {
                for x in 0..64 {
                    top_heavy.data_mut()[(ch * 64 + y) * 64 + x] = 1.0;
                }
            }
        }
        let cropped = crop_lower_half_resized(&Var::input(top_heavy), 64);
        assert!(cropped.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_gradchecks() {
        let c = cfg();
        let d = FrameDiscriminator::new(&c, 64, &mut seeded_rng(12, 2));
        let frame = Var::param(randn_tensor(&[1, 3, 64, 64], 0.3, &mut seeded_rng(13, 2)));
        let id_t = randn_tensor(&[1, 3, 64, 64], 0.3, &mut seeded_rng(14, 2));
        let f = || {
            let out = d.forward(&frame, &Var::input(id_t.clone())).unwrap();
            let mut total = out.score_maps[0].mean_all();
            for m in &out.score_maps[1..] {
                total = total.add(&m.mean_all());
            }
            total
        };
        crate::gradcheck::check_gradients(f, &[frame.clone()], 4, 1e-5, 1e-2, 1e-5, 31).unwrap();

        let sd = SyncDiscriminator::new(&c, 20, 13, &mut seeded_rng(15, 2));
        let crops = Var::param(randn_tensor(&[1, 15, 64, 64], 0.3, &mut seeded_rng(16, 2)));
        let probe = randn_tensor(&[1, 256], 1.0, &mut seeded_rng(17, 2));
        let g = || sd.embed_video(&crops).unwrap().mul(&Var::input(probe.clone())).sum_all();
        crate::gradcheck::check_gradients(g, &[crops.clone()], 4, 1e-5, 1e-2, 1e-5, 32).unwrap();
    }
}
