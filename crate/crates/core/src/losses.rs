//! The six training losses, each independently evaluable and differentiable
//! where the training graph needs it. Discriminator scores are raw logits;
//! the GAN objective applies the sigmoid internally via stable BCE.

use crate::autograd::Var;
use crate::disc::DiscriminatorOutput;
use crate::nn::{Conv2d, ParamSet};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("contrastive loss needs at least one pair")]
    EmptyBatch,
    #[error("eye width {0} below minimum {1}")]
    DegenerateEye(f64, f64),
}

/// Per-loss weights and the contrastive margin.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub gan: f64,
    pub fm: f64,
    pub pl: f64,
    pub rl: f64,
    pub cl: f64,
    pub tal: f64,
    pub bl: f64,
    pub margin: f64,
}

impl From<&crate::config::LossConfig> for LossWeights {
    fn from(c: &crate::config::LossConfig) -> Self {
        LossWeights {
            gan: c.lambda_gan,
            fm: c.lambda_fm,
            pl: c.lambda_pl,
            rl: c.lambda_rl,
            cl: c.lambda_cl,
            tal: c.lambda_tal,
            bl: c.lambda_bl,
            margin: c.margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanSide {
    Generator,
    Discriminator,
}

/// Saturating BCE objective summed over scales, averaged over patches.
/// Discriminator side: -[log D(x) + log(1 - D(G(z)))]; generator side:
/// -log D(G(z)). `fake` must be computed from a detached generator output on
/// the discriminator side.
pub fn gan_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput, side: GanSide) -> Var {
    let mut total: Option<Var> = None;
    match side {
        GanSide::Discriminator => {
            for (r, f) in real.score_maps.iter().zip(fake.score_maps.iter()) {
                let ones = Tensor::filled(&r.shape(), 1.0);
                let zeros = Tensor::zeros(&f.shape());
                let term = r.bce_with_logits(&ones).mean_all().add(&f.bce_with_logits(&zeros).mean_all());
                total = Some(match total {
                    Some(t) => t.add(&term),
                    None => term,
                });
            }
        }
        GanSide::Generator => {
            for f in &fake.score_maps {
                let ones = Tensor::filled(&f.shape(), 1.0);
                let term = f.bce_with_logits(&ones).mean_all();
                total = Some(match total {
                    Some(t) => t.add(&term),
                    None => term,
                });
            }
        }
    }
    total.expect("discriminator output had no scales")
}

/// Mean absolute difference over the lower half of the frame (rows >= h/2),
/// all channels.
pub fn reconstruction_loss(real: &Var, gen: &Var) -> Result<Var, LossError> {
    let (rs, gs) = (real.shape(), gen.shape());
    if rs != gs {
        return Err(LossError::ShapeMismatch(rs, gs));
    }
    let h = rs[2];
    let lower_real = real.narrow(2, h / 2, h - h / 2);
    let lower_gen = gen.narrow(2, h / 2, h - h / 2);
    Ok(lower_real.sub(&lower_gen).abs_act().mean_all())
}

/// Sum over scales and layers of per-element-normalised L1 between
/// discriminator features on real and generated inputs. Real features are
/// detached: the loss trains the generator, not the discriminator.
pub fn feature_matching_loss(
    real_feats: &[Vec<Var>],
    fake_feats: &[Vec<Var>],
) -> Result<Var, LossError> {
    let mut total: Option<Var> = None;
    for (rs, fs) in real_feats.iter().zip(fake_feats.iter()) {
        for (r, f) in rs.iter().zip(fs.iter()) {
            if r.shape() != f.shape() {
                return Err(LossError::ShapeMismatch(r.shape(), f.shape()));
            }
            let term = r.detach().sub(f).abs_act().mean_all();
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
    }
    total.ok_or(LossError::EmptyBatch)
}

/// Frozen feature pyramid used by the perceptual loss (and, mean-pooled, as
/// the default identity embedder).
pub trait FeatureExtractor {
    fn features(&self, x: &Var) -> Vec<Var>;
}

/// Default extractor: a fixed randomly-initialised 4-level convolution
/// pyramid. Random frozen features still define a valid perceptual metric;
/// exported pretrained weights can be loaded over it.
pub struct ConvPyramidExtractor {
    pub params: ParamSet,
    convs: Vec<Conv2d>,
}

impl ConvPyramidExtractor {
    pub fn new(rng: &mut impl Rng) -> ConvPyramidExtractor {
        let mut params = ParamSet::new();
        let chans = [(3, 16), (16, 32), (32, 64), (64, 64)];
        let convs = chans
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                Conv2d::new(&mut params, &format!("level{}", i), cin, cout, 3, 2, 1, rng, false)
            })
            .collect();
        ConvPyramidExtractor { params, convs }
    }

    pub fn load_weights(&self, tensors: &BTreeMap<String, Tensor>) -> Result<(), String> {
        self.params.load(tensors)
    }
}

impl FeatureExtractor for ConvPyramidExtractor {
    fn features(&self, x: &Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h).relu();
            feats.push(h.clone());
        }
        feats
    }
}

/// lambda-weighted sum over extractor layers of per-element-normalised L1.
/// Gradients flow to `gen` only.
pub fn perceptual_loss(real: &Var, gen: &Var, extractor: &dyn FeatureExtractor, lambda: f64) -> Var {
    if lambda == 0.0 {
        return Var::input(Tensor::scalar(0.0));
    }
    let real_feats = extractor.features(&real.detach());
    let gen_feats = extractor.features(gen);
    let mut total: Option<Var> = None;
    for (r, f) in real_feats.iter().zip(gen_feats.iter()) {
        let term = r.detach().sub(f).abs_act().mean_all();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total.expect("extractor returned no layers").scale(lambda)
}

/// (1/2N) sum_n [ y_n d_n^2 + (1 - y_n) max(margin - d_n, 0)^2 ] with
/// d_n = ||v_n - a_n||_2 over unit-norm embedding rows.
pub fn contrastive_loss(v: &Var, a: &Var, y: &[bool], margin: f64) -> Result<Var, LossError> {
    let (vs, as_) = (v.shape(), a.shape());
    if vs != as_ {
        return Err(LossError::ShapeMismatch(vs, as_));
    }
    let n = vs[0];
    if n == 0 || y.len() != n {
        return Err(LossError::EmptyBatch);
    }
    let d_sq = v.sub(a).sqr().sum_last_keep(); // [n,1]
    let d = d_sq.sqrt_safe();
    let hinge = d.scale(-1.0).add_scalar(margin).relu().sqr();
    let y_mask = Tensor::from_vec(&[n, 1], y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    let not_y = y_mask.map(|v| 1.0 - v);
    let pos = d_sq.mul(&Var::input(y_mask));
    let neg = hinge.mul(&Var::input(not_y));
    Ok(pos.add(&neg).sum_all().scale(1.0 / (2.0 * n as f64)))
}

/// Six landmarks of one eye: p1/p4 are the horizontal corners, p2/p3 the
/// upper lid, p6/p5 the lower lid.
pub type EyePoints = [[f64; 2]; 6];

#[derive(Debug, Clone)]
pub struct EyeLandmarks {
    pub left: EyePoints,
    pub right: EyePoints,
}

pub const EYE_WIDTH_EPS: f64 = 1e-6;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Eye aspect ratio m = (||p2-p6|| + ||p3-p5||) / ||p1-p4|| of one eye.
pub fn ear(eye: &EyePoints) -> Result<f64, LossError> {
    let width = dist(eye[0], eye[3]);
    if width <= EYE_WIDTH_EPS {
        return Err(LossError::DegenerateEye(width, EYE_WIDTH_EPS));
    }
    Ok((dist(eye[1], eye[5]) + dist(eye[2], eye[4])) / width)
}

/// EAR averaged over both eyes.
pub fn mean_ear(lm: &EyeLandmarks) -> Result<f64, LossError> {
    Ok(0.5 * (ear(&lm.left)? + ear(&lm.right)?))
}

/// L_BL = |m_r - m_g|.
pub fn blink_loss(real_ear: f64, gen_ear: f64) -> f64 {
    (real_ear - gen_ear).abs()
}

/// Differentiable EAR from a [n, 12, 2] landmark tensor (left eye points
/// 0..6, right eye 6..12), averaged over both eyes -> [n, 1].
pub fn ear_from_points(points: &Var) -> Var {
    let shape = points.shape();
    assert_eq!(&shape[1..], &[12, 2], "expected [n, 12, 2] landmarks");
    let n = shape[0];
    let point = |i: usize| points.narrow(1, i, 1).reshape(&[n, 2]);
    let d = |i: usize, j: usize| {
        point(i).sub(&point(j)).sqr().sum_last_keep().sqrt_safe() // [n,1]
    };
    let eye = |o: usize| {
        let vertical = d(o + 1, o + 5).add(&d(o + 2, o + 4));
        vertical.mul_last_broadcast(&d(o, o + 3).recip())
    };
    eye(0).add(&eye(6)).scale(0.5)
}

/// Mean |EAR_real - EAR_gen| over the batch, both sides [n, 1].
pub fn blink_loss_var(real_ear: &Var, gen_ear: &Var) -> Var {
    real_ear.detach().sub(gen_ear).abs_act().mean_all()
}

/// Small heatmap-based eye-landmark regressor: trained supervised on real
/// frames while ground truth is available, then frozen so generated-frame
/// EAR stays differentiable w.r.t. pixels.
pub struct LandmarkRegressor {
    pub params: ParamSet,
    convs: Vec<Conv2d>,
    head: Conv2d,
    pub resolution: usize,
    heat_side: usize,
    grid: Tensor, // [heat*heat, 2] pixel-centre coordinates
}

impl LandmarkRegressor {
    pub fn new(resolution: usize, rng: &mut impl Rng) -> LandmarkRegressor {
        let mut params = ParamSet::new();
        let convs = vec![
            Conv2d::new(&mut params, "conv1", 3, 16, 3, 2, 1, rng, true),
            Conv2d::new(&mut params, "conv2", 16, 32, 3, 2, 1, rng, true),
            Conv2d::new(&mut params, "conv3", 32, 32, 3, 1, 1, rng, true),
        ];
        let head = Conv2d::new(&mut params, "head", 32, 12, 1, 1, 0, rng, true);
        let heat_side = resolution / 4;
        let cell = resolution as f64 / heat_side as f64;
        let mut grid = Vec::with_capacity(heat_side * heat_side * 2);
        for y in 0..heat_side {
            for x in 0..heat_side {
                grid.push((x as f64 + 0.5) * cell);
                grid.push((y as f64 + 0.5) * cell);
            }
        }
        LandmarkRegressor {
            params,
            convs,
            head,
            resolution,
            heat_side,
            grid: Tensor::from_vec(&[heat_side * heat_side, 2], grid),
        }
    }

    /// frames [n, 3, res, res] -> soft-argmax landmark coordinates
    /// [n, 12, 2] in pixels.
    pub fn predict(&self, frames: &Var) -> Var {
        let n = frames.shape()[0];
        let mut h = frames.clone();
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(0.2);
        }
        let maps = self.head.forward(&h); // [n, 12, hs, hs]
        let hw = self.heat_side * self.heat_side;
        let probs = maps.reshape(&[n * 12, hw]).softmax_last();
        probs.matmul(&Var::input(self.grid.clone())).reshape(&[n, 12, 2])
    }

    /// Mean squared coordinate error against ground truth [n, 12, 2],
    /// normalised by the resolution so the scale is config-independent.
    pub fn training_loss(&self, frames: &Var, truth: &Tensor) -> Var {
        let pred = self.predict(frames);
        let scale = 1.0 / self.resolution as f64;
        pred.scale(scale)
            .sub(&Var::input(truth.map(|v| v * scale)))
            .sqr()
            .mean_all()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn_tensor, seeded_rng};

    fn disc_out(maps: Vec<Tensor>) -> DiscriminatorOutput {
        DiscriminatorOutput {
            score_maps: maps.into_iter().map(Var::param).collect(),
            features: vec![],
        }
    }

    #[test]
    fn gan_loss_optimal_discriminator_is_zero() {
        // D(x) = 1, D(G(z)) = 0 via saturated logits.
        let real = disc_out(vec![Tensor::filled(&[1, 1, 4, 4], 40.0)]);
        let fake = disc_out(vec![Tensor::filled(&[1, 1, 4, 4], -40.0)]);
        let loss = gan_loss(&real, &fake, GanSide::Discriminator);
        assert!(loss.item().abs() < 1e-6, "{}", loss.item());
    }

    #[test]
    fn gan_loss_uninformative_discriminator() {
        // D(.) = 0.5 everywhere -> 2 ln 2 per scale.
        let real = disc_out(vec![Tensor::zeros(&[1, 1, 4, 4])]);
        let fake = disc_out(vec![Tensor::zeros(&[1, 1, 4, 4])]);
        let loss = gan_loss(&real, &fake, GanSide::Discriminator);
        assert!((loss.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // summed over three scales
        let real3 = disc_out(vec![
            Tensor::zeros(&[1, 1, 4, 4]),
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::zeros(&[1, 1, 1, 1]),
        ]);
        let fake3 = disc_out(vec![
            Tensor::zeros(&[1, 1, 4, 4]),
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::zeros(&[1, 1, 1, 1]),
        ]);
        let loss3 = gan_loss(&real3, &fake3, GanSide::Discriminator);
        assert!((loss3.item() - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_fooled_generator_is_zero() {
        let real = disc_out(vec![Tensor::zeros(&[1, 1, 4, 4])]);
        let fake = disc_out(vec![Tensor::filled(&[1, 1, 4, 4], 40.0)]);
        let loss = gan_loss(&real, &fake, GanSide::Generator);
        assert!(loss.item().abs() < 1e-6);
    }

    #[test]
    fn reconstruction_examples() {
        let real = Var::input(Tensor::zeros(&[1, 3, 8, 8]));
        assert_eq!(reconstruction_loss(&real, &real).unwrap().item(), 0.0);

        // lower half differs by 0.5, upper half by 1.0 -> 0.5
        let mut gen = Tensor::zeros(&[1, 3, 8, 8]);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    gen.data_mut()[(c * 8 + y) * 8 + x] = if y >= 4 { 0.5 } else { 1.0 };
                }
            }
        }
        let loss = reconstruction_loss(&real, &Var::input(gen)).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-12);

        assert!(matches!(
            reconstruction_loss(&real, &Var::input(Tensor::zeros(&[1, 3, 4, 4]))),
            Err(LossError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn reconstruction_brute_force_oracle_and_upper_half_independence() {
        let mut rng = seeded_rng(3, 3);
        let a = randn_tensor(&[2, 3, 8, 8], 1.0, &mut rng);
        let b = randn_tensor(&[2, 3, 8, 8], 1.0, &mut rng);
        let loss = reconstruction_loss(&Var::input(a.clone()), &Var::input(b.clone()))
            .unwrap()
            .item();
        // independent elementwise |.| mean over the bottom-half slice
        let mut acc = 0.0;
        let mut count = 0;
        for n in 0..2 {
            for c in 0..3 {
                for y in 4..8 {
                    for x in 0..8 {
                        let i = ((n * 3 + c) * 8 + y) * 8 + x;
                        acc += (a.data()[i] - b.data()[i]).abs();
                        count += 1;
                    }
                }
            }
        }
        assert!((loss - acc / count as f64).abs() < 1e-12);

        // perturbing the upper half leaves the loss unchanged
        let mut b2 = b.clone();
        for x in 0..8 {
            b2.data_mut()[x] += 100.0;
        }
        let loss2 = reconstruction_loss(&Var::input(a), &Var::input(b2)).unwrap().item();
        assert_eq!(loss, loss2);
    }

    #[test]
    fn feature_matching_examples() {
        let mk = |t: Tensor| Var::input(t);
        // identical features -> 0
        let f = vec![vec![mk(Tensor::filled(&[4], 1.5))]];
        assert_eq!(feature_matching_loss(&f, &f).unwrap().item(), 0.0);

        // single element differing by 2 -> 2
        let real = vec![vec![mk(Tensor::scalar(3.0))]];
        let fake = vec![vec![mk(Tensor::scalar(1.0))]];
        assert_eq!(feature_matching_loss(&real, &fake).unwrap().item(), 2.0);

        // layers of sizes 4 and 2 with constant diffs 1 and 3 -> 1 + 3 = 4
        let real = vec![vec![mk(Tensor::filled(&[4], 1.0)), mk(Tensor::filled(&[2], 5.0))]];
        let fake = vec![vec![mk(Tensor::zeros(&[4])), mk(Tensor::filled(&[2], 2.0))]];
        assert!((feature_matching_loss(&real, &fake).unwrap().item() - 4.0).abs() < 1e-12);

        let bad = vec![vec![mk(Tensor::zeros(&[3]))]];
        let good = vec![vec![mk(Tensor::zeros(&[4]))]];
        assert!(matches!(
            feature_matching_loss(&bad, &good),
            Err(LossError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn perceptual_loss_examples() {
        let ex = ConvPyramidExtractor::new(&mut seeded_rng(4, 3));
        let img = Var::input(randn_tensor(&[1, 3, 16, 16], 0.5, &mut seeded_rng(5, 3)));
        assert_eq!(perceptual_loss(&img, &img, &ex, 10.0).item(), 0.0);

        let other = Var::input(randn_tensor(&[1, 3, 16, 16], 0.5, &mut seeded_rng(6, 3)));
        assert_eq!(perceptual_loss(&img, &other, &ex, 0.0).item(), 0.0);

        // independent per-layer hand evaluation
        let lambda = 2.5;
        let loss = perceptual_loss(&img, &other, &ex, lambda).item();
        let rf = ex.features(&img);
        let ff = ex.features(&other);
        let mut want = 0.0;
        for (r, f) in rf.iter().zip(ff.iter()) {
            let rv = r.value();
            let fv = f.value();
            let n = rv.numel() as f64;
            want += rv.data().iter().zip(fv.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        }
        assert!((loss - lambda * want).abs() < 1e-9);
    }

    /// Unit vectors at an exact euclidean distance d (2 - 2cos = d^2).
    fn pair_with_distance(d: f64, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let c = 1.0 - d * d / 2.0;
        let s = (1.0 - c * c).sqrt();
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        let mut a = vec![0.0; dim];
        a[0] = c;
        a[1] = s;
        (v, a)
    }

    #[test]
    fn contrastive_examples() {
        let dim = 8;
        // y=1, d=0 -> 0
        let (v, _) = pair_with_distance(0.5, dim);
        let vt = Var::input(Tensor::from_vec(&[1, dim], v.clone()));
        assert_eq!(contrastive_loss(&vt, &vt, &[true], 1.0).unwrap().item(), 0.0);

        // y=0, d >= margin -> 0
        let (v, a) = pair_with_distance(1.2, dim);
        let vt = Var::input(Tensor::from_vec(&[1, dim], v));
        let at = Var::input(Tensor::from_vec(&[1, dim], a));
        assert!(contrastive_loss(&vt, &at, &[false], 1.0).unwrap().item().abs() < 1e-12);

        // N=2, margin=1, {(y=1, d=0.5), (y=0, d=0.4)} -> 0.1525
        let (v1, a1) = pair_with_distance(0.5, dim);
        let (v2, a2) = pair_with_distance(0.4, dim);
        let v = Var::input(Tensor::from_vec(&[2, dim], [v1, v2].concat()));
        let a = Var::input(Tensor::from_vec(&[2, dim], [a1, a2].concat()));
        let loss = contrastive_loss(&v, &a, &[true, false], 1.0).unwrap().item();
        assert!((loss - 0.1525).abs() < 1e-9, "{}", loss);

        assert!(matches!(
            contrastive_loss(&v, &a, &[], 1.0),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn contrastive_monotonicity() {
        let dim = 8;
        let eval = |d: f64, y: bool| {
            let (v, a) = pair_with_distance(d, dim);
            let v = Var::input(Tensor::from_vec(&[1, dim], v));
            let a = Var::input(Tensor::from_vec(&[1, dim], a));
            contrastive_loss(&v, &a, &[y], 1.0).unwrap().item()
        };
        let ds: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        for w in ds.windows(2) {
            assert!(eval(w[1], true) >= eval(w[0], true), "y=1 not non-decreasing");
            if w[1] < 1.0 {
                assert!(eval(w[1], false) <= eval(w[0], false), "y=0 not non-increasing");
            }
        }
    }

    #[test]
    fn ear_examples() {
        let eye: EyePoints =
            [[0.0, 0.0], [1.0, 1.0], [3.0, 1.0], [4.0, 0.0], [3.0, -1.0], [1.0, -1.0]];
        assert!((ear(&eye).unwrap() - 1.0).abs() < 1e-12);

        // closed eye: p2 == p6, p3 == p5
        let closed: EyePoints =
            [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [4.0, 0.0], [3.0, 0.0], [1.0, 0.0]];
        assert_eq!(ear(&closed).unwrap(), 0.0);

        let eye2: EyePoints =
            [[0.0, 0.0], [1.0, 2.0], [4.0, 1.0], [6.0, 0.0], [4.0, -1.0], [1.0, -1.0]];
        assert!((ear(&eye2).unwrap() - 5.0 / 6.0).abs() < 1e-12);

        let degenerate: EyePoints = [[0.0; 2]; 6];
        assert!(matches!(ear(&degenerate), Err(LossError::DegenerateEye(..))));
    }

    #[test]
    fn blink_loss_examples_and_rigid_invariance() {
        assert_eq!(blink_loss(0.3, 0.3), 0.0);
        assert!((blink_loss(0.30, 0.25) - 0.05).abs() < 1e-12);

        // rigid rotation + translation + uniform scale leaves EAR unchanged
        let eye: EyePoints =
            [[0.0, 0.0], [1.0, 2.0], [4.0, 1.0], [6.0, 0.0], [4.0, -1.0], [1.0, -1.0]];
        let base = ear(&eye).unwrap();
        for &(angle, scale, tx, ty) in
            &[(0.7, 2.0, 3.0, -1.0), (2.1, 0.5, -10.0, 4.0), (-1.3, 7.0, 0.0, 0.0)]
        {
            let transformed: EyePoints = eye.map(|p| {
                let (s, c) = (f64::sin(angle), f64::cos(angle));
                [scale * (c * p[0] - s * p[1]) + tx, scale * (s * p[0] + c * p[1]) + ty]
            });
            assert!((ear(&transformed).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn ear_from_points_matches_scalar_ear() {
        let eye: EyePoints =
            [[2.0, 3.0], [3.0, 5.0], [6.0, 4.0], [8.0, 3.0], [6.0, 2.0], [3.0, 2.0]];
        let mut flat = Vec::new();
        for p in eye.iter().chain(eye.iter()) {
            flat.extend_from_slice(p);
        }
        let points = Var::input(Tensor::from_vec(&[1, 12, 2], flat));
        let graph = ear_from_points(&points).item();
        let scalar = ear(&eye).unwrap();
        assert!((graph - scalar).abs() < 1e-12);
    }

    #[test]
    fn loss_gradchecks() {
        let mut rng = seeded_rng(9, 3);
        // reconstruction
        let real = randn_tensor(&[1, 3, 8, 8], 0.5, &mut rng);
        let gen = Var::param(randn_tensor(&[1, 3, 8, 8], 0.5, &mut rng));
        let f = || reconstruction_loss(&Var::input(real.clone()), &gen).unwrap();
        crate::gradcheck::check_gradients(f, &[gen.clone()], 10, 1e-6, 1e-3, 1e-6, 41).unwrap();

        // contrastive through normalised embeddings
        let v = Var::param(randn_tensor(&[3, 6], 0.7, &mut rng));
        let a = randn_tensor(&[3, 6], 0.7, &mut rng);
        let g = || {
            let vn = crate::autograd::l2_normalize_rows(&v);
            let an = crate::autograd::l2_normalize_rows(&Var::input(a.clone()));
            contrastive_loss(&vn, &an, &[true, false, false], 1.0).unwrap()
        };
        crate::gradcheck::check_gradients(g, &[v.clone()], 10, 1e-6, 1e-3, 1e-6, 42).unwrap();

        // perceptual
        let ex = ConvPyramidExtractor::new(&mut rng);
        let target = randn_tensor(&[1, 3, 16, 16], 0.5, &mut rng);
        let img = Var::param(randn_tensor(&[1, 3, 16, 16], 0.5, &mut rng));
        let h = || perceptual_loss(&Var::input(target.clone()), &img, &ex, 3.0);
        crate::gradcheck::check_gradients(h, &[img.clone()], 10, 1e-6, 1e-3, 1e-6, 43).unwrap();

        // ear through points
        let pts = Var::param(randn_tensor(&[2, 12, 2], 2.0, &mut rng).map(|v| v + 5.0));
        let real_ear = randn_tensor(&[2, 1], 0.1, &mut rng).map(|v| v.abs() + 0.2);
        let e = || blink_loss_var(&Var::input(real_ear.clone()), &ear_from_points(&pts));
        crate::gradcheck::check_gradients(e, &[pts.clone()], 10, 1e-6, 1e-3, 1e-6, 44).unwrap();

        // gan generator side through logits
        let logits = Var::param(randn_tensor(&[1, 1, 4, 4], 0.5, &mut rng));
        let real_out = randn_tensor(&[1, 1, 4, 4], 0.5, &mut rng);
        let k = || {
            let real = DiscriminatorOutput {
                score_maps: vec![Var::input(real_out.clone())],
                features: vec![],
            };
            let fake =
                DiscriminatorOutput { score_maps: vec![logits.clone()], features: vec![] };
            gan_loss(&real, &fake, GanSide::Generator)
        };
        crate::gradcheck::check_gradients(k, &[logits.clone()], 10, 1e-6, 1e-3, 1e-6, 45).unwrap();
    }

    #[test]
    fn landmark_regressor_prediction_shapes_and_gradcheck() {
        let reg = LandmarkRegressor::new(64, &mut seeded_rng(10, 3));
        let frames = Var::param(randn_tensor(&[2, 3, 64, 64], 0.3, &mut seeded_rng(11, 3)));
        let pred = reg.predict(&frames);
        assert_eq!(pred.shape(), vec![2, 12, 2]);
        let v = pred.value();
        assert!(v.data().iter().all(|&c| c.is_finite() && c >= 0.0 && c <= 64.0));

        let truth = randn_tensor(&[2, 12, 2], 5.0, &mut seeded_rng(12, 3)).map(|v| v.abs() + 10.0);
        let f = || reg.training_loss(&frames, &truth);
        crate::gradcheck::check_gradients(f, &[frames.clone()], 6, 1e-5, 1e-2, 1e-6, 46).unwrap();
    }
}
