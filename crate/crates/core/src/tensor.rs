//! Dense f64 tensors plus the raw kernels the autograd layer is built on.
//!
//! Data lives behind an `Arc` so saving an activation for the backward pass
//! is a pointer copy, not a deep copy. All kernels are deterministic: the
//! only parallelism is over disjoint output slices (batch samples), so
//! results are bit-identical regardless of thread count.

use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        if Arc::get_mut(&mut self.data).is_none() {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).expect("unique after copy").as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Greatest absolute difference between two equal-shape tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn view2(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), t.data()).expect("view2 shape")
}

/// out[m,n] = a[m,k] . b[k,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    {
        let mut c = ArrayViewMut2::from_shape((m, n), out.data_mut()).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &view2(a, m, k), &view2(b, k2, n), 0.0, &mut c);
    }
    out
}

/// out[k,n] = a[m,k]^T . b[m,n]
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (m2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(m, m2);
    let mut out = Tensor::zeros(&[k, n]);
    {
        let mut c = ArrayViewMut2::from_shape((k, n), out.data_mut()).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &view2(a, m, k).t(), &view2(b, m2, n), 0.0, &mut c);
    }
    out
}

/// out[m,k] = a[m,n] . b[k,n]^T
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let (k, n2) = (b.shape()[0], b.shape()[1]);
    assert_eq!(n, n2);
    let mut out = Tensor::zeros(&[m, k]);
    {
        let mut c = ArrayViewMut2::from_shape((m, k), out.data_mut()).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &view2(a, m, n), &view2(b, k, n2).t(), 0.0, &mut c);
    }
    out
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image [c,h,w] into columns [c*kh*kw, oh*ow].
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns [c*kh*kw, oh*ow] back into an image [c,h,w], accumulating.
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Convolution forward. x: [n,c,h,w], weight: [o,c,kh,kw] -> [n,o,oh,ow].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (o, c2, kh, kw) = dims4(weight);
    assert_eq!(c, c2, "conv2d channels {} vs weight {}", c, c2);
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let ohw = oh * ow;
    let ckk = c * kh * kw;
    let wmat = weight.reshaped(&[o, ckk]);

    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let chw = c * h * w;
    let xs = x.data();
    let outs = out.data_mut();
    outs.par_chunks_mut(o * ohw)
        .enumerate()
        .for_each(|(i, out_i)| {
            let mut cols = vec![0.0; ckk * ohw];
            im2col(&xs[i * chw..(i + 1) * chw], c, h, w, kh, kw, stride, pad, &mut cols);
            let cols_t = Tensor::from_vec(&[ckk, ohw], cols);
            let y = matmul(&wmat, &cols_t);
            out_i.copy_from_slice(y.data());
        });
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[o]);
        let bd: Vec<f64> = b.data().to_vec();
        let outs = out.data_mut();
        for i in 0..n {
            for (ch, bv) in bd.iter().enumerate() {
                let base = (i * o + ch) * ohw;
                for v in &mut outs[base..base + ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = dims4(x);
    let (o, _, kh, kw) = dims4(weight);
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let ohw = oh * ow;
    let ckk = c * kh * kw;
    let chw = c * h * w;
    let wmat = weight.reshaped(&[o, ckk]);
    let xs = x.data();
    let gs = grad_out.data();

    // Per-sample partial results, reduced in batch order for determinism.
    let partials: Vec<(Option<Vec<f64>>, Tensor, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g_i = Tensor::from_vec(&[o, ohw], gs[i * o * ohw..(i + 1) * o * ohw].to_vec());
            let mut cols = vec![0.0; ckk * ohw];
            im2col(&xs[i * chw..(i + 1) * chw], c, h, w, kh, kw, stride, pad, &mut cols);
            let cols_t = Tensor::from_vec(&[ckk, ohw], cols);
            let dw_i = matmul_nt(&g_i, &cols_t); // [o, ckk]
            let db_i: Vec<f64> = (0..o)
                .map(|ch| gs[i * o * ohw + ch * ohw..i * o * ohw + (ch + 1) * ohw].iter().sum())
                .collect();
            let dx_i = if need_dx {
                let dcols = matmul_tn(&wmat, &g_i); // [ckk, ohw]
                let mut dx = vec![0.0; chw];
                col2im(dcols.data(), c, h, w, kh, kw, stride, pad, &mut dx);
                Some(dx)
            } else {
                None
            };
            (dx_i, dw_i, db_i)
        })
        .collect();

    let mut dw = Tensor::zeros(&[o, c, kh, kw]);
    let mut db = Tensor::zeros(&[o]);
    let mut dx = if need_dx { Some(Tensor::zeros(&[n, c, h, w])) } else { None };
    for (i, (dx_i, dw_i, db_i)) in partials.into_iter().enumerate() {
        dw.add_assign(&dw_i.reshaped(&[o, c, kh, kw]));
        for (d, s) in db.data_mut().iter_mut().zip(db_i.iter()) {
            *d += s;
        }
        if let (Some(dx), Some(dx_i)) = (dx.as_mut(), dx_i) {
            dx.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(&dx_i);
        }
    }
    (dx, dw, db)
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.shape().len(), 4, "expected 4-d tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {}x{}", h, w);
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut od[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * ow + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = dims4(grad_out);
    let gs = grad_out.data();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dd = dx.data_mut();
    for nc in 0..n * c {
        let g = &gs[nc * oh * ow..(nc + 1) * oh * ow];
        let d = &mut dd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = 0.25 * g[oy * ow + ox];
                let i = 2 * oy * w + 2 * ox;
                d[i] += gv;
                d[i + 1] += gv;
                d[i + w] += gv;
                d[i + w + 1] += gv;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by 2 in both spatial dims.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h * 2, w * 2);
    let xs = x.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut od[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dims4(grad_out);
    let (h, w) = (oh / 2, ow / 2);
    let gs = grad_out.data();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dd = dx.data_mut();
    for nc in 0..n * c {
        let g = &gs[nc * oh * ow..(nc + 1) * oh * ow];
        let d = &mut dd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                d[(oy / 2) * w + ox / 2] += g[oy * ow + ox];
            }
        }
    }
    dx
}

/// Nearest-neighbour resize to an arbitrary output size (source index floor-mapped).
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let xs = x.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut od[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let sy = (oy * h) / oh;
            for ox in 0..ow {
                let sx = (ox * w) / ow;
                dst[oy * ow + ox] = src[sy * w + sx];
            }
        }
    }
    out
}

pub fn resize_nearest_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = dims4(grad_out);
    let gs = grad_out.data();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dd = dx.data_mut();
    for nc in 0..n * c {
        let g = &gs[nc * oh * ow..(nc + 1) * oh * ow];
        let d = &mut dd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let sy = (oy * h) / oh;
            for ox in 0..ow {
                let sx = (ox * w) / ow;
                d[sy * w + sx] += g[oy * ow + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64 + 0.5).collect());
        let b = Tensor::from_vec(&[2, 4], (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect());
        // a^T . b == matmul(a_t_explicit, b)
        let at = {
            let mut v = vec![0.0; 6];
            for i in 0..2 {
                for j in 0..3 {
                    v[j * 2 + i] = a.data()[i * 3 + j];
                }
            }
            Tensor::from_vec(&[3, 2], v)
        };
        assert_eq!(matmul_tn(&a, &b).data(), matmul(&at, &b).data());
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_known_values() {
        // 3x3 mean filter over a 3x3 image, padding 1.
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|i| i as f64).collect());
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1);
        // centre output = sum of all 9 = 45
        assert_eq!(y.data()[4], 45.0);
        // top-left output = 1+2+4+5 = 12
        assert_eq!(y.data()[0], 12.0);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let w = Tensor::zeros(&[5, 3, 4, 4]);
        let y = conv2d(&x, &w, None, 2, 1);
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn conv2d_backward_matches_finite_difference() {
        let mut seed = 42u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = Tensor::from_vec(&[1, 2, 5, 5], (0..50).map(|_| next()).collect());
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| next()).collect());
        let b = Tensor::from_vec(&[3], (0..3).map(|_| next()).collect());
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| conv2d(x, w, Some(b), 2, 1).data().iter().sum::<f64>();
        let base_out = conv2d(&x, &w, Some(&b), 2, 1);
        let gout = Tensor::filled(base_out.shape(), 1.0);
        let (dx, dw, db) = conv2d_backward(&x, &w, &gout, 2, 1, true);
        let h = 1e-6;
        for idx in [0usize, 7, 23, 49] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.as_ref().unwrap().data()[idx]).abs() < 1e-6, "dx[{}]", idx);
        }
        for idx in [0usize, 13, 53] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw.data()[idx]).abs() < 1e-6, "dw[{}]", idx);
        }
        let mut bp = b.clone();
        bp.data_mut()[1] += h;
        let mut bm = b.clone();
        bm.data_mut()[1] -= h;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
        assert!((fd - db.data()[1]).abs() < 1e-6);
    }

    #[test]
    fn pool_and_upsample_roundtrip_shapes() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect());
        let p = avg_pool2(&x);
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert_eq!(p.data()[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let u = upsample2(&p);
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u.data()[0], p.data()[0]);
        assert_eq!(u.data()[1], p.data()[0]);
    }

    #[test]
    fn resize_nearest_identity_and_double() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_nearest(&x, 2, 2).data(), x.data());
        let y = resize_nearest(&x, 4, 4);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[3], 2.0);
        assert_eq!(y.data()[15], 4.0);
    }
}
