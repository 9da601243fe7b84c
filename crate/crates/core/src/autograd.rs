//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Graphs are plain DAGs of reference-counted nodes built eagerly by the op
//! methods on [`Var`]. Creation order is a valid topological order, so
//! `backward` just walks reachable nodes by descending id. Graph construction
//! is single-threaded; kernels may parallelise internally over disjoint
//! output slices, keeping every run bit-deterministic.

use crate::tensor::{self, Tensor};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|n| {
        let mut n = n.borrow_mut();
        *n += 1;
        *n
    })
}

type BackwardFn = Box<dyn Fn(&Tensor)>;

struct Node {
    id: u64,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A value in the autograd graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// Trainable leaf; receives a gradient on backward.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        }))
    }

    /// Non-trainable leaf (data, conditioning, constants).
    pub fn input(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        }))
    }

    fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Var(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        }))
    }

    pub fn value(&self) -> Tensor {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn item(&self) -> f64 {
        self.0.value.borrow().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Overwrite a leaf's value in place (parameter update, input refeed).
    pub fn set_value(&self, value: Tensor) {
        assert!(self.0.parents.is_empty(), "set_value is only valid on leaves");
        *self.0.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: Tensor) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::input(self.value())
    }

    /// Backpropagate from a scalar.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar root");
        // Collect reachable grad-requiring nodes.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Var> = Vec::new();
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.0.id) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            order.push(v);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        self.accumulate_grad(Tensor::filled(&[1], 1.0));
        for v in order {
            if let Some(back) = &v.0.backward {
                let g = v.0.grad.borrow().clone().expect("missing grad in backward walk");
                back(&g);
                // Interior grads are no longer needed once propagated.
                if !v.0.parents.is_empty() && v.0.id != self.0.id {
                    *v.0.grad.borrow_mut() = None;
                }
            }
        }
    }

    // ----- elementwise binary -----

    pub fn add(&self, other: &Var) -> Var {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        let (pa, pb) = (self.clone(), other.clone());
        Var::from_op(out, vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g.clone());
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g.clone());
            }
        }))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        let (pa, pb) = (self.clone(), other.clone());
        Var::from_op(out, vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g.clone());
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g.map(|x| -x));
            }
        }))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (av, bv) = (self.value(), other.value());
        let out = av.zip_map(&bv, |a, b| a * b);
        let (pa, pb) = (self.clone(), other.clone());
        Var::from_op(out, vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g.zip_map(&bv, |g, b| g * b));
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g.zip_map(&av, |g, a| g * a));
            }
        }))
    }

    // ----- elementwise unary -----

    pub fn scale(&self, c: f64) -> Var {
        let out = self.value().map(|x| x * c);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.map(|x| x * c));
        }))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let out = self.value().map(|x| x + c);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.clone());
        }))
    }

    pub fn relu(&self) -> Var {
        let xv = self.value();
        let out = xv.map(|x| if x > 0.0 { x } else { 0.0 });
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&xv, |g, x| if x > 0.0 { g } else { 0.0 }));
        }))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let xv = self.value();
        let out = xv.map(|x| if x > 0.0 { x } else { slope * x });
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&xv, |g, x| if x > 0.0 { g } else { slope * g }));
        }))
    }

    pub fn tanh_act(&self) -> Var {
        let yv = self.value().map(f64::tanh);
        let y = yv.clone();
        let p = self.clone();
        Var::from_op(yv, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&y, |g, y| g * (1.0 - y * y)));
        }))
    }

    pub fn sigmoid(&self) -> Var {
        let yv = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        let y = yv.clone();
        let p = self.clone();
        Var::from_op(yv, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&y, |g, y| g * y * (1.0 - y)));
        }))
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs_act(&self) -> Var {
        let xv = self.value();
        let out = xv.map(f64::abs);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&xv, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }));
        }))
    }

    pub fn sqr(&self) -> Var {
        let xv = self.value();
        let out = xv.map(|x| x * x);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&xv, |g, x| 2.0 * g * x));
        }))
    }

    /// sqrt with zero gradient at (and below) zero.
    pub fn sqrt_safe(&self) -> Var {
        let xv = self.value();
        let out = xv.map(|x| if x > 0.0 { x.sqrt() } else { 0.0 });
        let y = out.clone();
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }));
        }))
    }

    pub fn recip(&self) -> Var {
        let xv = self.value();
        let out = xv.map(|x| 1.0 / x);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.zip_map(&xv, |g, x| -g / (x * x)));
        }))
    }

    // ----- shape -----

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        let out = self.value().reshaped(shape);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(g.reshaped(&in_shape));
        }))
    }

    /// Slice `len` entries starting at `start` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Var {
        let in_shape = self.shape();
        assert!(dim < in_shape.len() && start + len <= in_shape[dim]);
        let out = narrow_kernel(&self.value(), dim, start, len);
        let p = self.clone();
        let dim_c = dim;
        let start_c = start;
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            narrow_backward_kernel(g, dim_c, start_c, &mut dx);
            p.accumulate_grad(dx);
        }))
    }

    pub fn concat(vars: &[Var], dim: usize) -> Var {
        assert!(!vars.is_empty());
        let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
        let out = concat_kernel(&values, dim);
        let parents: Vec<Var> = vars.to_vec();
        let owners = parents.clone();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[dim]).collect();
        Var::from_op(out, parents, Box::new(move |g| {
            let mut start = 0;
            for (v, &len) in owners.iter().zip(sizes.iter()) {
                if v.requires_grad() {
                    v.accumulate_grad(narrow_kernel(g, dim, start, len));
                }
                start += len;
            }
        }))
    }

    // ----- reductions / broadcasts -----

    pub fn sum_all(&self) -> Var {
        let shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(Tensor::filled(&shape, g.item()));
        }))
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over the last axis, keeping it as size 1: [.., d] -> [.., 1].
    pub fn sum_last_keep(&self) -> Var {
        let in_shape = self.shape();
        let d = *in_shape.last().unwrap();
        let rows = self.numel() / d;
        let mut out_shape = in_shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        let xv = self.value();
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            out.data_mut()[r] = xv.data()[r * d..(r + 1) * d].iter().sum();
        }
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for r in 0..rows {
                let gv = g.data()[r];
                dx.data_mut()[r * d..(r + 1) * d].fill(gv);
            }
            p.accumulate_grad(dx);
        }))
    }

    /// Multiply [.., d] by [.., 1], broadcasting over the last axis.
    pub fn mul_last_broadcast(&self, scale: &Var) -> Var {
        let in_shape = self.shape();
        let d = *in_shape.last().unwrap();
        let rows = self.numel() / d;
        assert_eq!(scale.numel(), rows, "broadcast scale shape");
        let xv = self.value();
        let sv = scale.value();
        let mut out = Tensor::zeros(&in_shape);
        for r in 0..rows {
            let s = sv.data()[r];
            for j in 0..d {
                out.data_mut()[r * d + j] = xv.data()[r * d + j] * s;
            }
        }
        let p = self.clone();
        let ps = scale.clone();
        let s_shape = scale.shape();
        Var::from_op(out, vec![self.clone(), scale.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let mut dx = Tensor::zeros(&in_shape);
                for r in 0..rows {
                    let s = sv.data()[r];
                    for j in 0..d {
                        dx.data_mut()[r * d + j] = g.data()[r * d + j] * s;
                    }
                }
                p.accumulate_grad(dx);
            }
            if ps.requires_grad() {
                let mut ds = Tensor::zeros(&s_shape);
                for r in 0..rows {
                    ds.data_mut()[r] = (0..d).map(|j| g.data()[r * d + j] * xv.data()[r * d + j]).sum();
                }
                ps.accumulate_grad(ds);
            }
        }))
    }

    /// Add a per-channel bias [c] to [n,c,h,w].
    pub fn add_bias_nchw(&self, bias: &Var) -> Var {
        let (n, c, h, w) = tensor::dims4(&self.value());
        assert_eq!(bias.shape(), vec![c]);
        let xv = self.value();
        let bv = bias.value();
        let mut out = xv.clone();
        {
            let od = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let b = bv.data()[ch];
                    let base = (i * c + ch) * h * w;
                    for v in &mut od[base..base + h * w] {
                        *v += b;
                    }
                }
            }
        }
        let p = self.clone();
        let pb = bias.clone();
        Var::from_op(out, vec![self.clone(), bias.clone()], Box::new(move |g| {
            if p.requires_grad() {
                p.accumulate_grad(g.clone());
            }
            if pb.requires_grad() {
                let mut db = Tensor::zeros(&[c]);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * h * w;
                        db.data_mut()[ch] += g.data()[base..base + h * w].iter().sum::<f64>();
                    }
                }
                pb.accumulate_grad(db);
            }
        }))
    }

    /// Add a row bias [f] to [n,f].
    pub fn add_bias_rows(&self, bias: &Var) -> Var {
        let shape = self.shape();
        assert_eq!(shape.len(), 2);
        let (n, f) = (shape[0], shape[1]);
        assert_eq!(bias.shape(), vec![f]);
        let bv = bias.value();
        let mut out = self.value().clone();
        {
            let od = out.data_mut();
            for i in 0..n {
                for j in 0..f {
                    od[i * f + j] += bv.data()[j];
                }
            }
        }
        let p = self.clone();
        let pb = bias.clone();
        Var::from_op(out, vec![self.clone(), bias.clone()], Box::new(move |g| {
            if p.requires_grad() {
                p.accumulate_grad(g.clone());
            }
            if pb.requires_grad() {
                let mut db = Tensor::zeros(&[f]);
                for i in 0..n {
                    for j in 0..f {
                        db.data_mut()[j] += g.data()[i * f + j];
                    }
                }
                pb.accumulate_grad(db);
            }
        }))
    }

    // ----- linear algebra -----

    /// [m,k] . [k,n] -> [m,n]
    pub fn matmul(&self, other: &Var) -> Var {
        let av = self.value();
        let bv = other.value();
        let out = tensor::matmul(&av, &bv);
        let (pa, pb) = (self.clone(), other.clone());
        Var::from_op(out, vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(tensor::matmul_nt(g, &bv));
            }
            if pb.requires_grad() {
                pb.accumulate_grad(tensor::matmul_tn(&av, g));
            }
        }))
    }

    /// Convolution [n,c,h,w] * [o,c,kh,kw] (+bias [o]) -> [n,o,oh,ow].
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value();
        let wv = weight.value();
        let out = tensor::conv2d(&xv, &wv, bias.map(|b| b.value()).as_ref(), stride, pad);
        let p = self.clone();
        let pw = weight.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(out, parents, Box::new(move |g| {
            let need_dx = p.requires_grad();
            let (dx, dw, db) = tensor::conv2d_backward(&xv, &wv, g, stride, pad, need_dx);
            if let (true, Some(dx)) = (need_dx, dx) {
                p.accumulate_grad(dx);
            }
            if pw.requires_grad() {
                pw.accumulate_grad(dw);
            }
            if let Some(b) = &pb {
                if b.requires_grad() {
                    b.accumulate_grad(db);
                }
            }
        }))
    }

    // ----- normalisation -----

    /// Parameter-free instance normalisation over each (sample, channel) plane.
    pub fn instance_norm(&self, eps: f64) -> Var {
        let (n, c, h, w) = tensor::dims4(&self.value());
        let hw = h * w;
        let xv = self.value();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut means = vec![0.0; n * c];
        let mut inv_stds = vec![0.0; n * c];
        {
            let od = out.data_mut();
            for nc in 0..n * c {
                let src = &xv.data()[nc * hw..(nc + 1) * hw];
                let mean = src.iter().sum::<f64>() / hw as f64;
                let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + eps).sqrt();
                means[nc] = mean;
                inv_stds[nc] = inv;
                for (o, &x) in od[nc * hw..(nc + 1) * hw].iter_mut().zip(src.iter()) {
                    *o = (x - mean) * inv;
                }
            }
        }
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for nc in 0..n * c {
                let src = &xv.data()[nc * hw..(nc + 1) * hw];
                let gs = &g.data()[nc * hw..(nc + 1) * hw];
                let mean = means[nc];
                let inv = inv_stds[nc];
                let m = hw as f64;
                let sum_g: f64 = gs.iter().sum();
                let sum_gx: f64 = gs.iter().zip(src.iter()).map(|(g, x)| g * (x - mean)).sum();
                for j in 0..hw {
                    let xc = src[j] - mean;
                    dx.data_mut()[nc * hw + j] =
                        inv * (gs[j] - sum_g / m - xc * inv * inv * sum_gx / m);
                }
            }
            p.accumulate_grad(dx);
        }))
    }

    /// Batch-style normalisation: statistics per channel over (n, h, w).
    pub fn batch_norm_train(&self, eps: f64) -> Var {
        let (n, c, h, w) = tensor::dims4(&self.value());
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value();
        let mut means = vec![0.0; c];
        let mut inv_stds = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for &x in &xv.data()[base..base + hw] {
                    sum += x;
                    sumsq += x * x;
                }
            }
            let mean = sum / m;
            let var = sumsq / m - mean * mean;
            means[ch] = mean;
            inv_stds[ch] = 1.0 / (var.max(0.0) + eps).sqrt();
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let od = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in 0..hw {
                        od[base + j] = (xv.data()[base + j] - means[ch]) * inv_stds[ch];
                    }
                }
            }
        }
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for ch in 0..c {
                let mean = means[ch];
                let inv = inv_stds[ch];
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for j in 0..hw {
                        sum_g += g.data()[base + j];
                        sum_gx += g.data()[base + j] * (xv.data()[base + j] - mean);
                    }
                }
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for j in 0..hw {
                        let xc = xv.data()[base + j] - mean;
                        dx.data_mut()[base + j] =
                            inv * (g.data()[base + j] - sum_g / m - xc * inv * inv * sum_gx / m);
                    }
                }
            }
            p.accumulate_grad(dx);
        }))
    }

    // ----- spatial -----

    pub fn upsample2(&self) -> Var {
        let out = tensor::upsample2(&self.value());
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(tensor::upsample2_backward(g));
        }))
    }

    pub fn avg_pool2(&self) -> Var {
        let (_, _, h, w) = tensor::dims4(&self.value());
        let out = tensor::avg_pool2(&self.value());
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(tensor::avg_pool2_backward(g, h, w));
        }))
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Var {
        let (_, _, h, w) = tensor::dims4(&self.value());
        let out = tensor::resize_nearest(&self.value(), oh, ow);
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            p.accumulate_grad(tensor::resize_nearest_backward(g, h, w));
        }))
    }

    // ----- loss primitives -----

    /// Numerically stable binary cross entropy on logits against fixed targets.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Var {
        let xv = self.value();
        assert_eq!(xv.shape(), targets.shape());
        let out = xv.zip_map(targets, |x, t| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln());
        let p = self.clone();
        let tv = targets.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            // d/dx = sigmoid(x) - t
            let mut dx = Tensor::zeros(xv.shape());
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                let sig = 1.0 / (1.0 + (-xv.data()[i]).exp());
                *d = g.data()[i] * (sig - tv.data()[i]);
            }
            p.accumulate_grad(dx);
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let in_shape = self.shape();
        let d = *in_shape.last().unwrap();
        let rows = self.numel() / d;
        let xv = self.value();
        let mut out = Tensor::zeros(&in_shape);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out.data_mut()[r * d + j] = e;
                denom += e;
            }
            for j in 0..d {
                out.data_mut()[r * d + j] /= denom;
            }
        }
        let y = out.clone();
        let p = self.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for r in 0..rows {
                let ys = &y.data()[r * d..(r + 1) * d];
                let gs = &g.data()[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs.iter()).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dx.data_mut()[r * d + j] = ys[j] * (gs[j] - dot);
                }
            }
            p.accumulate_grad(dx);
        }))
    }
}

fn narrow_kernel(x: &Tensor, dim: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape().to_vec();
    let mut out_shape = shape.clone();
    out_shape[dim] = len;
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    let d = shape[dim];
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        let src_base = (o * d + start) * inner;
        let dst_base = o * len * inner;
        out.data_mut()[dst_base..dst_base + len * inner]
            .copy_from_slice(&x.data()[src_base..src_base + len * inner]);
    }
    out
}

fn narrow_backward_kernel(g: &Tensor, dim: usize, start: usize, dx: &mut Tensor) {
    let out_shape = g.shape().to_vec();
    let in_shape = dx.shape().to_vec();
    let len = out_shape[dim];
    let d = in_shape[dim];
    let outer: usize = in_shape[..dim].iter().product();
    let inner: usize = in_shape[dim + 1..].iter().product();
    for o in 0..outer {
        let dst_base = (o * d + start) * inner;
        let src_base = o * len * inner;
        let dst = &mut dx.data_mut()[dst_base..dst_base + len * inner];
        for (d, s) in dst.iter_mut().zip(&g.data()[src_base..src_base + len * inner]) {
            *d += s;
        }
    }
}

fn concat_kernel(values: &[Tensor], dim: usize) -> Tensor {
    let first = values[0].shape().to_vec();
    let mut out_shape = first.clone();
    out_shape[dim] = values.iter().map(|v| v.shape()[dim]).sum();
    for v in values {
        assert_eq!(v.shape().len(), first.len());
        for (i, (&a, &b)) in v.shape().iter().zip(out_shape.iter()).enumerate() {
            if i != dim {
                assert_eq!(a, b, "concat shape mismatch at axis {}", i);
            }
        }
    }
    let outer: usize = first[..dim].iter().product();
    let inner: usize = first[dim + 1..].iter().product();
    let total_d = out_shape[dim];
    let mut out = Tensor::zeros(&out_shape);
    let mut start = 0;
    for v in values {
        let d = v.shape()[dim];
        for o in 0..outer {
            let src_base = o * d * inner;
            let dst_base = (o * total_d + start) * inner;
            out.data_mut()[dst_base..dst_base + d * inner]
                .copy_from_slice(&v.data()[src_base..src_base + d * inner]);
        }
        start += d;
    }
    out
}

/// L2-normalise each row of [n,d] (adds 1e-12 under the root to stay finite).
pub fn l2_normalize_rows(x: &Var) -> Var {
    let norms = x.sqr().sum_last_keep().add_scalar(1e-12).sqrt_safe();
    x.mul_last_broadcast(&norms.recip())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            out.push(((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0);
        }
        Tensor::from_vec(shape, out)
    }

    #[test]
    fn add_mul_backward() {
        let a = Var::param(Tensor::from_vec(&[2], vec![2.0, 3.0]));
        let b = Var::param(Tensor::from_vec(&[2], vec![5.0, 7.0]));
        let y = a.mul(&b).add(&a).sum_all(); // y = a*b + a
        y.backward();
        assert_eq!(a.grad().unwrap().data(), &[6.0, 8.0]); // b + 1
        assert_eq!(b.grad().unwrap().data(), &[2.0, 3.0]); // a
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        let a = Var::param(Tensor::scalar(3.0));
        let y = a.mul(&a).sum_all(); // a^2 via two uses
        y.backward();
        assert_eq!(a.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn detach_blocks_grad() {
        let a = Var::param(Tensor::scalar(2.0));
        let y = a.detach().mul(&a).sum_all();
        y.backward();
        assert_eq!(a.grad().unwrap().item(), 2.0); // only through the live branch
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let x = Var::param(randn(&[2, 3, 4], 1));
        let a = x.narrow(1, 0, 1);
        let b = x.narrow(1, 1, 2);
        let y = Var::concat(&[a, b], 1);
        assert_eq!(y.value().data(), x.value().data());
        y.sum_all().backward();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Var::input(randn(&[2, 3, 4, 4], 7));
        let y = x.instance_norm(1e-5).value();
        for nc in 0..6 {
            let plane = &y.data()[nc * 16..(nc + 1) * 16];
            let mean: f64 = plane.iter().sum::<f64>() / 16.0;
            let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // eps slack
        }
    }

    #[test]
    fn instance_norm_constant_plane_is_zero() {
        // zero-variance convention: eps in the denominator, output ~ 0
        let x = Var::input(Tensor::filled(&[1, 2, 4, 4], 3.7));
        let y = x.instance_norm(1e-5).value();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let x = Var::param(randn(&[3, 8], 11));
        let y = l2_normalize_rows(&x).value();
        for r in 0..3 {
            let n: f64 = y.data()[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "row norm {}", n);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::param(randn(&[4, 6], 3));
        let y = x.softmax_last().value();
        for r in 0..4 {
            let s: f64 = y.data()[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
