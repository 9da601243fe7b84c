//! Layers, parameter registry, initialisation and the Adam optimiser.

use crate::autograd::Var;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Gaussian sample via Box-Muller, so initialisation does not depend on the
/// distribution crate's internal algorithm staying put.
pub fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn randn_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal(rng, std)).collect())
}

/// Deterministic per-purpose RNG: one seed, many independent streams.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named trainable leaves of one network, in registration order.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        let var = if trainable { Var::param(value) } else { Var::input(value) };
        self.entries.push((name.to_string(), var.clone()));
        var
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn zero_grads(&self) {
        for (_, v) in &self.entries {
            v.zero_grad();
        }
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.numel()).sum()
    }

    /// Overwrite every parameter with Gaussian noise (gradient-flow probes
    /// need the zero-initialised heads to carry signal).
    pub fn randomize(&self, std: f64, rng: &mut impl Rng) {
        for (_, v) in &self.entries {
            v.set_value(randn_tensor(&v.shape(), std, rng));
        }
    }

    /// View over a name-filtered subset; the returned set shares the
    /// underlying parameters, so updates through it hit this set too.
    pub fn subset(&self, pred: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| pred(n))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
        }
    }

    /// Export as (name, tensor) pairs.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|(n, v)| (n.clone(), v.value())).collect()
    }

    /// Load tensors by name; every registered name must be present with the
    /// exact shape.
    pub fn load(&self, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<(), String> {
        for (name, var) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| format!("missing parameter `{}`", name))?;
            if t.shape() != var.shape().as_slice() {
                return Err(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    var.shape()
                ));
            }
            var.set_value(t.clone());
        }
        Ok(())
    }
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Conv2d {
        let weight = params.register(
            &format!("{}.weight", name),
            randn_tensor(&[out_ch, in_ch, kernel, kernel], 0.02, rng),
            trainable,
        );
        let bias = params.register(&format!("{}.bias", name), Tensor::zeros(&[out_ch]), trainable);
        Conv2d { weight, bias, stride, pad }
    }

    /// All-zero weights and bias: the zero-initialised modulation layers.
    pub fn new_zeroed(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Conv2d {
        let weight = params.register(
            &format!("{}.weight", name),
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            trainable,
        );
        let bias = params.register(&format!("{}.bias", name), Tensor::zeros(&[out_ch]), trainable);
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

pub struct Dense {
    pub weight: Var, // [in, out]
    pub bias: Var,   // [out]
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Dense {
        let weight = params.register(
            &format!("{}.weight", name),
            randn_tensor(&[in_dim, out_dim], 0.02, rng),
            trainable,
        );
        let bias = params.register(&format!("{}.bias", name), Tensor::zeros(&[out_dim]), trainable);
        Dense { weight, bias }
    }

    /// x: [n, in] -> [n, out]
    pub fn forward(&self, x: &Var) -> Var {
        x.matmul(&self.weight).add_bias_rows(&self.bias)
    }

    pub fn zero(&self) {
        self.weight.set_value(Tensor::zeros(&self.weight.shape()));
        self.bias.set_value(Tensor::zeros(&self.bias.shape()));
    }
}

/// Which parameter-free normalisation the conditional blocks apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
}

pub fn normalize(x: &Var, kind: NormKind, eps: f64) -> Var {
    match kind {
        NormKind::Instance => x.instance_norm(eps),
        NormKind::Batch => x.batch_norm_train(eps),
    }
}

/// Adam state for one parameter set. Moments are kept per parameter in
/// registration order and serialise with the checkpoint so a resumed run
/// continues bit-exactly.
#[derive(Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Adam {
        let m = params.entries().iter().map(|(_, p)| Tensor::zeros(&p.shape())).collect();
        let v = params.entries().iter().map(|(_, p)| Tensor::zeros(&p.shape())).collect();
        Adam { beta1, beta2, eps: 1e-8, step_count: 0, m, v }
    }

    /// Apply one update from the accumulated gradients; missing gradients are
    /// treated as zero. Clears gradients afterwards.
    pub fn step(&mut self, params: &ParamSet, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in params.entries().iter().enumerate() {
            let g = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut value = p.value();
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let pd = value.data_mut();
                let gd = g.data();
                for j in 0..gd.len() {
                    md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gd[j];
                    vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                    let mhat = md[j] / bc1;
                    let vhat = vd[j] / bc2;
                    pd[j] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            p.set_value(value);
            p.zero_grad();
        }
    }
}
