//! Central finite-difference verification of analytic gradients.

use crate::autograd::Var;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Outcome of a single checked coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients of `f` against central differences at
/// `coords_per_param` random coordinates of each leaf in `params`.
///
/// `f` must rebuild the graph from the current leaf values on every call.
/// Relative error uses `|a - n| / max(|a|, |n|, floor)` so near-zero
/// gradients are judged on an absolute scale.
pub fn check_gradients(
    mut f: impl FnMut() -> Var,
    params: &[Var],
    coords_per_param: usize,
    step: f64,
    tol: f64,
    floor: f64,
    seed: u64,
) -> Result<Vec<CoordCheck>, CoordCheck> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for p in params {
        p.zero_grad();
    }
    let root = f();
    root.backward();
    let grads: Vec<Tensor> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape())))
        .collect();

    let mut results = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        for _ in 0..coords_per_param.min(n) {
            let idx = rng.gen_range(0..n);
            let original = p.value();
            let mut plus = original.clone();
            plus.data_mut()[idx] += step;
            p.set_value(plus);
            let f_plus = f().item();
            let mut minus = original.clone();
            minus.data_mut()[idx] -= step;
            p.set_value(minus);
            let f_minus = f().item();
            p.set_value(original);

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let analytic = grads[pi].data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel_err = (analytic - numeric).abs() / denom;
            let check = CoordCheck { param: pi, index: idx, analytic, numeric, rel_err };
            if rel_err > tol {
                return Err(check);
            }
            results.push(check);
        }
    }
    Ok(results)
}
