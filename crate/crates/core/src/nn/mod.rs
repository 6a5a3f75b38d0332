//! Hand-rolled transformer building blocks with explicit forward and
//! backward passes, plus the Adam optimizer. Everything is generic over the
//! scalar type; gradient-check tests instantiate f64.

mod adam;
mod attention;
mod block;
mod layers;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use attention::{AttnCache, AttnMask, MultiHeadAttention};
pub use block::{CrossBlock, CrossBlockCache, SelfBlock, SelfBlockCache};
pub use layers::{gelu, gelu_prime, FeedForward, FfnCache, LayerNorm, Linear, NormCache};

use crate::mat::Mat;
use crate::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Visitor over a model's named parameter matrices. The visit order is the
/// canonical parameter order: checkpoints, Adam state and the gradient
/// checks all rely on it.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>));
}

pub fn collect_params<'a, T: Scalar, P: Params<T>>(p: &'a P) -> Vec<(String, &'a Mat<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, m| out.push((name, m)));
    out
}

pub fn collect_params_mut<'a, T: Scalar, P: Params<T>>(
    p: &'a mut P,
) -> Vec<(String, &'a mut Mat<T>)> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |name, m| out.push((name, m)));
    out
}

pub fn param_count<T: Scalar, P: Params<T>>(p: &P) -> usize {
    collect_params(p)
        .iter()
        .map(|(_, m)| m.rows() * m.cols())
        .sum()
}

/// Adds `other`'s parameters into `self`'s (used to reduce per-example
/// gradients in a fixed order).
pub fn accumulate<T: Scalar, P: Params<T>>(into: &mut P, other: &P) {
    let src = collect_params(other);
    let dst = collect_params_mut(into);
    for ((_, d), (_, s)) in dst.into_iter().zip(src) {
        d.add_assign(s);
    }
}

pub fn scale_params<T: Scalar, P: Params<T>>(p: &mut P, s: T) {
    for (_, m) in collect_params_mut(p) {
        m.scale(s);
    }
}

/// Samples N(0, std) via Box-Muller (deterministic given the rng state).
pub fn normal_init<T: Scalar>(m: &mut Mat<T>, std: f64, rng: &mut ChaCha8Rng) {
    for v in m.data_mut() {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        *v = T::from_f64(z * std);
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    for r in 0..m.rows() {
        softmax_row(m.row_mut(r));
    }
}

pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for v in row.iter() {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(softmax(row)[idx]) computed stably in f64.
pub fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in row {
        max = max.max(v.as_f64());
    }
    let mut sum = 0.0f64;
    for v in row {
        sum += (v.as_f64() - max).exp();
    }
    row[idx].as_f64() - max - sum.ln()
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference gradient check: `analytic` is the flat gradient in
    /// canonical parameter order, `loss` re-evaluates the scalar loss.
    /// Checks every `sample_every`-th coordinate of each parameter tensor.
    pub fn check_params<P, F>(
        model: &mut P,
        analytic: &[f64],
        mut loss: F,
        eps: f64,
        rel_tol: f64,
        sample_every: usize,
    ) where
        P: Params<f64>,
        F: FnMut(&P) -> f64,
    {
        let names: Vec<(String, usize)> = collect_params(model)
            .iter()
            .map(|(n, m)| (n.clone(), m.rows() * m.cols()))
            .collect();
        let mut offset = 0usize;
        for (name, len) in names {
            for i in (0..len).step_by(sample_every.max(1)) {
                let idx = offset + i;
                let orig = poke(model, idx, eps);
                let up = loss(model);
                set_at(model, idx, orig - eps);
                let down = loss(model);
                set_at(model, idx, orig);
                let numeric = (up - down) / (2.0 * eps);
                let got = analytic[idx];
                let denom = numeric.abs().max(got.abs()).max(1e-6);
                // components at finite-difference noise level pass on the
                // absolute criterion
                assert!(
                    (numeric - got).abs() < 1e-8 || (numeric - got).abs() / denom < rel_tol,
                    "grad mismatch at {name}[{i}]: analytic {got:.6e}, numeric {numeric:.6e}"
                );
            }
            offset += len;
        }
    }

    /// Adds eps at the flat index, returning the original value.
    fn poke<P: Params<f64>>(model: &mut P, flat: usize, eps: f64) -> f64 {
        let mut ps = collect_params_mut(model);
        let (p, w) = locate(&ps, flat);
        let v = ps[p].1.data()[w];
        ps[p].1.data_mut()[w] = v + eps;
        v
    }

    fn set_at<P: Params<f64>>(model: &mut P, flat: usize, value: f64) {
        let mut ps = collect_params_mut(model);
        let (p, w) = locate(&ps, flat);
        ps[p].1.data_mut()[w] = value;
    }

    fn locate<T: Scalar>(ps: &[(String, &mut Mat<T>)], flat: usize) -> (usize, usize) {
        let mut off = 0usize;
        for (i, (_, m)) in ps.iter().enumerate() {
            let len = m.rows() * m.cols();
            if flat < off + len {
                return (i, flat - off);
            }
            off += len;
        }
        panic!("flat index {flat} out of range");
    }

    pub fn flatten_grads<P: Params<f64>>(g: &P) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, m) in collect_params(g) {
            out.extend_from_slice(m.data());
        }
        out
    }
}
