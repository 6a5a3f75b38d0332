//! Multi-head scaled dot-product attention with an explicit backward pass.
//! Supports self-attention (optionally causal) and cross-attention, plus a
//! patch-local mode where attention is causal within fixed-size groups.

use super::layers::Linear;
use super::Params;
use crate::mat::Mat;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub n_heads: usize,
}

/// Masking mode for the score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Full attention (encoder / cross-attention).
    None,
    /// Position i attends to positions <= i.
    Causal,
    /// Positions attend causally within their own patch of `size` tokens;
    /// nothing crosses patch boundaries.
    PatchCausal { size: usize },
}

pub struct AttnCache<T> {
    pub x: Mat<T>,
    pub ctx: Mat<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    /// Per-head post-softmax attention weights (N x M each).
    pub attn: Vec<Mat<T>>,
    /// Concatenated per-head outputs before the output projection.
    pub concat: Mat<T>,
    pub mask: AttnMask,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(d: usize, n_heads: usize, std: f64, out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(d % n_heads, 0, "d_model must divide by heads");
        Self {
            wq: Linear::new(d, d, std, rng),
            wk: Linear::new(d, d, std, rng),
            wv: Linear::new(d, d, std, rng),
            wo: Linear::new(d, d, std * out_scale, rng),
            n_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            n_heads: self.n_heads,
        }
    }

    fn head_cols(m: &Mat<T>, head: usize, dh: usize) -> Mat<T> {
        let mut out = Mat::zeros(m.rows(), dh);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[head * dh..(head + 1) * dh]);
        }
        out
    }

    fn add_head_cols(dst: &mut Mat<T>, src: &Mat<T>, head: usize, dh: usize) {
        for r in 0..src.rows() {
            for (i, v) in src.row(r).iter().enumerate() {
                let cell = &mut dst.row_mut(r)[head * dh + i];
                *cell += *v;
            }
        }
    }

    fn mask_allows(mask: AttnMask, i: usize, j: usize) -> bool {
        match mask {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::PatchCausal { size } => j <= i && j / size == i / size,
        }
    }

    /// `x` provides queries; `ctx` provides keys and values (equal to `x`
    /// for self-attention). Patch-causal masks take a block-local path:
    /// scores are only computed inside each patch (stored compactly as
    /// N x size attention rows).
    pub fn forward(&self, x: &Mat<T>, ctx: &Mat<T>, mask: AttnMask) -> (Mat<T>, AttnCache<T>) {
        let d = x.cols();
        let dh = d / self.n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(x);
        let k = self.wk.forward(ctx);
        let v = self.wv.forward(ctx);
        let n = x.rows();
        let m = ctx.rows();
        let mut concat = Mat::zeros(n, d);
        let mut attn_heads = Vec::with_capacity(self.n_heads);
        if let AttnMask::PatchCausal { size } = mask {
            debug_assert_eq!(n, m, "patch-causal is self-attention only");
            for h in 0..self.n_heads {
                let mut attn = Mat::zeros(n, size);
                for i in 0..n {
                    let base = (i / size) * size;
                    let c = i - base;
                    let qh = &q.row(i)[h * dh..(h + 1) * dh];
                    let row = attn.row_mut(i);
                    // j <= c implies base + j <= i < m
                    let mut max = T::neg_infinity();
                    for j in 0..=c {
                        let s = crate::mat::dot(qh, &k.row(base + j)[h * dh..(h + 1) * dh]) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..=c {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    let inv = T::one() / sum;
                    let out = &mut concat.row_mut(i)[h * dh..(h + 1) * dh];
                    for j in 0..=c {
                        let w = attn.row(i)[j] * inv;
                        attn.row_mut(i)[j] = w;
                        for (o, vv) in out.iter_mut().zip(&v.row(base + j)[h * dh..(h + 1) * dh]) {
                            *o += w * *vv;
                        }
                    }
                }
                attn_heads.push(attn);
            }
        } else {
            for h in 0..self.n_heads {
                let qh = Self::head_cols(&q, h, dh);
                let kh = Self::head_cols(&k, h, dh);
                let vh = Self::head_cols(&v, h, dh);
                let mut scores = qh.matmul_tb(&kh);
                scores.scale(scale);
                for i in 0..n {
                    let row = scores.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate().take(m) {
                        if !Self::mask_allows(mask, i, j) {
                            *s = T::neg_infinity();
                        }
                    }
                }
                super::softmax_rows(&mut scores);
                let oh = scores.matmul(&vh);
                Self::add_head_cols(&mut concat, &oh, h, dh);
                attn_heads.push(scores);
            }
        }
        let y = self.wo.forward(&concat);
        (
            y,
            AttnCache {
                x: x.clone(),
                ctx: ctx.clone(),
                q,
                k,
                v,
                attn: attn_heads,
                concat,
                mask,
            },
        )
    }

    /// Returns (dx, dctx); for self-attention callers add them.
    pub fn backward(
        &self,
        cache: &AttnCache<T>,
        dy: &Mat<T>,
        grad: &mut MultiHeadAttention<T>,
    ) -> (Mat<T>, Mat<T>) {
        let d = cache.x.cols();
        let dh = d / self.n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let dconcat = self.wo.backward(&cache.concat, dy, &mut grad.wo);

        let n = cache.x.rows();
        let m = cache.ctx.rows();
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(m, d);
        let mut dv = Mat::zeros(m, d);
        if let AttnMask::PatchCausal { size } = cache.mask {
            for h in 0..self.n_heads {
                let attn = &cache.attn[h];
                for i in 0..n {
                    let base = (i / size) * size;
                    let c = i - base;
                    let doh = &dconcat.row(i)[h * dh..(h + 1) * dh];
                    let a = attn.row(i);
                    // dattn[j] = doh . vh[base+j]; dvh[base+j] += a[j]*doh
                    let mut da = [T::zero(); 8];
                    debug_assert!(size <= 8);
                    let mut dot_sum = T::zero();
                    for j in 0..=c {
                        let vh = &cache.v.row(base + j)[h * dh..(h + 1) * dh];
                        da[j] = crate::mat::dot(doh, vh);
                        dot_sum += a[j] * da[j];
                        let dvr = &mut dv.row_mut(base + j)[h * dh..(h + 1) * dh];
                        for (o, g) in dvr.iter_mut().zip(doh) {
                            *o += a[j] * *g;
                        }
                    }
                    for j in 0..=c {
                        let ds = a[j] * (da[j] - dot_sum) * scale;
                        let kh = &cache.k.row(base + j)[h * dh..(h + 1) * dh];
                        let qh = &cache.q.row(i)[h * dh..(h + 1) * dh];
                        let dqr = &mut dq.row_mut(i)[h * dh..(h + 1) * dh];
                        for (o, kv) in dqr.iter_mut().zip(kh) {
                            *o += ds * *kv;
                        }
                        let dkr = &mut dk.row_mut(base + j)[h * dh..(h + 1) * dh];
                        for (o, qv) in dkr.iter_mut().zip(qh) {
                            *o += ds * *qv;
                        }
                    }
                }
            }
            let dx = self.wq.backward(&cache.x, &dq, &mut grad.wq);
            let mut dctx = self.wk.backward(&cache.ctx, &dk, &mut grad.wk);
            dctx.add_assign(&self.wv.backward(&cache.ctx, &dv, &mut grad.wv));
            return (dx, dctx);
        }
        for h in 0..self.n_heads {
            let kh = Self::head_cols(&cache.k, h, dh);
            let vh = Self::head_cols(&cache.v, h, dh);
            let qh = Self::head_cols(&cache.q, h, dh);
            let attn = &cache.attn[h];
            let doh = Self::head_cols(&dconcat, h, dh);
            // d_attn = doh . vh^T ; dvh = attn^T . doh
            let dattn = doh.matmul_tb(&vh);
            let dvh = attn.matmul_ta(&doh);
            // softmax backward per row: ds = attn * (dattn - sum(dattn*attn))
            let mut dscores = Mat::zeros(n, m);
            for i in 0..n {
                let a = attn.row(i);
                let da = dattn.row(i);
                let mut dot = T::zero();
                for (x, y) in a.iter().zip(da) {
                    dot += *x * *y;
                }
                let out = dscores.row_mut(i);
                for j in 0..m {
                    if Self::mask_allows(cache.mask, i, j) {
                        out[j] = a[j] * (da[j] - dot) * scale;
                    }
                }
            }
            // dqh = dscores . kh ; dkh = dscores^T . qh
            let dqh = dscores.matmul(&kh);
            let dkh = dscores.matmul_ta(&qh);
            Self::add_head_cols(&mut dq, &dqh, h, dh);
            Self::add_head_cols(&mut dk, &dkh, h, dh);
            Self::add_head_cols(&mut dv, &dvh, h, dh);
        }
        let dx = self.wq.backward(&cache.x, &dq, &mut grad.wq);
        let mut dctx = self.wk.backward(&cache.ctx, &dk, &mut grad.wk);
        dctx.add_assign(&self.wv.backward(&cache.ctx, &dv, &mut grad.wv));
        (dx, dctx)
    }
}

impl<T: Scalar> Params<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, flatten_grads};
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn input(n: usize, d: usize, phase: f64) -> Mat<f64> {
        Mat::from_vec(
            n,
            d,
            (0..n * d).map(|i| (i as f64 * 0.37 + phase).sin() * 0.6).collect(),
        )
    }

    fn weighted_sum(y: &Mat<f64>, w: &Mat<f64>) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn self_attention_gradcheck_causal() {
        let mut attn = MultiHeadAttention::new(8, 2, 0.4, 1.0, &mut rng());
        let x = input(5, 8, 0.0);
        let lw = input(5, 8, 1.3);
        let (_, cache) = attn.forward(&x, &x, AttnMask::Causal);
        let mut grad = attn.zeros_like();
        let (dx, dctx) = attn.backward(&cache, &lw, &mut grad);
        let _ = (dx, dctx);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut attn,
            &analytic,
            |m| weighted_sum(&m.forward(&x, &x, AttnMask::Causal).0, &lw),
            1e-5,
            1e-5,
            1,
        );
    }

    #[test]
    fn self_attention_input_grad_matches_fd() {
        let attn = MultiHeadAttention::new(8, 2, 0.4, 1.0, &mut rng());
        let x = input(4, 8, 0.2);
        let lw = input(4, 8, 2.0);
        let (_, cache) = attn.forward(&x, &x, AttnMask::Causal);
        let mut grad = attn.zeros_like();
        let (dx, dctx) = attn.backward(&cache, &lw, &mut grad);
        let eps = 1e-6;
        for i in 0..x.rows() * x.cols() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let up = weighted_sum(&attn.forward(&xp, &xp, AttnMask::Causal).0, &lw);
            let down = weighted_sum(&attn.forward(&xm, &xm, AttnMask::Causal).0, &lw);
            let num = (up - down) / (2.0 * eps);
            let got = dx.data()[i] + dctx.data()[i];
            assert!((num - got).abs() < 1e-6, "dx[{i}]: analytic {got} numeric {num}");
        }
    }

    #[test]
    fn cross_attention_gradcheck() {
        let mut attn = MultiHeadAttention::new(6, 3, 0.4, 1.0, &mut rng());
        let x = input(3, 6, 0.0);
        let ctx = input(5, 6, 0.9);
        let lw = input(3, 6, 1.7);
        let (_, cache) = attn.forward(&x, &ctx, AttnMask::None);
        let mut grad = attn.zeros_like();
        attn.backward(&cache, &lw, &mut grad);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut attn,
            &analytic,
            |m| weighted_sum(&m.forward(&x, &ctx, AttnMask::None).0, &lw),
            1e-5,
            1e-5,
            1,
        );
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let attn = MultiHeadAttention::new(8, 2, 0.4, 1.0, &mut rng());
        let a = input(6, 8, 0.0);
        let mut b = a.clone();
        // perturb the last position; earlier outputs must be bitwise equal
        for v in b.row_mut(5) {
            *v += 1.0;
        }
        let (ya, _) = attn.forward(&a, &a, AttnMask::Causal);
        let (yb, _) = attn.forward(&b, &b, AttnMask::Causal);
        for r in 0..5 {
            assert_eq!(ya.row(r), yb.row(r), "row {r} leaked future info");
        }
    }

    #[test]
    fn patch_causal_stays_within_patches() {
        let attn = MultiHeadAttention::new(8, 2, 0.4, 1.0, &mut rng());
        let a = input(6, 8, 0.0);
        let mut b = a.clone();
        // perturb patch 0 entirely; patch 1 outputs must not change
        for r in 0..3 {
            for v in b.row_mut(r) {
                *v += 0.5;
            }
        }
        let (ya, _) = attn.forward(&a, &a, AttnMask::PatchCausal { size: 3 });
        let (yb, _) = attn.forward(&b, &b, AttnMask::PatchCausal { size: 3 });
        for r in 3..6 {
            assert_eq!(ya.row(r), yb.row(r), "patch isolation broken at row {r}");
        }
    }
}
