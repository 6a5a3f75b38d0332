//! Pre-LN transformer blocks: a self-attention block (used by the acoustic
//! LM at both scales and by the S1 encoder/decoder) and a decoder block
//! with cross-attention (S1 decoder).

use super::attention::{AttnCache, AttnMask, MultiHeadAttention};
use super::layers::{FeedForward, FfnCache, LayerNorm, NormCache};
use super::Params;
use crate::mat::Mat;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SelfBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

pub struct SelfBlockCache<T> {
    pub ln1: NormCache<T>,
    pub attn: AttnCache<T>,
    pub x1: Mat<T>,
    pub ln2: NormCache<T>,
    pub ffn: FfnCache<T>,
}

impl<T: Scalar> SelfBlock<T> {
    pub fn new(d: usize, heads: usize, d_ff: usize, std: f64, out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, heads, std, out_scale, rng),
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(d, d_ff, std, out_scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>, mask: AttnMask) -> (Mat<T>, SelfBlockCache<T>) {
        let (a, c_ln1) = self.ln1.forward(x);
        let (sa, c_attn) = self.attn.forward(&a, &a, mask);
        let mut x1 = x.clone();
        x1.add_assign(&sa);
        let (b, c_ln2) = self.ln2.forward(&x1);
        let (ff, c_ffn) = self.ffn.forward(&b);
        let mut y = x1.clone();
        y.add_assign(&ff);
        (
            y,
            SelfBlockCache {
                ln1: c_ln1,
                attn: c_attn,
                x1,
                ln2: c_ln2,
                ffn: c_ffn,
            },
        )
    }

    pub fn backward(&self, cache: &SelfBlockCache<T>, dy: &Mat<T>, grad: &mut SelfBlock<T>) -> Mat<T> {
        // y = x1 + ffn(ln2(x1))
        let db = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn);
        let mut dx1 = self.ln2.backward(&cache.ln2, &db, &mut grad.ln2);
        dx1.add_assign(dy);
        // x1 = x + attn(ln1(x))
        let (da, dactx) = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        let mut da_total = da;
        da_total.add_assign(&dactx); // self-attention: q and k/v share the input
        let mut dx = self.ln1.backward(&cache.ln1, &da_total, &mut grad.ln1);
        dx.add_assign(&dx1);
        dx
    }
}

impl<T: Scalar> Params<T> for SelfBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct CrossBlock<T> {
    pub ln1: LayerNorm<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub ln_cross: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

pub struct CrossBlockCache<T> {
    pub ln1: NormCache<T>,
    pub self_attn: AttnCache<T>,
    pub x1: Mat<T>,
    pub ln_cross: NormCache<T>,
    pub cross_attn: AttnCache<T>,
    pub x2: Mat<T>,
    pub ln2: NormCache<T>,
    pub ffn: FfnCache<T>,
}

impl<T: Scalar> CrossBlock<T> {
    pub fn new(d: usize, heads: usize, d_ff: usize, std: f64, out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(d, heads, std, out_scale, rng),
            ln_cross: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::new(d, heads, std, out_scale, rng),
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(d, d_ff, std, out_scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            self_attn: self.self_attn.zeros_like(),
            ln_cross: self.ln_cross.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>, enc: &Mat<T>) -> (Mat<T>, CrossBlockCache<T>) {
        let (a, c_ln1) = self.ln1.forward(x);
        let (sa, c_self) = self.self_attn.forward(&a, &a, AttnMask::Causal);
        let mut x1 = x.clone();
        x1.add_assign(&sa);
        let (cx, c_lnx) = self.ln_cross.forward(&x1);
        let (ca, c_cross) = self.cross_attn.forward(&cx, enc, AttnMask::None);
        let mut x2 = x1.clone();
        x2.add_assign(&ca);
        let (b, c_ln2) = self.ln2.forward(&x2);
        let (ff, c_ffn) = self.ffn.forward(&b);
        let mut y = x2.clone();
        y.add_assign(&ff);
        (
            y,
            CrossBlockCache {
                ln1: c_ln1,
                self_attn: c_self,
                x1,
                ln_cross: c_lnx,
                cross_attn: c_cross,
                x2,
                ln2: c_ln2,
                ffn: c_ffn,
            },
        )
    }

    /// Returns (dx, d_enc).
    pub fn backward(
        &self,
        cache: &CrossBlockCache<T>,
        dy: &Mat<T>,
        grad: &mut CrossBlock<T>,
    ) -> (Mat<T>, Mat<T>) {
        let db = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn);
        let mut dx2 = self.ln2.backward(&cache.ln2, &db, &mut grad.ln2);
        dx2.add_assign(dy);
        let (dcx, denc) = self.cross_attn.backward(&cache.cross_attn, &dx2, &mut grad.cross_attn);
        let mut dx1 = self.ln_cross.backward(&cache.ln_cross, &dcx, &mut grad.ln_cross);
        dx1.add_assign(&dx2);
        let (da, dactx) = self.self_attn.backward(&cache.self_attn, &dx1, &mut grad.self_attn);
        let mut da_total = da;
        da_total.add_assign(&dactx);
        let mut dx = self.ln1.backward(&cache.ln1, &da_total, &mut grad.ln1);
        dx.add_assign(&dx1);
        (dx, denc)
    }
}

impl<T: Scalar> Params<T> for CrossBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln_cross.visit(&format!("{prefix}.ln_cross"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln_cross.visit_mut(&format!("{prefix}.ln_cross"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, flatten_grads};
    use rand_chacha::rand_core::SeedableRng;

    fn input(n: usize, d: usize, phase: f64) -> Mat<f64> {
        Mat::from_vec(
            n,
            d,
            (0..n * d).map(|i| (i as f64 * 0.29 + phase).sin() * 0.7).collect(),
        )
    }

    fn weighted_sum(y: &Mat<f64>, w: &Mat<f64>) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn self_block_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut blk = SelfBlock::new(8, 2, 16, 0.3, 1.0, &mut rng);
        let x = input(4, 8, 0.0);
        let lw = input(4, 8, 1.1);
        let (_, cache) = blk.forward(&x, AttnMask::Causal);
        let mut grad = blk.zeros_like();
        blk.backward(&cache, &lw, &mut grad);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut blk,
            &analytic,
            |m| weighted_sum(&m.forward(&x, AttnMask::Causal).0, &lw),
            1e-5,
            1e-5,
            3,
        );
    }

    #[test]
    fn self_block_input_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = SelfBlock::new(8, 2, 12, 0.3, 1.0, &mut rng);
        let x = input(3, 8, 0.4);
        let lw = input(3, 8, 2.2);
        let (_, cache) = blk.forward(&x, AttnMask::PatchCausal { size: 3 });
        let mut grad = blk.zeros_like();
        let dx = blk.backward(&cache, &lw, &mut grad);
        let eps = 1e-6;
        for i in (0..x.rows() * x.cols()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let up = weighted_sum(&blk.forward(&xp, AttnMask::PatchCausal { size: 3 }).0, &lw);
            let down = weighted_sum(&blk.forward(&xm, AttnMask::PatchCausal { size: 3 }).0, &lw);
            let num = (up - down) / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_block_gradcheck_and_enc_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut blk = CrossBlock::new(6, 2, 10, 0.3, 1.0, &mut rng);
        let x = input(3, 6, 0.0);
        let enc = input(4, 6, 0.8);
        let lw = input(3, 6, 1.9);
        let (_, cache) = blk.forward(&x, &enc);
        let mut grad = blk.zeros_like();
        let (_, denc) = blk.backward(&cache, &lw, &mut grad);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut blk,
            &analytic,
            |m| weighted_sum(&m.forward(&x, &enc).0, &lw),
            1e-5,
            1e-5,
            5,
        );
        // encoder-side input gradient via finite differences
        let eps = 1e-6;
        for i in (0..enc.rows() * enc.cols()).step_by(7) {
            let mut ep = enc.clone();
            ep.data_mut()[i] += eps;
            let mut em = enc.clone();
            em.data_mut()[i] -= eps;
            let up = weighted_sum(&blk.forward(&x, &ep).0, &lw);
            let down = weighted_sum(&blk.forward(&x, &em).0, &lw);
            let num = (up - down) / (2.0 * eps);
            assert!((num - denc.data()[i]).abs() < 1e-6);
        }
    }
}
