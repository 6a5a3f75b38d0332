//! Convolution primitives for the vocoder generator and discriminators.
//! Weights are stored as [`Mat`] (rows = output channels) so the shared
//! Params/Adam/checkpoint machinery applies unchanged.

use crate::mat::Mat;
use crate::nn::Params;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;

/// Channel-major 1-D signal: `c` channels of length `l`.
#[derive(Clone, Debug)]
pub struct Sig<T> {
    pub c: usize,
    pub l: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Sig<T> {
    pub fn zeros(c: usize, l: usize) -> Self {
        Self {
            c,
            l,
            data: vec![T::zero(); c * l],
        }
    }

    pub fn ch(&self, i: usize) -> &[T] {
        &self.data[i * self.l..(i + 1) * self.l]
    }

    pub fn ch_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.l..(i + 1) * self.l]
    }
}

/// Channel-major 2-D map: `c` channels of `h` x `w`.
#[derive(Clone, Debug)]
pub struct Grid2<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Grid2<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64().abs()).sum::<f64>() / self.data.len() as f64
    }
}

pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

pub fn leaky_relu_prime<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

/// 1-D convolution, stride 1, symmetric padding `dilation * (k-1) / 2`
/// (odd kernels), so the length is preserved.
#[derive(Clone, Debug)]
pub struct Conv1d<T> {
    /// rows = c_out, cols = c_in * k
    pub w: Mat<T>,
    pub b: Mat<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "same-length conv needs an odd kernel");
        let std = (2.0 / (c_in * k) as f64).sqrt();
        let mut w = Mat::zeros(c_out, c_in * k);
        crate::nn::normal_init(&mut w, std, rng);
        Self {
            w,
            b: Mat::zeros(1, c_out),
            c_in,
            c_out,
            k,
            dilation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
            ..self.clone()
        }
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    pub fn forward(&self, x: &Sig<T>) -> Sig<T> {
        debug_assert_eq!(x.c, self.c_in);
        let l = x.l;
        let mut y = Sig::zeros(self.c_out, l);
        let pad = self.pad();
        for o in 0..self.c_out {
            let wrow = self.w.row(o);
            let bias = self.b.get(0, o);
            let out = y.ch_mut(o);
            for v in out.iter_mut() {
                *v = bias;
            }
            for i in 0..self.c_in {
                let xin = x.ch(i);
                for kk in 0..self.k {
                    let wv = wrow[i * self.k + kk];
                    if wv == T::zero() {
                        continue;
                    }
                    let off = kk as isize * self.dilation as isize - pad;
                    let (t0, t1) = valid_range(l, off);
                    for t in t0..t1 {
                        out[t] += wv * xin[(t as isize + off) as usize];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Sig<T>, dy: &Sig<T>, grad: &mut Conv1d<T>) -> Sig<T> {
        let l = x.l;
        let pad = self.pad();
        let mut dx = Sig::zeros(self.c_in, l);
        for o in 0..self.c_out {
            let dout = dy.ch(o);
            let mut db = T::zero();
            for v in dout {
                db += *v;
            }
            grad.b.row_mut(0)[o] += db;
            let wrow = self.w.row(o);
            let gw = grad.w.row_mut(o);
            for i in 0..self.c_in {
                let xin = x.ch(i);
                let dxin = dx.ch_mut(i);
                for kk in 0..self.k {
                    let off = kk as isize * self.dilation as isize - pad;
                    let (t0, t1) = valid_range(l, off);
                    let mut acc = T::zero();
                    let wv = wrow[i * self.k + kk];
                    for t in t0..t1 {
                        let xi = (t as isize + off) as usize;
                        acc += dout[t] * xin[xi];
                        dxin[xi] += dout[t] * wv;
                    }
                    gw[i * self.k + kk] += acc;
                }
            }
        }
        dx
    }
}

#[inline]
fn valid_range(l: usize, off: isize) -> (usize, usize) {
    let t0 = if off < 0 { (-off) as usize } else { 0 };
    let t1 = if off > 0 {
        l.saturating_sub(off as usize)
    } else {
        l
    };
    (t0.min(l), t1)
}

/// Transposed 1-D convolution with stride `s`, padding `(k - s) / 2`
/// (requires `k - s` even), so the output length is exactly `l * s`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl<T: Scalar> ConvTranspose1d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            (k - stride) % 2 == 0 && k >= stride,
            "exact-upsampling transposed conv needs k >= s with k - s even"
        );
        let std = (2.0 / (c_in * k) as f64).sqrt();
        let mut w = Mat::zeros(c_out, c_in * k);
        crate::nn::normal_init(&mut w, std, rng);
        Self {
            w,
            b: Mat::zeros(1, c_out),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
            ..self.clone()
        }
    }

    fn pad(&self) -> isize {
        ((self.k - self.stride) / 2) as isize
    }

    pub fn out_len(&self, l: usize) -> usize {
        l * self.stride
    }

    pub fn forward(&self, x: &Sig<T>) -> Sig<T> {
        debug_assert_eq!(x.c, self.c_in);
        let lo = self.out_len(x.l);
        let mut y = Sig::zeros(self.c_out, lo);
        let pad = self.pad();
        for o in 0..self.c_out {
            let bias = self.b.get(0, o);
            let out = y.ch_mut(o);
            for v in out.iter_mut() {
                *v = bias;
            }
            let wrow = self.w.row(o);
            for i in 0..self.c_in {
                let xin = x.ch(i);
                for kk in 0..self.k {
                    let wv = wrow[i * self.k + kk];
                    if wv == T::zero() {
                        continue;
                    }
                    let off = kk as isize - pad;
                    for (t, &xv) in xin.iter().enumerate() {
                        let u = t as isize * self.stride as isize + off;
                        if u >= 0 && (u as usize) < lo {
                            out[u as usize] += wv * xv;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Sig<T>, dy: &Sig<T>, grad: &mut ConvTranspose1d<T>) -> Sig<T> {
        let lo = dy.l;
        let pad = self.pad();
        let mut dx = Sig::zeros(self.c_in, x.l);
        for o in 0..self.c_out {
            let dout = dy.ch(o);
            let mut db = T::zero();
            for v in dout {
                db += *v;
            }
            grad.b.row_mut(0)[o] += db;
            let wrow = self.w.row(o);
            let gw = grad.w.row_mut(o);
            for i in 0..self.c_in {
                let xin = x.ch(i);
                let dxin = dx.ch_mut(i);
                for kk in 0..self.k {
                    let off = kk as isize - pad;
                    let wv = wrow[i * self.k + kk];
                    let mut acc = T::zero();
                    for t in 0..x.l {
                        let u = t as isize * self.stride as isize + off;
                        if u >= 0 && (u as usize) < lo {
                            let g = dout[u as usize];
                            acc += g * xin[t];
                            dxin[t] += g * wv;
                        }
                    }
                    gw[i * self.k + kk] += acc;
                }
            }
        }
        dx
    }
}

/// 2-D convolution with stride and symmetric padding.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (c_in * kh * kw) as f64).sqrt();
        let mut w = Mat::zeros(c_out, c_in * kh * kw);
        crate::nn::normal_init(&mut w, std, rng);
        Self {
            w,
            b: Mat::zeros(1, c_out),
            c_in,
            c_out,
            kh,
            kw,
            sh,
            sw,
            ph: kh / 2,
            pw: kw / 2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
            ..self.clone()
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    pub fn forward(&self, x: &Grid2<T>) -> Grid2<T> {
        debug_assert_eq!(x.c, self.c_in);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut y = Grid2::zeros(self.c_out, ho, wo);
        for o in 0..self.c_out {
            let bias = self.b.get(0, o);
            let wrow = self.w.row(o);
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias;
                    for i in 0..self.c_in {
                        for ky in 0..self.kh {
                            let sy = (yo * self.sh + ky) as isize - self.ph as isize;
                            if sy < 0 || sy as usize >= x.h {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let sx = (xo * self.sw + kx) as isize - self.pw as isize;
                                if sx < 0 || sx as usize >= x.w {
                                    continue;
                                }
                                acc += wrow[(i * self.kh + ky) * self.kw + kx]
                                    * x.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    *y.at_mut(o, yo, xo) = acc;
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Grid2<T>, dy: &Grid2<T>, grad: &mut Conv2d<T>) -> Grid2<T> {
        let (ho, wo) = self.out_dims(x.h, x.w);
        debug_assert_eq!(dy.h, ho);
        debug_assert_eq!(dy.w, wo);
        let mut dx = Grid2::zeros(self.c_in, x.h, x.w);
        for o in 0..self.c_out {
            let wrow = self.w.row(o);
            let mut db = T::zero();
            for yo in 0..ho {
                for xo in 0..wo {
                    let g = dy.at(o, yo, xo);
                    if g == T::zero() {
                        continue;
                    }
                    db += g;
                    for i in 0..self.c_in {
                        for ky in 0..self.kh {
                            let sy = (yo * self.sh + ky) as isize - self.ph as isize;
                            if sy < 0 || sy as usize >= x.h {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let sx = (xo * self.sw + kx) as isize - self.pw as isize;
                                if sx < 0 || sx as usize >= x.w {
                                    continue;
                                }
                                let idx = (i * self.kh + ky) * self.kw + kx;
                                grad.w.row_mut(o)[idx] += g * x.at(i, sy as usize, sx as usize);
                                *dx.at_mut(i, sy as usize, sx as usize) += g * wrow[idx];
                            }
                        }
                    }
                }
            }
            grad.b.row_mut(0)[o] += db;
        }
        dx
    }
}

macro_rules! impl_conv_params {
    ($ty:ident) => {
        impl<T: Scalar> Params<T> for $ty<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
                f(format!("{prefix}.w"), &self.w);
                f(format!("{prefix}.b"), &self.b);
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
                f(format!("{prefix}.w"), &mut self.w);
                f(format!("{prefix}.b"), &mut self.b);
            }
        }
    };
}

impl_conv_params!(Conv1d);
impl_conv_params!(ConvTranspose1d);
impl_conv_params!(Conv2d);

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn sig(c: usize, l: usize, phase: f64) -> Sig<f64> {
        let mut s = Sig::zeros(c, l);
        for (i, v) in s.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.31 + phase).sin() * 0.7;
        }
        s
    }

    #[test]
    fn conv1d_preserves_length_and_matches_fd() {
        let conv = Conv1d::new(2, 3, 3, 2, &mut rng());
        let x = sig(2, 11, 0.0);
        let y = conv.forward(&x);
        assert_eq!(y.l, 11);
        assert_eq!(y.c, 3);
        // loss = weighted sum
        let lw = sig(3, 11, 1.0);
        let loss = |c: &Conv1d<f64>, x: &Sig<f64>| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&lw.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &lw, &mut grad);
        let eps = 1e-6;
        for i in (0..conv.w.rows() * conv.w.cols()).step_by(3) {
            let mut cp = conv.clone();
            cp.w.data_mut()[i] += eps;
            let mut cm = conv.clone();
            cm.w.data_mut()[i] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((num - grad.w.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
        for i in (0..x.data.len()).step_by(4) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-7, "dx[{i}]");
        }
    }

    #[test]
    fn conv_transpose_upsamples_exactly() {
        for (k, s) in [(9usize, 5usize), (8, 4), (4, 2), (10, 4)] {
            let conv = ConvTranspose1d::<f64>::new(1, 1, k, s, &mut rng());
            let x = sig(1, 7, 0.0);
            assert_eq!(conv.forward(&x).l, 7 * s, "k={k} s={s}");
        }
    }

    #[test]
    fn conv_transpose_gradcheck() {
        let conv = ConvTranspose1d::new(2, 2, 8, 4, &mut rng());
        let x = sig(2, 5, 0.0);
        let y = conv.forward(&x);
        let lw = sig(2, y.l, 0.7);
        let loss = |c: &ConvTranspose1d<f64>, x: &Sig<f64>| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&lw.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &lw, &mut grad);
        let eps = 1e-6;
        for i in (0..conv.w.cols() * conv.w.rows()).step_by(5) {
            let mut cp = conv.clone();
            cp.w.data_mut()[i] += eps;
            let mut cm = conv.clone();
            cm.w.data_mut()[i] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((num - grad.w.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-7, "dx[{i}]");
        }
    }

    #[test]
    fn conv2d_shapes_and_gradcheck() {
        let conv = Conv2d::new(1, 2, 3, 3, 2, 2, &mut rng());
        let mut x = Grid2::<f64>::zeros(1, 9, 7);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.17).cos() * 0.5;
        }
        let y = conv.forward(&x);
        assert_eq!((y.h, y.w), conv.out_dims(9, 7));
        let mut lw = Grid2::<f64>::zeros(2, y.h, y.w);
        for (i, v) in lw.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.23).sin();
        }
        let loss = |c: &Conv2d<f64>, x: &Grid2<f64>| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&lw.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &lw, &mut grad);
        let eps = 1e-6;
        for i in (0..conv.w.rows() * conv.w.cols()).step_by(2) {
            let mut cp = conv.clone();
            cp.w.data_mut()[i] += eps;
            let mut cm = conv.clone();
            cm.w.data_mut()[i] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((num - grad.w.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-7, "dx[{i}]");
        }
    }
}
