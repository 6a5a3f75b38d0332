//! Linear, LayerNorm and feed-forward layers with explicit backward passes.

use super::Params;
use crate::mat::Mat;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// in x out weight matrix.
    pub w: Mat<T>,
    /// 1 x out bias.
    pub b: Mat<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Mat::zeros(d_in, d_out);
        super::normal_init(&mut w, std, rng);
        Self {
            w,
            b: Mat::zeros(1, d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows() {
            y.add_to_row(r, self.b.row(0));
        }
        y
    }

    /// Returns dx; accumulates dw, db into `grad`.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        grad.w.add_assign(&x.matmul_ta(dy));
        for r in 0..dy.rows() {
            grad.b.add_to_row(0, dy.row(r));
        }
        dy.matmul_tb(&self.w)
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
    pub eps: T,
}

pub struct NormCache<T> {
    /// Normalized input (before gamma/beta).
    pub xhat: Mat<T>,
    /// Per-row reciprocal standard deviation.
    pub rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Mat::from_vec(1, dim, vec![T::one(); dim]),
            beta: Mat::zeros(1, dim),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, NormCache<T>) {
        let (n, d) = (x.rows(), x.cols());
        let mut xhat = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let inv_d = T::from_f64(1.0 / d as f64);
        for r in 0..n {
            let row = x.row(r);
            let mut mean = T::zero();
            for v in row {
                mean += *v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for v in row {
                let c = *v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rs = T::one() / (var + self.eps).sqrt();
            rstd.push(rs);
            let out = xhat.row_mut(r);
            for (o, v) in out.iter_mut().zip(row) {
                *o = (*v - mean) * rs;
            }
        }
        let mut y = xhat.clone();
        for r in 0..n {
            let row = y.row_mut(r);
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.gamma.get(0, i) + self.beta.get(0, i);
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &NormCache<T>,
        dy: &Mat<T>,
        grad: &mut LayerNorm<T>,
    ) -> Mat<T> {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dx = Mat::zeros(n, d);
        let inv_d = T::from_f64(1.0 / d as f64);
        for r in 0..n {
            let dy_r = dy.row(r);
            let xh = cache.xhat.row(r);
            // parameter grads
            for i in 0..d {
                grad.gamma.row_mut(0)[i] += dy_r[i] * xh[i];
                grad.beta.row_mut(0)[i] += dy_r[i];
            }
            // dxhat = dy * gamma
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            let gamma = self.gamma.row(0);
            for i in 0..d {
                let dxh = dy_r[i] * gamma[i];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[i];
            }
            let mean_dxh = sum_dxh * inv_d;
            let mean_dxh_xh = sum_dxh_xh * inv_d;
            let rs = cache.rstd[r];
            let out = dx.row_mut(r);
            for i in 0..d {
                let dxh = dy_r[i] * gamma[i];
                out[i] = rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * sech2 * du
}

#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct FfnCache<T> {
    /// Input to fc1.
    pub x: Mat<T>,
    /// Pre-activation output of fc1.
    pub pre: Mat<T>,
    /// gelu(pre), the input to fc2.
    pub hidden: Mat<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(d: usize, d_ff: usize, std: f64, out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(d, d_ff, std, rng),
            fc2: Linear::new(d_ff, d, std * out_scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, FfnCache<T>) {
        let pre = self.fc1.forward(x);
        let mut hidden = pre.clone();
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        let y = self.fc2.forward(&hidden);
        (
            y,
            FfnCache {
                x: x.clone(),
                pre,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &FfnCache<T>, dy: &Mat<T>, grad: &mut FeedForward<T>) -> Mat<T> {
        let mut dhidden = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2);
        for (dh, p) in dhidden.data_mut().iter_mut().zip(cache.pre.data()) {
            *dh = *dh * gelu_prime(*p);
        }
        self.fc1.backward(&cache.x, &dhidden, &mut grad.fc1)
    }
}

impl<T: Scalar> Params<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, flatten_grads};
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn input(n: usize, d: usize) -> Mat<f64> {
        Mat::from_vec(
            n,
            d,
            (0..n * d).map(|i| ((i as f64 * 0.61).sin()) * 0.8).collect(),
        )
    }

    // scalar loss = weighted sum of outputs, so dLoss/dy is a fixed matrix
    fn loss_weights(n: usize, d: usize) -> Mat<f64> {
        Mat::from_vec(
            n,
            d,
            (0..n * d).map(|i| ((i as f64 * 0.17).cos()) * 0.5).collect(),
        )
    }

    fn weighted_sum(y: &Mat<f64>, w: &Mat<f64>) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_gradcheck() {
        let mut lin = Linear::new(5, 4, 0.3, &mut rng());
        let x = input(3, 5);
        let lw = loss_weights(3, 4);
        let mut grad = lin.zeros_like();
        let y = lin.forward(&x);
        let _ = y;
        lin.backward(&x, &lw, &mut grad);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut lin,
            &analytic,
            |m| weighted_sum(&m.forward(&x), &lw),
            1e-5,
            1e-6,
            1,
        );
    }

    #[test]
    fn layernorm_gradcheck() {
        let mut ln = LayerNorm::new(6);
        // non-trivial gamma/beta
        for (i, v) in ln.gamma.data_mut().iter_mut().enumerate() {
            *v = 1.0 + 0.1 * i as f64;
        }
        for (i, v) in ln.beta.data_mut().iter_mut().enumerate() {
            *v = 0.05 * i as f64;
        }
        let x = input(4, 6);
        let lw = loss_weights(4, 6);
        let mut grad = ln.zeros_like();
        let (_, cache) = ln.forward(&x);
        ln.backward(&cache, &lw, &mut grad);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut ln,
            &analytic,
            |m| weighted_sum(&m.forward(&x).0, &lw),
            1e-5,
            1e-6,
            1,
        );
    }

    #[test]
    fn layernorm_input_grad_matches_fd() {
        let ln = LayerNorm::new(5);
        let x = input(2, 5);
        let lw = loss_weights(2, 5);
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &lw, &mut g);
        let eps = 1e-6;
        for i in 0..x.rows() * x.cols() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let up = weighted_sum(&ln.forward(&xp).0, &lw);
            let down = weighted_sum(&ln.forward(&xm).0, &lw);
            let num = (up - down) / (2.0 * eps);
            assert!(
                (num - dx.data()[i]).abs() < 1e-6,
                "dx[{i}] analytic {} numeric {num}",
                dx.data()[i]
            );
        }
    }

    #[test]
    fn ffn_gradcheck() {
        let mut ffn = FeedForward::new(4, 7, 0.3, 1.0, &mut rng());
        let x = input(3, 4);
        let lw = loss_weights(3, 4);
        let mut grad = ffn.zeros_like();
        let (_, cache) = ffn.forward(&x);
        ffn.backward(&cache, &lw, &mut grad);
        let analytic = flatten_grads(&grad);
        check_params(
            &mut ffn,
            &analytic,
            |m| weighted_sum(&m.forward(&x).0, &lw),
            1e-5,
            1e-5,
            1,
        );
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let num = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((num - gelu_prime(x)).abs() < 1e-8);
        }
    }
}
