//! Adam with linear warmup and global-norm gradient clipping.

use super::{collect_params, collect_params_mut, Params};
use crate::mat::Mat;
use crate::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: usize,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T>>(model: &P, cfg: AdamConfig) -> Self {
        let shapes: Vec<Mat<T>> = collect_params(model)
            .iter()
            .map(|(_, m)| m.zeros_like())
            .collect();
        Self {
            cfg,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One update; `grads` must have the same parameter structure as
    /// `model`. Returns the pre-clip global gradient norm.
    pub fn update<P: Params<T>>(&mut self, model: &mut P, grads: &mut P) -> f64 {
        self.step += 1;
        let norm = clip_global_norm(grads, self.cfg.clip_norm);
        let lr = self.cfg.lr
            * if self.cfg.warmup_steps > 0 {
                (self.step as f64 / self.cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);

        let params = collect_params_mut(model);
        let grads = collect_params(&*grads);
        for (((_, p), (_, g)), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + one_m_b1 * *gv;
                *vv = b2 * *vv + one_m_b2 * *gv * *gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }

    /// Named optimizer-state arrays for checkpointing (m.N / v.N).
    pub fn state_arrays(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("adam.m.{i}"), m));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("adam.v.{i}"), v));
        }
        out
    }
}

/// Scales all gradients so their global L2 norm is at most `clip`;
/// returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar, P: Params<T>>(grads: &mut P, clip: f64) -> f64 {
    let mut ss = 0.0f64;
    for (_, g) in collect_params(&*grads) {
        ss += g.sum_squares_f64();
    }
    let norm = ss.sqrt();
    if clip > 0.0 && norm > clip {
        let scale = T::from_f64(clip / norm);
        for (_, g) in collect_params_mut(grads) {
            g.scale(scale);
        }
    }
    norm
}
