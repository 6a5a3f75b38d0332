//! Multi-period and multi-resolution discriminators. Each sub-discriminator
//! yields a score map plus per-layer feature maps for the feature-matching
//! loss, and supports backpropagation to its input waveform (needed for the
//! generator's adversarial gradient).

use super::conv::{leaky_relu, leaky_relu_prime, Conv2d, Grid2};
use crate::dsp::{hann, Fft};
use crate::mat::Mat;
use crate::nn::Params;
use crate::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// (fft_size, hop) per resolution branch.
    pub resolutions: Vec<(usize, usize)>,
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            resolutions: vec![(512, 128), (1024, 256), (2048, 512)],
            channels: vec![1, 8, 16, 32],
            leaky_slope: 0.1,
        }
    }
}

/// Score map plus per-layer feature maps of one sub-discriminator.
pub struct DiscOut<T> {
    pub score: Grid2<T>,
    pub feats: Vec<Grid2<T>>,
}

pub struct DiscTrace<T> {
    /// Input grid fed to the conv stack.
    input: Grid2<T>,
    /// Pre-activation outputs of the intermediate convs.
    pres: Vec<Grid2<T>>,
    /// Post-activation outputs (the feature maps).
    pub feats: Vec<Grid2<T>>,
    pub score: Grid2<T>,
    /// Samples of padding appended to the wave (period branch only).
    pad: usize,
    /// STFT frames (resolution branch only): per frame (re, im) full fft.
    stft: Option<StftTrace<T>>,
}

pub struct StftTrace<T> {
    frames: Vec<(Vec<T>, Vec<T>)>,
    pub mags: Grid2<T>,
    wave_len: usize,
}

/// One period branch: the waveform is reshaped to `period` rows before a
/// stack of strided 2-D convolutions along the time axis.
#[derive(Clone, Debug)]
pub struct PeriodDisc<T> {
    pub period: usize,
    pub convs: Vec<Conv2d<T>>,
    pub final_conv: Conv2d<T>,
    slope: f64,
}

impl<T: Scalar> PeriodDisc<T> {
    pub fn new(period: usize, channels: &[usize], slope: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        for i in 0..channels.len() - 1 {
            convs.push(Conv2d::new(channels[i], channels[i + 1], 1, 5, 1, 3, rng));
        }
        let final_conv = Conv2d::new(*channels.last().unwrap(), 1, 1, 3, 1, 1, rng);
        Self {
            period,
            convs,
            final_conv,
            slope,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            final_conv: self.final_conv.zeros_like(),
            ..self.clone()
        }
    }

    /// Reshape: row i, column t holds `wave[t * period + i]`, right-padded
    /// with zeros to a multiple of the period.
    pub fn reshape(&self, wave: &[T]) -> (Grid2<T>, usize) {
        let p = self.period;
        let cols = wave.len().div_ceil(p);
        let pad = cols * p - wave.len();
        let mut g = Grid2::zeros(1, p, cols);
        for (n, &v) in wave.iter().enumerate() {
            *g.at_mut(0, n % p, n / p) = v;
        }
        (g, pad)
    }

    pub fn forward(&self, wave: &[T]) -> DiscTrace<T> {
        let (input, pad) = self.reshape(wave);
        let slope = T::from_f64(self.slope);
        let mut x = input.clone();
        let mut pres = Vec::with_capacity(self.convs.len());
        let mut feats = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            let pre = conv.forward(&x);
            pres.push(pre.clone());
            let mut act = pre;
            for v in act.data.iter_mut() {
                *v = leaky_relu(*v, slope);
            }
            feats.push(act.clone());
            x = act;
        }
        let score = self.final_conv.forward(&x);
        feats.push(score.clone());
        DiscTrace {
            input,
            pres,
            feats,
            score,
            pad,
            stft: None,
        }
    }

    /// Backward from score- and feature-map gradients to (weights, dwave).
    pub fn backward(
        &self,
        trace: &DiscTrace<T>,
        dscore: &Grid2<T>,
        dfeats: Option<&[Grid2<T>]>,
        grads: &mut Self,
    ) -> Vec<T> {
        let slope = T::from_f64(self.slope);
        let last_feat = if self.convs.is_empty() {
            &trace.input
        } else {
            &trace.feats[self.convs.len() - 1]
        };
        let mut dscore_total = dscore.clone();
        if let Some(df) = dfeats {
            for (a, b) in dscore_total.data.iter_mut().zip(&df[self.convs.len()].data) {
                *a += *b;
            }
        }
        let mut dx = self
            .final_conv
            .backward(last_feat, &dscore_total, &mut grads.final_conv);
        for (ci, conv) in self.convs.iter().enumerate().rev() {
            if let Some(df) = dfeats {
                for (a, b) in dx.data.iter_mut().zip(&df[ci].data) {
                    *a += *b;
                }
            }
            // through the activation
            for (d, &pre) in dx.data.iter_mut().zip(&trace.pres[ci].data) {
                *d = *d * leaky_relu_prime(pre, slope);
            }
            let below = if ci == 0 {
                &trace.input
            } else {
                &trace.feats[ci - 1]
            };
            dx = conv.backward(below, &dx, &mut grads.convs[ci]);
        }
        // un-reshape, dropping padding
        let total = trace.input.h * trace.input.w - trace.pad;
        let mut dwave = vec![T::zero(); total];
        for (n, d) in dwave.iter_mut().enumerate() {
            *d = dx.at(0, n % self.period, n / self.period);
        }
        dwave
    }
}

impl<T: Scalar> Params<T> for PeriodDisc<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv.{i}"), f);
        }
        self.final_conv.visit(&format!("{prefix}.final"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv.{i}"), f);
        }
        self.final_conv.visit_mut(&format!("{prefix}.final"), f);
    }
}

/// Magnitude STFT front-end shared by the resolution branches and the
/// spectral reconstruction loss.
pub struct Stft<T> {
    pub fft_size: usize,
    pub hop: usize,
    fft: Fft<T>,
    window: Vec<T>,
}

impl<T: Scalar> Stft<T> {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        Self {
            fft_size,
            hop,
            fft: Fft::new(fft_size),
            window: hann(fft_size),
        }
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// Magnitude spectrogram (bins x frames) plus the complex frames needed
    /// for the backward pass.
    pub fn forward(&self, wave: &[T]) -> StftTrace<T> {
        let n_frames = self.n_frames(wave.len());
        let bins = self.fft_size / 2 + 1;
        let mut mags = Grid2::zeros(1, bins, n_frames.max(0));
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = t * self.hop;
            let mut re: Vec<T> = (0..self.fft_size)
                .map(|i| wave[start + i] * self.window[i])
                .collect();
            let mut im = vec![T::zero(); self.fft_size];
            self.fft.transform(&mut re, &mut im, false);
            for k in 0..bins {
                *mags.at_mut(0, k, t) = (re[k] * re[k] + im[k] * im[k]).sqrt();
            }
            frames.push((re, im));
        }
        StftTrace {
            frames,
            mags,
            wave_len: wave.len(),
        }
    }

    /// Backpropagates a magnitude-spectrogram gradient to the waveform.
    pub fn backward(&self, trace: &StftTrace<T>, dmag: &Grid2<T>) -> Vec<T> {
        let bins = self.fft_size / 2 + 1;
        let mut dwave = vec![T::zero(); trace.wave_len];
        let eps = T::from_f64(1e-12);
        for (t, (re, im)) in trace.frames.iter().enumerate() {
            let mut gre = vec![T::zero(); self.fft_size];
            let mut gim = vec![T::zero(); self.fft_size];
            for k in 0..bins {
                let g = dmag.at(0, k, t);
                if g == T::zero() {
                    continue;
                }
                let mag = trace.mags.at(0, k, t).max(eps);
                gre[k] = g * re[k] / mag;
                gim[k] = g * im[k] / mag;
            }
            // adjoint of the DFT on a real input: Re(F^H g)
            self.fft.transform(&mut gre, &mut gim, true);
            let start = t * self.hop;
            for i in 0..self.fft_size {
                dwave[start + i] += self.window[i] * gre[i];
            }
        }
        dwave
    }
}

/// One resolution branch: magnitude spectrogram into a strided conv stack.
pub struct ResolutionDisc<T> {
    pub stft: Stft<T>,
    pub convs: Vec<Conv2d<T>>,
    pub final_conv: Conv2d<T>,
    slope: f64,
}

impl<T: Scalar> ResolutionDisc<T> {
    pub fn new(fft_size: usize, hop: usize, channels: &[usize], slope: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        for i in 0..channels.len() - 1 {
            convs.push(Conv2d::new(channels[i], channels[i + 1], 3, 3, 2, 2, rng));
        }
        let final_conv = Conv2d::new(*channels.last().unwrap(), 1, 3, 3, 1, 1, rng);
        Self {
            stft: Stft::new(fft_size, hop),
            convs,
            final_conv,
            slope,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stft: Stft::new(self.stft.fft_size, self.stft.hop),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            final_conv: self.final_conv.zeros_like(),
            slope: self.slope,
        }
    }

    pub fn forward(&self, wave: &[T]) -> DiscTrace<T> {
        let stft = self.stft.forward(wave);
        let input = stft.mags.clone();
        let slope = T::from_f64(self.slope);
        let mut x = input.clone();
        let mut pres = Vec::with_capacity(self.convs.len());
        let mut feats = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            let pre = conv.forward(&x);
            pres.push(pre.clone());
            let mut act = pre;
            for v in act.data.iter_mut() {
                *v = leaky_relu(*v, slope);
            }
            feats.push(act.clone());
            x = act;
        }
        let score = self.final_conv.forward(&x);
        feats.push(score.clone());
        DiscTrace {
            input,
            pres,
            feats,
            score,
            pad: 0,
            stft: Some(stft),
        }
    }

    pub fn backward(
        &self,
        trace: &DiscTrace<T>,
        dscore: &Grid2<T>,
        dfeats: Option<&[Grid2<T>]>,
        grads: &mut Self,
    ) -> Vec<T> {
        let slope = T::from_f64(self.slope);
        let last_feat = if self.convs.is_empty() {
            &trace.input
        } else {
            &trace.feats[self.convs.len() - 1]
        };
        let mut dscore_total = dscore.clone();
        if let Some(df) = dfeats {
            for (a, b) in dscore_total.data.iter_mut().zip(&df[self.convs.len()].data) {
                *a += *b;
            }
        }
        let mut dx = self
            .final_conv
            .backward(last_feat, &dscore_total, &mut grads.final_conv);
        for (ci, conv) in self.convs.iter().enumerate().rev() {
            if let Some(df) = dfeats {
                for (a, b) in dx.data.iter_mut().zip(&df[ci].data) {
                    *a += *b;
                }
            }
            for (d, &pre) in dx.data.iter_mut().zip(&trace.pres[ci].data) {
                *d = *d * leaky_relu_prime(pre, slope);
            }
            let below = if ci == 0 {
                &trace.input
            } else {
                &trace.feats[ci - 1]
            };
            dx = conv.backward(below, &dx, &mut grads.convs[ci]);
        }
        self.stft.backward(trace.stft.as_ref().expect("stft trace"), &dx)
    }
}

impl<T: Scalar> Params<T> for ResolutionDisc<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv.{i}"), f);
        }
        self.final_conv.visit(&format!("{prefix}.final"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv.{i}"), f);
        }
        self.final_conv.visit_mut(&format!("{prefix}.final"), f);
    }
}

impl<T: Scalar> DiscTrace<T> {
    pub fn out(&self) -> DiscOut<T> {
        DiscOut {
            score: self.score.clone(),
            feats: self.feats.clone(),
        }
    }
}
