//! Unit-to-waveform generator: per-level look-up-table embeddings of the
//! discrete units (summed), transposed-convolution upsampling stages with
//! dilated residual blocks, and a tanh-bounded output. The product of the
//! upsample rates must equal the 320-sample codec hop so the output length
//! is exactly T x 320.

use super::conv::{leaky_relu, leaky_relu_prime, Conv1d, ConvTranspose1d, Sig};
use super::VocoderError;
use crate::audio::Waveform;
use crate::codec::AcousticUnitGrid;
use crate::mat::Mat;
use crate::nn::{self, Params};
use crate::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VocoderConfig {
    pub n_levels: usize,
    pub codebook_size: usize,
    pub upsample_rates: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    /// Channel counts: `channels[0]` is the LUT embedding width and each
    /// stage maps `channels[i] -> channels[i+1]`.
    pub channels: Vec<usize>,
    pub resblock_kernel: usize,
    pub resblock_dilations: Vec<usize>,
    pub leaky_slope: f64,
    pub hop: usize,
}

impl VocoderConfig {
    /// Small configuration used by the tests: rate product still 320.
    pub fn desk(n_levels: usize, codebook_size: usize) -> Self {
        Self {
            n_levels,
            codebook_size,
            upsample_rates: vec![5, 4, 4, 4],
            upsample_kernels: vec![9, 8, 8, 8],
            channels: vec![128, 64, 32, 16, 16],
            resblock_kernel: 3,
            resblock_dilations: vec![1, 3],
            leaky_slope: 0.1,
            hop: crate::HOP,
        }
    }

    /// Full-scale configuration (documented; never trained in tests).
    pub fn paper(n_levels: usize, codebook_size: usize) -> Self {
        Self {
            n_levels,
            codebook_size,
            upsample_rates: vec![5, 4, 2, 2, 2, 2],
            upsample_kernels: vec![9, 8, 4, 4, 4, 4],
            channels: vec![512, 256, 128, 64, 32, 16, 16],
            resblock_kernel: 3,
            resblock_dilations: vec![1, 3, 9],
            leaky_slope: 0.1,
            hop: crate::HOP,
        }
    }

    pub fn validate(&self) -> Result<(), VocoderError> {
        let product: usize = self.upsample_rates.iter().product();
        if product != self.hop {
            return Err(VocoderError::Config(format!(
                "upsample rate product {product} != hop {}",
                self.hop
            )));
        }
        if self.upsample_kernels.len() != self.upsample_rates.len() {
            return Err(VocoderError::Config(
                "kernel list length != rate list length".into(),
            ));
        }
        for (&k, &s) in self.upsample_kernels.iter().zip(&self.upsample_rates) {
            if k < s || (k - s) % 2 != 0 {
                return Err(VocoderError::Config(format!(
                    "kernel {k} incompatible with stride {s} (need k >= s, k - s even)"
                )));
            }
        }
        if self.channels.len() != self.upsample_rates.len() + 1 {
            return Err(VocoderError::Config(
                "need one channel count per stage boundary".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UpStage<T> {
    pub up: ConvTranspose1d<T>,
    pub res_convs: Vec<Conv1d<T>>,
}

#[derive(Clone, Debug)]
pub struct VocoderGenerator<T> {
    pub cfg: VocoderConfig,
    /// One embedding table per codebook level, summed per frame.
    pub luts: Vec<Mat<T>>,
    pub stages: Vec<UpStage<T>>,
    pub final_conv: Conv1d<T>,
}

pub struct StageTrace<T> {
    x_pre: Sig<T>,
    a: Sig<T>,
    res_ins: Vec<Sig<T>>,
    res_pres: Vec<Sig<T>>,
}

pub struct GenTrace<T> {
    lut_out: Sig<T>,
    stages: Vec<StageTrace<T>>,
    y_last: Sig<T>,
    fa: Sig<T>,
    f_pre: Sig<T>,
    pub wave: Vec<T>,
}

impl<T: Scalar> VocoderGenerator<T> {
    pub fn new(cfg: VocoderConfig, seed: u64) -> Result<Self, VocoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut luts = Vec::with_capacity(cfg.n_levels);
        for _ in 0..cfg.n_levels {
            let mut t = Mat::zeros(cfg.codebook_size, cfg.channels[0]);
            nn::normal_init(&mut t, 0.1, &mut rng);
            luts.push(t);
        }
        let mut stages = Vec::with_capacity(cfg.upsample_rates.len());
        for i in 0..cfg.upsample_rates.len() {
            let up = ConvTranspose1d::new(
                cfg.channels[i],
                cfg.channels[i + 1],
                cfg.upsample_kernels[i],
                cfg.upsample_rates[i],
                &mut rng,
            );
            let res_convs = cfg
                .resblock_dilations
                .iter()
                .map(|&d| Conv1d::new(cfg.channels[i + 1], cfg.channels[i + 1], cfg.resblock_kernel, d, &mut rng))
                .collect();
            stages.push(UpStage { up, res_convs });
        }
        let final_conv = Conv1d::new(*cfg.channels.last().unwrap(), 1, 7, 1, &mut rng);
        Ok(Self {
            cfg,
            luts,
            stages,
            final_conv,
        })
    }

    pub fn zeroed_clone(&self) -> Self {
        let mut g = self.clone();
        nn::scale_params(&mut g, T::zero());
        g
    }

    fn embed(&self, grid: &AcousticUnitGrid) -> Result<Sig<T>, VocoderError> {
        if grid.c_levels() != self.cfg.n_levels {
            return Err(VocoderError::Config(format!(
                "grid has {} levels, generator expects {}",
                grid.c_levels(),
                self.cfg.n_levels
            )));
        }
        grid.validate().map_err(VocoderError::BadCodes)?;
        if grid.codebook_size as usize > self.cfg.codebook_size {
            return Err(VocoderError::Config(format!(
                "grid codebook size {} exceeds LUT size {}",
                grid.codebook_size, self.cfg.codebook_size
            )));
        }
        let e = self.cfg.channels[0];
        let t_frames = grid.t_frames();
        let mut out = Sig::zeros(e, t_frames);
        for t in 0..t_frames {
            for (c, &code) in grid.frame(t).iter().enumerate() {
                let row = self.luts[c].row(code as usize);
                for j in 0..e {
                    out.ch_mut(j)[t] += row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn forward_trace(&self, grid: &AcousticUnitGrid) -> Result<GenTrace<T>, VocoderError> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let lut_out = self.embed(grid)?;
        let mut x = lut_out.clone();
        let mut stage_traces = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let x_pre = x.clone();
            let mut a = x;
            for v in a.data.iter_mut() {
                *v = leaky_relu(*v, slope);
            }
            let u = st.up.forward(&a);
            // residual block: chained dilated convs with pre-activations
            let mut res_ins = Vec::with_capacity(st.res_convs.len());
            let mut res_pres = Vec::with_capacity(st.res_convs.len());
            let mut r = u.clone();
            for conv in &st.res_convs {
                res_pres.push(r.clone());
                let mut rin = r;
                for v in rin.data.iter_mut() {
                    *v = leaky_relu(*v, slope);
                }
                res_ins.push(rin.clone());
                r = conv.forward(&rin);
            }
            let mut y = u.clone();
            for (yv, rv) in y.data.iter_mut().zip(&r.data) {
                *yv += *rv;
            }
            stage_traces.push(StageTrace {
                x_pre,
                a,
                res_ins,
                res_pres,
            });
            x = y;
        }
        let y_last = x.clone();
        let mut fa = x;
        for v in fa.data.iter_mut() {
            *v = leaky_relu(*v, slope);
        }
        let f_pre = self.final_conv.forward(&fa);
        let wave: Vec<T> = f_pre.ch(0).iter().map(|v| v.tanh()).collect();
        Ok(GenTrace {
            lut_out,
            stages: stage_traces,
            y_last,
            fa,
            f_pre,
            wave,
        })
    }

    /// Maps acoustic units to a waveform of exactly T x hop samples.
    pub fn vocode(&self, grid: &AcousticUnitGrid) -> Result<Waveform<T>, VocoderError> {
        let trace = self.forward_trace(grid)?;
        debug_assert_eq!(trace.wave.len(), grid.t_frames() * self.cfg.hop);
        Ok(Waveform::new(trace.wave, crate::SAMPLE_RATE))
    }

    /// Backpropagates a waveform gradient into parameter grads.
    pub fn backward(
        &self,
        grid: &AcousticUnitGrid,
        trace: &GenTrace<T>,
        dwave: &[T],
        grads: &mut Self,
    ) {
        let slope = T::from_f64(self.cfg.leaky_slope);
        // through tanh
        let mut df = Sig::zeros(1, trace.wave.len());
        for ((d, &g), &w) in df.ch_mut(0).iter_mut().zip(dwave).zip(&trace.wave) {
            *d = g * (T::one() - w * w);
        }
        let dfa = self.final_conv.backward(&trace.fa, &df, &mut grads.final_conv);
        let mut dx = dfa;
        for (d, &pre) in dx.data.iter_mut().zip(&trace.y_last.data) {
            *d = *d * leaky_relu_prime(pre, slope);
        }
        for (si, st) in self.stages.iter().enumerate().rev() {
            let tr = &trace.stages[si];
            // y = u + res_chain(u); walk the residual chain backwards
            let mut dr = dx.clone();
            // dr flows through the conv chain in reverse
            for (ci, conv) in st.res_convs.iter().enumerate().rev() {
                let mut dout = conv.backward(&tr.res_ins[ci], &dr, &mut grads.stages[si].res_convs[ci]);
                for (d, &pre) in dout.data.iter_mut().zip(&tr.res_pres[ci].data) {
                    *d = *d * leaky_relu_prime(pre, slope);
                }
                dr = dout;
            }
            let mut du = dx;
            du.data
                .iter_mut()
                .zip(&dr.data)
                .for_each(|(a, b)| *a += *b);
            let mut da = st.up.backward(&tr.a, &du, &mut grads.stages[si].up);
            for (d, &pre) in da.data.iter_mut().zip(&tr.x_pre.data) {
                *d = *d * leaky_relu_prime(pre, slope);
            }
            dx = da;
        }
        // scatter into LUT grads
        let e = self.cfg.channels[0];
        for t in 0..grid.t_frames() {
            for (c, &code) in grid.frame(t).iter().enumerate() {
                let row = grads.luts[c].row_mut(code as usize);
                for (j, r) in row.iter_mut().enumerate().take(e) {
                    *r += dx.ch(j)[t];
                }
            }
        }
        let _ = &trace.lut_out;
        let _ = &trace.f_pre;
    }
}

impl<T: Scalar> Params<T> for VocoderGenerator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (i, l) in self.luts.iter().enumerate() {
            f(format!("{prefix}lut.{i}"), l);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.up.visit(&format!("{prefix}stage.{i}.up"), f);
            for (j, c) in s.res_convs.iter().enumerate() {
                c.visit(&format!("{prefix}stage.{i}.res.{j}"), f);
            }
        }
        self.final_conv.visit(&format!("{prefix}final"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        for (i, l) in self.luts.iter_mut().enumerate() {
            f(format!("{prefix}lut.{i}"), l);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.up.visit_mut(&format!("{prefix}stage.{i}.up"), f);
            for (j, c) in s.res_convs.iter_mut().enumerate() {
                c.visit_mut(&format!("{prefix}stage.{i}.res.{j}"), f);
            }
        }
        self.final_conv.visit_mut(&format!("{prefix}final"), f);
    }
}
