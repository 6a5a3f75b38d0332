//! The unit vocoder: LUT-embedding generator with transposed-convolution
//! upsampling, multi-period and multi-resolution discriminators, and
//! least-squares adversarial training with feature-matching and
//! multi-resolution spectral reconstruction losses.

mod conv;
mod disc;
mod generator;

pub use conv::{Grid2, Sig};
pub use disc::{DiscOut, DiscriminatorConfig, PeriodDisc, ResolutionDisc, Stft};
pub use generator::{GenTrace, VocoderConfig, VocoderGenerator};

use crate::audio::Waveform;
use crate::codec::{AcousticUnitGrid, CodecError};
use crate::mat::Mat;
use crate::nn::{self, Adam, Params};
use crate::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("vocoder configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    BadCodes(CodecError),
    #[error("reference wave has {wave} samples, grid implies {expected}")]
    LengthMismatch { wave: usize, expected: usize },
    #[error("empty waveform")]
    EmptyWave,
}

/// Loss weights of the generator objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub feature_matching: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            feature_matching: 2.0,
            reconstruction: 45.0,
        }
    }
}

pub struct VocoderDiscriminators<T> {
    pub cfg: DiscriminatorConfig,
    pub mpd: Vec<PeriodDisc<T>>,
    pub mrd: Vec<ResolutionDisc<T>>,
}

impl<T: Scalar> VocoderDiscriminators<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mpd = cfg
            .periods
            .iter()
            .map(|&p| PeriodDisc::new(p, &cfg.channels, cfg.leaky_slope, &mut rng))
            .collect();
        let mrd = cfg
            .resolutions
            .iter()
            .map(|&(f, h)| ResolutionDisc::new(f, h, &cfg.channels, cfg.leaky_slope, &mut rng))
            .collect();
        Self { cfg, mpd, mrd }
    }

    pub fn zeroed_clone(&self) -> Self {
        let mut g = Self {
            cfg: self.cfg.clone(),
            mpd: self.mpd.iter().map(PeriodDisc::zeros_like).collect(),
            mrd: self.mrd.iter().map(ResolutionDisc::zeros_like).collect(),
        };
        nn::scale_params(&mut g, T::zero());
        g
    }

    /// Scores and feature maps from every sub-discriminator.
    pub fn discriminate(&self, w: &Waveform<T>) -> Result<Vec<DiscOut<T>>, VocoderError> {
        if w.is_empty() {
            return Err(VocoderError::EmptyWave);
        }
        let mut outs = Vec::new();
        for d in &self.mpd {
            outs.push(d.forward(&w.samples).out());
        }
        for d in &self.mrd {
            outs.push(d.forward(&w.samples).out());
        }
        Ok(outs)
    }
}

impl<T: Scalar> Params<T> for VocoderDiscriminators<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (i, d) in self.mpd.iter().enumerate() {
            d.visit(&format!("{prefix}mpd.{i}"), f);
        }
        for (i, d) in self.mrd.iter().enumerate() {
            d.visit(&format!("{prefix}mrd.{i}"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        for (i, d) in self.mpd.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}mpd.{i}"), f);
        }
        for (i, d) in self.mrd.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}mrd.{i}"), f);
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VocoderLosses {
    pub disc_loss: f64,
    pub gen_adversarial: f64,
    pub gen_feature_matching: f64,
    pub gen_reconstruction: f64,
    pub gen_total: f64,
    pub real_score_mean: f64,
    pub fake_score_mean: f64,
}

/// Multi-resolution log-magnitude spectral distance and its gradient with
/// respect to the first argument.
pub struct SpectralLoss<T> {
    stfts: Vec<Stft<T>>,
}

impl<T: Scalar> SpectralLoss<T> {
    pub fn new(resolutions: &[(usize, usize)]) -> Self {
        Self {
            stfts: resolutions.iter().map(|&(f, h)| Stft::new(f, h)).collect(),
        }
    }

    pub fn loss(&self, fake: &[T], real: &[T]) -> f64 {
        self.loss_and_grad(fake, real, false).0
    }

    /// Returns (loss, d loss / d fake).
    pub fn loss_and_grad(&self, fake: &[T], real: &[T], with_grad: bool) -> (f64, Vec<T>) {
        let eps = 1e-5;
        let mut total = 0.0f64;
        let mut grad = vec![T::zero(); if with_grad { fake.len() } else { 0 }];
        let mut n_res = 0usize;
        for stft in &self.stfts {
            let tf = stft.forward(fake);
            let tr = stft.forward(real);
            let n = tf.mags.data.len();
            if n == 0 {
                continue;
            }
            n_res += 1;
            let mut dmag = Grid2::zeros(1, tf.mags.h, tf.mags.w);
            let mut acc = 0.0f64;
            for i in 0..n {
                let lf = (tf.mags.data[i].as_f64() + eps).ln();
                let lr = (tr.mags.data[i].as_f64() + eps).ln();
                acc += (lf - lr).abs();
                if with_grad {
                    let sign = if lf >= lr { 1.0 } else { -1.0 };
                    dmag.data[i] =
                        T::from_f64(sign / (tf.mags.data[i].as_f64() + eps) / n as f64);
                }
            }
            total += acc / n as f64;
            if with_grad {
                let dw = stft.backward(&tf, &dmag);
                for (g, d) in grad.iter_mut().zip(dw) {
                    *g += d;
                }
            }
        }
        if n_res > 0 {
            total /= n_res as f64;
            if with_grad {
                let inv = T::from_f64(1.0 / n_res as f64);
                for g in &mut grad {
                    *g *= inv;
                }
            }
        }
        (total, grad)
    }
}

fn mean_score<T: Scalar>(g: &Grid2<T>) -> f64 {
    if g.data.is_empty() {
        return 0.0;
    }
    g.data.iter().map(|v| v.as_f64()).sum::<f64>() / g.data.len() as f64
}

/// One alternating GAN update (discriminator first, then generator) on a
/// batch of (unit grid, reference waveform) pairs.
#[allow(clippy::too_many_arguments)]
pub fn vocoder_train_step<T: Scalar>(
    gen: &mut VocoderGenerator<T>,
    disc: &mut VocoderDiscriminators<T>,
    batch: &[(&AcousticUnitGrid, &Waveform<T>)],
    weights: &LossWeights,
    adam_g: &mut Adam<T>,
    adam_d: &mut Adam<T>,
) -> Result<VocoderLosses, VocoderError> {
    let mut losses = VocoderLosses::default();
    let hop = gen.cfg.hop;
    for (grid, wave) in batch {
        if wave.len() != grid.t_frames() * hop {
            return Err(VocoderError::LengthMismatch {
                wave: wave.len(),
                expected: grid.t_frames() * hop,
            });
        }
    }
    let n_items = batch.len().max(1) as f64;

    // ---- discriminator update ----
    let fakes: Vec<GenTrace<T>> = batch
        .iter()
        .map(|(grid, _)| gen.forward_trace(grid))
        .collect::<Result<_, _>>()?;
    {
        let mut dgrads = disc.zeroed_clone();
        for ((_, real), fake) in batch.iter().zip(&fakes) {
            let (dl, rs, fs) =
                disc_loss_and_grads(disc, &real.samples, &fake.wave, &mut dgrads, 1.0 / n_items);
            losses.disc_loss += dl / n_items;
            losses.real_score_mean += rs / n_items;
            losses.fake_score_mean += fs / n_items;
        }
        adam_d.update(disc, &mut dgrads);
    }

    // ---- generator update ----
    let spectral = SpectralLoss::new(&disc.cfg.resolutions);
    let mut ggrads = gen.zeroed_clone();
    for ((grid, real), fake) in batch.iter().zip(&fakes) {
        let (adv, fm, dwave_gan) =
            gen_gan_grads(disc, &real.samples, &fake.wave, weights, 1.0 / n_items);
        let (recon, dwave_recon) = spectral.loss_and_grad(&fake.wave, &real.samples, true);
        losses.gen_adversarial += adv / n_items;
        losses.gen_feature_matching += fm / n_items;
        losses.gen_reconstruction += recon / n_items;
        let w_recon = T::from_f64(weights.reconstruction / n_items);
        let mut dwave = dwave_gan;
        for (d, r) in dwave.iter_mut().zip(dwave_recon) {
            *d += r * w_recon;
        }
        gen.backward(grid, fake, &dwave, &mut ggrads);
    }
    losses.gen_total = weights.adversarial * losses.gen_adversarial
        + weights.feature_matching * losses.gen_feature_matching
        + weights.reconstruction * losses.gen_reconstruction;
    adam_g.update(gen, &mut ggrads);
    Ok(losses)
}

/// LSGAN discriminator loss over all branches; accumulates disc grads.
fn disc_loss_and_grads<T: Scalar>(
    disc: &VocoderDiscriminators<T>,
    real: &[T],
    fake: &[T],
    grads: &mut VocoderDiscriminators<T>,
    scale: f64,
) -> (f64, f64, f64) {
    let mut loss = 0.0f64;
    let mut real_mean = 0.0f64;
    let mut fake_mean = 0.0f64;
    let n_branches = (disc.mpd.len() + disc.mrd.len()) as f64;
    let one = T::one();
    for (bi, d) in disc.mpd.iter().enumerate() {
        let tr = d.forward(real);
        let tf = d.forward(fake);
        real_mean += mean_score(&tr.score) / n_branches;
        fake_mean += mean_score(&tf.score) / n_branches;
        let n_r = tr.score.data.len() as f64;
        let n_f = tf.score.data.len() as f64;
        let mut ds_r = tr.score.clone();
        for v in ds_r.data.iter_mut() {
            loss += (v.as_f64() - 1.0).powi(2) / n_r;
            *v = T::from_f64(2.0 * scale / n_r) * (*v - one);
        }
        let mut ds_f = tf.score.clone();
        for v in ds_f.data.iter_mut() {
            loss += v.as_f64().powi(2) / n_f;
            *v = T::from_f64(2.0 * scale / n_f) * *v;
        }
        d.backward(&tr, &ds_r, None, &mut grads.mpd[bi]);
        d.backward(&tf, &ds_f, None, &mut grads.mpd[bi]);
    }
    for (bi, d) in disc.mrd.iter().enumerate() {
        let tr = d.forward(real);
        let tf = d.forward(fake);
        real_mean += mean_score(&tr.score) / n_branches;
        fake_mean += mean_score(&tf.score) / n_branches;
        let n_r = tr.score.data.len() as f64;
        let n_f = tf.score.data.len() as f64;
        let mut ds_r = tr.score.clone();
        for v in ds_r.data.iter_mut() {
            loss += (v.as_f64() - 1.0).powi(2) / n_r;
            *v = T::from_f64(2.0 * scale / n_r) * (*v - one);
        }
        let mut ds_f = tf.score.clone();
        for v in ds_f.data.iter_mut() {
            loss += v.as_f64().powi(2) / n_f;
            *v = T::from_f64(2.0 * scale / n_f) * *v;
        }
        d.backward(&tr, &ds_r, None, &mut grads.mrd[bi]);
        d.backward(&tf, &ds_f, None, &mut grads.mrd[bi]);
    }
    (loss, real_mean, fake_mean)
}

/// Generator-side adversarial + feature-matching losses; returns the
/// waveform gradient of `weights.adversarial * adv + weights.fm * fm`
/// scaled by `scale` (discriminator weights stay frozen).
fn gen_gan_grads<T: Scalar>(
    disc: &VocoderDiscriminators<T>,
    real: &[T],
    fake: &[T],
    weights: &LossWeights,
    scale: f64,
) -> (f64, f64, Vec<T>) {
    let mut adv = 0.0f64;
    let mut fm = 0.0f64;
    let mut dwave = vec![T::zero(); fake.len()];
    let one = T::one();
    let mut scratch_mpd: Vec<PeriodDisc<T>> = disc.mpd.iter().map(PeriodDisc::zeros_like).collect();
    let mut scratch_mrd: Vec<ResolutionDisc<T>> =
        disc.mrd.iter().map(ResolutionDisc::zeros_like).collect();

    for (bi, d) in disc.mpd.iter().enumerate() {
        let tr = d.forward(real);
        let tf = d.forward(fake);
        let n_f = tf.score.data.len() as f64;
        let mut ds = tf.score.clone();
        for v in ds.data.iter_mut() {
            adv += (v.as_f64() - 1.0).powi(2) / n_f;
            *v = T::from_f64(2.0 * weights.adversarial * scale / n_f) * (*v - one);
        }
        let (fm_b, dfeats) = feature_matching(&tr.feats, &tf.feats, weights.feature_matching * scale);
        fm += fm_b;
        let dw = d.backward(&tf, &ds, Some(&dfeats), &mut scratch_mpd[bi]);
        for (a, b) in dwave.iter_mut().zip(dw) {
            *a += b;
        }
    }
    for (bi, d) in disc.mrd.iter().enumerate() {
        let tr = d.forward(real);
        let tf = d.forward(fake);
        let n_f = tf.score.data.len() as f64;
        let mut ds = tf.score.clone();
        for v in ds.data.iter_mut() {
            adv += (v.as_f64() - 1.0).powi(2) / n_f;
            *v = T::from_f64(2.0 * weights.adversarial * scale / n_f) * (*v - one);
        }
        let (fm_b, dfeats) = feature_matching(&tr.feats, &tf.feats, weights.feature_matching * scale);
        fm += fm_b;
        let dw = d.backward(&tf, &ds, Some(&dfeats), &mut scratch_mrd[bi]);
        for (a, b) in dwave.iter_mut().zip(dw) {
            *a += b;
        }
    }
    (adv, fm, dwave)
}

/// L1 feature matching between real and fake feature maps; returns the loss
/// plus per-map gradients w.r.t. the fake features (scaled).
fn feature_matching<T: Scalar>(
    real: &[Grid2<T>],
    fake: &[Grid2<T>],
    scaled_weight: f64,
) -> (f64, Vec<Grid2<T>>) {
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(fake.len());
    let n_layers = fake.len() as f64;
    for (fr, ff) in real.iter().zip(fake) {
        let n = ff.data.len() as f64;
        let mut g = Grid2::zeros(ff.c, ff.h, ff.w);
        for i in 0..ff.data.len() {
            let diff = ff.data[i].as_f64() - fr.data[i].as_f64();
            loss += diff.abs() / n / n_layers;
            g.data[i] = T::from_f64(diff.signum() * scaled_weight / n / n_layers);
        }
        grads.push(g);
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use rand::Rng;

    fn random_grid(t: usize, c: usize, v: u32, seed: u64) -> AcousticUnitGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AcousticUnitGrid::from_codes((0..t * c).map(|_| rng.random_range(0..v)).collect(), c, v)
    }

    fn tiny_disc_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            periods: vec![2, 3],
            resolutions: vec![(128, 32), (256, 64)],
            channels: vec![1, 4, 8],
            leaky_slope: 0.1,
        }
    }

    fn clip(seed: u64, len: usize) -> Waveform<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0: f64 = rng.random_range(100.0..250.0);
        let samples = (0..len)
            .map(|i| {
                let t = i as f64 / 16000.0;
                (0.4 * (std::f64::consts::TAU * f0 * t).sin()
                    + 0.2 * (std::f64::consts::TAU * 2.0 * f0 * t).sin()) as f32
            })
            .collect();
        Waveform::new(samples, crate::SAMPLE_RATE)
    }

    #[test]
    fn discriminate_rejects_empty_and_scores_are_finite() {
        let disc = VocoderDiscriminators::<f32>::new(tiny_disc_cfg(), 1);
        assert!(matches!(
            disc.discriminate(&Waveform::new(vec![], crate::SAMPLE_RATE)),
            Err(VocoderError::EmptyWave)
        ));
        let outs = disc.discriminate(&clip(3, 2000)).unwrap();
        assert_eq!(outs.len(), 4);
        for o in outs {
            assert!(o.score.data.iter().all(|v| v.is_finite()));
            assert_eq!(o.feats.len(), 3); // 2 convs + score map
        }
    }

    #[test]
    fn losses_finite_at_init_and_lengths_checked() {
        let mut gen = VocoderGenerator::<f32>::new(VocoderConfig::desk(2, 8), 2).unwrap();
        let mut disc = VocoderDiscriminators::<f32>::new(tiny_disc_cfg(), 3);
        let grid = random_grid(10, 2, 8, 4);
        let wave = clip(5, 3200);
        let mut adam_g = Adam::new(&gen, AdamConfig::default());
        let mut adam_d = Adam::new(&disc, AdamConfig::default());
        let losses = vocoder_train_step(
            &mut gen,
            &mut disc,
            &[(&grid, &wave)],
            &LossWeights::default(),
            &mut adam_g,
            &mut adam_d,
        )
        .unwrap();
        assert!(losses.disc_loss.is_finite());
        assert!(losses.gen_total.is_finite());

        let short = clip(6, 3000);
        assert!(matches!(
            vocoder_train_step(
                &mut gen,
                &mut disc,
                &[(&grid, &short)],
                &LossWeights::default(),
                &mut adam_g,
                &mut adam_d,
            ),
            Err(VocoderError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn discriminator_learns_to_separate_with_frozen_generator() {
        let gen = VocoderGenerator::<f32>::new(VocoderConfig::desk(2, 8), 7).unwrap();
        let mut disc = VocoderDiscriminators::<f32>::new(tiny_disc_cfg(), 8);
        let clips: Vec<(AcousticUnitGrid, Waveform<f32>)> = (0..4)
            .map(|i| (random_grid(10, 2, 8, 20 + i), clip(30 + i, 3200)))
            .collect();
        let fakes: Vec<Vec<f32>> = clips
            .iter()
            .map(|(g, _)| gen.forward_trace(g).unwrap().wave)
            .collect();
        let mut adam_d = Adam::new(
            &disc,
            AdamConfig {
                lr: 2e-4,
                warmup_steps: 0,
                ..Default::default()
            },
        );
        let mut last = (0.0, 0.0);
        for _ in 0..200 {
            let mut grads = disc.zeroed_clone();
            let mut rs = 0.0;
            let mut fs = 0.0;
            for ((_, real), fake) in clips.iter().zip(&fakes) {
                let (_, r, f) = disc_loss_and_grads(&disc, &real.samples, fake, &mut grads, 0.25);
                rs += r / 4.0;
                fs += f / 4.0;
            }
            adam_d.update(&mut disc, &mut grads);
            last = (rs, fs);
        }
        assert!(
            last.0 > last.1,
            "real mean {} should exceed fake mean {}",
            last.0,
            last.1
        );
    }

    #[test]
    fn spectral_loss_is_zero_for_identical_and_positive_otherwise() {
        let sl = SpectralLoss::<f32>::new(&[(128, 32)]);
        let a = clip(1, 2000);
        let b = clip(2, 2000);
        assert!(sl.loss(&a.samples, &a.samples).abs() < 1e-9);
        assert!(sl.loss(&a.samples, &b.samples) > 0.01);
    }

    #[test]
    fn one_clip_training_reduces_reconstruction_loss() {
        // fast smoke version of the overfit oracle (the full 3000-step run
        // lives in the acceptance suite)
        let mut gen = VocoderGenerator::<f32>::new(
            VocoderConfig {
                channels: vec![32, 16, 8, 8, 8],
                ..VocoderConfig::desk(2, 8)
            },
            11,
        )
        .unwrap();
        let mut disc = VocoderDiscriminators::<f32>::new(tiny_disc_cfg(), 12);
        let grid = random_grid(8, 2, 8, 13);
        let wave = clip(14, 8 * 320);
        let mut adam_g = Adam::new(
            &gen,
            AdamConfig {
                lr: 2e-4,
                warmup_steps: 0,
                ..Default::default()
            },
        );
        let mut adam_d = Adam::new(
            &disc,
            AdamConfig {
                lr: 2e-4,
                warmup_steps: 0,
                ..Default::default()
            },
        );
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let l = vocoder_train_step(
                &mut gen,
                &mut disc,
                &[(&grid, &wave)],
                &LossWeights::default(),
                &mut adam_g,
                &mut adam_d,
            )
            .unwrap();
            first.get_or_insert(l.gen_reconstruction);
            last = l.gen_reconstruction;
        }
        let first = first.unwrap();
        assert!(
            last < first,
            "reconstruction loss should fall: {first} -> {last}"
        );
    }
}
