//! Frame-level spectral features for the semantic-unit pathway: 20 ms hop,
//! log-magnitude mel-spaced bands. Stands in for a pretrained
//! self-supervised extractor behind the same framing contract.

use crate::audio::Waveform;
use crate::dsp::{hann, Fft, Filterbank};
use crate::mat::Mat;
use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Analysis window in samples (40 ms at 16 kHz).
pub const WINDOW: usize = 640;
/// Analysis hop in samples; equals the codec hop so both unit streams run
/// at 50 Hz.
pub const FRAME_HOP: usize = crate::HOP;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureConfig {
    pub n_bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Energies are floored before the log.
    pub floor: f64,
    pub fft_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_bands: 32,
            // Bands start above the pitch range so the features (and the
            // semantic units derived from them) carry content rather than
            // speaker fundamental.
            fmin: 300.0,
            fmax: 7600.0,
            floor: 1e-10,
            fft_size: 1024,
        }
    }
}

/// T_f x D feature matrix at [`FRAME_HOP`].
#[derive(Clone, Debug)]
pub struct FeatureFrames<T> {
    pub frames: Mat<T>,
    pub frame_hop: usize,
}

impl<T: Scalar> FeatureFrames<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Reusable extractor (FFT plan + filterbank).
pub struct FeatureExtractor<T> {
    cfg: FeatureConfig,
    fft: Fft<T>,
    bank: Filterbank<T>,
    window: Vec<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(cfg: FeatureConfig) -> Self {
        let fft = Fft::new(cfg.fft_size);
        let bank = Filterbank::mel(cfg.n_bands, cfg.fmin, cfg.fmax, crate::SAMPLE_RATE, cfg.fft_size);
        Self {
            window: hann(WINDOW),
            cfg,
            fft,
            bank,
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Number of frames for a waveform of `len` samples.
    pub fn frame_count(len: usize) -> usize {
        if len < WINDOW {
            0
        } else {
            (len - WINDOW) / FRAME_HOP + 1
        }
    }

    pub fn extract(&self, w: &Waveform<T>) -> FeatureFrames<T> {
        let n = Self::frame_count(w.len());
        let mut frames = Mat::zeros(n, self.cfg.n_bands);
        let floor = T::from_f64(self.cfg.floor);
        let mut buf = vec![T::zero(); WINDOW];
        for t in 0..n {
            let start = t * FRAME_HOP;
            for (b, (s, w_i)) in buf
                .iter_mut()
                .zip(w.samples[start..start + WINDOW].iter().zip(&self.window))
            {
                *b = *s * *w_i;
            }
            let power = self.fft.power_spectrum(&buf);
            let energies = self.bank.apply(&power);
            let row = frames.row_mut(t);
            for (dst, e) in row.iter_mut().zip(energies) {
                *dst = e.max(floor).ln();
            }
        }
        FeatureFrames {
            frames,
            frame_hop: FRAME_HOP,
        }
    }
}

/// Convenience wrapper building a fresh extractor.
pub fn extract_features<T: Scalar>(w: &Waveform<T>, cfg: &FeatureConfig) -> FeatureFrames<T> {
    FeatureExtractor::new(cfg.clone()).extract(w)
}

/// Per-utterance, per-band mean subtraction. Applied on the semantic path
/// before quantization: a speaker's average spectral tilt is an additive
/// per-band offset in the log domain, so removing the utterance mean leaves
/// mostly content variation.
pub fn mean_normalize<T: Scalar>(frames: &FeatureFrames<T>) -> FeatureFrames<T> {
    let n = frames.n_frames();
    let d = frames.dim();
    let mut out = frames.frames.clone();
    if n == 0 {
        return FeatureFrames {
            frames: out,
            frame_hop: frames.frame_hop,
        };
    }
    let mut mean = vec![T::zero(); d];
    for t in 0..n {
        for (m, v) in mean.iter_mut().zip(frames.frames.row(t)) {
            *m += *v;
        }
    }
    let inv = T::from_f64(1.0 / n as f64);
    for m in &mut mean {
        *m *= inv;
    }
    for t in 0..n {
        for (v, m) in out.row_mut(t).iter_mut().zip(&mean) {
            *v -= *m;
        }
    }
    FeatureFrames {
        frames: out,
        frame_hop: frames.frame_hop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f64>) -> Waveform<f64> {
        Waveform::new(samples, crate::SAMPLE_RATE)
    }

    #[test]
    fn one_second_gives_49_frames() {
        let w = wave(vec![0.1; 16_000]);
        let f = extract_features(&w, &FeatureConfig::default());
        assert_eq!(f.n_frames(), 49); // floor((16000-640)/320)+1
        assert_eq!(f.dim(), 32);
    }

    #[test]
    fn shorter_than_window_gives_zero_frames() {
        let w = wave(vec![0.5; 639]);
        let f = extract_features(&w, &FeatureConfig::default());
        assert_eq!(f.n_frames(), 0);
    }

    #[test]
    fn all_zero_waveform_hits_the_log_floor() {
        let cfg = FeatureConfig::default();
        let w = wave(vec![0.0; 3200]);
        let f = extract_features(&w, &cfg);
        let expect = cfg.floor.ln();
        for t in 0..f.n_frames() {
            for v in f.frames.row(t) {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_preserves_prefix_frames() {
        let single: Vec<f64> = (0..4800)
            .map(|i| (i as f64 * 0.05).sin() * 0.3 + (i as f64 * 0.013).cos() * 0.2)
            .collect();
        let mut double = single.clone();
        double.extend_from_slice(&single);
        let cfg = FeatureConfig::default();
        let fs = extract_features(&wave(single), &cfg);
        let fd = extract_features(&wave(double), &cfg);
        for t in 0..fs.n_frames() {
            for (a, b) in fs.frames.row(t).iter().zip(fd.frames.row(t)) {
                assert_eq!(a, b, "frame {t} differs");
            }
        }
    }

    #[test]
    fn mean_normalize_zeroes_band_means() {
        let w = wave((0..8000).map(|i| (i as f64 * 0.21).sin() * 0.4).collect());
        let f = extract_features(&w, &FeatureConfig::default());
        let n = mean_normalize(&f);
        for b in 0..n.dim() {
            let mean: f64 = (0..n.n_frames()).map(|t| n.frames.get(t, b)).sum::<f64>()
                / n.n_frames() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }
}
