//! Shared signal-processing primitives: a radix-2 FFT, analysis windows,
//! and band filterbanks used by the feature extractors, the codec and the
//! multi-resolution discriminator.

use crate::Scalar;

/// Iterative radix-2 FFT plan for a fixed power-of-two size.
pub struct Fft<T> {
    n: usize,
    // twiddle[s] holds the factors for the stage with half-size 2^s
    twiddles: Vec<Vec<(T, T)>>,
    bit_rev: Vec<usize>,
}

impl<T: Scalar> Fft<T> {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2, "fft size must be 2^k >= 2");
        let stages = n.trailing_zeros() as usize;
        let mut twiddles = Vec::with_capacity(stages);
        for s in 0..stages {
            let half = 1usize << s;
            let step = std::f64::consts::PI / half as f64;
            let tw: Vec<(T, T)> = (0..half)
                .map(|j| {
                    let ang = -(j as f64) * step;
                    (T::from_f64(ang.cos()), T::from_f64(ang.sin()))
                })
                .collect();
            twiddles.push(tw);
        }
        let mut bit_rev = vec![0usize; n];
        let bits = stages;
        for (i, r) in bit_rev.iter_mut().enumerate() {
            *r = i.reverse_bits() >> (usize::BITS as usize - bits);
        }
        Self {
            n,
            twiddles,
            bit_rev,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place transform. `inverse` flips the twiddle sign but applies no
    /// 1/N normalization; callers that need a true inverse divide by N.
    pub fn transform(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        assert_eq!(re.len(), self.n);
        assert_eq!(im.len(), self.n);
        for i in 0..self.n {
            let j = self.bit_rev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        for tw in &self.twiddles {
            let half = tw.len();
            let full = half * 2;
            let mut base = 0;
            while base < self.n {
                for j in 0..half {
                    let (mut wr, mut wi) = tw[j];
                    if inverse {
                        wi = -wi;
                    }
                    let a = base + j;
                    let b = a + half;
                    let tr = wr * re[b] - wi * im[b];
                    let ti = wr * im[b] + wi * re[b];
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] = re[a] + tr;
                    im[a] = im[a] + ti;
                    // silence unused-assignment lint on wr
                    let _ = &mut wr;
                }
                base += full;
            }
        }
    }

    /// Magnitude-squared spectrum of a real frame zero-padded to the FFT
    /// size; returns the n/2+1 non-negative-frequency bins.
    pub fn power_spectrum(&self, frame: &[T]) -> Vec<T> {
        assert!(frame.len() <= self.n);
        let mut re = vec![T::zero(); self.n];
        let mut im = vec![T::zero(); self.n];
        re[..frame.len()].copy_from_slice(frame);
        self.transform(&mut re, &mut im, false);
        (0..=self.n / 2)
            .map(|k| re[k] * re[k] + im[k] * im[k])
            .collect()
    }
}

/// Periodic Hann window; sums to one when overlap-added at hop n/2.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            T::from_f64(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular band filterbank over FFT power bins.
pub struct Filterbank<T> {
    /// Per band: first bin index plus triangle weights.
    bands: Vec<(usize, Vec<T>)>,
    /// Band center frequencies in Hz (used by the sinusoidal resynthesis).
    centers: Vec<f64>,
    n_bins: usize,
}

impl<T: Scalar> Filterbank<T> {
    /// Builds triangles from a list of `n_bands + 2` edge frequencies.
    pub fn from_edges(edges: &[f64], sample_rate: u32, fft_size: usize) -> Self {
        assert!(edges.len() >= 3, "need at least one band");
        let n_bins = fft_size / 2 + 1;
        let hz_per_bin = sample_rate as f64 / fft_size as f64;
        let n_bands = edges.len() - 2;
        let mut bands = Vec::with_capacity(n_bands);
        let mut centers = Vec::with_capacity(n_bands);
        for b in 0..n_bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            centers.push(mid);
            let first = (lo / hz_per_bin).ceil() as usize;
            let last = ((hi / hz_per_bin).floor() as usize).min(n_bins - 1);
            let mut w = Vec::new();
            for k in first..=last {
                let f = k as f64 * hz_per_bin;
                let v = if f <= mid {
                    if mid > lo {
                        (f - lo) / (mid - lo)
                    } else {
                        0.0
                    }
                } else if hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                w.push(T::from_f64(v.max(0.0)));
            }
            bands.push((first, w));
        }
        Self {
            bands,
            centers,
            n_bins,
        }
    }

    /// Mel-spaced bank between `fmin` and `fmax`.
    pub fn mel(n_bands: usize, fmin: f64, fmax: f64, sample_rate: u32, fft_size: usize) -> Self {
        let m0 = hz_to_mel(fmin);
        let m1 = hz_to_mel(fmax);
        let edges: Vec<f64> = (0..n_bands + 2)
            .map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / (n_bands + 1) as f64))
            .collect();
        Self::from_edges(&edges, sample_rate, fft_size)
    }

    /// Codec bank: linearly spaced narrow bands over the pitch range, then
    /// mel-spaced bands up to `fmax`. The narrow low bands are what lets the
    /// acoustic units carry fundamental-frequency information.
    pub fn hybrid(
        n_linear: usize,
        linear_lo: f64,
        linear_hi: f64,
        n_mel: usize,
        fmax: f64,
        sample_rate: u32,
        fft_size: usize,
    ) -> Self {
        let step = (linear_hi - linear_lo) / (n_linear + 1) as f64;
        let mut edges: Vec<f64> = (0..=n_linear + 1)
            .map(|i| linear_lo + step * i as f64)
            .collect();
        let m0 = hz_to_mel(linear_hi);
        let m1 = hz_to_mel(fmax);
        for i in 1..=n_mel {
            edges.push(mel_to_hz(m0 + (m1 - m0) * i as f64 / n_mel as f64));
        }
        debug_assert_eq!(edges.len(), n_linear + n_mel + 2);
        Self::from_edges(&edges, sample_rate, fft_size)
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Band energies for one power spectrum.
    pub fn apply(&self, power: &[T]) -> Vec<T> {
        assert_eq!(power.len(), self.n_bins);
        self.bands
            .iter()
            .map(|(first, w)| {
                let mut acc = T::zero();
                for (i, &wk) in w.iter().enumerate() {
                    acc += wk * power[first + i];
                }
                acc
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() * 0.5 + (i as f64 * 0.13).cos()).collect();
        let fft = Fft::new(n);
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft.transform(&mut re, &mut im, false);
        for (k, (wr, wi)) in naive_dft(&x).into_iter().enumerate() {
            assert!((re[k] - wr).abs() < 1e-9, "re bin {k}");
            assert!((im[k] - wi).abs() < 1e-9, "im bin {k}");
        }
    }

    #[test]
    fn fft_inverse_round_trip() {
        let n = 128;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.5).collect();
        let fft = Fft::new(n);
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft.transform(&mut re, &mut im, false);
        fft.transform(&mut re, &mut im, true);
        for (a, b) in re.iter().zip(&x) {
            assert!((a / n as f64 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_energy_lands_in_its_band() {
        let fft = Fft::<f64>::new(1024);
        let bank = Filterbank::mel(16, 100.0, 7600.0, 16_000, 1024);
        // tone at the center of band 8
        let f = bank.centers()[8];
        let frame: Vec<f64> = (0..640)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
            .collect();
        let win = hann::<f64>(640);
        let windowed: Vec<f64> = frame.iter().zip(&win).map(|(a, b)| a * b).collect();
        let bands = bank.apply(&fft.power_spectrum(&windowed));
        let best = bands
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, 8);
    }

    #[test]
    fn hann_overlap_adds_to_one() {
        let w = hann::<f64>(640);
        for i in 0..320 {
            assert!((w[i] + w[i + 320] - 1.0).abs() < 1e-12);
        }
    }
}
