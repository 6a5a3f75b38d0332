//! Parametric speaker renderer. A speaker is a harmonic source (base pitch
//! plus relative harmonic amplitudes); a phone is a formant-like spectral
//! filter applied to that source. Rendering is a pure function of
//! (profile, phones), with micro-variation driven only by `jitter_seed`.

use super::{AudioError, Waveform};
use crate::Scalar;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Number of speaker-controlled harmonics.
pub const HARMONICS: usize = 8;
/// Size of the phone alphabet.
pub const PHONE_COUNT: u8 = 24;

/// Crossfade between adjacent phones, in samples at 16 kHz (5 ms).
const FADE_SAMPLES: usize = 80;
/// Highest rendered partial frequency in Hz.
const MAX_PARTIAL_HZ: f64 = 7400.0;
/// Additive floor of every phone filter.
const FILTER_FLOOR: f64 = 0.04;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_f0: f64,
    pub harmonic_env: Vec<f64>,
    pub jitter_seed: u64,
}

impl SpeakerProfile {
    pub fn validate(&self) -> Result<(), AudioError> {
        if !(90.0..=300.0).contains(&self.base_f0) {
            return Err(AudioError::BadProfile(format!(
                "base_f0 {} outside [90, 300]",
                self.base_f0
            )));
        }
        if self.harmonic_env.len() != HARMONICS {
            return Err(AudioError::BadProfile(format!(
                "harmonic_env has {} entries, expected {HARMONICS}",
                self.harmonic_env.len()
            )));
        }
        if (self.harmonic_env[0] - 1.0).abs() > 1e-12 {
            return Err(AudioError::BadProfile(
                "harmonic_env[0] must be 1 (normalized to fundamental)".into(),
            ));
        }
        if self.harmonic_env.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(AudioError::BadProfile("harmonic_env entry outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone_id: u8,
    pub duration_ms: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSeq {
    pub phones: Vec<PhoneSegment>,
}

impl PhoneSeq {
    pub fn new(phones: Vec<PhoneSegment>) -> Self {
        Self { phones }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        for p in &self.phones {
            if p.phone_id >= PHONE_COUNT {
                return Err(AudioError::BadPhoneId {
                    id: p.phone_id,
                    max: PHONE_COUNT,
                });
            }
            if p.duration_ms == 0 || p.duration_ms % 20 != 0 {
                return Err(AudioError::BadPhoneDuration { ms: p.duration_ms });
            }
        }
        Ok(())
    }

    pub fn total_ms(&self) -> u64 {
        self.phones.iter().map(|p| p.duration_ms as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }
}

/// One formant resonance: (center Hz, width Hz, gain).
type Formant = (f64, f64, f64);

struct PhoneSpec {
    formants: [Formant; 3],
}

fn phone_table() -> &'static Vec<PhoneSpec> {
    static TABLE: OnceLock<Vec<PhoneSpec>> = OnceLock::new();
    TABLE.get_or_init(|| {
        // Fixed seed: the phone alphabet is a global constant of the domain.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5045_4f4e_4553);
        (0..PHONE_COUNT)
            .map(|_| {
                let c1 = rng.random_range(260.0..880.0);
                let c2 = rng.random_range(950.0..2450.0);
                let c3 = rng.random_range(2600.0..5800.0);
                let spec = |c: f64, g: f64| (c, c * 0.12 + 40.0, g);
                PhoneSpec {
                    formants: [
                        spec(c1, rng.random_range(0.7..1.0)),
                        spec(c2, rng.random_range(0.5..0.9)),
                        spec(c3, rng.random_range(0.35..0.8)),
                    ],
                }
            })
            .collect()
    })
}

/// Filter gain of `phone_id` at frequency `hz`.
pub fn phone_filter_gain(phone_id: u8, hz: f64) -> f64 {
    let spec = &phone_table()[phone_id as usize];
    let mut g = FILTER_FLOOR;
    for &(c, sigma, amp) in &spec.formants {
        let d = (hz - c) / sigma;
        g += amp * (-0.5 * d * d).exp();
    }
    g
}

/// Amplitude of partial `h` (1-based) for a speaker envelope: the first
/// [`HARMONICS`] partials follow the envelope, higher partials continue the
/// last envelope value with a 1/h rolloff.
fn partial_amplitude(env: &[f64], h: usize) -> f64 {
    if h <= HARMONICS {
        env[h - 1]
    } else {
        env[HARMONICS - 1] * HARMONICS as f64 / h as f64
    }
}

pub fn render_utterance<T: Scalar>(
    profile: &SpeakerProfile,
    phones: &PhoneSeq,
    sample_rate: u32,
) -> Result<Waveform<T>, AudioError> {
    profile.validate()?;
    phones.validate()?;

    let total_ms = phones.total_ms();
    let exact = total_ms * sample_rate as u64;
    if exact % 1000 != 0 {
        return Err(AudioError::InexactDuration {
            ms: total_ms,
            rate: sample_rate,
        });
    }
    let n_samples = (exact / 1000) as usize;
    if n_samples == 0 {
        return Ok(Waveform::new(vec![], sample_rate));
    }

    let sr = sample_rate as f64;
    let n_partials = (MAX_PARTIAL_HZ / (profile.base_f0 * 1.005)).floor() as usize;
    let n_partials = n_partials.max(1);

    // Per-(phone, partial) static gains at the speaker's harmonic grid.
    let phone_ids: Vec<u8> = phones.phones.iter().map(|p| p.phone_id).collect();
    let mut seg_gain = vec![vec![0.0f64; n_partials]; phone_ids.len()];
    for (s, &pid) in phone_ids.iter().enumerate() {
        for h in 1..=n_partials {
            seg_gain[s][h - 1] =
                partial_amplitude(&profile.harmonic_env, h) * phone_filter_gain(pid, h as f64 * profile.base_f0);
        }
    }

    // Content-independent normalization bound: sum over partials of the
    // maximum gain any phone gives that partial.
    let mut bound = 0.0f64;
    for h in 1..=n_partials {
        let amp = partial_amplitude(&profile.harmonic_env, h);
        let mut g = 0.0f64;
        for pid in 0..PHONE_COUNT {
            g = g.max(amp * phone_filter_gain(pid, h as f64 * profile.base_f0));
        }
        bound += g;
    }
    let scale = 0.85 / bound.max(1e-9);

    // Seeded initial phases and jitter LFO phases.
    let mut rng = ChaCha8Rng::seed_from_u64(profile.jitter_seed);
    let mut phase_re: Vec<f64> = Vec::with_capacity(n_partials);
    let mut phase_im: Vec<f64> = Vec::with_capacity(n_partials);
    for _ in 0..n_partials {
        let p: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        phase_re.push(p.cos());
        phase_im.push(p.sin());
    }
    let lfo1: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let lfo2: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    // Segment boundaries in samples.
    let mut seg_start = Vec::with_capacity(phone_ids.len());
    let mut acc = 0usize;
    for p in &phones.phones {
        seg_start.push(acc);
        acc += (p.duration_ms as u64 * sample_rate as u64 / 1000) as usize;
    }

    let mut out = vec![0.0f64; n_samples];
    let mut seg = 0usize;
    let mut t = 0usize;
    // f0 is held constant within each 5 ms block; partial phasors rotate by
    // a per-block step and are renormalized to stop magnitude drift.
    while t < n_samples {
        let block = FADE_SAMPLES.min(n_samples - t);
        let tau = t as f64 / sr;
        let jitter = 0.004
            * (0.6 * (std::f64::consts::TAU * 3.1 * tau + lfo1).sin()
                + 0.4 * (std::f64::consts::TAU * 5.7 * tau + lfo2).sin());
        let f0 = profile.base_f0 * (1.0 + jitter);
        let base_step = std::f64::consts::TAU * f0 / sr;

        // advance segment index to the block start
        while seg + 1 < seg_start.len() && t >= seg_start[seg + 1] {
            seg += 1;
        }

        for h in 0..n_partials {
            let ang = base_step * (h + 1) as f64;
            let (step_re, step_im) = (ang.cos(), ang.sin());
            let g_cur = seg_gain[seg][h];
            let g_prev = if seg == 0 { 0.0 } else { seg_gain[seg - 1][h] };
            let mut re = phase_re[h];
            let mut im = phase_im[h];
            for i in 0..block {
                let n = t + i;
                // gain: 5 ms linear ramp at the start of each phone
                // (fade-in from silence for the first phone), plus a final
                // fade-out so the utterance ends without a click.
                let into = n - seg_start[seg];
                let mut g = if into < FADE_SAMPLES {
                    let a = into as f64 / FADE_SAMPLES as f64;
                    g_prev + (g_cur - g_prev) * a
                } else {
                    g_cur
                };
                let left = n_samples - n;
                if left <= FADE_SAMPLES {
                    g *= left as f64 / FADE_SAMPLES as f64;
                }
                out[n] += g * im;
                let nre = re * step_re - im * step_im;
                let nim = re * step_im + im * step_re;
                re = nre;
                im = nim;
            }
            // renormalize the phasor
            let mag = (re * re + im * im).sqrt();
            if mag > 0.0 {
                re /= mag;
                im /= mag;
            }
            phase_re[h] = re;
            phase_im[h] = im;
        }
        t += block;
    }

    let samples = out.into_iter().map(|v| T::from_f64(v * scale)).collect();
    Ok(Waveform::new(samples, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent autocorrelation pitch oracle (test-only): normalized
    /// autocorrelation over the whole signal, parabolic peak interpolation.
    pub(crate) fn autocorr_pitch(samples: &[f64], sample_rate: u32) -> Option<f64> {
        let n = samples.len().min(8000);
        if n < 400 {
            return None;
        }
        let x = &samples[..n];
        let lag_min = (sample_rate as f64 / 400.0) as usize;
        let lag_max = (sample_rate as f64 / 70.0) as usize;
        let e0: f64 = x.iter().map(|v| v * v).sum();
        if e0 <= 0.0 {
            return None;
        }
        let mut best = (0usize, f64::MIN);
        let mut corr = vec![0.0f64; lag_max + 2];
        for lag in lag_min..=lag_max + 1 {
            let mut c = 0.0;
            for i in 0..n - lag {
                c += x[i] * x[i + lag];
            }
            corr[lag] = c / e0;
            if lag <= lag_max && corr[lag] > best.1 {
                best = (lag, corr[lag]);
            }
        }
        let l = best.0;
        if l == 0 || l <= lag_min {
            return None;
        }
        let (a, b, c) = (corr[l - 1], corr[l], corr[l + 1]);
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
        Some(sample_rate as f64 / (l as f64 + delta))
    }

    fn profile(f0: f64, seed: u64) -> SpeakerProfile {
        SpeakerProfile {
            speaker_id: format!("spk{f0}"),
            base_f0: f0,
            harmonic_env: vec![1.0, 0.8, 0.65, 0.5, 0.45, 0.35, 0.3, 0.25],
            jitter_seed: seed,
        }
    }

    fn seq(ids: &[u8], ms: u32) -> PhoneSeq {
        PhoneSeq::new(ids.iter().map(|&phone_id| PhoneSegment { phone_id, duration_ms: ms }).collect())
    }

    #[test]
    fn empty_phone_list_gives_zero_samples() {
        let w: Waveform<f64> = render_utterance(&profile(150.0, 1), &PhoneSeq::default(), 16_000).unwrap();
        assert_eq!(w.len(), 0);
    }

    #[test]
    fn one_phone_100ms_gives_1600_samples() {
        let w: Waveform<f64> = render_utterance(&profile(150.0, 1), &seq(&[3], 100), 16_000).unwrap();
        assert_eq!(w.len(), 1600);
    }

    #[test]
    fn non_multiple_of_20ms_rejected() {
        let s = PhoneSeq::new(vec![PhoneSegment { phone_id: 0, duration_ms: 30 }]);
        assert!(matches!(
            render_utterance::<f64>(&profile(150.0, 1), &s, 16_000),
            Err(AudioError::BadPhoneDuration { ms: 30 })
        ));
    }

    #[test]
    fn deterministic_for_fixed_inputs() {
        let p = profile(180.0, 42);
        let s = seq(&[1, 5, 9], 200);
        let a: Waveform<f64> = render_utterance(&p, &s, 16_000).unwrap();
        let b: Waveform<f64> = render_utterance(&p, &s, 16_000).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn rendered_pitch_tracks_each_profile() {
        let s = seq(&[2, 7, 11, 4], 300);
        for (f0, seed) in [(110.0, 7), (170.0, 8), (240.0, 9)] {
            let w: Waveform<f64> = render_utterance(&profile(f0, seed), &s, 16_000).unwrap();
            let est = autocorr_pitch(&w.samples, 16_000).expect("voiced");
            assert!(
                (est - f0).abs() <= 3.0,
                "estimated {est:.2} Hz for base {f0} Hz"
            );
        }
    }

    #[test]
    fn samples_stay_in_range() {
        let w: Waveform<f64> = render_utterance(&profile(95.0, 3), &seq(&[0, 23, 12], 240), 16_000).unwrap();
        assert!(w.samples.iter().all(|v| v.abs() <= 1.0));
        assert!(w.rms() > 1e-3, "audible signal expected");
    }

    #[test]
    fn different_speakers_differ_in_waveform() {
        let s = seq(&[2, 7], 200);
        let a: Waveform<f64> = render_utterance(&profile(120.0, 5), &s, 16_000).unwrap();
        let b: Waveform<f64> = render_utterance(&profile(125.0, 5), &s, 16_000).unwrap();
        assert_ne!(a.samples, b.samples);
    }
}
