//! Deterministic speaker-timbre embedding: autocorrelation F0 statistics
//! concatenated with the long-term average spectral envelope, z-normalized
//! over a reference corpus. Stands in for a learned speaker encoder in the
//! similarity evaluation.

use crate::audio::Waveform;
use crate::dsp::{hann, Fft, Filterbank};
use crate::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimbreError {
    #[error("degenerate audio: {0}")]
    DegenerateAudio(String),
    #[error("normalizer fitted on {fitted} dims, embedding has {got}")]
    DimMismatch { fitted: usize, got: usize },
    #[error("normalizer needs at least 2 embeddings, got {0}")]
    NotEnoughData(usize),
}

const PITCH_WINDOW: usize = 640;
const PITCH_HOP: usize = 320;
const F0_MIN: f64 = 70.0;
const F0_MAX: f64 = 400.0;
/// Normalized autocorrelation peak below this is treated as unvoiced.
const VOICING_THRESHOLD: f64 = 0.35;
const ENV_BANDS: usize = 24;

/// Frame-level F0 track; `None` marks unvoiced or silent frames.
pub fn estimate_f0<T: Scalar>(w: &Waveform<T>) -> Vec<Option<f64>> {
    let sr = w.sample_rate as f64;
    let lag_min = (sr / F0_MAX).floor() as usize;
    let lag_max = (sr / F0_MIN).ceil() as usize;
    if w.len() < PITCH_WINDOW {
        return vec![];
    }
    let n_frames = (w.len() - PITCH_WINDOW) / PITCH_HOP + 1;
    let mut out = Vec::with_capacity(n_frames);
    let mut frame = vec![0.0f64; PITCH_WINDOW];
    for t in 0..n_frames {
        let start = t * PITCH_HOP;
        for (f, s) in frame.iter_mut().zip(&w.samples[start..start + PITCH_WINDOW]) {
            *f = s.as_f64();
        }
        // Low-pass before correlating: with only the low harmonics left the
        // correlation lobes are wide, so integer-lag peaks stay reliable
        // even when the true period is fractional.
        for _ in 0..3 {
            smooth5(&mut frame);
        }
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        if energy < 1e-8 {
            out.push(None);
            continue;
        }
        let mut best = (0usize, f64::MIN);
        let hi = lag_max.min(PITCH_WINDOW - 2);
        let mut corr = vec![0.0f64; hi + 2];
        for lag in lag_min..=hi + 1 {
            let mut num = 0.0;
            let mut e2 = 0.0;
            for i in 0..PITCH_WINDOW - lag {
                num += frame[i] * frame[i + lag];
                e2 += frame[i + lag] * frame[i + lag];
            }
            let e1: f64 = frame[..PITCH_WINDOW - lag].iter().map(|v| v * v).sum();
            let denom = (e1 * e2).sqrt();
            corr[lag] = if denom > 0.0 { num / denom } else { 0.0 };
            if lag <= hi && corr[lag] > best.1 {
                best = (lag, corr[lag]);
            }
        }
        if best.1 < VOICING_THRESHOLD || best.0 <= lag_min {
            out.push(None);
            continue;
        }
        // Octave guard. A fractional true period makes the integer lag at
        // a period MULTIPLE correlate better than the period itself, so
        // starting from the global peak, keep halving while the half-lag
        // neighborhood holds a peak of comparable height. A genuinely
        // period-doubled signal fails the height check and stops.
        let refine = |l: usize| -> (f64, f64) {
            let (a, b, c) = (corr[l - 1], corr[l], corr[l + 1]);
            let denom = a - 2.0 * b + c;
            if denom.abs() > 1e-12 {
                let delta = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
                (l as f64 + delta, b - 0.25 * (a - c) * delta)
            } else {
                (l as f64, b)
            }
        };
        let (pos0, h0) = refine(best.0.clamp(lag_min + 1, hi));
        let mut pos = pos0;
        let max_div = (pos0 / (lag_min + 1) as f64).floor() as usize;
        for k in 2..=max_div.max(1) {
            let cand = pos0 / k as f64;
            let center = cand.round() as usize;
            let mut found: Option<(f64, f64)> = None;
            for l in center.saturating_sub(2)..=(center + 2).min(hi) {
                if l <= lag_min {
                    continue;
                }
                if corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1] {
                    let (p, h) = refine(l);
                    if found.is_none_or(|(_, fh)| h > fh) {
                        found = Some((p, h));
                    }
                }
            }
            if let Some((p, h)) = found {
                if h >= h0 * 0.95 {
                    pos = p;
                }
            }
        }
        out.push(Some(sr / pos));
    }
    out
}

/// 5-point centered moving average (in place, edges clamped).
fn smooth5(x: &mut [f64]) {
    let n = x.len();
    if n < 5 {
        return;
    }
    let orig = x.to_vec();
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let mut s = 0.0;
        for v in &orig[lo..=hi] {
            s += v;
        }
        x[i] = s / (hi - lo + 1) as f64;
    }
}

/// Raw (un-normalized) timbre embedding: [f0 mean, f0 std, voiced ratio,
/// 24 long-term average log band energies].
pub fn raw_embedding<T: Scalar>(w: &Waveform<T>) -> Result<Vec<f64>, TimbreError> {
    if w.rms() < 1e-6 {
        return Err(TimbreError::DegenerateAudio(
            "zero-energy waveform".into(),
        ));
    }
    let track = estimate_f0(w);
    let voiced: Vec<f64> = track.iter().flatten().copied().collect();
    if voiced.is_empty() {
        return Err(TimbreError::DegenerateAudio("no voiced frames".into()));
    }
    let n = voiced.len() as f64;
    let mean = voiced.iter().sum::<f64>() / n;
    let var = voiced.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let voiced_ratio = n / track.len().max(1) as f64;

    // long-term average spectral envelope
    let fft = Fft::<f64>::new(1024);
    let bank = Filterbank::<f64>::mel(ENV_BANDS, 50.0, 7600.0, w.sample_rate, 1024);
    let window = hann::<f64>(PITCH_WINDOW);
    let n_frames = (w.len() - PITCH_WINDOW) / PITCH_HOP + 1;
    let mut env = vec![0.0f64; ENV_BANDS];
    let mut buf = vec![0.0f64; PITCH_WINDOW];
    for t in 0..n_frames {
        let start = t * PITCH_HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = w.samples[start + i].as_f64() * window[i];
        }
        let bands = bank.apply(&fft.power_spectrum(&buf));
        for (e, b) in env.iter_mut().zip(bands) {
            *e += b;
        }
    }
    let mut emb = vec![mean, var.sqrt(), voiced_ratio];
    for e in env {
        emb.push((e / n_frames as f64 + 1e-10).ln());
    }
    Ok(emb)
}

/// Z-normalization statistics fitted over a corpus of embeddings.
#[derive(Clone, Debug)]
pub struct TimbreNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TimbreNormalizer {
    pub fn fit(embeddings: &[Vec<f64>]) -> Result<Self, TimbreError> {
        if embeddings.len() < 2 {
            return Err(TimbreError::NotEnoughData(embeddings.len()));
        }
        let d = embeddings[0].len();
        let n = embeddings.len() as f64;
        let mut mean = vec![0.0; d];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for e in embeddings {
            for ((s, v), m) in std.iter_mut().zip(e).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt().max(1e-8);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, emb: &[f64]) -> Result<Vec<f64>, TimbreError> {
        if emb.len() != self.mean.len() {
            return Err(TimbreError::DimMismatch {
                fitted: self.mean.len(),
                got: emb.len(),
            });
        }
        Ok(emb
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine similarity of the z-normalized timbre embeddings of two
/// waveforms; symmetric, in [-1, 1].
pub fn timbre_similarity<T: Scalar>(
    a: &Waveform<T>,
    b: &Waveform<T>,
    norm: &TimbreNormalizer,
) -> Result<f64, TimbreError> {
    let ea = norm.apply(&raw_embedding(a)?)?;
    let eb = norm.apply(&raw_embedding(b)?)?;
    // clamp away float excursions beyond the mathematical range
    Ok(cosine(&ea, &eb).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{render_utterance, PhoneSegment, PhoneSeq, SpeakerProfile};

    fn speaker(f0: f64, seed: u64) -> SpeakerProfile {
        SpeakerProfile {
            speaker_id: format!("s{f0}"),
            base_f0: f0,
            harmonic_env: vec![1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.25, 0.2],
            jitter_seed: seed,
        }
    }

    fn utterance(sp: &SpeakerProfile, phones: &[u8]) -> Waveform<f64> {
        let seq = PhoneSeq::new(
            phones
                .iter()
                .map(|&p| PhoneSegment {
                    phone_id: p,
                    duration_ms: 200,
                })
                .collect(),
        );
        render_utterance(sp, &seq, crate::SAMPLE_RATE).unwrap()
    }

    #[test]
    fn f0_estimate_tracks_the_speaker() {
        for f0 in [105.0, 160.0, 230.0] {
            let w = utterance(&speaker(f0, 1), &[3, 7, 12]);
            let track = estimate_f0(&w);
            let voiced: Vec<f64> = track.iter().flatten().copied().collect();
            assert!(!voiced.is_empty());
            let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
            assert!((mean - f0).abs() < 4.0, "estimated {mean} for {f0}");
        }
    }

    #[test]
    fn identical_waveforms_have_similarity_one() {
        let a = utterance(&speaker(150.0, 2), &[1, 5]);
        let b = utterance(&speaker(210.0, 3), &[2, 9]);
        let norm = TimbreNormalizer::fit(&[
            raw_embedding(&a).unwrap(),
            raw_embedding(&b).unwrap(),
        ])
        .unwrap();
        let sim = timbre_similarity(&a, &a, &norm).unwrap();
        assert!((sim - 1.0).abs() < 1e-9);
        // symmetry
        let ab = timbre_similarity(&a, &b, &norm).unwrap();
        let ba = timbre_similarity(&b, &a, &norm).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn same_speaker_beats_different_speaker() {
        let spk_a = speaker(120.0, 4);
        let spk_b = speaker(240.0, 5);
        let a1 = utterance(&spk_a, &[1, 6, 11]);
        let a2 = utterance(&spk_a, &[4, 9, 2]);
        let b1 = utterance(&spk_b, &[1, 6, 11]);
        let embs: Vec<Vec<f64>> = [&a1, &a2, &b1]
            .iter()
            .map(|w| raw_embedding(w).unwrap())
            .collect();
        let norm = TimbreNormalizer::fit(&embs).unwrap();
        let same = timbre_similarity(&a1, &a2, &norm).unwrap();
        let diff = timbre_similarity(&a1, &b1, &norm).unwrap();
        assert!(
            same > diff,
            "same-speaker sim {same} should beat cross-speaker {diff}"
        );
    }

    #[test]
    fn zero_energy_waveform_is_flagged_not_nan() {
        let w = Waveform::<f64>::new(vec![0.0; 16_000], crate::SAMPLE_RATE);
        assert!(matches!(
            raw_embedding(&w),
            Err(TimbreError::DegenerateAudio(_))
        ));
    }
}
