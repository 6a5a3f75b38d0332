//! Acoustic codec: deterministic band analysis at hop 320, a residual
//! vector quantizer trained level-by-level with k-means, and overlap-add
//! sinusoidal resynthesis. The RVQ index grids are the acoustic units the
//! rest of the pipeline consumes; the low analysis bands are narrow so the
//! units keep fundamental-frequency (speaker) information.

use crate::audio::Waveform;
use crate::dsp::{hann, Fft, Filterbank};
use crate::kmeans::{kmeans_fit, nearest, ClusterError, FitReport, KmeansCodebook};
use crate::mat::Mat;
use crate::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("code {code} at frame {frame} level {level} out of range (codebook size {size})")]
    CodeOutOfRange {
        frame: usize,
        level: usize,
        code: u32,
        size: usize,
    },
    #[error("grid has {grid} levels, codebook set has {codebooks}")]
    LevelMismatch { grid: usize, codebooks: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    pub n_levels: usize,
    pub codebook_size: usize,
    pub n_bands: usize,
    /// Narrow linear bands covering the pitch range.
    pub n_linear_bands: usize,
    pub linear_lo: f64,
    pub linear_hi: f64,
    pub fmax: f64,
    pub floor: f64,
    pub fft_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_levels: 3,
            codebook_size: 256,
            n_bands: 32,
            // 50 Hz band spacing: adjacent resynthesis tones beat with a
            // 320-sample period, which the two-hop analysis window
            // integrates out exactly.
            n_linear_bands: 8,
            linear_lo: 50.0,
            linear_hi: 500.0,
            fmax: 7600.0,
            floor: 1e-10,
            fft_size: 2048,
        }
    }
}

impl CodecConfig {
    /// Paper-scale variant: 3 codebooks of 1024 entries at hop 320.
    pub fn paper() -> Self {
        Self {
            codebook_size: 1024,
            ..Self::default()
        }
    }
}

/// T x C grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcousticUnitGrid {
    codes: Vec<u32>,
    t_frames: usize,
    c_levels: usize,
    pub codebook_size: u32,
}

impl AcousticUnitGrid {
    pub fn new(t_frames: usize, c_levels: usize, codebook_size: u32) -> Self {
        Self {
            codes: vec![0; t_frames * c_levels],
            t_frames,
            c_levels,
            codebook_size,
        }
    }

    pub fn from_codes(
        codes: Vec<u32>,
        c_levels: usize,
        codebook_size: u32,
    ) -> Self {
        assert!(c_levels > 0 && codes.len() % c_levels == 0);
        Self {
            t_frames: codes.len() / c_levels,
            codes,
            c_levels,
            codebook_size,
        }
    }

    pub fn t_frames(&self) -> usize {
        self.t_frames
    }

    pub fn c_levels(&self) -> usize {
        self.c_levels
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.codes[t * self.c_levels..(t + 1) * self.c_levels]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u32] {
        &mut self.codes[t * self.c_levels..(t + 1) * self.c_levels]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// First `n` frames as a new grid.
    pub fn head(&self, n: usize) -> AcousticUnitGrid {
        let n = n.min(self.t_frames);
        AcousticUnitGrid {
            codes: self.codes[..n * self.c_levels].to_vec(),
            t_frames: n,
            c_levels: self.c_levels,
            codebook_size: self.codebook_size,
        }
    }

    /// Frames `from..` as a new grid.
    pub fn tail(&self, from: usize) -> AcousticUnitGrid {
        let from = from.min(self.t_frames);
        AcousticUnitGrid {
            codes: self.codes[from * self.c_levels..].to_vec(),
            t_frames: self.t_frames - from,
            c_levels: self.c_levels,
            codebook_size: self.codebook_size,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        for t in 0..self.t_frames {
            for (c, &code) in self.frame(t).iter().enumerate() {
                if code >= self.codebook_size {
                    return Err(CodecError::CodeOutOfRange {
                        frame: t,
                        level: c,
                        code,
                        size: self.codebook_size as usize,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Ordered codebooks: level 0 quantizes raw features, level c the residual
/// after levels < c.
#[derive(Clone, Debug)]
pub struct RvqCodebookSet<T> {
    pub levels: Vec<KmeansCodebook<T>>,
}

impl<T: Scalar> RvqCodebookSet<T> {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels[0].k()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RvqFitReport {
    /// Mean residual energy before quantizing each level (index 0 = raw).
    pub residual_energy: Vec<f64>,
    /// Levels whose residuals were degenerate (padded codebooks).
    pub degenerate_levels: Vec<usize>,
    pub kmeans_reports: Vec<FitReport>,
}

fn mean_energy<T: Scalar>(m: &Mat<T>) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    m.sum_squares_f64() / m.rows() as f64
}

/// Fits `n_levels` codebooks of `codebook_size` entries. Level 0 uses
/// exactly `seed`, so a 1-level fit is bitwise identical to a plain
/// [`kmeans_fit`] with that seed.
pub fn rvq_fit<T: Scalar>(
    features: &Mat<T>,
    cfg: &CodecConfig,
    seed: u64,
    max_iters: usize,
) -> Result<(RvqCodebookSet<T>, RvqFitReport), CodecError> {
    let mut residual = features.clone();
    let mut levels = Vec::with_capacity(cfg.n_levels);
    let mut report = RvqFitReport::default();
    for level in 0..cfg.n_levels {
        report.residual_energy.push(mean_energy(&residual));
        let level_seed = if level == 0 {
            seed
        } else {
            crate::split_seed(seed, level as u64)
        };
        let fitted = kmeans_fit(&residual, cfg.codebook_size, level_seed, max_iters);
        let cb = match fitted {
            Ok((cb, krep)) => {
                report.kmeans_reports.push(krep);
                cb
            }
            Err(ClusterError::NotEnoughDistinctPoints { .. }) if level > 0 => {
                // Degenerate residuals at a residual level: keep the zero
                // centroid first, then whatever distinct residuals exist,
                // pad the rest with zeros, and flag the level.
                report.degenerate_levels.push(level);
                report.kmeans_reports.push(FitReport::default());
                let mut centroids = Mat::zeros(cfg.codebook_size, residual.cols());
                let mut seen: Vec<Vec<T>> = vec![vec![T::zero(); residual.cols()]];
                for t in 0..residual.rows() {
                    let row = residual.row(t);
                    if seen.len() < cfg.codebook_size && !seen.iter().any(|s| s.as_slice() == row) {
                        seen.push(row.to_vec());
                    }
                }
                for (i, s) in seen.iter().enumerate() {
                    centroids.set_row(i, s);
                }
                let mut counts = vec![0u64; cfg.codebook_size];
                counts[0] = residual.rows() as u64;
                KmeansCodebook { centroids, counts }
            }
            Err(e) => return Err(e.into()),
        };
        // subtract reconstructions to form the next level's residuals
        for t in 0..residual.rows() {
            let (idx, _) = nearest(&cb.centroids, residual.row(t));
            let centroid: Vec<T> = cb.centroids.row(idx).to_vec();
            let row = residual.row_mut(t);
            for (r, c) in row.iter_mut().zip(&centroid) {
                *r -= *c;
            }
        }
        levels.push(cb);
    }
    Ok((RvqCodebookSet { levels }, report))
}

/// Reusable codec analyzer/synthesizer.
pub struct Codec<T> {
    cfg: CodecConfig,
    fft: Fft<T>,
    bank: Filterbank<T>,
    window: Vec<T>,
    /// Per-band calibration so synthesize(analysis(x)) preserves band
    /// energies: analysis energy of a unit-amplitude band-center tone.
    band_gain: Vec<f64>,
}

/// Codec analysis window: two hops. The hop (and therefore T = len / 320)
/// is what the rest of the system depends on; the two-hop window is what
/// makes the narrow pitch bands resolvable.
pub const CODEC_WINDOW: usize = 2 * crate::HOP;

impl<T: Scalar> Codec<T> {
    pub fn new(cfg: CodecConfig) -> Self {
        let fft = Fft::new(cfg.fft_size);
        let bank = Filterbank::hybrid(
            cfg.n_linear_bands,
            cfg.linear_lo,
            cfg.linear_hi,
            cfg.n_bands - cfg.n_linear_bands,
            cfg.fmax,
            crate::SAMPLE_RATE,
            cfg.fft_size,
        );
        assert_eq!(bank.n_bands(), cfg.n_bands);
        let window: Vec<T> = hann(CODEC_WINDOW);
        // closed-loop calibration per band
        let mut band_gain = Vec::with_capacity(cfg.n_bands);
        for b in 0..cfg.n_bands {
            let f = bank.centers()[b];
            let frame: Vec<T> = (0..CODEC_WINDOW)
                .map(|i| {
                    let ph = std::f64::consts::TAU * f * i as f64 / crate::SAMPLE_RATE as f64;
                    T::from_f64(ph.sin()) * window[i]
                })
                .collect();
            let e = bank.apply(&fft.power_spectrum(&frame))[b].as_f64();
            band_gain.push(e.max(1e-12));
        }
        Self {
            cfg,
            fft,
            bank,
            window,
            band_gain,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Band-energy analysis at hop 320: exactly T = len / 320 frames (any
    /// trailing remainder shorter than a hop is ignored). Frame t covers
    /// samples [t*320, t*320 + 640), zero-padded past the end of the audio.
    pub fn analyze(&self, w: &Waveform<T>) -> Mat<T> {
        let t_frames = w.len() / crate::HOP;
        let mut out = Mat::zeros(t_frames, self.cfg.n_bands);
        let floor = T::from_f64(self.cfg.floor);
        let mut buf = vec![T::zero(); CODEC_WINDOW];
        for t in 0..t_frames {
            let start = t * crate::HOP;
            let avail = (w.len() - start).min(CODEC_WINDOW);
            for i in 0..avail {
                buf[i] = w.samples[start + i] * self.window[i];
            }
            for b in buf.iter_mut().skip(avail) {
                *b = T::zero();
            }
            let power = self.fft.power_spectrum(&buf);
            let energies = self.bank.apply(&power);
            for (dst, e) in out.row_mut(t).iter_mut().zip(energies) {
                *dst = e.max(floor).ln();
            }
        }
        out
    }

    /// Greedy RVQ encode: per level, nearest centroid on the running
    /// residual (ties to the lowest index).
    pub fn encode(&self, w: &Waveform<T>, cb: &RvqCodebookSet<T>) -> Result<AcousticUnitGrid, CodecError> {
        let features = self.analyze(w);
        self.encode_features(&features, cb)
    }

    pub fn encode_features(
        &self,
        features: &Mat<T>,
        cb: &RvqCodebookSet<T>,
    ) -> Result<AcousticUnitGrid, CodecError> {
        if features.rows() > 0 && features.cols() != cb.dim() {
            return Err(ClusterError::DimMismatch {
                data: features.cols(),
                codebook: cb.dim(),
            }
            .into());
        }
        let c_levels = cb.n_levels();
        let mut grid = AcousticUnitGrid::new(features.rows(), c_levels, cb.codebook_size() as u32);
        let mut residual = vec![T::zero(); features.cols()];
        for t in 0..features.rows() {
            residual.copy_from_slice(features.row(t));
            let frame = grid.frame_mut(t);
            for (c, level_cb) in cb.levels.iter().enumerate() {
                let (idx, _) = nearest(&level_cb.centroids, &residual);
                frame[c] = idx as u32;
                for (r, v) in residual.iter_mut().zip(level_cb.centroids.row(idx)) {
                    *r -= *v;
                }
            }
        }
        Ok(grid)
    }

    /// Sum of the selected centroids across levels, per frame.
    pub fn dequantize(
        &self,
        grid: &AcousticUnitGrid,
        cb: &RvqCodebookSet<T>,
    ) -> Result<Mat<T>, CodecError> {
        dequantize(grid, cb)
    }

    /// Overlap-add sinusoidal resynthesis: one oscillator per band at the
    /// band center, amplitude envelopes overlap-added with a Hann window of
    /// two hops. Output length is exactly T x 320.
    pub fn synthesize(&self, features: &Mat<T>) -> Waveform<T> {
        let t_frames = features.rows();
        let n = t_frames * crate::HOP;
        let mut out = vec![0.0f64; n];
        if n == 0 {
            return Waveform::new(vec![], crate::SAMPLE_RATE);
        }
        let win: Vec<f64> = hann::<f64>(CODEC_WINDOW);
        let sr = crate::SAMPLE_RATE as f64;
        for b in 0..self.cfg.n_bands {
            let f = self.bank.centers()[b];
            // amplitude envelope by OLA of per-frame amplitudes; windows
            // span the same [t*320, t*320+640) range the analysis uses
            let mut env = vec![0.0f64; n];
            for t in 0..t_frames {
                let e = features.get(t, b).as_f64().exp();
                let amp = ((e - self.cfg.floor).max(0.0) / self.band_gain[b]).sqrt();
                if amp == 0.0 {
                    continue;
                }
                let start = t * crate::HOP;
                for (i, &wv) in win.iter().enumerate() {
                    let p = start + i;
                    if p < n {
                        env[p] += amp * wv;
                    }
                }
            }
            // single phase-continuous oscillator for the band
            let step = std::f64::consts::TAU * f / sr;
            let (sr_, si_) = (step.cos(), step.sin());
            let mut re = 1.0f64;
            let mut im = 0.0f64;
            for (o, &a) in out.iter_mut().zip(&env) {
                *o += a * im;
                let nre = re * sr_ - im * si_;
                let nim = re * si_ + im * sr_;
                re = nre;
                im = nim;
            }
        }
        // headroom: keep samples in [-1, 1] deterministically
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
        Waveform::new(out.into_iter().map(|v| T::from_f64(v * scale)).collect(), crate::SAMPLE_RATE)
    }
}

/// Frame-wise sum of selected centroid vectors across levels.
pub fn dequantize<T: Scalar>(
    grid: &AcousticUnitGrid,
    cb: &RvqCodebookSet<T>,
) -> Result<Mat<T>, CodecError> {
    if grid.c_levels() != cb.n_levels() {
        return Err(CodecError::LevelMismatch {
            grid: grid.c_levels(),
            codebooks: cb.n_levels(),
        });
    }
    let mut out = Mat::zeros(grid.t_frames(), cb.dim());
    for t in 0..grid.t_frames() {
        let row = out.row_mut(t);
        for (c, &code) in grid.frame(t).iter().enumerate() {
            let k = cb.levels[c].k();
            if code as usize >= k {
                return Err(CodecError::CodeOutOfRange {
                    frame: t,
                    level: c,
                    code,
                    size: k,
                });
            }
            for (o, v) in row.iter_mut().zip(cb.levels[c].centroids.row(code as usize)) {
                *o += *v;
            }
        }
    }
    Ok(out)
}

/// Line-delimited JSON acoustic-unit files: one
/// `{"utterance_id": ..., "codes": [[c0, c1, c2], ...]}` object per line.
pub fn write_codes_jsonl(
    path: &std::path::Path,
    rows: &[(String, AcousticUnitGrid)],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, grid) in rows {
        let codes: Vec<&[u32]> = (0..grid.t_frames()).map(|t| grid.frame(t)).collect();
        let rec = serde_json::json!({ "utterance_id": id, "codes": codes });
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_codes_jsonl(
    path: &std::path::Path,
    c_levels: usize,
    codebook_size: u32,
) -> std::io::Result<Vec<(String, AcousticUnitGrid)>> {
    use std::io::BufRead;
    #[derive(serde::Deserialize)]
    struct Rec {
        utterance_id: String,
        codes: Vec<Vec<u32>>,
    }
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Rec = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let mut codes = Vec::with_capacity(rec.codes.len() * c_levels);
        for frame in &rec.codes {
            if frame.len() != c_levels {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("frame has {} levels, expected {c_levels}", frame.len()),
                ));
            }
            codes.extend_from_slice(frame);
        }
        out.push((
            rec.utterance_id,
            AcousticUnitGrid::from_codes(codes, c_levels, codebook_size),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{render_utterance, PhoneSegment, PhoneSeq, SpeakerProfile};

    fn test_wave(secs: f64) -> Waveform<f64> {
        let profile = SpeakerProfile {
            speaker_id: "t".into(),
            base_f0: 140.0,
            harmonic_env: vec![1.0, 0.7, 0.55, 0.4, 0.35, 0.3, 0.25, 0.2],
            jitter_seed: 4,
        };
        let n_phones = (secs * 1000.0 / 200.0).round() as usize;
        let seq = PhoneSeq::new(
            (0..n_phones)
                .map(|i| PhoneSegment {
                    phone_id: (i * 5 % 24) as u8,
                    duration_ms: 200,
                })
                .collect(),
        );
        render_utterance(&profile, &seq, crate::SAMPLE_RATE).unwrap()
    }

    #[test]
    fn three_seconds_gives_150_frames() {
        let codec = Codec::new(CodecConfig::default());
        let w = test_wave(3.0);
        assert_eq!(w.len(), 48_000);
        let g = codec.analyze(&w);
        assert_eq!(g.rows(), 150);
    }

    #[test]
    fn synthesize_length_is_t_times_hop() {
        let codec = Codec::<f64>::new(CodecConfig::default());
        let empty = codec.synthesize(&Mat::zeros(0, 32));
        assert_eq!(empty.len(), 0);
        let feats = Mat::from_vec(150, 32, vec![-23.0; 150 * 32]);
        let w = codec.synthesize(&feats);
        assert_eq!(w.len(), 48_000);
    }

    #[test]
    fn exact_residual_chain_recovers_codes() {
        // hand-built codebooks: level 2 has a zero centroid at index 3
        let l0 = KmeansCodebook {
            centroids: Mat::from_rows(&[
                vec![0.0, 0.0],
                vec![4.0, 0.0],
                vec![0.0, 4.0],
                vec![4.0, 4.0],
            ]),
            counts: vec![1; 4],
        };
        let l1 = KmeansCodebook {
            centroids: Mat::from_rows(&[
                vec![0.5, 0.0],
                vec![0.0, 0.5],
                vec![0.5, 0.5],
                vec![-0.5, 0.0],
            ]),
            counts: vec![1; 4],
        };
        let l2 = KmeansCodebook {
            centroids: Mat::from_rows(&[
                vec![0.1, 0.0],
                vec![0.0, 0.1],
                vec![0.1, 0.1],
                vec![0.0, 0.0],
            ]),
            counts: vec![1; 4],
        };
        let cb = RvqCodebookSet {
            levels: vec![l0, l1, l2],
        };
        let codec = Codec::new(CodecConfig {
            n_levels: 3,
            codebook_size: 4,
            ..CodecConfig::default()
        });
        // frame = level0[1] + level1[2] + zero
        let feature = Mat::from_rows(&[vec![4.5, 0.5]]);
        let grid = codec.encode_features(&feature, &cb).unwrap();
        assert_eq!(grid.frame(0), &[1, 2, 3]);
        // dequantize returns the exact sum
        let rec = dequantize(&grid, &cb).unwrap();
        assert_eq!(rec.row(0), &[4.5, 0.5]);
    }

    #[test]
    fn codes_selecting_level0_only_return_that_centroid() {
        let l0 = KmeansCodebook {
            centroids: Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            counts: vec![1; 2],
        };
        let l1 = KmeansCodebook {
            centroids: Mat::from_rows(&[vec![0.0, 0.0], vec![9.0, 9.0]]),
            counts: vec![1; 2],
        };
        let cb = RvqCodebookSet { levels: vec![l0, l1] };
        let grid = AcousticUnitGrid::from_codes(vec![1, 0], 2, 2);
        let rec = dequantize(&grid, &cb).unwrap();
        assert_eq!(rec.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn encode_is_deterministic() {
        let codec = Codec::new(CodecConfig::default());
        let w = test_wave(1.0);
        let feats = codec.analyze(&w);
        let (cb, _) = rvq_fit(&feats, &CodecConfig { codebook_size: 16, ..CodecConfig::default() }, 3, 25).unwrap();
        let a = codec.encode(&w, &cb).unwrap();
        let b = codec.encode(&w, &cb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_energy_non_increasing_and_c1_matches_kmeans() {
        let codec = Codec::new(CodecConfig::default());
        let w = test_wave(4.0);
        let feats = codec.analyze(&w);
        let cfg = CodecConfig {
            codebook_size: 16,
            ..CodecConfig::default()
        };
        let (_, report) = rvq_fit(&feats, &cfg, 7, 25).unwrap();
        for pair in report.residual_energy.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "energy rose: {pair:?}");
        }
        // C=1 fit is bitwise the plain k-means with the same seed
        let cfg1 = CodecConfig {
            n_levels: 1,
            codebook_size: 16,
            ..CodecConfig::default()
        };
        let (rvq1, _) = rvq_fit(&feats, &cfg1, 7, 25).unwrap();
        let (plain, _) = kmeans_fit(&feats, 16, 7, 25).unwrap();
        assert_eq!(rvq1.levels[0].centroids, plain.centroids);
        assert_eq!(rvq1.levels[0].counts, plain.counts);
    }

    #[test]
    fn reconstruction_mse_non_increasing_in_levels() {
        let codec = Codec::new(CodecConfig::default());
        let w = test_wave(4.0);
        let feats = codec.analyze(&w);
        let cfg = CodecConfig {
            codebook_size: 16,
            ..CodecConfig::default()
        };
        let (cb, _) = rvq_fit(&feats, &cfg, 5, 25).unwrap();
        let grid = codec.encode_features(&feats, &cb).unwrap();
        let mut last = f64::INFINITY;
        for use_levels in 1..=cb.n_levels() {
            let partial = RvqCodebookSet {
                levels: cb.levels[..use_levels].to_vec(),
            };
            let sub = AcousticUnitGrid::from_codes(
                (0..grid.t_frames())
                    .flat_map(|t| grid.frame(t)[..use_levels].to_vec())
                    .collect(),
                use_levels,
                grid.codebook_size,
            );
            let rec = dequantize(&sub, &partial).unwrap();
            let mut mse = 0.0;
            for t in 0..feats.rows() {
                mse += crate::mat::dist2(feats.row(t), rec.row(t));
            }
            mse /= feats.rows() as f64;
            assert!(mse <= last * (1.0 + 1e-9), "MSE rose at {use_levels} levels");
            last = mse;
        }
    }

    #[test]
    fn band_energy_contour_survives_resynthesis() {
        let codec = Codec::new(CodecConfig::default());
        let w = test_wave(4.0);
        let orig = codec.analyze(&w);
        let resynth = codec.synthesize(&orig);
        assert_eq!(resynth.len(), w.len());
        let again = codec.analyze(&resynth);
        // per-band correlation of the log-energy contours
        let mut n_good = 0;
        let n_bands = orig.cols();
        for b in 0..n_bands {
            let a: Vec<f64> = (0..orig.rows()).map(|t| orig.get(t, b)).collect();
            let c: Vec<f64> = (0..again.rows()).map(|t| again.get(t, b)).collect();
            let corr = correlation(&a, &c);
            if corr >= 0.9 {
                n_good += 1;
            }
        }
        assert!(
            n_good >= n_bands * 9 / 10,
            "only {n_good}/{n_bands} bands kept their contour"
        );
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().min(b.len()) as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        if da <= 0.0 || db <= 0.0 {
            return 1.0;
        }
        num / (da * db).sqrt()
    }

    #[test]
    fn degenerate_residuals_are_flagged() {
        // two point masses: level 0 represents them exactly with k=2, so
        // level 1 residuals are all zero
        let mut rows = vec![vec![1.0, 2.0]; 30];
        rows.extend(vec![vec![3.0, 4.0]; 30]);
        let feats = Mat::from_rows(&rows);
        let cfg = CodecConfig {
            n_levels: 2,
            codebook_size: 2,
            ..CodecConfig::default()
        };
        let (cb, report) = rvq_fit(&feats, &cfg, 0, 10).unwrap();
        assert_eq!(report.degenerate_levels, vec![1]);
        assert_eq!(cb.levels[1].centroids.row(0), &[0.0, 0.0]);
        assert_eq!(cb.levels[1].centroids.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn codes_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codes.jsonl");
        let rows = vec![
            ("a".to_string(), AcousticUnitGrid::from_codes(vec![1, 2, 3, 4, 5, 6], 3, 16)),
            ("b".to_string(), AcousticUnitGrid::from_codes(vec![], 3, 16)),
        ];
        write_codes_jsonl(&p, &rows).unwrap();
        let back = read_codes_jsonl(&p, 3, 16).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn level0_with_too_few_distinct_points_errors() {
        let feats = Mat::from_rows(&vec![vec![1.0, 2.0]; 50]);
        let cfg = CodecConfig {
            n_levels: 1,
            codebook_size: 2,
            ..CodecConfig::default()
        };
        assert!(matches!(
            rvq_fit(&feats, &cfg, 0, 10),
            Err(CodecError::Cluster(ClusterError::NotEnoughDistinctPoints { .. }))
        ));
    }
}
