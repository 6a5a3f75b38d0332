//! Deterministic synthetic corpus builder. Speakers are drawn with a
//! minimum pitch separation so timbre classes stay separable; the "target
//! language" is a phone-alphabet permutation of the source, rendered by a
//! single canonical reference speaker (so translation references are exact
//! while the source side carries speaker diversity).

use super::synth::{render_utterance, PhoneSegment, PhoneSeq, SpeakerProfile, PHONE_COUNT};
use super::{wav, AudioError};
use crate::{split_seed, Real};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Minimum base-F0 gap between any two drawn speakers, in Hz.
pub const MIN_F0_SEPARATION: f64 = 5.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("manifest io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_speakers: usize,
    pub valid_speakers: usize,
    pub test_speakers: usize,
    pub utts_per_speaker: usize,
    pub test_utts_per_speaker: usize,
    pub phones_per_utt: usize,
    /// Per-phone duration is a uniform multiple of 20 ms in this range.
    pub phone_ms_min: u32,
    pub phone_ms_max: u32,
    /// Utterance durations are resampled into this window (ms).
    pub utt_ms_min: u64,
    pub utt_ms_max: u64,
    /// Seed of the phone-mapping translation grammar.
    pub grammar_seed: u64,
    /// When true the grammar is the identity (source language == target).
    pub identity_grammar: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_speakers: 24,
            valid_speakers: 2,
            test_speakers: 4,
            utts_per_speaker: 20,
            test_utts_per_speaker: 25,
            phones_per_utt: 20,
            phone_ms_min: 160,
            phone_ms_max: 260,
            utt_ms_min: 4200,
            utt_ms_max: 4800,
            grammar_seed: 11,
            identity_grammar: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub source_phones: PhoneSeq,
    pub target_phones: PhoneSeq,
    pub audio_path: String,
    pub target_audio_path: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Everything `build_corpus` produces, including the ground truth the
/// evaluation oracles need.
#[derive(Debug)]
pub struct CorpusArtifacts {
    pub manifest: CorpusManifest,
    pub speakers: Vec<SpeakerProfile>,
    /// The canonical target-side voice (not part of any split).
    pub canonical: SpeakerProfile,
    /// Phone mapping of the translation grammar.
    pub grammar: Vec<u8>,
    pub manifest_path: PathBuf,
}

/// Base pitches come from a jittered grid over [92, 298] Hz so that any
/// feasible speaker count packs with the minimum separation; the grid
/// positions are shuffled before assignment so splits are not ordered by
/// pitch.
fn draw_f0_grid(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<f64>, CorpusError> {
    let (lo, hi) = (92.0f64, 298.0f64);
    let spacing = (hi - lo) / n as f64;
    if spacing < MIN_F0_SEPARATION {
        return Err(CorpusError::Config(format!(
            "cannot place {n} speakers with {MIN_F0_SEPARATION} Hz F0 separation in [{lo}, {hi}]; too many speakers requested"
        )));
    }
    let margin = (spacing - MIN_F0_SEPARATION) / 2.0;
    let mut f0s: Vec<f64> = (0..n)
        .map(|i| {
            let center = lo + spacing * (i as f64 + 0.5);
            if margin > 0.0 {
                center + rng.random_range(-margin..margin)
            } else {
                center
            }
        })
        .collect();
    // Fisher-Yates
    for i in (1..f0s.len()).rev() {
        let j = rng.random_range(0..=i);
        f0s.swap(i, j);
    }
    Ok(f0s)
}

fn draw_speaker(rng: &mut ChaCha8Rng, id: String, base_f0: f64) -> SpeakerProfile {
    let mut env = vec![1.0f64];
    for _ in 1..super::synth::HARMONICS {
        env.push(rng.random_range(0.15..1.0));
    }
    SpeakerProfile {
        speaker_id: id,
        base_f0,
        harmonic_env: env,
        jitter_seed: rng.random(),
    }
}

fn draw_phone_seq(rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> Result<PhoneSeq, CorpusError> {
    let steps_min = cfg.phone_ms_min / 20;
    let steps_max = cfg.phone_ms_max / 20;
    for _ in 0..1000 {
        let phones: Vec<PhoneSegment> = (0..cfg.phones_per_utt)
            .map(|_| PhoneSegment {
                phone_id: rng.random_range(0..PHONE_COUNT),
                duration_ms: rng.random_range(steps_min..=steps_max) * 20,
            })
            .collect();
        let seq = PhoneSeq::new(phones);
        let total = seq.total_ms();
        if total >= cfg.utt_ms_min && total <= cfg.utt_ms_max {
            return Ok(seq);
        }
    }
    Err(CorpusError::Config(format!(
        "cannot draw a {}-phone utterance inside [{}, {}] ms; widen the window",
        cfg.phones_per_utt, cfg.utt_ms_min, cfg.utt_ms_max
    )))
}

fn apply_grammar(seq: &PhoneSeq, grammar: &[u8]) -> PhoneSeq {
    PhoneSeq::new(
        seq.phones
            .iter()
            .map(|p| PhoneSegment {
                phone_id: grammar[p.phone_id as usize],
                duration_ms: p.duration_ms,
            })
            .collect(),
    )
}

/// Builds the corpus under `out_dir`: renders every utterance (source
/// speaker and canonical target), writes WAVs plus `manifest.jsonl` and
/// `speakers.jsonl`. Deterministic for a fixed (config, seed).
pub fn build_corpus(
    cfg: &CorpusConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusArtifacts, CorpusError> {
    if cfg.phone_ms_min == 0 || cfg.phone_ms_min % 20 != 0 || cfg.phone_ms_max % 20 != 0 {
        return Err(CorpusError::Config(
            "phone duration bounds must be positive multiples of 20 ms".into(),
        ));
    }
    if cfg.phone_ms_min > cfg.phone_ms_max {
        return Err(CorpusError::Config("phone_ms_min > phone_ms_max".into()));
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| CorpusError::Io {
        path: audio_dir.display().to_string(),
        source: e,
    })?;

    // grammar
    let mut grammar: Vec<u8> = (0..PHONE_COUNT).collect();
    if !cfg.identity_grammar {
        let mut grng = ChaCha8Rng::seed_from_u64(split_seed(seed, cfg.grammar_seed));
        // Fisher-Yates
        for i in (1..grammar.len()).rev() {
            let j = grng.random_range(0..=i);
            grammar.swap(i, j);
        }
    }

    // speakers: canonical first, then train/valid/test
    let mut srng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x5350_4541_4b45_5253));
    let n_total = 1 + cfg.train_speakers + cfg.valid_speakers + cfg.test_speakers;
    let mut f0s = draw_f0_grid(&mut srng, n_total)?.into_iter();
    let canonical = draw_speaker(&mut srng, "canonical".into(), f0s.next().unwrap());

    let mut speakers = Vec::new();
    let splits = [
        (Split::Train, cfg.train_speakers, cfg.utts_per_speaker),
        (Split::Valid, cfg.valid_speakers, cfg.utts_per_speaker),
        (Split::Test, cfg.test_speakers, cfg.test_utts_per_speaker),
    ];
    for (split, n, _) in &splits {
        for i in 0..*n {
            let sp = draw_speaker(&mut srng, format!("{split}_spk{i:02}"), f0s.next().unwrap());
            speakers.push((*split, sp));
        }
    }

    // utterance specs
    struct UttSpec {
        entry: ManifestEntry,
        speaker: SpeakerProfile,
    }
    let mut specs = Vec::new();
    let mut urng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x5554_5445_5241_4e43));
    for (split, sp) in &speakers {
        let n_utts = match split {
            Split::Test => cfg.test_utts_per_speaker,
            _ => cfg.utts_per_speaker,
        };
        for u in 0..n_utts {
            let source = draw_phone_seq(&mut urng, cfg)?;
            let target = apply_grammar(&source, &grammar);
            let utterance_id = format!("{}_u{u:03}", sp.speaker_id);
            let audio_path = format!("audio/{utterance_id}_src.wav");
            let target_audio_path = format!("audio/{utterance_id}_tgt.wav");
            specs.push(UttSpec {
                entry: ManifestEntry {
                    utterance_id,
                    speaker_id: sp.speaker_id.clone(),
                    split: *split,
                    source_phones: source,
                    target_phones: target,
                    audio_path,
                    target_audio_path,
                },
                speaker: sp.clone(),
            });
        }
    }

    // render (pure per-utterance; parallel)
    specs
        .par_iter()
        .try_for_each(|spec| -> Result<(), CorpusError> {
            let src = render_utterance::<Real>(&spec.speaker, &spec.entry.source_phones, crate::SAMPLE_RATE)?;
            wav::write_wav(&src, &out_dir.join(&spec.entry.audio_path))?;
            let tgt = render_utterance::<Real>(&canonical, &spec.entry.target_phones, crate::SAMPLE_RATE)?;
            wav::write_wav(&tgt, &out_dir.join(&spec.entry.target_audio_path))?;
            Ok(())
        })?;

    let manifest = CorpusManifest {
        entries: specs.into_iter().map(|s| s.entry).collect(),
    };
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &manifest_path)?;

    // speakers file (ground truth for oracles)
    let sp_path = out_dir.join("speakers.jsonl");
    let f = fs::File::create(&sp_path).map_err(|e| CorpusError::Io {
        path: sp_path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(f);
    let mut all = vec![canonical.clone()];
    all.extend(speakers.iter().map(|(_, s)| s.clone()));
    for s in &all {
        serde_json::to_writer(&mut w, s).map_err(|e| CorpusError::Parse {
            line: 0,
            detail: e.to_string(),
        })?;
        writeln!(w).map_err(|e| CorpusError::Io {
            path: sp_path.display().to_string(),
            source: e,
        })?;
    }
    drop(w);

    Ok(CorpusArtifacts {
        manifest,
        speakers: all[1..].to_vec(),
        canonical,
        grammar,
        manifest_path,
    })
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    let f = fs::File::create(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(f);
    for e in &manifest.entries {
        serde_json::to_writer(&mut w, e).map_err(|err| CorpusError::Parse {
            line: 0,
            detail: err.to_string(),
        })?;
        writeln!(w).map_err(|err| CorpusError::Io {
            path: path.display().to_string(),
            source: err,
        })?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let f = fs::File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(f);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(CorpusManifest { entries })
}
