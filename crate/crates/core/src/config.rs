//! Pipeline configuration: artifact paths plus per-stage settings, with
//! desk-scale (all tests) and paper-scale (documented only) presets.

use crate::audio::CorpusConfig;
use crate::codec::CodecConfig;
use crate::features::FeatureConfig;
use crate::lm::{LmConfig, SamplingConfig};
use crate::nn::AdamConfig;
use crate::s2ut::{DecodeConfig, S2utConfig};
use crate::seqfmt::VocabLayout;
use crate::vocoder::{DiscriminatorConfig, LossWeights, VocoderConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(format!("unknown scale `{other}` (use desk|paper)")),
        }
    }
}

/// Which backend renders the generated acoustic units to audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesisBackend {
    /// Deterministic sinusoidal resynthesis through the codec.
    Codec,
    /// The trained GAN vocoder (needs a vocoder checkpoint).
    Vocoder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainParams {
    pub lm_steps: usize,
    pub lm_batch: usize,
    pub lm_adam: AdamConfig,
    pub s2ut_steps: usize,
    pub s2ut_batch: usize,
    pub s2ut_adam: AdamConfig,
    pub vocoder_steps: usize,
    pub vocoder_batch: usize,
    pub vocoder_adam: AdamConfig,
    pub kmeans_max_iters: usize,
    /// Frame subsampling cap for the k-means / RVQ fits.
    pub max_fit_frames: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lm_steps: 2400,
            lm_batch: 4,
            lm_adam: AdamConfig {
                lr: 6e-4,
                warmup_steps: 100,
                ..AdamConfig::default()
            },
            s2ut_steps: 1200,
            s2ut_batch: 8,
            s2ut_adam: AdamConfig {
                lr: 1.5e-3,
                warmup_steps: 50,
                ..AdamConfig::default()
            },
            vocoder_steps: 3000,
            vocoder_batch: 1,
            vocoder_adam: AdamConfig {
                lr: 2e-4,
                warmup_steps: 0,
                ..AdamConfig::default()
            },
            kmeans_max_iters: 40,
            max_fit_frames: 60_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scale: Scale,
    /// Number of semantic k-means clusters.
    pub k_semantic: usize,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub codec: CodecConfig,
    pub lm: LmConfig,
    pub s2ut: S2utConfig,
    pub vocoder: VocoderConfig,
    pub discriminators: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    pub train: TrainParams,
    pub sampling: SamplingConfig,
    pub decode: DecodeConfig,
    pub synthesis: SynthesisBackend,
    /// Train S1 on run-length-deduped target units (re-expanded uniformly
    /// before the S2 prefix at `s1_expand_repeat` frames per unit).
    pub s1_dedup: bool,
    pub s1_expand_repeat: usize,
}

impl PipelineConfig {
    /// Configuration every test runs at.
    pub fn desk() -> Self {
        let codec = CodecConfig::default();
        Self {
            scale: Scale::Desk,
            k_semantic: 64,
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            lm: LmConfig::desk(),
            s2ut: S2utConfig::desk(64),
            vocoder: VocoderConfig::desk(codec.n_levels, codec.codebook_size),
            codec,
            discriminators: DiscriminatorConfig::default(),
            loss_weights: LossWeights::default(),
            train: TrainParams::default(),
            sampling: SamplingConfig::default(),
            decode: DecodeConfig::default(),
            synthesis: SynthesisBackend::Codec,
            s1_dedup: false,
            s1_expand_repeat: 7,
        }
    }

    /// Full-scale settings: 1000 semantic clusters, 3 codebooks of 1024,
    /// the large multi-scale transformer and the 6-stage vocoder. Recorded
    /// for completeness; never trained in tests.
    pub fn paper() -> Self {
        let codec = CodecConfig::paper();
        Self {
            scale: Scale::Paper,
            k_semantic: 1000,
            lm: LmConfig::paper(),
            s2ut: S2utConfig::desk(1000),
            vocoder: VocoderConfig::paper(codec.n_levels, codec.codebook_size),
            codec,
            ..Self::desk()
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    pub fn vocab(&self) -> VocabLayout {
        VocabLayout::new(
            self.k_semantic as u32,
            self.codec.n_levels as u32,
            self.codec.codebook_size as u32,
        )
        .expect("config sizes are positive")
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    /// Stable fingerprint of the whole configuration.
    pub fn fingerprint(&self) -> u64 {
        crate::fnv1a64(serde_json::to_string(self).unwrap().as_bytes())
    }
}

/// Conventional artifact layout under one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn km_codebook(&self) -> PathBuf {
        self.root.join("semantic_km.ckpt")
    }

    pub fn rvq_codebook(&self) -> PathBuf {
        self.root.join("codec_rvq.ckpt")
    }

    pub fn s2ut_model(&self) -> PathBuf {
        self.root.join("s2ut.ckpt")
    }

    pub fn lm_model(&self) -> PathBuf {
        self.root.join("acoustic_lm.ckpt")
    }

    pub fn vocoder_model(&self) -> PathBuf {
        self.root.join("vocoder.ckpt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }
}
