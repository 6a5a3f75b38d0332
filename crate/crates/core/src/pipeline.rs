//! End-to-end orchestration: stage training jobs, the three-stage inference
//! pipeline (translate units, generate acoustic units against the source
//! style prompt, synthesize), and the evaluation that scores unit BLEU and
//! timbre similarity on a split.

use crate::audio::{read_wav, write_wav, CorpusManifest, ManifestEntry, Split, Waveform};
use crate::bleu::corpus_bleu;
use crate::checkpoint::{
    check_vocab_hash, kmeans_from_checkpoint, kmeans_to_checkpoint, load_model_params,
    model_to_checkpoint, Checkpoint, CheckpointError,
};
use crate::codec::{dequantize, AcousticUnitGrid, Codec, CodecError, RvqCodebookSet};
use crate::config::{PipelineConfig, RunPaths, SynthesisBackend};
use crate::features::{mean_normalize, FeatureExtractor};
use crate::kmeans::{kmeans_fit, ClusterError, KmeansCodebook};
use crate::lm::{AcousticLm, GenerateOutput, ModelError, SamplingConfig, StopReason, TrainMetrics};
use crate::mat::Mat;
use crate::nn::Adam;
use crate::s2ut::{S2utError, S2utModel};
use crate::semantic::{dedup_consecutive, expand_uniform, quantize_mat, SemanticUnitSeq};
use crate::seqfmt::{make_inference_prefix, make_training_example, SequenceError, TokenSequence};
use crate::timbre::{raw_embedding, timbre_similarity, TimbreError, TimbreNormalizer};
use crate::vocoder::{
    vocoder_train_step, VocoderDiscriminators, VocoderError, VocoderGenerator, VocoderLosses,
};
use crate::{split_seed, Real, Scalar};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    SemanticUnits,
    Codec,
    S1Translate,
    S2Acoustic,
    S3Synthesis,
    Evaluation,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Corpus => "corpus",
            Stage::SemanticUnits => "semantic-units",
            Stage::Codec => "codec",
            Stage::S1Translate => "s1-translate",
            Stage::S2Acoustic => "s2-acoustic",
            Stage::S3Synthesis => "s3-synthesis",
            Stage::Evaluation => "evaluation",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("configuration: {0}")]
    Config(String),
}

impl PipelineError {
    pub fn stage(stage: Stage, err: impl std::fmt::Display) -> Self {
        Self::Stage {
            stage,
            message: err.to_string(),
        }
    }
}

macro_rules! stage_err {
    ($stage:expr, $ty:ty) => {
        impl From<(Stage, $ty)> for PipelineError {
            fn from((stage, e): (Stage, $ty)) -> Self {
                PipelineError::stage(stage, e)
            }
        }
    };
}

stage_err!(Stage::SemanticUnits, ClusterError);
stage_err!(Stage::Codec, CodecError);
stage_err!(Stage::S1Translate, S2utError);
stage_err!(Stage::S2Acoustic, ModelError);
stage_err!(Stage::S2Acoustic, SequenceError);
stage_err!(Stage::S3Synthesis, VocoderError);
stage_err!(Stage::Evaluation, TimbreError);

fn io_stage(stage: Stage) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError::stage(stage, e)
}

/// All loaded artifacts needed for inference.
pub struct PipelineContext {
    pub config: PipelineConfig,
    pub extractor: FeatureExtractor<Real>,
    pub codec: Codec<Real>,
    pub km: KmeansCodebook<Real>,
    pub rvq: RvqCodebookSet<Real>,
    pub s2ut: S2utModel<Real>,
    pub lm: AcousticLm<Real>,
    pub vocoder: Option<VocoderGenerator<Real>>,
}

pub struct PipelineOutput {
    pub wave: Waveform<Real>,
    pub source_units: SemanticUnitSeq,
    pub translated_units: SemanticUnitSeq,
    pub source_grid: AcousticUnitGrid,
    pub generated_grid: AcousticUnitGrid,
    pub stop: StopReason,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub sim_source: f64,
    pub sim_other: f64,
    pub generated_frames: usize,
    pub output_path: String,
    pub output_hash: u64,
    /// Output audio had no usable timbre (e.g. empty or silent); its
    /// similarities are reported as 0 and it counts as a lost comparison.
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub unit_bleu: f64,
    pub shuffled_unit_bleu: f64,
    pub mean_sim_source: f64,
    pub mean_sim_other: f64,
    /// Fraction of rows with sim_source > sim_other.
    pub style_win_rate: f64,
    pub rows: Vec<EvalRow>,
    pub config_fingerprint: u64,
    pub seed: u64,
}

/// Semantic units of a waveform on the pipeline path. The waveform tail is
/// zero-padded by one hop so the semantic frame count equals the codec
/// frame count (both len / 320), and the features are per-utterance
/// mean-normalized before quantization so the units track content rather
/// than speaker.
pub fn semantic_units_for(
    wave: &Waveform<Real>,
    extractor: &FeatureExtractor<Real>,
    km: &KmeansCodebook<Real>,
) -> Result<SemanticUnitSeq, ClusterError> {
    let frames = aligned_semantic_features(wave, extractor);
    quantize_mat(&frames, km)
}

fn aligned_semantic_features(
    wave: &Waveform<Real>,
    extractor: &FeatureExtractor<Real>,
) -> Mat<Real> {
    let mut padded = wave.samples.clone();
    padded.extend(std::iter::repeat(0.0 as Real).take(crate::features::WINDOW - crate::HOP));
    let padded = Waveform::new(padded, wave.sample_rate);
    let frames = extractor.extract(&padded);
    mean_normalize(&frames).frames
}

fn load_wave(dir: &Path, rel: &str, stage: Stage) -> Result<Waveform<Real>, PipelineError> {
    read_wav(&dir.join(rel)).map_err(|e| PipelineError::stage(stage, e))
}

/// Collects per-utterance mean-normalized semantic features of the train
/// split (source and canonical target sides), subsampled to the fit cap.
pub fn train_semantic_km(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    seed: u64,
) -> Result<(KmeansCodebook<Real>, crate::kmeans::FitReport), PipelineError> {
    let extractor = FeatureExtractor::new(config.features.clone());
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    if entries.is_empty() {
        return Err(PipelineError::Config("train split is empty".into()));
    }
    let frames: Vec<Mat<Real>> = entries
        .par_iter()
        .map(|e| -> Result<Mat<Real>, PipelineError> {
            let src = load_wave(corpus_dir, &e.audio_path, Stage::SemanticUnits)?;
            let tgt = load_wave(corpus_dir, &e.target_audio_path, Stage::SemanticUnits)?;
            let mut m = aligned_semantic_features(&src, &extractor);
            let t = aligned_semantic_features(&tgt, &extractor);
            let mut data = Vec::with_capacity((m.rows() + t.rows()) * m.cols());
            data.extend_from_slice(m.data());
            data.extend_from_slice(t.data());
            m = Mat::from_vec(m.rows() + t.rows(), t.cols(), data);
            Ok(m)
        })
        .collect::<Result<_, _>>()?;
    let total: usize = frames.iter().map(Mat::rows).sum();
    let keep_every = (total / config.train.max_fit_frames.max(1)).max(1);
    let dim = config.features.n_bands;
    let mut data = Vec::new();
    let mut row_idx = 0usize;
    for m in &frames {
        for r in 0..m.rows() {
            if row_idx % keep_every == 0 {
                data.extend_from_slice(m.row(r));
            }
            row_idx += 1;
        }
    }
    let sampled = Mat::from_vec(data.len() / dim, dim, data);
    kmeans_fit(&sampled, config.k_semantic, seed, config.train.kmeans_max_iters)
        .map_err(|e| PipelineError::stage(Stage::SemanticUnits, e))
}

/// Fits the residual-vector-quantizer codebooks on codec band features of
/// the train split.
pub fn train_codec(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    seed: u64,
) -> Result<(RvqCodebookSet<Real>, crate::codec::RvqFitReport), PipelineError> {
    let codec = Codec::new(config.codec.clone());
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    if entries.is_empty() {
        return Err(PipelineError::Config("train split is empty".into()));
    }
    let frames: Vec<Mat<Real>> = entries
        .par_iter()
        .map(|e| -> Result<Mat<Real>, PipelineError> {
            let src = load_wave(corpus_dir, &e.audio_path, Stage::Codec)?;
            let tgt = load_wave(corpus_dir, &e.target_audio_path, Stage::Codec)?;
            let a = codec.analyze(&src);
            let b = codec.analyze(&tgt);
            let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
            Ok(Mat::from_vec(a.rows() + b.rows(), a.cols(), data))
        })
        .collect::<Result<_, _>>()?;
    let total: usize = frames.iter().map(Mat::rows).sum();
    let keep_every = (total / config.train.max_fit_frames.max(1)).max(1);
    let dim = config.codec.n_bands;
    let mut data = Vec::new();
    let mut row_idx = 0usize;
    for m in &frames {
        for r in 0..m.rows() {
            if row_idx % keep_every == 0 {
                data.extend_from_slice(m.row(r));
            }
            row_idx += 1;
        }
    }
    let sampled = Mat::from_vec(data.len() / dim, dim, data);
    crate::codec::rvq_fit(&sampled, &config.codec, seed, config.train.kmeans_max_iters)
        .map_err(|e| PipelineError::stage(Stage::Codec, e))
}

/// (source units, target units) pairs of a split.
pub fn build_s2ut_pairs(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    km: &KmeansCodebook<Real>,
    split: Split,
) -> Result<Vec<(String, Vec<u32>, Vec<u32>)>, PipelineError> {
    let extractor = FeatureExtractor::new(config.features.clone());
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| -> Result<(String, Vec<u32>, Vec<u32>), PipelineError> {
            let src = load_wave(corpus_dir, &e.audio_path, Stage::S1Translate)?;
            let tgt = load_wave(corpus_dir, &e.target_audio_path, Stage::S1Translate)?;
            let su = semantic_units_for(&src, &extractor, km)
                .map_err(|err| PipelineError::stage(Stage::S1Translate, err))?;
            let mut tu = semantic_units_for(&tgt, &extractor, km)
                .map_err(|err| PipelineError::stage(Stage::S1Translate, err))?;
            if config.s1_dedup {
                tu = dedup_consecutive(&tu);
            }
            Ok((e.utterance_id.clone(), su.units, tu.units))
        })
        .collect()
}

/// Trains the S1 translator; returns the model and last metrics.
pub fn train_s2ut(
    config: &PipelineConfig,
    pairs: &[(String, Vec<u32>, Vec<u32>)],
    seed: u64,
    mut progress: impl FnMut(usize, &crate::s2ut::S2utMetrics),
) -> Result<S2utModel<Real>, PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::Config("no S1 training pairs".into()));
    }
    let mut model = S2utModel::<Real>::new(config.s2ut, split_seed(seed, 1));
    let mut adam = Adam::new(&model, config.train.s2ut_adam);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 2));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.train.s2ut_steps {
        let mut batch = Vec::with_capacity(config.train.s2ut_batch);
        for _ in 0..config.train.s2ut_batch {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (_, s, t) = &pairs[order[cursor]];
            batch.push((&s[..], &t[..]));
            cursor += 1;
        }
        let metrics = model
            .train_step(&batch, &mut adam)
            .map_err(|e| PipelineError::stage(Stage::S1Translate, e))?;
        progress(step, &metrics);
    }
    Ok(model)
}

/// Self-supervised S2 training examples from a split: prompt on the first
/// three seconds, predict the rest. Both the multi-speaker source side and
/// the canonical target side contribute utterances. Too-short utterances
/// are skipped (counted in the return).
pub fn build_lm_examples(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    km: &KmeansCodebook<Real>,
    rvq: &RvqCodebookSet<Real>,
    split: Split,
) -> Result<(Vec<TokenSequence>, usize), PipelineError> {
    let extractor = FeatureExtractor::new(config.features.clone());
    let codec = Codec::new(config.codec.clone());
    let vocab = config.vocab();
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    let results: Vec<Result<Vec<Option<TokenSequence>>, PipelineError>> = entries
        .par_iter()
        .map(|e| {
            let mut out = Vec::with_capacity(2);
            for rel in [&e.audio_path, &e.target_audio_path] {
                let wave = load_wave(corpus_dir, rel, Stage::S2Acoustic)?;
                let units = semantic_units_for(&wave, &extractor, km)
                    .map_err(|err| PipelineError::stage(Stage::S2Acoustic, err))?;
                let grid = codec
                    .encode(&wave, rvq)
                    .map_err(|err| PipelineError::stage(Stage::S2Acoustic, err))?;
                debug_assert_eq!(units.len(), grid.t_frames());
                match make_training_example(&grid, &units, &vocab) {
                    Ok(seq) => out.push(Some(seq)),
                    Err(SequenceError::TooShort { .. }) => out.push(None),
                    Err(err) => return Err(PipelineError::stage(Stage::S2Acoustic, err)),
                }
            }
            Ok(out)
        })
        .collect();
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for r in results {
        for item in r? {
            match item {
                Some(seq) => examples.push(seq),
                None => skipped += 1,
            }
        }
    }
    Ok((examples, skipped))
}

/// Trains the acoustic language model on prepared examples.
pub fn train_lm(
    config: &PipelineConfig,
    examples: &[TokenSequence],
    seed: u64,
    mut progress: impl FnMut(usize, &TrainMetrics, &AcousticLm<Real>),
) -> Result<AcousticLm<Real>, PipelineError> {
    if examples.is_empty() {
        return Err(PipelineError::Config("no S2 training examples".into()));
    }
    let mut model = AcousticLm::<Real>::new(config.vocab(), config.lm, split_seed(seed, 3));
    let mut adam = Adam::new(&model, config.train.lm_adam);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 4));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.train.lm_steps {
        let mut batch = Vec::with_capacity(config.train.lm_batch);
        for _ in 0..config.train.lm_batch {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let metrics = model
            .train_step(&batch, &mut adam)
            .map_err(|e| PipelineError::stage(Stage::S2Acoustic, e))?;
        progress(step, &metrics, &model);
    }
    Ok(model)
}

/// Trains the vocoder on (grid, waveform) pairs from the train split.
pub fn train_vocoder(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    rvq: &RvqCodebookSet<Real>,
    seed: u64,
    mut progress: impl FnMut(usize, &VocoderLosses),
) -> Result<(VocoderGenerator<Real>, VocoderDiscriminators<Real>), PipelineError> {
    let codec = Codec::new(config.codec.clone());
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    if entries.is_empty() {
        return Err(PipelineError::Config("train split is empty".into()));
    }
    let data: Vec<(AcousticUnitGrid, Waveform<Real>)> = entries
        .par_iter()
        .map(|e| -> Result<(AcousticUnitGrid, Waveform<Real>), PipelineError> {
            let wave = load_wave(corpus_dir, &e.audio_path, Stage::S3Synthesis)?;
            let grid = codec
                .encode(&wave, rvq)
                .map_err(|err| PipelineError::stage(Stage::S3Synthesis, err))?;
            Ok((grid, wave))
        })
        .collect::<Result<_, _>>()?;
    let mut gen = VocoderGenerator::<Real>::new(config.vocoder.clone(), split_seed(seed, 5))
        .map_err(|e| PipelineError::stage(Stage::S3Synthesis, e))?;
    let mut disc = VocoderDiscriminators::<Real>::new(config.discriminators.clone(), split_seed(seed, 6));
    let mut adam_g = Adam::new(&gen, config.train.vocoder_adam);
    let mut adam_d = Adam::new(&disc, config.train.vocoder_adam);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 7));
    for step in 0..config.train.vocoder_steps {
        let batch: Vec<(&AcousticUnitGrid, &Waveform<Real>)> = (0..config.train.vocoder_batch)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                (&data[i].0, &data[i].1)
            })
            .collect();
        let losses = vocoder_train_step(
            &mut gen,
            &mut disc,
            &batch,
            &config.loss_weights,
            &mut adam_g,
            &mut adam_d,
        )
        .map_err(|e| PipelineError::stage(Stage::S3Synthesis, e))?;
        progress(step, &losses);
    }
    Ok((gen, disc))
}

impl PipelineContext {
    /// Loads every artifact for inference, verifying the vocab layout
    /// recorded in the model checkpoints against the configuration.
    pub fn load(config: PipelineConfig, paths: &RunPaths) -> Result<Self, PipelineError> {
        let vocab = config.vocab();
        let km_ck = Checkpoint::load(&paths.km_codebook())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let km = kmeans_from_checkpoint::<Real>(&km_ck)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let rvq = load_rvq(&paths.rvq_codebook())?;
        let mut s2ut = S2utModel::<Real>::new(config.s2ut, 0);
        let s2_ck = Checkpoint::load(&paths.s2ut_model())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        load_model_params(&mut s2ut, &s2_ck, "s2ut")
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut lm = AcousticLm::<Real>::new(vocab, config.lm, 0);
        let lm_ck = Checkpoint::load(&paths.lm_model())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        check_vocab_hash(&lm_ck, vocab.hash()).map_err(|e| PipelineError::Config(e.to_string()))?;
        load_model_params(&mut lm, &lm_ck, "acoustic-lm")
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let vocoder = if paths.vocoder_model().exists() {
            let ck = Checkpoint::load(&paths.vocoder_model())
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            let mut gen = VocoderGenerator::<Real>::new(config.vocoder.clone(), 0)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            load_model_params(&mut gen, &ck, "vocoder-generator")
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            Some(gen)
        } else {
            None
        };
        Ok(Self {
            extractor: FeatureExtractor::new(config.features.clone()),
            codec: Codec::new(config.codec.clone()),
            config,
            km,
            rvq,
            s2ut,
            lm,
            vocoder,
        })
    }

    pub fn from_parts(
        config: PipelineConfig,
        km: KmeansCodebook<Real>,
        rvq: RvqCodebookSet<Real>,
        s2ut: S2utModel<Real>,
        lm: AcousticLm<Real>,
        vocoder: Option<VocoderGenerator<Real>>,
    ) -> Self {
        Self {
            extractor: FeatureExtractor::new(config.features.clone()),
            codec: Codec::new(config.codec.clone()),
            config,
            km,
            rvq,
            s2ut,
            lm,
            vocoder,
        }
    }

    /// Full Fig-1-style inference: S1 translate, prompt-conditioned S2
    /// generation, S3 synthesis. Deterministic for a fixed seed.
    pub fn run_pipeline(
        &self,
        source: &Waveform<Real>,
        seed: u64,
    ) -> Result<PipelineOutput, PipelineError> {
        let source_units = semantic_units_for(source, &self.extractor, &self.km)
            .map_err(|e| PipelineError::stage(Stage::SemanticUnits, e))?;
        let mut translated = self
            .s2ut
            .translate(&source_units, &self.config.decode)
            .map_err(|e| PipelineError::stage(Stage::S1Translate, e))?;
        if self.config.s1_dedup {
            translated = expand_uniform(&translated, self.config.s1_expand_repeat);
        }
        let source_grid = self
            .codec
            .encode(source, &self.rvq)
            .map_err(|e| PipelineError::stage(Stage::Codec, e))?;
        let prefix = make_inference_prefix(&source_grid, &translated, &self.config.vocab())
            .map_err(|e| PipelineError::stage(Stage::S2Acoustic, e))?;
        let sampling = SamplingConfig {
            seed: split_seed(seed, 0x53414d50),
            max_frames: (translated.len() * 2).clamp(8, self.config.sampling.max_frames),
            ..self.config.sampling
        };
        let GenerateOutput { grid, stop } = self
            .lm
            .generate(&prefix, &sampling)
            .map_err(|e| PipelineError::stage(Stage::S2Acoustic, e))?;
        let wave = match self.config.synthesis {
            SynthesisBackend::Codec => {
                let features = dequantize(&grid, &self.rvq)
                    .map_err(|e| PipelineError::stage(Stage::S3Synthesis, e))?;
                self.codec.synthesize(&features)
            }
            SynthesisBackend::Vocoder => {
                let gen = self.vocoder.as_ref().ok_or_else(|| {
                    PipelineError::Config("vocoder synthesis requested but no vocoder checkpoint".into())
                })?;
                gen.vocode(&grid)
                    .map_err(|e| PipelineError::stage(Stage::S3Synthesis, e))?
            }
        };
        Ok(PipelineOutput {
            wave,
            source_units,
            translated_units: translated,
            source_grid,
            generated_grid: grid,
            stop,
        })
    }

    /// Runs the pipeline over a split and scores it: corpus unit-BLEU of
    /// re-extracted output units against the reference target units (plus a
    /// shuffled baseline), and timbre similarity of each output against its
    /// source utterance versus a random other-speaker utterance.
    pub fn evaluate(
        &self,
        manifest: &CorpusManifest,
        corpus_dir: &Path,
        split: Split,
        seed: u64,
        out_dir: &Path,
    ) -> Result<EvalReport, PipelineError> {
        let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
        if entries.is_empty() {
            return Err(PipelineError::Config(format!("split {split} is empty")));
        }
        std::fs::create_dir_all(out_dir).map_err(io_stage(Stage::Evaluation))?;

        struct UttResult {
            row: EvalRow,
            hyp_units: Vec<u32>,
            ref_units: Vec<u32>,
            output: Waveform<Real>,
            source: Waveform<Real>,
        }

        let results: Vec<UttResult> = entries
            .par_iter()
            .enumerate()
            .map(|(idx, e)| -> Result<UttResult, PipelineError> {
                let source = load_wave(corpus_dir, &e.audio_path, Stage::Evaluation)?;
                let target = load_wave(corpus_dir, &e.target_audio_path, Stage::Evaluation)?;
                let out = self.run_pipeline(&source, split_seed(seed, idx as u64))?;
                let hyp_units = semantic_units_for(&out.wave, &self.extractor, &self.km)
                    .map_err(|err| PipelineError::stage(Stage::Evaluation, err))?;
                let ref_units = semantic_units_for(&target, &self.extractor, &self.km)
                    .map_err(|err| PipelineError::stage(Stage::Evaluation, err))?;
                let rel = format!("{}_out.wav", e.utterance_id);
                write_wav(&out.wave, &out_dir.join(&rel))
                    .map_err(|err| PipelineError::stage(Stage::Evaluation, err))?;
                let bytes = std::fs::read(out_dir.join(&rel)).map_err(io_stage(Stage::Evaluation))?;
                Ok(UttResult {
                    row: EvalRow {
                        utterance_id: e.utterance_id.clone(),
                        speaker_id: e.speaker_id.clone(),
                        sim_source: 0.0,
                        sim_other: 0.0,
                        generated_frames: out.generated_grid.t_frames(),
                        output_path: rel,
                        output_hash: crate::fnv1a64(&bytes),
                        degenerate: false,
                    },
                    hyp_units: hyp_units.units,
                    ref_units: ref_units.units,
                    output: out.wave,
                    source,
                })
            })
            .collect::<Result<_, _>>()?;

        // z-normalization statistics over the split's reference sources and
        // the synthesized outputs
        let mut embeddings = Vec::new();
        for r in &results {
            embeddings.push(
                raw_embedding(&r.source).map_err(|e| PipelineError::stage(Stage::Evaluation, e))?,
            );
            match raw_embedding(&r.output) {
                Ok(e) => embeddings.push(e),
                Err(_) => {} // degenerate outputs: flagged per-row below
            }
        }
        let norm = TimbreNormalizer::fit(&embeddings)
            .map_err(|e| PipelineError::stage(Stage::Evaluation, e))?;

        // contrast speakers: a random other-speaker utterance per row
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x4f54_4845_52));
        let mut rows = Vec::with_capacity(results.len());
        let mut hyps = Vec::with_capacity(results.len());
        let mut refs = Vec::with_capacity(results.len());
        for r in &results {
            let others: Vec<usize> = (0..results.len())
                .filter(|&j| results[j].row.speaker_id != r.row.speaker_id)
                .collect();
            if others.is_empty() {
                return Err(PipelineError::Config(
                    "need at least two speakers in the split for the contrast metric".into(),
                ));
            }
            let other = &results[others[rng.random_range(0..others.len())]];
            let mut row = r.row.clone();
            match (
                timbre_similarity(&r.output, &r.source, &norm),
                timbre_similarity(&r.output, &other.source, &norm),
            ) {
                (Ok(sim_source), Ok(sim_other)) => {
                    row.sim_source = sim_source;
                    row.sim_other = sim_other;
                }
                _ => {
                    row.degenerate = true;
                }
            }
            rows.push(row);
            hyps.push(r.hyp_units.clone());
            refs.push(r.ref_units.clone());
        }

        let unit_bleu = corpus_bleu(&hyps, &refs);
        let mut shuffled = hyps.clone();
        let mut srng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x53485546));
        for h in &mut shuffled {
            h.shuffle(&mut srng);
        }
        let shuffled_unit_bleu = corpus_bleu(&shuffled, &refs);

        let n = rows.len() as f64;
        let mean_sim_source = rows.iter().map(|r| r.sim_source).sum::<f64>() / n;
        let mean_sim_other = rows.iter().map(|r| r.sim_other).sum::<f64>() / n;
        let style_win_rate =
            rows.iter().filter(|r| r.sim_source > r.sim_other).count() as f64 / n;

        let report = EvalReport {
            split,
            unit_bleu,
            shuffled_unit_bleu,
            mean_sim_source,
            mean_sim_other,
            style_win_rate,
            rows,
            config_fingerprint: self.config.fingerprint(),
            seed,
        };
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| PipelineError::stage(Stage::Evaluation, e))?;
        std::fs::write(out_dir.join("report.json"), json).map_err(io_stage(Stage::Evaluation))?;
        Ok(report)
    }
}

fn load_rvq(path: &Path) -> Result<RvqCodebookSet<Real>, PipelineError> {
    let ckpt = Checkpoint::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
    rvq_from_checkpoint(&ckpt).map_err(|e| PipelineError::Config(e.to_string()))
}

/// RVQ codebook container: one `level{c}.centroids` / `level{c}.counts`
/// pair per level, level count in the metadata.
pub fn rvq_to_checkpoint(rvq: &RvqCodebookSet<Real>) -> Checkpoint {
    let mut arrays = Vec::new();
    for (c, level) in rvq.levels.iter().enumerate() {
        arrays.push((
            format!("level{c}.centroids"),
            vec![level.k(), level.dim()],
            level.centroids.data().iter().map(|v| *v as f64).collect(),
        ));
        arrays.push((
            format!("level{c}.counts"),
            vec![level.k(), 1],
            level.counts.iter().map(|&x| x as f64).collect(),
        ));
    }
    Checkpoint {
        kind: "rvq-codebook".into(),
        dtype: Real::DTYPE.into(),
        vocab_hash: None,
        meta: serde_json::json!({ "levels": rvq.n_levels() }),
        arrays,
    }
}

pub fn rvq_from_checkpoint(ckpt: &Checkpoint) -> Result<RvqCodebookSet<Real>, CheckpointError> {
    if ckpt.kind != "rvq-codebook" {
        return Err(CheckpointError::KindMismatch {
            expected: "rvq-codebook".into(),
            found: ckpt.kind.clone(),
        });
    }
    let n_levels = ckpt
        .meta
        .get("levels")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Format("missing level count".into()))? as usize;
    let mut levels = Vec::with_capacity(n_levels);
    for c in 0..n_levels {
        let (_, shape, data) = ckpt.array(&format!("level{c}.centroids"))?;
        let centroids = Mat::from_vec(
            shape[0],
            shape[1],
            data.iter().map(|&v| v as Real).collect(),
        );
        let (_, _, counts) = ckpt.array(&format!("level{c}.counts"))?;
        levels.push(KmeansCodebook {
            centroids,
            counts: counts.iter().map(|&v| v as u64).collect(),
        });
    }
    Ok(RvqCodebookSet { levels })
}

/// Convenience wrappers for saving stage artifacts.
pub fn save_km(km: &KmeansCodebook<Real>, path: &Path) -> Result<(), CheckpointError> {
    kmeans_to_checkpoint(km, "kmeans-codebook").save(path)
}

pub fn save_rvq(rvq: &RvqCodebookSet<Real>, path: &Path) -> Result<(), CheckpointError> {
    rvq_to_checkpoint(rvq).save(path)
}

pub fn save_s2ut(model: &S2utModel<Real>, path: &Path) -> Result<(), CheckpointError> {
    model_to_checkpoint(
        model,
        "s2ut",
        serde_json::to_value(model.cfg).unwrap(),
        None,
    )
    .save(path)
}

pub fn save_lm(model: &AcousticLm<Real>, path: &Path) -> Result<(), CheckpointError> {
    model_to_checkpoint(
        model,
        "acoustic-lm",
        serde_json::to_value(model.cfg).unwrap(),
        Some(model.vocab.hash()),
    )
    .save(path)
}

pub fn save_vocoder(gen: &VocoderGenerator<Real>, path: &Path) -> Result<(), CheckpointError> {
    model_to_checkpoint(
        gen,
        "vocoder-generator",
        serde_json::to_value(&gen.cfg).unwrap(),
        None,
    )
    .save(path)
}
