//! Discrete-unit speech-to-speech translation with prompt-based style
//! transfer, on a synthetic speech domain with known ground-truth speakers.
//!
//! The pipeline has three stages over two kinds of discrete units:
//!
//! 1. **S1** ([`s2ut`]): translates source-language semantic units into
//!    target-language semantic units with a small encoder-decoder model.
//! 2. **S2** ([`lm`]): an acoustic language model generates target acoustic
//!    units conditioned on the translated semantic units and the acoustic
//!    units of the source speech, which act as a style prompt.
//! 3. **S3** ([`vocoder`] or [`codec::synthesize`]): turns acoustic units
//!    back into a waveform.
//!
//! Semantic units come from k-means over deterministic spectral features
//! ([`features`], [`kmeans`], [`semantic`]); acoustic units come from a
//! residual-vector-quantized codec ([`codec`]). The synthetic corpus
//! ([`audio`]) provides exact speaker and content ground truth so that both
//! translation accuracy and style transfer are machine-checkable
//! ([`pipeline`], [`bleu`], [`timbre`]).
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`];
//! [`Real`] is the concrete type the pipeline and CLI run at.

pub mod audio;
pub mod bleu;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dsp;
pub mod features;
pub mod kmeans;
pub mod lm;
pub mod mat;
pub mod nn;
pub mod pipeline;
pub mod s2ut;
pub mod semantic;
pub mod seqfmt;
pub mod timbre;
pub mod vocoder;

use std::fmt::{Debug, Display};

/// Scalar type the numeric kernels are generic over: `f32` for speed in the
/// pipeline, `f64` where tests need tight tolerances (gradient checks,
/// factorization identities).
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag recorded in checkpoints and verified on load.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Scalar type the pipeline and CLI run at.
pub type Real = f32;

/// Waveform at the pipeline scalar type.
pub type Wave = audio::Waveform<Real>;

/// Sample rate every waveform in the system uses.
pub const SAMPLE_RATE: u32 = 16_000;

/// Analysis hop shared by the semantic and acoustic unit extractors:
/// 320 samples = 20 ms at 16 kHz, so both unit streams run at 50 Hz.
pub const HOP: usize = 320;

/// 64-bit FNV-1a, used for config fingerprints and vocab-layout hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step; used to derive independent sub-seeds from one seed.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
