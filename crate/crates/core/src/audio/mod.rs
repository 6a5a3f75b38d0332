//! Synthetic speech domain: waveform type, WAV I/O, the parametric speaker
//! renderer and the corpus builder.

mod corpus;
mod synth;
mod wav;

pub use corpus::{
    build_corpus, read_manifest, write_manifest, CorpusArtifacts, CorpusConfig, CorpusError,
    CorpusManifest, ManifestEntry, Split,
};
pub use synth::{
    phone_filter_gain, render_utterance, PhoneSeq, PhoneSegment, SpeakerProfile, HARMONICS,
    PHONE_COUNT,
};
pub use wav::{read_wav, write_wav};

use crate::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav format error in field `{field}`: {detail}")]
    WavFormat { field: &'static str, detail: String },
    #[error("sample {index} is outside [-1, 1]: {value}")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("phone duration {ms} ms is not a positive multiple of 20 ms")]
    BadPhoneDuration { ms: u32 },
    #[error("phone id {id} out of range (must be < {max})")]
    BadPhoneId { id: u8, max: u8 },
    #[error("speaker profile invalid: {0}")]
    BadProfile(String),
    #[error("duration arithmetic not exact: {ms} ms at {rate} Hz")]
    InexactDuration { ms: u64, rate: u32 },
}

/// Mono waveform with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root mean square amplitude.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|s| s.as_f64() * s.as_f64()).sum();
        (ss / self.samples.len() as f64).sqrt()
    }
}
