//! Waveforms, MFCC-39 front end, and the binary audio/feature formats.

mod io;
mod mfcc;

pub use io::{
    load_pmsf, read_audio, read_pmsf, read_pmsw, save_pmsf, write_pmsf, write_pmsw, write_wav16, PMSF_MAGIC,
    PMSW_MAGIC,
};
pub use mfcc::{append_deltas, mfcc39, utterance_normalize, MfccConfig, MFCC_DIM, NUM_CEPSTRA};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<S> {
    samples: Vec<S>,
    sample_rate: u32,
}

impl<S: Scalar> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite() || x.abs() > S::one()) {
            return Err(Error::invalid(format!(
                "sample {i} is {} (expected a finite value in [-1, 1])",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[S] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
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
}

/// What a feature matrix was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSource {
    Mfcc,
    /// Hidden states of transformer layer `k` (1-based).
    EncoderLayer(u8),
    /// Anything else (model parameters, codebooks of mixed provenance).
    Raw,
}

impl FeatureSource {
    pub fn tag(self) -> u8 {
        match self {
            FeatureSource::Mfcc => 0,
            FeatureSource::EncoderLayer(k) => k,
            FeatureSource::Raw => u8::MAX,
        }
    }

    pub fn from_tag(tag: u8) -> Self {
        match tag {
            0 => FeatureSource::Mfcc,
            u8::MAX => FeatureSource::Raw,
            k => FeatureSource::EncoderLayer(k),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Mfcc => f.write_str("mfcc"),
            FeatureSource::EncoderLayer(k) => write!(f, "encoder-layer-{k}"),
            FeatureSource::Raw => f.write_str("raw"),
        }
    }
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfcc" => Ok(FeatureSource::Mfcc),
            "raw" => Ok(FeatureSource::Raw),
            other => other
                .strip_prefix("encoder-layer-")
                .and_then(|k| k.parse::<u8>().ok())
                .filter(|&k| k != 0 && k != u8::MAX)
                .map(FeatureSource::EncoderLayer)
                .ok_or_else(|| Error::invalid(format!("unknown feature source `{s}`"))),
        }
    }
}

impl Serialize for FeatureSource {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `T x D` frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    frames: Tensor<S>,
    frame_rate: f64,
    source: FeatureSource,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(frames: Tensor<S>, frame_rate: f64, source: FeatureSource) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::invalid(format!(
                "feature sequence must be a T x D matrix, got {:?}",
                frames.shape()
            )));
        }
        if source == FeatureSource::Mfcc && frames.cols() != MFCC_DIM {
            return Err(Error::invalid(format!(
                "MFCC features must have D = {MFCC_DIM}, got {}",
                frames.cols()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite {
                what: "feature frames".into(),
                context: Some(source.to_string()),
            });
        }
        Ok(Self {
            frames,
            frame_rate,
            source,
        })
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<S> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }
}
