//! Grounding samples, the synthetic corpus generator, the on-disk container,
//! batching, and ingestion of precomputed real features.

mod batches;
mod format;
mod ingest;
mod synth;

pub use batches::{Batch, Batches};
pub use format::load;
pub use ingest::{ingest_real, read_feature_bundle, write_feature_bundle, IngestConfig};
pub use synth::{synthesize, SynthConfig, SynthSplits};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Inclusive frame interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Invalid(format!("span start {start} after end {end}")));
        }
        Ok(Span { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

/// One video, its spoken query, and the annotated span.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub sample_id: String,
    /// `N_v × d_v`
    pub video: Tensor,
    /// `N_a × n_mel`
    pub audio: Tensor,
    pub span: Span,
    /// Planted event type (synthetic data only).
    pub event: Option<u32>,
    /// Audio rows before zero padding.
    pub audio_valid: usize,
}

impl GroundingSample {
    pub fn n_v(&self) -> usize {
        self.video.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n_v = self.n_v();
        if self.span.start > self.span.end || self.span.end >= n_v {
            return Err(Error::Corrupt(format!(
                "sample {}: span ({}, {}) outside 0..{n_v}",
                self.sample_id, self.span.start, self.span.end
            )));
        }
        if self.video.data().iter().chain(self.audio.data()).any(|v| v.is_nan()) {
            return Err(Error::Corrupt(format!("sample {} contains NaN", self.sample_id)));
        }
        if self.audio_valid > self.audio.rows() {
            return Err(Error::Corrupt(format!("sample {}: valid audio length {} > {}", self.sample_id, self.audio_valid, self.audio.rows())));
        }
        Ok(())
    }
}

/// A split of the corpus as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFile {
    pub split: String,
    pub n_v: usize,
    pub d_v: usize,
    pub n_a: usize,
    pub n_mel: usize,
    /// Generator tables (event embeddings, phoneme tables, ...).
    pub tables: Vec<(String, Tensor)>,
    pub samples: Vec<GroundingSample>,
}

impl CorpusFile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn table(&self, name: &str) -> Option<&Tensor> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Keeps the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        self.samples.truncate(n);
        self
    }
}
