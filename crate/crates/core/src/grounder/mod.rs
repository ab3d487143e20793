//! The grounding network: audio and video encoders, context-query
//! attention, boundary and inside heads, their losses, and span decoding.

mod model;
mod train;

pub use model::{AudioEncoder, Cqa, CqaTrace, Grounder, PredictHeads, ResBlock, Scorer, Scores, VideoEncoder};
pub use train::{predict_all, train, write_predictions, EpochRecord, Prediction};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::numerics::{Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrounderConfig {
    pub d: usize,
    /// Kernel width of the two strided audio convolutions.
    pub audio_kernel: usize,
    pub n_chunks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        GrounderConfig { d: 64, audio_kernel: 4, n_chunks: 1, epochs: 15, batch_size: 16, lr: 1e-3, warmup_steps: 100, clip_norm: 5.0 }
    }
}

impl GrounderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(Error::Config(format!("grounder width {} must be a positive multiple of 4", self.d)));
        }
        if self.audio_kernel == 0 || self.n_chunks == 0 || self.batch_size == 0 {
            return Err(Error::Config("grounder: audio_kernel, n_chunks and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("grounder: lr must be positive".into()));
        }
        Ok(())
    }
}

/// Loss nodes for one sample.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub bound: Var,
    pub inside: Var,
    pub total: Var,
}

/// `L_bound = ½(CE(P_s, τ_s) + CE(P_e, τ_e))`, `L_in = Σ_t BCE(σ(P_i,t), y_t)`,
/// `L_total = L_bound + L_in`.
pub fn losses(g: &mut Graph, scores: &Scores, span: Span) -> Result<Losses> {
    let n = g.value(scores.start).len();
    if span.start > span.end || span.end >= n {
        return Err(Error::Invalid(format!("span ({}, {}) outside 0..{n}", span.start, span.end)));
    }
    let ce_s = g.cross_entropy_from_logits(scores.start, span.start)?;
    let ce_e = g.cross_entropy_from_logits(scores.end, span.end)?;
    let sum = g.add(ce_s, ce_e)?;
    let bound = g.scale(sum, 0.5);
    let labels: Vec<f64> = (0..n).map(|i| if span.contains(i) { 1.0 } else { 0.0 }).collect();
    let inside = g.binary_cross_entropy(scores.inside, &labels)?;
    let total = g.add(bound, inside)?;
    Ok(Losses { bound, inside, total })
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Most probable span with `s ≤ e` under `softmax(P_s)[s]·softmax(P_e)[e]`.
/// Ties go to the smaller start, then the smaller end.
pub fn infer_span(start: &[f64], end: &[f64]) -> Result<Span> {
    if start.is_empty() || start.len() != end.len() {
        return Err(Error::Shape(format!("score lengths {} and {}", start.len(), end.len())));
    }
    let (ps, pe) = (softmax(start), softmax(end));
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for s in 0..ps.len() {
        for e in s..pe.len() {
            let p = ps[s] * pe[e];
            if p > best.0 {
                best = (p, s, e);
            }
        }
    }
    Ok(Span { start: best.1, end: best.2 })
}

/// Which pretraining produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransplantMode {
    Cpc,
    Vgcl,
}

impl TransplantMode {
    pub fn prefix(self) -> &'static str {
        match self {
            TransplantMode::Cpc => crate::cpc::CpcModel::PREFIX,
            TransplantMode::Vgcl => crate::vgcl::VgclModel::PREFIX,
        }
    }
}

impl FromStr for TransplantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpc" => Ok(TransplantMode::Cpc),
            "vgcl" => Ok(TransplantMode::Vgcl),
            other => Err(Error::Config(format!("unknown pretraining mode {other:?} (expected cpc or vgcl)"))),
        }
    }
}

impl fmt::Display for TransplantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Copies the pretrained encoder convolutions and context GRU into the
/// grounder's first audio stage. Everything else in the checkpoint (heads,
/// video guide) stays behind. Returns the number of tensors copied.
pub fn transplant(model: &Grounder, store: &mut ParamStore, checkpoint: &ParamStore, mode: TransplantMode) -> Result<usize> {
    let stage1 = &model.audio.stage1;
    let own = format!("{}.", stage1.prefix);
    let theirs = format!("{}.", mode.prefix());
    if mode == TransplantMode::Vgcl && !checkpoint.iter().any(|p| p.name.starts_with(&format!("{theirs}guide."))) {
        return Err(Error::Invalid("checkpoint has no video guide; not a vgcl checkpoint".into()));
    }
    let mut staged = Vec::new();
    for id in stage1.param_ids() {
        let name = store.name(id).to_string();
        let suffix = name.strip_prefix(&own).expect("stage-1 parameters carry the stage prefix");
        let source = format!("{theirs}{suffix}");
        let value = checkpoint.get(&source).ok_or_else(|| Error::Invalid(format!("checkpoint is missing {source}")))?;
        let expect = store.value(id).shape();
        if value.shape() != expect {
            return Err(Error::Shape(format!("{source}: checkpoint shape {:?}, grounder {name} expects {expect:?}", value.shape())));
        }
        staged.push((name, value.clone()));
    }
    let n = staged.len();
    for (name, value) in staged {
        store.set(&name, value)?;
    }
    Ok(n)
}
