use rand::Rng;

use super::GrounderConfig;
use crate::cpc::AudioStage1;
use crate::numerics::layers::{BiGru, Conv1d, EncoderLayer, Gru, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// `x + conv_b(relu(conv_a(x)))` at constant length.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv_a: Conv1d,
    pub conv_b: Conv1d,
}

impl ResBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        Ok(ResBlock {
            conv_a: Conv1d::new(store, &format!("{prefix}.conv_a"), d, d, kernel, 1, rng)?,
            conv_b: Conv1d::new(store, &format!("{prefix}.conv_b"), d, d, kernel, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv_a.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.conv_b.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Transplantable first stage followed by residual convolution blocks.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub stage1: AudioStage1,
    pub blocks: Vec<ResBlock>,
}

impl AudioEncoder {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, spectrogram: Var) -> Result<Var> {
        let z = self.stage1.encode(g, store, spectrogram)?;
        let mut a = self.stage1.context(g, store, z)?;
        for b in &self.blocks {
            a = b.forward(g, store, a)?;
        }
        Ok(a)
    }
}

/// Convolution, bidirectional GRU and self-attention over the video frames.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub conv: Conv1d,
    pub bigru: BiGru,
    pub attn: EncoderLayer,
}

impl VideoEncoder {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: Var) -> Result<Var> {
        let h = self.conv.forward(g, store, video)?;
        let h = self.bigru.forward(g, store, h)?;
        self.attn.forward(g, store, h)
    }
}

/// Context-query attention between video (context) and audio (query).
#[derive(Clone, Debug)]
pub struct Cqa {
    pub sim: Linear,
    pub ffn: Linear,
    pub d: usize,
}

/// CQA outputs and the normalized similarity matrices.
#[derive(Clone, Copy, Debug)]
pub struct CqaTrace {
    pub fused: Var,
    pub s_row: Var,
    pub s_col: Var,
    pub beta1: Var,
    pub beta2: Var,
}

impl Cqa {
    /// `S = (V̂W)(AW)ᵀ/√d`, `β₁ = S_r A`, `β₂ = S_r S_cᵀ V̂`,
    /// `V_a = FFN([V̂; β₁; V̂⊙β₁; V̂⊙β₂])`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: Var, audio: Var) -> Result<CqaTrace> {
        let (_, dv) = g.value(video).dims2()?;
        let (_, da) = g.value(audio).dims2()?;
        if dv != self.d || da != self.d {
            return Err(Error::Shape(format!("cqa width {}: video has {dv}, audio {da}", self.d)));
        }
        let vw = self.sim.forward(g, store, video)?;
        let aw = self.sim.forward(g, store, audio)?;
        let s = g.matmul_t(vw, aw)?;
        let s = g.scale(s, 1.0 / (self.d as f64).sqrt());
        let s_row = g.softmax(s, 1)?;
        let s_col = g.softmax(s, 0)?;
        let beta1 = g.matmul(s_row, audio)?;
        let sct = g.transpose(s_col)?;
        let cv = g.matmul(sct, video)?;
        let beta2 = g.matmul(s_row, cv)?;
        let m1 = g.mul(video, beta1)?;
        let m2 = g.mul(video, beta2)?;
        let cat = g.concat(&[video, beta1, m1, m2], 1)?;
        let fused = self.ffn.forward(g, store, cat)?;
        Ok(CqaTrace { fused, s_row, s_col, beta1, beta2 })
    }
}

/// Two-layer scorer `Linear(2d → d) · relu · Linear(d → 1)`.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub hidden: Linear,
    pub out: Linear,
}

impl Scorer {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Scorer {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), 2 * d, d, true, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d, 1, true, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, va: Var) -> Result<Var> {
        let cat = g.concat(&[f, va], 1)?;
        let h = self.hidden.forward(g, store, cat)?;
        let h = g.relu(h);
        let p = self.out.forward(g, store, h)?;
        let n = g.value(p).rows();
        g.reshape(p, &[n])
    }
}

#[derive(Clone, Debug)]
pub struct PredictHeads {
    pub gru_s: Gru,
    pub gru_e: Gru,
    pub gru_i: Gru,
    pub score_s: Scorer,
    pub score_e: Scorer,
    pub score_i: Scorer,
}

/// Unnormalized per-frame scores, each of length `N_v`.
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub start: Var,
    pub end: Var,
    pub inside: Var,
}

impl PredictHeads {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, va: Var) -> Result<Scores> {
        let fs = self.gru_s.forward(g, store, va)?;
        let fe = self.gru_e.forward(g, store, fs)?;
        let fi = self.gru_i.forward(g, store, va)?;
        Ok(Scores {
            start: self.score_s.forward(g, store, fs, va)?,
            end: self.score_e.forward(g, store, fe, va)?,
            inside: self.score_i.forward(g, store, fi, va)?,
        })
    }
}

/// The full grounding network.
#[derive(Clone, Debug)]
pub struct Grounder {
    pub audio: AudioEncoder,
    pub video: VideoEncoder,
    pub cqa: Cqa,
    pub heads: PredictHeads,
    pub n_chunks: usize,
}

impl Grounder {
    pub const PREFIX: &'static str = "grounder";

    pub fn new<R: Rng>(store: &mut ParamStore, n_mel: usize, d_v: usize, cfg: &GrounderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = Self::PREFIX;
        let d = cfg.d;
        let stage1 = AudioStage1::new(store, &format!("{p}.audio"), n_mel, d, cfg.audio_kernel, rng)?;
        let blocks = (1..=2).map(|i| ResBlock::new(store, &format!("{p}.audio.res{i}"), d, 3, rng)).collect::<Result<_>>()?;
        let video = VideoEncoder {
            conv: Conv1d::new(store, &format!("{p}.video.conv"), d_v, d, 3, 1, rng)?,
            bigru: BiGru::new(store, &format!("{p}.video.bigru"), d, d / 2, rng)?,
            attn: EncoderLayer::new(store, &format!("{p}.video.attn"), d, 4, 2 * d, rng)?,
        };
        let cqa = Cqa {
            sim: Linear::new(store, &format!("{p}.cqa.sim"), d, d, false, rng)?,
            ffn: Linear::new(store, &format!("{p}.cqa.ffn"), 4 * d, d, true, rng)?,
            d,
        };
        let heads = PredictHeads {
            gru_s: Gru::new(store, &format!("{p}.head.gru_s"), d, d, rng)?,
            gru_e: Gru::new(store, &format!("{p}.head.gru_e"), d, d, rng)?,
            gru_i: Gru::new(store, &format!("{p}.head.gru_i"), d, d, rng)?,
            score_s: Scorer::new(store, &format!("{p}.head.score_s"), d, rng)?,
            score_e: Scorer::new(store, &format!("{p}.head.score_e"), d, rng)?,
            score_i: Scorer::new(store, &format!("{p}.head.score_i"), d, rng)?,
        };
        Ok(Grounder { audio: AudioEncoder { stage1, blocks }, video, cqa, heads, n_chunks: cfg.n_chunks })
    }

    /// Unchunked forward pass.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: &Tensor, audio: &Tensor) -> Result<Scores> {
        self.forward_chunked(g, store, video, audio, 1)
    }

    /// Splits the audio into `n_chunks` equal temporal pieces (zero-padding
    /// the tail when needed), runs audio encoding, CQA and prediction per
    /// piece against the same encoded video, and averages the scores.
    pub fn forward_chunked(&self, g: &mut Graph, store: &ParamStore, video: &Tensor, audio: &Tensor, n_chunks: usize) -> Result<Scores> {
        if n_chunks == 0 {
            return Err(Error::Invalid("n_chunks must be positive".into()));
        }
        let (t, c) = audio.dims2()?;
        let len = t.div_ceil(n_chunks);
        let v = g.constant(video.clone());
        let v_hat = self.video.forward(g, store, v)?;
        let mut acc: Option<Scores> = None;
        for k in 0..n_chunks {
            let mut data = vec![0.0; len * c];
            let lo = (k * len).min(t);
            let hi = ((k + 1) * len).min(t);
            data[..(hi - lo) * c].copy_from_slice(&audio.data()[lo * c..hi * c]);
            let chunk = g.constant(Tensor::new(&[len, c], data)?);
            let a = self.audio.forward(g, store, chunk)?;
            let fused = self.cqa.forward(g, store, v_hat, a)?.fused;
            let s = self.heads.forward(g, store, fused)?;
            acc = Some(match acc {
                None => s,
                Some(p) => Scores { start: g.add(p.start, s.start)?, end: g.add(p.end, s.end)?, inside: g.add(p.inside, s.inside)? },
            });
        }
        let s = acc.expect("n_chunks >= 1");
        if n_chunks == 1 {
            return Ok(s);
        }
        let f = 1.0 / n_chunks as f64;
        Ok(Scores { start: g.scale(s.start, f), end: g.scale(s.end, f), inside: g.scale(s.inside, f) })
    }
}
