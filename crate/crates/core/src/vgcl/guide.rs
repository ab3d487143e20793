use rand::Rng;

use super::schedule::MaskSpan;
use crate::numerics::layers::{EncoderLayer, LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, Var};
use crate::{Error, Result};

/// Which parts of the video path are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuideOptions {
    pub self_attention: bool,
    /// Attend over `[Ṽ ; Ṽ_mask]` rather than the masked part alone.
    pub entire_video: bool,
}

impl Default for GuideOptions {
    fn default() -> Self {
        GuideOptions { self_attention: true, entire_video: true }
    }
}

/// Video self-attention plus audio-to-video cross-attention.
#[derive(Clone, Debug)]
pub struct VideoGuide {
    pub proj: Linear,
    pub encoder: EncoderLayer,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
    pub d: usize,
}

/// Intermediate values of one guide pass.
#[derive(Clone, Copy, Debug)]
pub struct GuideTrace {
    pub guided: Var,
    /// Row-stochastic cross-attention weights, `[T' × keys]`.
    pub weights: Var,
    pub keys: Var,
}

impl VideoGuide {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_v: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(VideoGuide {
            proj: Linear::new(store, &format!("{prefix}.proj"), d_v, d, true, rng)?,
            encoder: EncoderLayer::new(store, &format!("{prefix}.encoder"), d, 4, 2 * d, rng)?,
            q: Linear::new(store, &format!("{prefix}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d, d, true, rng)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), d)?,
            d,
        })
    }

    /// `Ṽ`: projected and optionally self-attended video, `[L × d]`.
    pub fn encode_video(&self, g: &mut Graph, store: &ParamStore, video: Var, self_attention: bool) -> Result<Var> {
        let (_, c) = g.value(video).dims2()?;
        if c != self.proj.d_in {
            return Err(Error::Shape(format!("guide expects video width {}, got {c}", self.proj.d_in)));
        }
        let v = self.proj.forward(g, store, video)?;
        if self_attention {
            self.encoder.forward(g, store, v)
        } else {
            Ok(v)
        }
    }

    /// Keys/values the audio attends to: `[Ṽ ; mask(Ṽ)]`, or the masked
    /// part alone.
    pub fn key_frames(&self, g: &mut Graph, encoded: Var, span: MaskSpan, entire_video: bool) -> Result<Var> {
        let (rows, cols) = g.value(encoded).dims2()?;
        let keep = span.kept_rows(rows);
        let mask: Vec<bool> = (0..rows * cols).map(|i| !keep.contains(&(i / cols))).collect();
        let masked = g.masked_fill(encoded, &mask, 0.0)?;
        if entire_video {
            g.concat(&[encoded, masked], 0)
        } else {
            Ok(masked)
        }
    }

    /// `Ẑ = LayerNorm(z + relu(softmax(Q Kᵀ/√d) V))` with `Q` from `z` and
    /// `K`, `V` from `keys`.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, z: Var, keys: Var) -> Result<GuideTrace> {
        let (_, dz) = g.value(z).dims2()?;
        let (_, dk) = g.value(keys).dims2()?;
        if dz != self.d || dk != self.d {
            return Err(Error::Shape(format!("guide width {}: latents have {dz}, video keys {dk}", self.d)));
        }
        let q = self.q.forward(g, store, z)?;
        let k = self.k.forward(g, store, keys)?;
        let v = self.v.forward(g, store, keys)?;
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, 1.0 / (self.d as f64).sqrt());
        let weights = g.softmax(s, 1)?;
        let a = g.matmul(weights, v)?;
        let a = self.out.forward(g, store, a)?;
        let a = g.relu(a);
        let sum = g.add(z, a)?;
        let guided = self.norm.forward(g, store, sum)?;
        Ok(GuideTrace { guided, weights, keys })
    }

    /// Full guide pass from raw video features.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, video: Var, span: MaskSpan, opts: GuideOptions) -> Result<GuideTrace> {
        let encoded = self.encode_video(g, store, video, opts.self_attention)?;
        let keys = self.key_frames(g, encoded, span, opts.entire_video)?;
        self.attend(g, store, z, keys)
    }
}
