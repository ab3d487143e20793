//! Parameterized building blocks. Each layer owns only [`ParamId`]s; values
//! live in a [`ParamStore`] and are pulled onto a [`Graph`] per forward pass.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let w = store.add_uniform(format!("{prefix}.w"), &[d_in, d_out], d_in, d_out, rng)?;
        let b = if bias { Some(store.add_zeros(format!("{prefix}.b"), &[d_out])?) } else { None };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Same-padded 1-D convolution over the time axis of a `[T × c_in]` input.
#[derive(Clone, Debug)]
pub struct Conv1d {
    /// `[kernel·c_in × c_out]`, rows ordered tap-major.
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{prefix}.w"), &[kernel * c_in, c_out], kernel * c_in, kernel * c_out, rng)?;
        let b = store.add_zeros(format!("{prefix}.b"), &[c_out])?;
        Ok(Conv1d { w, b, kernel, stride, c_in, c_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (t, c) = g.value(x).dims2()?;
        if t == 0 {
            return Err(Error::Shape("conv1d on empty input".into()));
        }
        if c != self.c_in {
            return Err(Error::Shape(format!("conv1d expects {} channels, got {c}", self.c_in)));
        }
        let cols = g.im2col(x, self.kernel, self.stride)?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(cols, w, Some(b))
    }
}

/// Single-layer unidirectional GRU, zero initial state.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        // Same uniform rule applied to each gate block.
        let w_ih = uniform_gates(store, &format!("{prefix}.w_ih"), d_in, hidden, rng)?;
        let w_hh = uniform_gates(store, &format!("{prefix}.w_hh"), hidden, hidden, rng)?;
        let b_ih = store.add_zeros(format!("{prefix}.b_ih"), &[3 * hidden])?;
        let b_hh = store.add_zeros(format!("{prefix}.b_hh"), &[3 * hidden])?;
        Ok(Gru { w_ih, w_hh, b_ih, b_hh, d_in, hidden })
    }

    /// Hidden states for every step of `x[T × d_in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, c) = g.value(x).dims2()?;
        if c != self.d_in {
            return Err(Error::Shape(format!("gru expects width {}, got {c}", self.d_in)));
        }
        let w_ih = g.param(store, self.w_ih);
        let b_ih = g.param(store, self.b_ih);
        let gx = g.linear(x, w_ih, Some(b_ih))?;
        let w_hh = g.param(store, self.w_hh);
        let b_hh = g.param(store, self.b_hh);
        g.gru_seq(gx, w_hh, b_hh)
    }

    /// One GRU step built from primitive ops: `x[1×d_in]`, `h[1×hidden]`.
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        if g.shape(x) != [1, self.d_in] || g.shape(h) != [1, hd] {
            return Err(Error::Shape(format!(
                "gru cell expects x [1, {}] and h [1, {hd}], got {:?} and {:?}",
                self.d_in,
                g.shape(x),
                g.shape(h)
            )));
        }
        let w_ih = g.param(store, self.w_ih);
        let b_ih = g.param(store, self.b_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_hh = g.param(store, self.b_hh);
        let gx = g.linear(x, w_ih, Some(b_ih))?;
        let gh = g.linear(h, w_hh, Some(b_hh))?;
        let xr = g.slice(gx, 1, 0, hd)?;
        let xu = g.slice(gx, 1, hd, hd)?;
        let xn = g.slice(gx, 1, 2 * hd, hd)?;
        let hr = g.slice(gh, 1, 0, hd)?;
        let hu = g.slice(gh, 1, hd, hd)?;
        let hn = g.slice(gh, 1, 2 * hd, hd)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let u = g.add(xu, hu)?;
        let u = g.sigmoid(u);
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        // h' = (1-u)·n + u·h = n + u·(h - n)
        let diff = g.sub(h, n)?;
        let carry = g.mul(u, diff)?;
        g.add(n, carry)
    }
}

fn uniform_gates<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<ParamId> {
    let a = (6.0 / (d_in + hidden) as f64).sqrt();
    let data = (0..d_in * 3 * hidden).map(|_| rng.gen_range(-a..a)).collect();
    store.add(name, super::Tensor::new(&[d_in, 3 * hidden], data)?)
}

/// Forward and backward GRUs whose outputs are concatenated.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    /// Output width is `2 · half`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, half: usize, rng: &mut R) -> Result<Self> {
        Ok(BiGru {
            fwd: Gru::new(store, &format!("{prefix}.fwd"), d_in, half, rng)?,
            bwd: Gru::new(store, &format!("{prefix}.bwd"), d_in, half, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.fwd.forward(g, store, x)?;
        let xr = g.reverse_rows(x)?;
        let b = self.bwd.forward(g, store, xr)?;
        let b = g.reverse_rows(b)?;
        g.concat(&[f, b], 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm { gain: store.add_ones(format!("{prefix}.gain"), &[d])?, bias: store.add_zeros(format!("{prefix}.bias"), &[d])? })
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, axis, Some(gain), Some(bias))
    }
}

/// Multi-head scaled dot-product attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{prefix}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d, d, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let d = self.q.d_out;
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.forward(g, store, cat)
    }
}

/// Post-norm transformer encoder layer: attention then a ReLU FFN, each
/// wrapped in a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, ffn_width: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), d, ffn_width, true, rng)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), ffn_width, d, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x)?;
        let x1 = g.add(x, a)?;
        let x1 = self.norm1.forward(g, store, x1)?;
        let h = self.ff1.forward(g, store, x1)?;
        let h = g.relu(h);
        let h = self.ff2.forward(g, store, h)?;
        let x2 = g.add(x1, h)?;
        self.norm2.forward(g, store, x2)
    }
}
