//! Contrastive predictive coding on log-Mel spectrograms.
//!
//! A two-layer strided convolutional encoder maps `T × n_mel` frames to
//! latents `z` at a quarter of the frame rate, a causal GRU summarizes
//! them into contexts `c`, and one bias-free matrix per prediction step
//! scores future latents against negatives drawn from the whole batch.

use serde::{Deserialize, Serialize};

use crate::corpus::{Batches, CorpusFile};
use crate::numerics::layers::{Conv1d, Gru};
use crate::numerics::{Adam, Grads, Graph, ParamId, ParamStore, SeedStream, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcConfig {
    /// Latent and context width.
    pub d: usize,
    /// Prediction steps `K`.
    pub k_steps: usize,
    /// Candidates per anchor `N` (one positive, `N - 1` negatives).
    pub n_candidates: usize,
    pub kernel: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for CpcConfig {
    fn default() -> Self {
        CpcConfig { d: 64, k_steps: 3, n_candidates: 16, kernel: 4, batch_size: 8, lr: 1e-3, warmup_steps: 100, clip_norm: 5.0, log_every: 100 }
    }
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_steps == 0 || self.kernel == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("cpc: d, k_steps, kernel, batch_size and log_every must be positive".into()));
        }
        if self.n_candidates < 2 {
            return Err(Error::Config("cpc: need at least one negative (n_candidates >= 2)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("cpc: lr must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional encoder followed by the causal context GRU. The grounding
/// network's first audio stage has exactly this layout, which is what makes
/// pretrained weights transplantable.
#[derive(Clone, Debug)]
pub struct AudioStage1 {
    pub prefix: String,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub gru: Gru,
    pub n_mel: usize,
    pub d: usize,
}

impl AudioStage1 {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, prefix: &str, n_mel: usize, d: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        Ok(AudioStage1 {
            prefix: prefix.to_string(),
            conv1: Conv1d::new(store, &format!("{prefix}.conv1"), n_mel, d, kernel, 2, rng)?,
            conv2: Conv1d::new(store, &format!("{prefix}.conv2"), d, d, kernel, 2, rng)?,
            gru: Gru::new(store, &format!("{prefix}.gru"), d, d, rng)?,
            n_mel,
            d,
        })
    }

    /// `z = g_enc(x)`, `[ceil(ceil(T/2)/2) × d]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t = g.value(x).rows();
        if t < 4 {
            return Err(Error::Invalid(format!("spectrogram needs at least 4 frames, got {t}")));
        }
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        self.conv2.forward(g, store, h)
    }

    /// Causal summary `c_t` of `z_{≤t}`.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        self.gru.forward(g, store, z)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv1.w, self.conv1.b, self.conv2.w, self.conv2.b, self.gru.w_ih, self.gru.w_hh, self.gru.b_ih, self.gru.b_hh]
    }
}

/// Encoder, context network and prediction heads, all under one name prefix.
#[derive(Clone, Debug)]
pub struct CpcModel {
    pub stage1: AudioStage1,
    pub heads: Vec<ParamId>,
}

impl CpcModel {
    pub const PREFIX: &'static str = "cpc";

    pub fn new<R: rand::Rng>(store: &mut ParamStore, n_mel: usize, cfg: &CpcConfig, rng: &mut R) -> Result<Self> {
        Self::with_prefix(store, Self::PREFIX, n_mel, cfg, rng)
    }

    pub fn with_prefix<R: rand::Rng>(store: &mut ParamStore, prefix: &str, n_mel: usize, cfg: &CpcConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stage1 = AudioStage1::new(store, prefix, n_mel, cfg.d, cfg.kernel, rng)?;
        let heads = make_heads(store, prefix, cfg.d, cfg.k_steps, rng)?;
        Ok(CpcModel { stage1, heads })
    }

    /// Latents and contexts for one spectrogram.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, spectrogram: &Tensor) -> Result<(Var, Var)> {
        let x = g.constant(spectrogram.clone());
        let z = self.stage1.encode(g, store, x)?;
        let c = self.stage1.context(g, store, z)?;
        Ok((z, c))
    }
}

pub(crate) fn make_heads<R: rand::Rng>(store: &mut ParamStore, prefix: &str, d: usize, k: usize, rng: &mut R) -> Result<Vec<ParamId>> {
    (1..=k).map(|i| store.add_uniform(format!("{prefix}.head{i}"), &[d, d], d, d, rng)).collect()
}

/// Candidate indices into the batch's flattened latent pool.
///
/// For step `k` (0-based in `per_k`), row `b·anchors + t` lists `n`
/// indices: the positive `b·t_len + t + k + 1` first, then the negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub batch: usize,
    pub t_len: usize,
    pub anchors: usize,
    pub n: usize,
    pub per_k: Vec<Vec<usize>>,
}

/// Draws `n - 1` negatives per (sample, anchor, step) uniformly from every
/// other position of the batch's latents, excluding the positive.
pub fn draw_candidates<R: rand::Rng>(batch: usize, t_len: usize, k_steps: usize, n: usize, rng: &mut R) -> Result<Candidates> {
    if t_len <= k_steps {
        return Err(Error::Invalid(format!("latent length {t_len} must exceed prediction steps {k_steps}")));
    }
    if batch == 0 || n < 2 {
        return Err(Error::Invalid("need a non-empty batch and at least one negative".into()));
    }
    let pool = batch * t_len;
    let anchors = t_len - k_steps;
    let mut per_k = Vec::with_capacity(k_steps);
    for k in 1..=k_steps {
        let mut idx = Vec::with_capacity(batch * anchors * n);
        for b in 0..batch {
            for t in 0..anchors {
                let pos = b * t_len + t + k;
                idx.push(pos);
                for _ in 1..n {
                    let j = rng.gen_range(0..pool - 1);
                    idx.push(if j >= pos { j + 1 } else { j });
                }
            }
        }
        per_k.push(idx);
    }
    Ok(Candidates { batch, t_len, anchors, n, per_k })
}

/// Loss node and contrastive accuracy of one InfoNCE evaluation.
#[derive(Clone, Copy, Debug)]
pub struct InfoNce {
    pub loss: Var,
    pub accuracy: f64,
}

/// InfoNCE given explicit candidates. `contexts` supply the anchors and
/// `latents` the prediction targets; both hold one `[T' × d]` node per
/// sample.
pub fn infonce_with_candidates(g: &mut Graph, store: &ParamStore, heads: &[ParamId], contexts: &[Var], latents: &[Var], cands: &Candidates) -> Result<InfoNce> {
    if contexts.len() != cands.batch || latents.len() != cands.batch || heads.len() != cands.per_k.len() {
        return Err(Error::Shape(format!(
            "infonce: {} contexts, {} latents, {} heads for candidates of batch {} and {} steps",
            contexts.len(),
            latents.len(),
            heads.len(),
            cands.batch,
            cands.per_k.len()
        )));
    }
    for (&c, &z) in contexts.iter().zip(latents) {
        if g.shape(c) != g.shape(z) || g.value(z).rows() != cands.t_len {
            return Err(Error::Shape(format!("infonce: context {:?} / latent {:?}, expected {} rows", g.shape(c), g.shape(z), cands.t_len)));
        }
    }
    let pool = g.concat(latents, 0)?;
    let anchor_parts = contexts.iter().map(|&c| g.slice(c, 0, 0, cands.anchors)).collect::<Result<Vec<_>>>()?;
    let anchors = g.concat(&anchor_parts, 0)?;
    let rows = cands.batch * cands.anchors;
    let mut total = None;
    let mut correct = 0usize;
    for (&head, idx) in heads.iter().zip(&cands.per_k) {
        let w = g.param(store, head);
        let pred = g.matmul(anchors, w)?;
        let scores = g.matmul_t(pred, pool)?;
        let picked = g.gather_per_row(scores, idx, cands.n)?;
        correct += g
            .value(picked)
            .data()
            .chunks(cands.n)
            .filter(|row| row[1..].iter().all(|&s| row[0] > s))
            .count();
        let logp = g.log_softmax(picked, 1)?;
        let pos = g.gather_per_row(logp, &vec![0; rows], 1)?;
        let s = g.sum(pos);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let terms = (rows * heads.len()) as f64;
    let loss = g.scale(total.expect("at least one head"), -1.0 / terms);
    Ok(InfoNce { loss, accuracy: correct as f64 / terms })
}

/// InfoNCE with freshly drawn in-batch negatives.
pub fn infonce<R: rand::Rng>(g: &mut Graph, store: &ParamStore, heads: &[ParamId], contexts: &[Var], latents: &[Var], n: usize, rng: &mut R) -> Result<InfoNce> {
    let t_len = latents.first().map(|&z| g.value(z).rows()).ok_or_else(|| Error::Invalid("infonce on an empty batch".into()))?;
    let cands = draw_candidates(latents.len(), t_len, heads.len(), n, rng)?;
    infonce_with_candidates(g, store, heads, contexts, latents, &cands)
}

/// Windowed training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Averages losses and accuracies over `every` steps.
pub(crate) struct Window {
    every: usize,
    loss: f64,
    acc: f64,
    n: usize,
}

impl Window {
    pub(crate) fn new(every: usize) -> Self {
        Window { every, loss: 0.0, acc: 0.0, n: 0 }
    }

    pub(crate) fn push(&mut self, step: usize, loss: f64, acc: f64) -> Option<TrainRecord> {
        self.loss += loss;
        self.acc += acc;
        self.n += 1;
        if self.n < self.every {
            return None;
        }
        Some(self.flush(step))
    }

    pub(crate) fn finish(&mut self, step: usize) -> Option<TrainRecord> {
        (self.n > 0).then(|| self.flush(step))
    }

    fn flush(&mut self, step: usize) -> TrainRecord {
        let r = TrainRecord { step, loss: self.loss / self.n as f64, accuracy: self.acc / self.n as f64 };
        *self = Window::new(self.every);
        r
    }
}

/// Cycles through shuffled epochs forever.
pub(crate) struct BatchStream<'a> {
    data: &'a CorpusFile,
    batches: Batches,
    epoch: usize,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub(crate) fn new(data: &'a CorpusFile, batch_size: usize, seed: u64) -> Self {
        BatchStream { data, batches: Batches::new(data.len(), batch_size, seed), epoch: 0, pending: Vec::new().into_iter() }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            let all: Vec<Vec<usize>> = self.batches.epoch(self.data, self.epoch).map(|b| b.indices).collect();
            self.epoch += 1;
            self.pending = all.into_iter();
        }
    }
}

/// Clips, completes and applies one gradient update.
pub(crate) fn apply_update(g: &Graph, store: &mut ParamStore, adam: &mut Adam, clip: f64) -> Result<()> {
    let mut grads = Grads::new(store);
    grads.accumulate(g.param_grads());
    if clip > 0.0 {
        grads.clip_norm(clip);
    }
    adam.step(store, &grads.into_complete(store))
}

/// Runs `steps` InfoNCE updates on the training audio. Returns one record
/// per logging window.
pub fn pretrain(model: &CpcModel, store: &mut ParamStore, data: &CorpusFile, steps: usize, cfg: &CpcConfig, seeds: SeedStream) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("cpc pretraining needs a non-empty dataset".into()));
    }
    let mut adam = Adam::new(store, cfg.lr, cfg.warmup_steps);
    let mut stream = BatchStream::new(data, cfg.batch_size, seeds.child("batches").key());
    let mut rng = seeds.rng("negatives");
    let mut window = Window::new(cfg.log_every);
    let mut log = Vec::new();
    for step in 1..=steps {
        let batch = stream.next_batch();
        let mut g = Graph::new();
        let (mut zs, mut cs) = (Vec::new(), Vec::new());
        for &i in &batch {
            let (z, c) = model.forward(&mut g, store, &data.samples[i].audio)?;
            zs.push(z);
            cs.push(c);
        }
        let out = infonce(&mut g, store, &model.heads, &cs, &zs, cfg.n_candidates, &mut rng)?;
        let loss = g.scalar(out.loss);
        g.backward(out.loss)?;
        apply_update(&g, store, &mut adam, cfg.clip_norm)?;
        if let Some(r) = window.push(step, loss, out.accuracy) {
            log::info!("cpc step {}: loss {:.4} acc {:.3}", r.step, r.loss, r.accuracy);
            log.push(r);
        }
    }
    log.extend(window.finish(steps));
    Ok(log)
}

/// Mean InfoNCE loss and accuracy over `data`, evaluated in batches with
/// negatives drawn from `seed`.
pub fn evaluate(model: &CpcModel, store: &ParamStore, data: &CorpusFile, cfg: &CpcConfig, seed: u64) -> Result<(f64, f64)> {
    let mut rng = SeedStream::new(seed).rng("eval-negatives");
    let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let (mut zs, mut cs) = (Vec::new(), Vec::new());
        for &i in chunk {
            let (z, c) = model.forward(&mut g, store, &data.samples[i].audio)?;
            zs.push(z);
            cs.push(c);
        }
        let out = infonce(&mut g, store, &model.heads, &cs, &zs, cfg.n_candidates, &mut rng)?;
        loss += g.scalar(out.loss) * chunk.len() as f64;
        acc += out.accuracy * chunk.len() as f64;
        n += chunk.len();
    }
    if n == 0 {
        return Err(Error::Invalid("cpc evaluation on an empty dataset".into()));
    }
    Ok((loss / n as f64, acc / n as f64))
}
