//! Video-guided curriculum pretraining.
//!
//! The audio encoder and context GRU have the same layout as in [`crate::cpc`],
//! but the GRU reads latents that were first enriched by cross-attention over
//! the video. The visible video window starts at the annotated span and
//! widens stage by stage until the whole clip is shown. Prediction targets
//! stay the unguided latents.

mod guide;
mod schedule;

pub use guide::{GuideOptions, GuideTrace, VideoGuide};
pub use schedule::{apply_mask, mask_bounds, stage_steps, MaskSpan, Pacing};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusFile, GroundingSample};
use crate::cpc::{apply_update, infonce_with_candidates, make_heads, AudioStage1, BatchStream, Candidates, CpcConfig, InfoNce, Window};
use crate::numerics::{Adam, Graph, ParamId, ParamStore, SeedStream, Var};
use crate::{Error, Result};

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantFlags {
    /// Always show the whole clip (`t = κ`, `γ = 1`).
    pub no_curriculum: bool,
    /// Attend over the masked part only.
    pub no_entire_video: bool,
    /// Skip the video self-attention layer.
    pub no_self_attention: bool,
}

impl VariantFlags {
    pub fn guide_options(&self) -> GuideOptions {
        GuideOptions { self_attention: !self.no_self_attention, entire_video: !self.no_entire_video }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub kappa: usize,
    pub pacing: Pacing,
    pub total_steps: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { kappa: 10, pacing: Pacing::Linear, total_steps: 2000 }
    }
}

/// Audio stage, guide and the guided prediction heads `Ŵ_k`.
#[derive(Clone, Debug)]
pub struct VgclModel {
    pub stage1: AudioStage1,
    pub guide: VideoGuide,
    pub heads: Vec<ParamId>,
}

/// Latents, guided contexts and the guide's internals for one sample.
#[derive(Clone, Copy, Debug)]
pub struct GuidedPass {
    pub latents: Var,
    pub contexts: Var,
    pub trace: Option<GuideTrace>,
}

impl VgclModel {
    pub const PREFIX: &'static str = "vgcl";

    pub fn new<R: Rng>(store: &mut ParamStore, n_mel: usize, d_v: usize, cfg: &CpcConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = Self::PREFIX;
        let stage1 = AudioStage1::new(store, p, n_mel, cfg.d, cfg.kernel, rng)?;
        let heads = make_heads(store, p, cfg.d, cfg.k_steps, rng)?;
        let guide = VideoGuide::new(store, &format!("{p}.guide"), d_v, cfg.d, rng)?;
        Ok(VgclModel { stage1, guide, heads })
    }

    /// Encodes the audio and runs the guided context. With `span = None`
    /// the guide is bypassed and the GRU reads the raw latents.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sample: &GroundingSample, span: Option<MaskSpan>, opts: GuideOptions) -> Result<GuidedPass> {
        let x = g.constant(sample.audio.clone());
        let z = self.stage1.encode(g, store, x)?;
        let (input, trace) = match span {
            Some(span) => {
                let video = g.constant(sample.video.clone());
                let trace = self.guide.forward(g, store, z, video, span, opts)?;
                (trace.guided, Some(trace))
            }
            None => (z, None),
        };
        let c = self.stage1.context(g, store, input)?;
        Ok(GuidedPass { latents: z, contexts: c, trace })
    }
}

/// InfoNCE where anchors come from the guided contexts `ĉ` and targets are
/// the unguided latents `z`, scored with the separate heads `Ŵ_k`.
pub fn vgcl_infonce(g: &mut Graph, store: &ParamStore, heads: &[ParamId], guided_contexts: &[Var], latents: &[Var], cands: &Candidates) -> Result<InfoNce> {
    infonce_with_candidates(g, store, heads, guided_contexts, latents, cands)
}

/// Mask window for a sample at stage `t`; the inclusive annotated end maps
/// to the exclusive boundary `end + 1`.
pub fn sample_mask(sample: &GroundingSample, t: usize, kappa: usize, gamma: f64) -> Result<MaskSpan> {
    mask_bounds(sample.span.start as f64, (sample.span.end + 1) as f64, sample.n_v() as f64, t, kappa, gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRecord {
    pub stage: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurriculumLog {
    pub stage_budgets: Vec<usize>,
    pub records: Vec<CurriculumRecord>,
    /// Mask windows requested per stage `0..=κ`.
    pub mask_calls_per_stage: Vec<usize>,
}

impl CurriculumLog {
    /// Mask windows built with `t < κ`.
    pub fn partial_mask_calls(&self) -> usize {
        let n = self.mask_calls_per_stage.len();
        self.mask_calls_per_stage[..n.saturating_sub(1)].iter().sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One `stage,steps` row per curriculum stage.
    pub fn write_stages_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_record(["stage", "steps"]).map_err(|e| Error::Invalid(e.to_string()))?;
        for (i, b) in self.stage_budgets.iter().enumerate() {
            w.write_record([(i + 1).to_string(), b.to_string()]).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Curriculum pretraining: stages `1..=κ` in order, each for its budgeted
/// steps, with `γ ~ U(0, 1)` drawn per sample.
pub fn pretrain_curriculum(
    model: &VgclModel,
    store: &mut ParamStore,
    data: &CorpusFile,
    curriculum: &CurriculumConfig,
    flags: VariantFlags,
    cfg: &CpcConfig,
    seeds: SeedStream,
) -> Result<CurriculumLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("vgcl pretraining needs a non-empty dataset".into()));
    }
    let kappa = curriculum.kappa;
    let budgets = stage_steps(curriculum.pacing, kappa, curriculum.total_steps)?;
    let mut log = CurriculumLog { stage_budgets: budgets.clone(), records: Vec::new(), mask_calls_per_stage: vec![0; kappa + 1] };
    let mut adam = Adam::new(store, cfg.lr, cfg.warmup_steps);
    let mut stream = BatchStream::new(data, cfg.batch_size, seeds.child("batches").key());
    let mut neg_rng = seeds.rng("negatives");
    let mut gamma_rng = seeds.rng("gamma");
    let opts = flags.guide_options();
    let mut step = 0;
    for (stage, &budget) in (1..=kappa).zip(&budgets) {
        let mut window = Window::new(cfg.log_every);
        for _ in 0..budget {
            step += 1;
            let batch = stream.next_batch();
            let mut g = Graph::new();
            let (mut zs, mut cs) = (Vec::new(), Vec::new());
            for &i in &batch {
                let sample = &data.samples[i];
                let (t, gamma) = if flags.no_curriculum { (kappa, 1.0) } else { (stage, gamma_rng.gen_range(0.0..1.0)) };
                log.mask_calls_per_stage[t] += 1;
                let span = sample_mask(sample, t, kappa, gamma)?;
                let pass = model.forward(&mut g, store, sample, Some(span), opts)?;
                zs.push(pass.latents);
                cs.push(pass.contexts);
            }
            let t_len = g.value(zs[0]).rows();
            let cands = crate::cpc::draw_candidates(zs.len(), t_len, model.heads.len(), cfg.n_candidates, &mut neg_rng)?;
            let out = vgcl_infonce(&mut g, store, &model.heads, &cs, &zs, &cands)?;
            let loss = g.scalar(out.loss);
            g.backward(out.loss)?;
            apply_update(&g, store, &mut adam, cfg.clip_norm)?;
            if let Some(r) = window.push(step, loss, out.accuracy) {
                log::info!("vgcl stage {stage} step {}: loss {:.4} acc {:.3}", r.step, r.loss, r.accuracy);
                log.records.push(CurriculumRecord { stage, step: r.step, loss: r.loss, accuracy: r.accuracy });
            }
        }
        if let Some(r) = window.finish(step) {
            log.records.push(CurriculumRecord { stage, step: r.step, loss: r.loss, accuracy: r.accuracy });
        }
    }
    Ok(log)
}

/// Mean loss and accuracy with the whole clip visible (`None` bypasses the
/// guide entirely).
pub fn evaluate(model: &VgclModel, store: &ParamStore, data: &CorpusFile, cfg: &CpcConfig, flags: VariantFlags, guided: bool, seed: u64) -> Result<(f64, f64)> {
    let mut rng = SeedStream::new(seed).rng("eval-negatives");
    let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let (mut zs, mut cs) = (Vec::new(), Vec::new());
        for &i in chunk {
            let s = &data.samples[i];
            let span = guided.then(|| MaskSpan::full(s.n_v()));
            let pass = model.forward(&mut g, store, s, span, flags.guide_options())?;
            zs.push(pass.latents);
            cs.push(pass.contexts);
        }
        let out = crate::cpc::infonce(&mut g, store, &model.heads, &cs, &zs, cfg.n_candidates, &mut rng)?;
        loss += g.scalar(out.loss) * chunk.len() as f64;
        acc += out.accuracy * chunk.len() as f64;
        n += chunk.len();
    }
    if n == 0 {
        return Err(Error::Invalid("vgcl evaluation on an empty dataset".into()));
    }
    Ok((loss / n as f64, acc / n as f64))
}
