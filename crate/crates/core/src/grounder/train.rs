use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{infer_span, losses, Grounder, GrounderConfig};
use crate::corpus::{CorpusFile, GroundingSample, Span};
use crate::cpc::{apply_update, BatchStream};
use crate::harness::iou;
use crate::numerics::{Adam, Graph, ParamStore, SeedStream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bound_loss: f64,
    pub inside_loss: f64,
}

/// Mini-batch Adam on `L_total`, averaged over the samples of each batch.
pub fn train(model: &Grounder, store: &mut ParamStore, data: &CorpusFile, cfg: &GrounderConfig, seeds: SeedStream) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("grounding training needs a non-empty dataset".into()));
    }
    let mut adam = Adam::new(store, cfg.lr, cfg.warmup_steps);
    let mut stream = BatchStream::new(data, cfg.batch_size, seeds.child("batches").key());
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut bound, mut inside) = (0.0, 0.0, 0.0);
        for _ in 0..per_epoch {
            let batch = stream.next_batch();
            let mut g = Graph::new();
            let mut sum = None;
            for &i in &batch {
                let s = &data.samples[i];
                let scores = model.forward_chunked(&mut g, store, &s.video, &s.audio, cfg.n_chunks)?;
                let l = losses(&mut g, &scores, s.span)?;
                bound += g.scalar(l.bound);
                inside += g.scalar(l.inside);
                sum = Some(match sum {
                    None => l.total,
                    Some(acc) => g.add(acc, l.total)?,
                });
            }
            let loss = g.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
            total += g.scalar(loss) * batch.len() as f64;
            g.backward(loss)?;
            apply_update(&g, store, &mut adam, cfg.clip_norm)?;
        }
        let n = data.len() as f64;
        let rec = EpochRecord { epoch: epoch + 1, loss: total / n, bound_loss: bound / n, inside_loss: inside / n };
        log::info!("grounding epoch {}: loss {:.4} (bound {:.4}, inside {:.4})", rec.epoch, rec.loss, rec.bound_loss, rec.inside_loss);
        log.push(rec);
    }
    Ok(log)
}

/// One decoded sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub pred_start: usize,
    pub pred_end: usize,
    pub gt_start: usize,
    pub gt_end: usize,
    pub iou: f64,
}

impl Prediction {
    pub fn predicted(&self) -> Span {
        Span { start: self.pred_start, end: self.pred_end }
    }

    pub fn ground_truth(&self) -> Span {
        Span { start: self.gt_start, end: self.gt_end }
    }
}

pub(crate) fn predict_one(model: &Grounder, store: &ParamStore, s: &GroundingSample, n_chunks: usize) -> Result<Span> {
    let mut g = Graph::new();
    let scores = model.forward_chunked(&mut g, store, &s.video, &s.audio, n_chunks)?;
    infer_span(g.value(scores.start).data(), g.value(scores.end).data())
}

/// Decodes every sample of `data`.
pub fn predict_all(model: &Grounder, store: &ParamStore, data: &CorpusFile, n_chunks: usize) -> Result<Vec<Prediction>> {
    data.samples
        .iter()
        .map(|s| {
            let p = predict_one(model, store, s, n_chunks).map_err(|e| e.context(format!("sample {}", s.sample_id)))?;
            Ok(Prediction {
                sample_id: s.sample_id.clone(),
                pred_start: p.start,
                pred_end: p.end,
                gt_start: s.span.start,
                gt_end: s.span.end,
                iou: iou(p, s.span)?,
            })
        })
        .collect()
}

/// CSV with columns `sample_id, pred_start, pred_end, gt_start, gt_end, iou`.
pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
    for p in preds {
        w.serialize(p).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
