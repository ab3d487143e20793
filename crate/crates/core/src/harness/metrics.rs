use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusFile, Span};
use crate::grounder::{predict_all, Grounder, Prediction};
use crate::numerics::{ParamStore, SeedStream};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Intersection over union of two inclusive frame intervals.
pub fn iou(a: Span, b: Span) -> Result<f64> {
    if a.start > a.end || b.start > b.end {
        return Err(Error::Invalid(format!("invalid span in iou: ({}, {}) vs ({}, {})", a.start, a.end, b.start, b.end)));
    }
    let inter = (a.end.min(b.end) + 1).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) + 1 - a.start.min(b.start);
    Ok(inter as f64 / union as f64)
}

/// Recall at IoU thresholds and mean IoU, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub n_samples: usize,
    pub thresholds: Vec<f64>,
    pub recall_at_iou: Vec<f64>,
    pub mean_iou: f64,
}

impl EvalReport {
    pub fn from_ious(ious: &[f64], thresholds: &[f64], variant: &str, seed: u64) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
        }
        let n = ious.len() as f64;
        let recall = thresholds.iter().map(|&m| 100.0 * ious.iter().filter(|&&x| x >= m).count() as f64 / n).collect();
        Ok(EvalReport {
            variant: variant.to_string(),
            seed,
            n_samples: ious.len(),
            thresholds: thresholds.to_vec(),
            recall_at_iou: recall,
            mean_iou: 100.0 * ious.iter().sum::<f64>() / n,
        })
    }

    pub fn from_predictions(preds: &[Prediction], thresholds: &[f64], variant: &str, seed: u64) -> Result<Self> {
        let ious: Vec<f64> = preds.iter().map(|p| p.iou).collect();
        Self::from_ious(&ious, thresholds, variant, seed)
    }

    /// Recall at a threshold that was evaluated.
    pub fn recall(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| (t - threshold).abs() < 1e-12).map(|i| self.recall_at_iou[i])
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("eval report: {e}")))
    }
}

/// Decodes and scores every sample of `data`.
pub fn evaluate(model: &Grounder, store: &ParamStore, data: &CorpusFile, thresholds: &[f64], variant: &str, seed: u64) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_all(model, store, data, model.n_chunks)?;
    Ok((EvalReport::from_predictions(&preds, thresholds, variant, seed)?, preds))
}

fn uniform_span<R: Rng>(n_v: usize, rng: &mut R) -> Span {
    // Pairs s ≤ e enumerated row by row; pick one uniformly.
    let total = n_v * (n_v + 1) / 2;
    let mut k = rng.gen_range(0..total);
    let mut s = 0;
    while k >= n_v - s {
        k -= n_v - s;
        s += 1;
    }
    Span { start: s, end: s + k }
}

/// Scores uniformly random valid spans, `draws` per sample.
pub fn random_span_report(data: &CorpusFile, thresholds: &[f64], draws: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = SeedStream::new(seed).rng("random-spans");
    let mut ious = Vec::with_capacity(data.len() * draws);
    for s in &data.samples {
        for _ in 0..draws {
            ious.push(iou(uniform_span(s.n_v(), &mut rng), s.span)?);
        }
    }
    EvalReport::from_ious(&ious, thresholds, "random", seed)
}

/// Exact expected mean IoU (percent) of a uniformly random valid span,
/// by enumerating every pair.
pub fn random_span_expected_miou(data: &CorpusFile) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut total = 0.0;
    for s in &data.samples {
        let n = s.n_v();
        let mut acc = 0.0;
        for a in 0..n {
            for b in a..n {
                acc += iou(Span { start: a, end: b }, s.span)?;
            }
        }
        total += acc / (n * (n + 1) / 2) as f64;
    }
    Ok(100.0 * total / data.len() as f64)
}

/// Metrics table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    #[serde(rename = "iou_0.3")]
    pub iou_03: f64,
    #[serde(rename = "iou_0.5")]
    pub iou_05: f64,
    #[serde(rename = "iou_0.7")]
    pub iou_07: f64,
    pub miou: f64,
}

impl MetricsRow {
    pub fn from_report(r: &EvalReport) -> Result<Self> {
        let get = |t: f64| r.recall(t).ok_or_else(|| Error::Invalid(format!("report {} lacks threshold {t}", r.variant)));
        Ok(MetricsRow { variant: r.variant.clone(), seed: r.seed, iou_03: get(0.3)?, iou_05: get(0.5)?, iou_07: get(0.7)?, miou: r.mean_iou })
    }
}

/// Long-format row: one metric value per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub variant: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Corrupt(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Corrupt(format!("metrics csv: {e}")))).collect()
}

pub fn long_format(rows: &[MetricsRow]) -> Vec<LongRow> {
    rows.iter()
        .flat_map(|r| {
            [("iou_0.3", r.iou_03), ("iou_0.5", r.iou_05), ("iou_0.7", r.iou_07), ("miou", r.miou)]
                .into_iter()
                .map(move |(m, v)| LongRow { variant: r.variant.clone(), seed: r.seed, metric: m.to_string(), value: v })
        })
        .collect()
}

pub(crate) fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
