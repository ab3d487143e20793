//! Precomputed real features: a keyed `VGCF` bundle of matrices per id plus
//! an annotation CSV with second-based spans.
//!
//! ```text
//! magic "VGCF" | version u16 | count u32
//! per entry: id (u16 len + utf8), rows u32, cols u32, f64 payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::format::{read_matrix, read_str, write_matrix, write_str, write_u32};
use super::{CorpusFile, GroundingSample, Span};
use crate::numerics::{read_exact, read_u16, read_u32, Tensor};
use crate::signal::{sample_fixed, MelSpectrogram};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VGCF";
const VERSION: u16 = 1;

/// Target shapes for ingested samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestConfig {
    pub n_v: usize,
    pub n_a: usize,
    pub split: String,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { n_v: 64, n_a: 1024, split: "real".into() }
    }
}

pub fn write_feature_bundle(path: impl AsRef<Path>, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_u32(&mut w, entries.len())?;
    for (id, t) in entries {
        write_str(&mut w, id)?;
        write_matrix(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_bundle<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt(format!("bad feature bundle magic {magic:?}")));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported feature bundle version {version}")));
    }
    let n = read_u32(r)? as usize;
    let mut out = BTreeMap::new();
    for i in 0..n {
        let id = read_str(r)?;
        let t = read_matrix(r).map_err(|e| e.context(format!("entry {i} ({id})")))?;
        if out.insert(id.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate id {id:?}")));
        }
    }
    Ok(out)
}

pub fn read_feature_bundle(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_bundle(&mut f).map_err(|e| e.context(path.display().to_string()))
}

/// Maps a time in seconds to a frame index among `n_v` frames.
pub(crate) fn seconds_to_frame(tau: f64, duration: f64, n_v: usize) -> usize {
    (tau / duration * (n_v - 1) as f64).round() as usize
}

struct Annotation {
    id: String,
    start: f64,
    end: f64,
    duration: f64,
}

fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Corrupt(format!("annotation line {}: {e}", line + 1)))?;
        if rec.len() != 4 {
            return Err(Error::Corrupt(format!("annotation line {}: expected 4 fields, got {}", line + 1, rec.len())));
        }
        let nums: std::result::Result<Vec<f64>, _> = (1..4).map(|i| rec[i].parse::<f64>()).collect();
        let nums = match nums {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::Corrupt(format!("annotation line {}: {e}", line + 1))),
        };
        out.push(Annotation { id: rec[0].to_string(), start: nums[0], end: nums[1], duration: nums[2] });
    }
    Ok(out)
}

fn resample_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let rows = t.rows();
    let picked: Vec<Vec<f64>> = (0..n).map(|k| t.row(k * rows / n).to_vec()).collect();
    Tensor::from_rows(&picked)
}

/// Builds a corpus split from precomputed video features, log-Mel
/// spectrograms and second-based annotations.
pub fn ingest_real(video_features: impl AsRef<Path>, spectrograms: impl AsRef<Path>, annotations: impl AsRef<Path>, cfg: &IngestConfig) -> Result<CorpusFile> {
    if cfg.n_v < 2 || cfg.n_a == 0 {
        return Err(Error::Config(format!("ingest needs n_v >= 2 and n_a >= 1, got {} / {}", cfg.n_v, cfg.n_a)));
    }
    let videos = read_feature_bundle(video_features)?;
    let specs = read_feature_bundle(spectrograms)?;
    let text = std::fs::read_to_string(annotations)?;
    let rows = parse_annotations(&text)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut dims: Option<(usize, usize)> = None;
    for a in rows {
        if !(a.duration > 0.0) || !(0.0..=a.duration).contains(&a.start) || !(a.start..=a.duration).contains(&a.end) {
            return Err(Error::Invalid(format!("{}: span ({}, {}) s outside duration {} s", a.id, a.start, a.end, a.duration)));
        }
        let video = videos.get(&a.id).ok_or_else(|| Error::Invalid(format!("no video features for id {:?}", a.id)))?;
        let spec = specs.get(&a.id).ok_or_else(|| Error::Invalid(format!("no spectrogram for id {:?}", a.id)))?;
        let video = resample_rows(video, cfg.n_v)?;
        let audio = sample_fixed(&MelSpectrogram::new(spec.clone())?, cfg.n_a)?;
        let d = (video.cols(), audio.frames.cols());
        if *dims.get_or_insert(d) != d {
            return Err(Error::Shape(format!("{}: feature widths {d:?} differ from earlier samples {:?}", a.id, dims.unwrap())));
        }
        let span = Span { start: seconds_to_frame(a.start, a.duration, cfg.n_v), end: seconds_to_frame(a.end, a.duration, cfg.n_v) };
        let sample = GroundingSample { sample_id: a.id, video, audio: audio.frames, span, event: None, audio_valid: audio.valid_frames };
        sample.validate()?;
        samples.push(sample);
    }
    let (d_v, n_mel) = dims.ok_or_else(|| Error::Invalid("annotation file has no rows".into()))?;
    Ok(CorpusFile { split: cfg.split.clone(), n_v: cfg.n_v, d_v, n_a: cfg.n_a, n_mel, tables: Vec::new(), samples })
}
