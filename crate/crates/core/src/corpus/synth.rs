use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CorpusFile, GroundingSample, Span};
use crate::numerics::{SeedStream, Tensor};
use crate::{Error, Result};

/// Synthetic grounding corpus parameters.
///
/// Each sample plants one event in the video; the spoken query is that
/// event's phoneme sequence, part of which is overwritten by tokens from a
/// disjoint noise vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_v: usize,
    pub d_v: usize,
    pub n_a: usize,
    pub n_mel: usize,
    pub n_event_types: usize,
    pub phonemes_per_event: usize,
    pub phoneme_vocab: usize,
    pub noise_vocab: usize,
    /// Std-dev of the Gaussian added to every video and audio value.
    pub sigma: f64,
    /// Fraction of the audio overwritten by noise tokens.
    pub corruption_range: (f64, f64),
    /// Planted span length as a fraction of `n_v`.
    pub span_fraction: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 800,
            n_val: 100,
            n_test: 200,
            n_v: 32,
            d_v: 32,
            n_a: 256,
            n_mel: 128,
            n_event_types: 12,
            phonemes_per_event: 6,
            phoneme_vocab: 16,
            noise_vocab: 8,
            sigma: 0.1,
            corruption_range: (0.5, 0.7),
            span_fraction: (0.15, 0.6),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_v,
            self.d_v,
            self.n_a,
            self.n_mel,
            self.n_event_types,
            self.phonemes_per_event,
            self.phoneme_vocab,
            self.noise_vocab,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("all corpus dimensions must be positive".into()));
        }
        if self.n_event_types < 3 {
            return Err(Error::Config("need at least three event types for distractors".into()));
        }
        let (lo, hi) = self.corruption_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("corruption range ({lo}, {hi}) must lie within [0, 1]")));
        }
        let (smin, smax) = self.span_lengths();
        if smin == 0 || smin > smax || smax > self.n_v {
            return Err(Error::Config(format!("span fractions {:?} give no valid length for n_v = {}", self.span_fraction, self.n_v)));
        }
        if self.phonemes_per_event > self.n_a {
            return Err(Error::Config("more phonemes than audio frames".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Inclusive range of integer span lengths.
    pub fn span_lengths(&self) -> (usize, usize) {
        let lo = (self.span_fraction.0 * self.n_v as f64).ceil().max(1.0) as usize;
        let hi = (self.span_fraction.1 * self.n_v as f64).floor() as usize;
        (lo, hi)
    }
}

/// The three generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train: CorpusFile,
    pub val: CorpusFile,
    pub test: CorpusFile,
}

struct Tables {
    events: Tensor,
    phonemes: Tensor,
    noise: Tensor,
    sequences: Vec<Vec<usize>>,
}

fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

fn make_tables(cfg: &SynthConfig, seeds: &SeedStream) -> Tables {
    let mut rng = seeds.rng("tables");
    let events = gaussian(cfg.n_event_types, cfg.d_v, &mut rng);
    let phonemes = gaussian(cfg.phoneme_vocab, cfg.n_mel, &mut rng);
    let noise = gaussian(cfg.noise_vocab, cfg.n_mel, &mut rng);
    let sequences = (0..cfg.n_event_types)
        .map(|_| (0..cfg.phonemes_per_event).map(|_| rng.gen_range(0..cfg.phoneme_vocab)).collect())
        .collect();
    Tables { events, phonemes, noise, sequences }
}

fn add_noise<R: Rng>(row: &mut [f64], base: &[f64], sigma: f64, rng: &mut R) {
    for (x, &b) in row.iter_mut().zip(base) {
        *x = b;
        if sigma > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            *x += sigma * n;
        }
    }
}

/// Covers `frames` with distractor segments drawn from the span length
/// distribution. Adjacent segments differ and none uses `target`.
fn fill_distractors<R: Rng>(frames: &mut [usize], target: usize, lengths: (usize, usize), n_events: usize, rng: &mut R, towards_start: bool) {
    let n = frames.len();
    let mut done = 0;
    let mut prev = target;
    while done < n {
        let len = rng.gen_range(lengths.0..=lengths.1).min(n - done);
        let ev = loop {
            let d = rng.gen_range(0..n_events);
            if d != target && d != prev {
                break d;
            }
        };
        // Segments are laid out outward from the span.
        let range = if towards_start { n - done - len..n - done } else { done..done + len };
        frames[range].fill(ev);
        prev = ev;
        done += len;
    }
}

fn make_sample<R: Rng>(cfg: &SynthConfig, tables: &Tables, id: String, rng: &mut R) -> GroundingSample {
    let e = rng.gen_range(0..cfg.n_event_types);
    let (lmin, lmax) = cfg.span_lengths();
    let len = rng.gen_range(lmin..=lmax);
    let start = rng.gen_range(0..=cfg.n_v - len);
    let span = Span { start, end: start + len - 1 };
    let mut events = vec![e; cfg.n_v];
    fill_distractors(&mut events[..start], e, (lmin, lmax), cfg.n_event_types, rng, true);
    fill_distractors(&mut events[span.end + 1..], e, (lmin, lmax), cfg.n_event_types, rng, false);

    let mut video = Tensor::zeros(&[cfg.n_v, cfg.d_v]);
    for (i, &ev) in events.iter().enumerate() {
        add_noise(video.row_mut(i), tables.events.row(ev), cfg.sigma, rng);
    }

    let (lo, hi) = cfg.corruption_range;
    let alpha = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let corrupt_len = ((alpha * cfg.n_a as f64).round() as usize).min(cfg.n_a);
    let corrupt_start = rng.gen_range(0..=cfg.n_a - corrupt_len);
    let token_len = cfg.n_a as f64 / cfg.phonemes_per_event as f64;
    let seq = &tables.sequences[e];
    let mut noise_token = rng.gen_range(0..cfg.noise_vocab);
    let mut audio = Tensor::zeros(&[cfg.n_a, cfg.n_mel]);
    for t in 0..cfg.n_a {
        let corrupted = t >= corrupt_start && t < corrupt_start + corrupt_len;
        let base = if corrupted {
            // Noise tokens last as long as speech tokens, aligned to the region start.
            if t > corrupt_start && ((t - corrupt_start) as f64 % token_len) < 1.0 {
                noise_token = rng.gen_range(0..cfg.noise_vocab);
            }
            tables.noise.row(noise_token)
        } else {
            let k = ((t as f64 / token_len) as usize).min(cfg.phonemes_per_event - 1);
            tables.phonemes.row(seq[k])
        };
        add_noise(audio.row_mut(t), base, cfg.sigma, rng);
    }
    GroundingSample { sample_id: id, video, audio, span, event: Some(e as u32), audio_valid: cfg.n_a }
}

/// Generates train/val/test splits from one seed. The generator tables are
/// stored in every split's header.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<SynthSplits> {
    cfg.validate()?;
    let seeds = SeedStream::new(seed).child("corpus");
    let tables = make_tables(cfg, &seeds);
    let seq_table = Tensor::from_rows(&tables.sequences.iter().map(|s| s.iter().map(|&p| p as f64).collect()).collect::<Vec<_>>())?;
    let header = vec![
        ("event_embeddings".to_string(), tables.events.clone()),
        ("phoneme_embeddings".to_string(), tables.phonemes.clone()),
        ("noise_embeddings".to_string(), tables.noise.clone()),
        ("event_phonemes".to_string(), seq_table),
    ];
    let split = |name: &str, n: usize| -> CorpusFile {
        let stream = seeds.child(name);
        let samples = (0..n)
            .map(|i| {
                let mut rng = stream.child_index(i as u64).rng("sample");
                make_sample(cfg, &tables, format!("{name}-{i:05}"), &mut rng)
            })
            .collect();
        CorpusFile {
            split: name.to_string(),
            n_v: cfg.n_v,
            d_v: cfg.d_v,
            n_a: cfg.n_a,
            n_mel: cfg.n_mel,
            tables: header.clone(),
            samples,
        }
    };
    Ok(SynthSplits { train: split("train", cfg.n_train), val: split("val", cfg.n_val), test: split("test", cfg.n_test) })
}
