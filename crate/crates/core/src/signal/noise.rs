use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::wav::{read_wav, Waveform, SAMPLE_RATE};
use crate::{Error, Result};

/// A noise clip and the range its mixing proportion is drawn from.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub noise: Waveform,
    pub alpha_range: (f64, f64),
}

pub const DEFAULT_ALPHA_RANGE: (f64, f64) = (0.5, 0.7);

impl NoiseSpec {
    pub fn new(noise: Waveform, alpha_range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("alpha range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
        }
        Ok(NoiseSpec { noise, alpha_range })
    }

    pub fn with_default_range(noise: Waveform) -> Self {
        NoiseSpec { noise, alpha_range: DEFAULT_ALPHA_RANGE }
    }
}

/// Where and how strongly noise was added.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixInfo {
    pub alpha: f64,
    pub offset: usize,
    pub len: usize,
}

/// Adds `α·(rms(speech)/rms(noise))·noise` over one contiguous segment of
/// the speech at a uniform random offset, then clips to `[-1, 1]`.
pub fn mix_noise<R: Rng>(speech: &Waveform, spec: &NoiseSpec, rng: &mut R) -> Result<Waveform> {
    mix_noise_with_info(speech, spec, rng).map(|(w, _)| w)
}

pub fn mix_noise_with_info<R: Rng>(speech: &Waveform, spec: &NoiseSpec, rng: &mut R) -> Result<(Waveform, MixInfo)> {
    if speech.sample_rate != spec.noise.sample_rate {
        return Err(Error::Invalid(format!(
            "sample rates differ: speech {} Hz, noise {} Hz",
            speech.sample_rate, spec.noise.sample_rate
        )));
    }
    let noise_rms = spec.noise.rms();
    if noise_rms == 0.0 {
        return Err(Error::Invalid("noise clip is silent (rms = 0)".into()));
    }
    let (lo, hi) = spec.alpha_range;
    let alpha = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let len = spec.noise.len().min(speech.len());
    let offset = rng.gen_range(0..=speech.len() - len);
    let info = MixInfo { alpha, offset, len };
    let mut out = speech.samples.clone();
    if alpha != 0.0 {
        let gain = alpha * speech.rms() / noise_rms;
        for (s, n) in out[offset..offset + len].iter_mut().zip(&spec.noise.samples) {
            *s = (*s + gain * n).clamp(-1.0, 1.0);
        }
    }
    Ok((Waveform { samples: out, sample_rate: speech.sample_rate }, info))
}

/// Families of procedural environmental noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFamily {
    /// Low-passed white noise (wind, water).
    Rumble,
    /// High-passed white noise (hiss, rain).
    Hiss,
    /// Amplitude-modulated tone (engines, animals).
    ModulatedTone,
    /// Decaying impulse train (knocks, footsteps).
    Impulses,
    /// Frequency sweep (sirens).
    Sweep,
}

pub const NOISE_FAMILIES: [NoiseFamily; 5] =
    [NoiseFamily::Rumble, NoiseFamily::Hiss, NoiseFamily::ModulatedTone, NoiseFamily::Impulses, NoiseFamily::Sweep];

/// Generates one clip of the given family, peak-normalized to 0.5.
pub fn synth_noise<R: Rng>(family: NoiseFamily, n_samples: usize, rng: &mut R) -> Waveform {
    let sr = f64::from(SAMPLE_RATE);
    let tau = std::f64::consts::TAU;
    let mut x = vec![0.0; n_samples];
    match family {
        NoiseFamily::Rumble => {
            let mut y = 0.0;
            for v in x.iter_mut() {
                y = 0.97 * y + 0.03 * { let v: f64 = StandardNormal.sample(rng); v };
                *v = y;
            }
        }
        NoiseFamily::Hiss => {
            let mut prev = 0.0;
            for v in x.iter_mut() {
                let w: f64 = StandardNormal.sample(rng);
                *v = w - prev;
                prev = w;
            }
        }
        NoiseFamily::ModulatedTone => {
            let f = rng.gen_range(150.0..1200.0);
            let fm = rng.gen_range(2.0..12.0);
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *v = (tau * f * t).sin() * (0.6 + 0.4 * (tau * fm * t).sin());
            }
        }
        NoiseFamily::Impulses => {
            let period = rng.gen_range(800..4000);
            let mut env = 0.0;
            for (i, v) in x.iter_mut().enumerate() {
                if i % period == 0 {
                    env = 1.0;
                }
                env *= 0.995;
                *v = env * { let v: f64 = StandardNormal.sample(rng); v };
            }
        }
        NoiseFamily::Sweep => {
            let f0 = rng.gen_range(300.0..800.0);
            let f1 = rng.gen_range(1000.0..3000.0);
            let mut phase = 0.0;
            for (i, v) in x.iter_mut().enumerate() {
                let frac = (i as f64 / n_samples.max(1) as f64 * 4.0).fract();
                phase += tau * (f0 + (f1 - f0) * frac) / sr;
                *v = phase.sin();
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform { samples: x, sample_rate: SAMPLE_RATE }
}

/// Clips to draw noise from: procedural families, or real recordings.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    clips: Vec<Waveform>,
}

impl NoiseBank {
    /// `per_family` clips of each procedural family, `secs` long.
    pub fn procedural<R: Rng>(per_family: usize, secs: f64, rng: &mut R) -> Self {
        let n = (secs * f64::from(SAMPLE_RATE)) as usize;
        let clips = NOISE_FAMILIES.iter().flat_map(|&f| (0..per_family).map(|_| synth_noise(f, n, rng)).collect::<Vec<_>>()).collect();
        NoiseBank { clips }
    }

    /// Loads every `.wav` in a directory (sorted by name), skipping silent clips.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let mut clips = Vec::new();
        for p in paths {
            let w = read_wav(&p)?;
            if w.rms() > 0.0 {
                clips.push(w);
            }
        }
        if clips.is_empty() {
            return Err(Error::Invalid(format!("no usable noise clips in {}", dir.as_ref().display())));
        }
        Ok(NoiseBank { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn pick<R: Rng>(&self, rng: &mut R) -> &Waveform {
        &self.clips[rng.gen_range(0..self.clips.len())]
    }
}
