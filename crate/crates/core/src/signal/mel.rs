use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::Waveform;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-6;
pub const F_MAX: f64 = 8000.0;

/// `T × 128` log-Mel energies. Rows past `valid_frames` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub valid_frames: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        let (t, _) = frames.dims2()?;
        Ok(MelSpectrogram { frames, valid_frames: t })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_frames == 0
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Number of frames for `n` samples.
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

/// Center frequencies (Hz) of the triangular filters.
pub fn filter_centers() -> Vec<f64> {
    let top = hz_to_mel(F_MAX);
    (1..=N_MELS).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect()
}

/// HTK-scale triangular filters over the `N_FFT/2 + 1` bins, `[128 × 257]`.
///
/// Each triangle's half-width is at least one bin spacing, so the narrow
/// low-frequency filters still cover a bin and neighbors still overlap.
pub fn mel_filterbank() -> Tensor {
    let bins = N_FFT / 2 + 1;
    let df = f64::from(super::wav::SAMPLE_RATE) / N_FFT as f64;
    let top = hz_to_mel(F_MAX);
    let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect();
    let mut fb = Tensor::zeros(&[N_MELS, bins]);
    for m in 0..N_MELS {
        let c = edges[m + 1];
        let left = (c - edges[m]).max(df);
        let right = (edges[m + 2] - c).max(df);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * df;
            *w = if f <= c { 1.0 - (c - f) / left } else { 1.0 - (f - c) / right }.max(0.0);
        }
    }
    fb
}

pub fn hamming() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW - 1) as f64).cos())
        .collect()
}

/// Reusable log-Mel extractor (holds the FFT plan and filterbank).
pub struct MelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Tensor,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        MelExtractor { fft: FftPlanner::new().plan_fft_forward(N_FFT), window: hamming(), filters: mel_filterbank() }
    }

    /// Power spectrum frames, `[T × 257]`.
    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Tensor> {
        let t = frame_count(w.len());
        if t == 0 {
            return Err(Error::Invalid(format!("need at least {WINDOW} samples, got {}", w.len())));
        }
        let bins = N_FFT / 2 + 1;
        let mut out = Tensor::zeros(&[t, bins]);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for f in 0..t {
            let start = f * HOP;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < WINDOW { Complex::new(w.samples[start + i] * self.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process(&mut buf);
            for (k, v) in out.row_mut(f).iter_mut().enumerate() {
                *v = buf[k].norm_sqr();
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let power = self.power_spectrogram(w)?;
        let mel = power.matmul(&self.filters.transpose()?)?;
        MelSpectrogram::new(mel.map(|e| (e + LOG_FLOOR).ln()))
    }
}

/// Hamming-windowed STFT (400/160/512), 128 Mel filters, natural log.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    MelExtractor::new().log_mel(w)
}

/// Resamples to exactly `n_a` rows: uniform index subsampling when longer,
/// zero padding at the end when shorter.
pub fn sample_fixed(m: &MelSpectrogram, n_a: usize) -> Result<MelSpectrogram> {
    let (t, c) = m.frames.dims2()?;
    if n_a == 0 {
        return Err(Error::Invalid("target length must be positive".into()));
    }
    let t_valid = m.valid_frames.min(t);
    if t_valid >= n_a {
        let rows: Vec<Vec<f64>> = (0..n_a).map(|k| m.frames.row(k * t_valid / n_a).to_vec()).collect();
        return MelSpectrogram::new(Tensor::from_rows(&rows)?);
    }
    let mut data = vec![0.0; n_a * c];
    data[..t_valid * c].copy_from_slice(&m.frames.data()[..t_valid * c]);
    Ok(MelSpectrogram { frames: Tensor::new(&[n_a, c], data)?, valid_frames: t_valid })
}
