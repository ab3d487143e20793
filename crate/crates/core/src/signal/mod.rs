//! Audio front end: WAV input, log-Mel spectrograms, noise mixing.

mod mel;
mod noise;
mod wav;

pub use mel::{
    filter_centers, frame_count, hamming, hz_to_mel, log_mel, mel_filterbank, mel_to_hz, sample_fixed, MelExtractor,
    MelSpectrogram, F_MAX, HOP, LOG_FLOOR, N_FFT, N_MELS, WINDOW,
};
pub use noise::{
    mix_noise, mix_noise_with_info, synth_noise, MixInfo, NoiseBank, NoiseFamily, NoiseSpec, DEFAULT_ALPHA_RANGE,
    NOISE_FAMILIES,
};
pub use wav::{read_wav, rms, write_wav, Waveform, SAMPLE_RATE};
