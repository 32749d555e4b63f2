//! Deterministic signal-processing frontend: WAV I/O, resampling,
//! normalization, STFT/mel analysis, Griffin-Lim inversion, silence
//! trimming, and F0 extraction.
//!
//! Everything here is a pure function of its inputs; pipeline stages call
//! these concurrently without shared state.

mod f0;
mod resample;
mod stft;
mod trim;
mod wav;

pub use f0::extract_f0;
pub use resample::resample;
pub use stft::{
    griffin_lim, hz_to_mel, mel_filter_centers, mel_filterbank, mel_spectrogram, mel_to_hz,
    mel_to_linear_magnitude, spectral_convergence, stft_magnitude, whisperize,
};
pub use trim::trim_silence;
pub use wav::{load_wav, wav_duration, write_wav};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Mono time-domain audio. Samples live in [-1, 1] once normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub const CHANNELS: u16 = 1;

    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Scale so the absolute peak hits `target_peak`; shape is preserved.
pub fn peak_normalize(w: &Waveform, target_peak: f64) -> Result<Waveform> {
    if !(target_peak > 0.0) {
        return Err(Error::Argument("target_peak must be positive".into()));
    }
    let peak = w.peak();
    if peak == 0.0 {
        return Err(Error::DegenerateInput("cannot normalize an all-zero waveform".into()));
    }
    let gain = target_peak / peak;
    Ok(Waveform {
        samples: w.samples.iter().map(|s| s * gain).collect(),
        sample_rate: w.sample_rate,
    })
}

/// Analysis windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Hann,
    Hamming,
    Rectangular,
}

impl WindowKind {
    pub fn taper(self, length: usize) -> Vec<f64> {
        let n = length as f64;
        (0..length)
            .map(|i| {
                let x = i as f64;
                match self {
                    // Periodic forms so overlap-add sums stay flat.
                    WindowKind::Hann => 0.5 - 0.5 * (2.0 * std::f64::consts::PI * x / n).cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * (2.0 * std::f64::consts::PI * x / n).cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

/// STFT analysis parameters. hop <= window <= fft.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
}

impl StftConfig {
    pub fn new(window_length: usize, hop_length: usize, fft_size: usize, window_kind: WindowKind) -> Result<Self> {
        if window_length == 0 || hop_length == 0 || fft_size == 0 {
            return Err(Error::Argument("stft sizes must be positive".into()));
        }
        if hop_length > window_length || window_length > fft_size {
            return Err(Error::Argument(format!(
                "need hop <= window <= fft, got {}/{}/{}",
                hop_length, window_length, fft_size
            )));
        }
        Ok(StftConfig { window_length, hop_length, fft_size, window_kind })
    }

    /// 25 ms window / 10 ms hop / 1024-point FFT at 16 kHz, Hann taper.
    pub fn default_16k() -> Self {
        StftConfig {
            window_length: 400,
            hop_length: 160,
            fft_size: 1024,
            window_kind: WindowKind::Hann,
        }
    }

    pub fn fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        if samples < self.window_length {
            None
        } else {
            Some(1 + (samples - self.window_length) / self.hop_length)
        }
    }
}

/// Feature-rate and mel defaults shared by the whole pipeline.
pub const FEATURE_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_MEL_BINS: usize = 80;
pub const LOG_MEL_EPS: f64 = 1e-10;

/// Log-mel features, frames x bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-frame fundamental frequency in Hz; 0 marks unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0: Vec<f64>,
    pub hop_length: usize,
}

impl F0Track {
    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.f0.iter().filter(|&&v| v > 0.0).count() as f64 / self.f0.len() as f64
    }
}
