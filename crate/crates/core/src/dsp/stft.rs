//! STFT analysis, mel filterbank, Griffin-Lim phase retrieval, and the
//! mel-to-linear inversion used before vocoding.

use ndarray::Array2;
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::seeding::component_rng;

use super::{MelSpectrogram, StftConfig, Waveform, LOG_MEL_EPS};

fn stft_complex(samples: &[f64], cfg: &StftConfig) -> Vec<Vec<Complex<f64>>> {
    let frames = match cfg.frame_count(samples.len()) {
        Some(f) => f,
        None => return Vec::new(),
    };
    let window = cfg.window_kind.taper(cfg.window_length);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_bins();

    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for f in 0..frames {
        let start = f * cfg.hop_length;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < cfg.window_length {
                samples[start + i] * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    out
}

fn istft(spec: &[Vec<Complex<f64>>], cfg: &StftConfig) -> Vec<f64> {
    if spec.is_empty() {
        return Vec::new();
    }
    let frames = spec.len();
    let window = cfg.window_kind.taper(cfg.window_length);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let bins = cfg.fft_bins();

    let out_len = (frames - 1) * cfg.hop_length + cfg.window_length;
    let mut acc = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for (f, frame) in spec.iter().enumerate() {
        // Rebuild the full Hermitian spectrum from the half-plane bins.
        buf[..bins].copy_from_slice(frame);
        for k in bins..cfg.fft_size {
            buf[k] = frame[cfg.fft_size - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop_length;
        let scale = 1.0 / cfg.fft_size as f64;
        for i in 0..cfg.window_length {
            let v = buf[i].re * scale;
            acc[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (a, n) in acc.iter_mut().zip(&norm) {
        *a /= n.max(1e-12);
    }
    acc
}

/// Linear STFT magnitude, frames x fft_bins.
pub fn stft_magnitude(samples: &[f64], cfg: &StftConfig) -> Array2<f64> {
    let spec = stft_complex(samples, cfg);
    let bins = cfg.fft_bins();
    let mut out = Array2::zeros((spec.len(), bins));
    for (f, frame) in spec.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            out[[f, k]] = c.norm();
        }
    }
    out
}

/// Triangular mel filterbank, mel_bins x fft_bins, peak-1 triangles with
/// centers equally spaced on the mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, mel_bins: usize) -> Array2<f64> {
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let bins = fft_size / 2 + 1;
    let mut fb = Array2::zeros((mel_bins, bins));
    for m in 0..mel_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * f64::from(sample_rate) / fft_size as f64;
            let w = if f >= lo && f <= center && center > lo {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi && hi > center {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the mel filters, in Hz.
pub fn mel_filter_centers(sample_rate: u32, mel_bins: usize) -> Vec<f64> {
    let mel_max = hz_to_mel(f64::from(sample_rate) / 2.0);
    (1..=mel_bins)
        .map(|i| mel_to_hz(mel_max * i as f64 / (mel_bins + 1) as f64))
        .collect()
}

/// Log-mel analysis: values = ln(filterbank . |STFT|^2 + eps).
pub fn mel_spectrogram(w: &Waveform, cfg: &StftConfig, mel_bins: usize) -> Result<MelSpectrogram> {
    if mel_bins == 0 {
        return Err(Error::Argument("mel_bins must be positive".into()));
    }
    if w.samples.len() < cfg.window_length {
        return Err(Error::DegenerateInput(format!(
            "waveform of {} samples is shorter than the {}-sample analysis window",
            w.samples.len(),
            cfg.window_length
        )));
    }
    let mag = stft_magnitude(&w.samples, cfg);
    let fb = mel_filterbank(w.sample_rate, cfg.fft_size, mel_bins);
    let frames = mag.nrows();
    let mut values = Array2::zeros((frames, mel_bins));
    for f in 0..frames {
        for m in 0..mel_bins {
            let mut acc = 0.0;
            for k in 0..mag.ncols() {
                let a = mag[[f, k]];
                acc += fb[[m, k]] * a * a;
            }
            values[[f, m]] = (acc + LOG_MEL_EPS).ln();
        }
    }
    Ok(MelSpectrogram { values, hop_length: cfg.hop_length, sample_rate: w.sample_rate })
}

/// Frobenius distance between two magnitude spectrograms, relative to the
/// reference norm.
pub fn spectral_convergence(est: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let num: f64 = est
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Acceleration factor for the momentum form of the phase-retrieval loop.
const GRIFFIN_LIM_MOMENTUM: f64 = 0.9;

/// Phase retrieval from a magnitude spectrogram (frames x fft_bins) by
/// alternating STFT-consistency and magnitude projections, with the
/// momentum acceleration of Perraudin et al. Deterministic: the phase init
/// uses a fixed internal seed.
pub fn griffin_lim(mag: &Array2<f64>, cfg: &StftConfig, iterations: usize) -> Result<Waveform> {
    if iterations == 0 {
        return Err(Error::Argument("iterations must be >= 1".into()));
    }
    if mag.ncols() != cfg.fft_bins() {
        return Err(Error::Argument(format!(
            "magnitude has {} bins, fft implies {}",
            mag.ncols(),
            cfg.fft_bins()
        )));
    }
    if mag.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Argument("magnitudes must be finite and non-negative".into()));
    }
    let frames = mag.nrows();
    if frames == 0 {
        return Ok(Waveform { samples: Vec::new(), sample_rate: 0 });
    }
    let bins = mag.ncols();

    // Random phase init; zero phase makes every frame identical and stalls
    // the projections in a symmetric configuration.
    let mut rng = component_rng("griffin-lim-phase", 0);
    let mut angles: Vec<Vec<Complex<f64>>> = (0..frames)
        .map(|_| {
            (0..bins)
                .map(|_| {
                    let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    Complex::from_polar(1.0, phase)
                })
                .collect()
        })
        .collect();

    let apply_mag = |angles: &[Vec<Complex<f64>>]| -> Vec<Vec<Complex<f64>>> {
        (0..frames)
            .map(|f| (0..bins).map(|k| angles[f][k] * mag[[f, k]]).collect())
            .collect()
    };

    let mut tprev: Option<Vec<Vec<Complex<f64>>>> = None;
    let beta = GRIFFIN_LIM_MOMENTUM / (1.0 + GRIFFIN_LIM_MOMENTUM);
    for _ in 0..iterations {
        let inverse = istft(&apply_mag(&angles), cfg);
        let rebuilt = stft_complex(&inverse, cfg);
        for f in 0..frames.min(rebuilt.len()) {
            for k in 0..bins {
                let mut c = rebuilt[f][k];
                if let Some(tp) = &tprev {
                    c -= tp[f][k] * beta;
                }
                let n = c.norm();
                angles[f][k] = if n > 1e-12 { c / n } else { Complex::new(1.0, 0.0) };
            }
        }
        tprev = Some(rebuilt);
    }
    let samples = istft(&apply_mag(&angles), cfg);
    Ok(Waveform { samples, sample_rate: 0 })
}

/// Inverts a log-mel spectrogram to a linear magnitude spectrogram by
/// projected-gradient non-negative least squares against the filterbank.
pub fn mel_to_linear_magnitude(mel: &MelSpectrogram, fft_size: usize) -> Array2<f64> {
    let fb = mel_filterbank(mel.sample_rate, fft_size, mel.bins());
    let bins = fft_size / 2 + 1;
    let frames = mel.frames();

    // Lipschitz constant of the LS gradient via power iteration on fb^T fb.
    let mut v = vec![1.0f64; bins];
    let mut lip = 1.0;
    for _ in 0..30 {
        let mut fv = vec![0.0f64; mel.bins()];
        for m in 0..mel.bins() {
            fv[m] = (0..bins).map(|k| fb[[m, k]] * v[k]).sum();
        }
        let mut ftfv = vec![0.0f64; bins];
        for k in 0..bins {
            ftfv[k] = (0..mel.bins()).map(|m| fb[[m, k]] * fv[m]).sum();
        }
        let norm = ftfv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        lip = norm;
        for (vi, fi) in v.iter_mut().zip(&ftfv) {
            *vi = fi / norm;
        }
    }
    let step = 1.0 / (lip * 1.05 + 1e-9);

    let mut out = Array2::zeros((frames, bins));
    for f in 0..frames {
        let target: Vec<f64> = (0..mel.bins())
            .map(|m| (mel.values[[f, m]].exp() - LOG_MEL_EPS).max(0.0))
            .collect();
        // Warm start from the adjoint image; it is already non-negative.
        let mut p: Vec<f64> = (0..bins)
            .map(|k| (0..mel.bins()).map(|m| fb[[m, k]] * target[m]).sum())
            .collect();
        for _ in 0..120 {
            let mut resid = vec![0.0f64; mel.bins()];
            for m in 0..mel.bins() {
                resid[m] = (0..bins).map(|k| fb[[m, k]] * p[k]).sum::<f64>() - target[m];
            }
            for k in 0..bins {
                let g: f64 = (0..mel.bins()).map(|m| fb[[m, k]] * resid[m]).sum();
                p[k] = (p[k] - step * g).max(0.0);
            }
        }
        for k in 0..bins {
            out[[f, k]] = p[k].sqrt();
        }
    }
    out
}

/// DSP stand-in that strips voicing from speech: harmonic peaks are
/// flattened by a median filter across frequency and the phase is
/// randomized before resynthesis, leaving a noise-excited envelope.
pub fn whisperize(w: &Waveform, cfg: &StftConfig, seed: u64) -> Result<Waveform> {
    if w.samples.len() < cfg.window_length {
        return Err(Error::DegenerateInput("input shorter than one analysis window".into()));
    }
    let mag = stft_magnitude(&w.samples, cfg);
    let frames = mag.nrows();
    let bins = mag.ncols();
    // Kernel wide enough to span several harmonics of typical speech F0,
    // in frequency bins.
    let bin_hz = f64::from(w.sample_rate) / cfg.fft_size as f64;
    let half = ((400.0 / bin_hz).round() as usize).clamp(2, bins / 4);
    // Whispered speech carries no glottal low-frequency energy.
    let lf_cut = (120.0 / bin_hz).round() as usize;
    let mut rng = component_rng("dsp-whisperize", seed);
    let mut spec: Vec<Vec<Complex<f64>>> = Vec::with_capacity(frames);
    let mut sorted = Vec::with_capacity(2 * half + 1);
    for f in 0..frames {
        let mut row = Vec::with_capacity(bins);
        for k in 0..bins {
            let lo = k.saturating_sub(half);
            let hi = (k + half).min(bins - 1);
            sorted.clear();
            for j in lo..=hi {
                sorted.push(mag[[f, j]]);
            }
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if k < lf_cut { 0.0 } else { sorted[sorted.len() / 2] };
            let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            row.push(Complex::from_polar(med, phase));
        }
        spec.push(row);
    }
    let mut samples = istft(&spec, cfg);
    samples.truncate(w.samples.len());
    let mut out = Waveform { samples, sample_rate: w.sample_rate };
    // Match the source peak so level-based gates behave the same.
    let peak = out.peak();
    if peak > 0.0 {
        let gain = w.peak() / peak;
        for s in &mut out.samples {
            *s *= gain;
        }
    }
    Ok(out)
}
