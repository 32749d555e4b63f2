//! Fundamental-frequency estimation by normalized autocorrelation.

use crate::error::{Error, Result};

use super::{F0Track, Waveform};

/// Peaks below this normalized-correlation level are treated as unvoiced.
pub const VOICING_THRESHOLD: f64 = 0.3;

/// Per-frame F0 by the normalized autocorrelation peak within
/// [f0_min, f0_max]; sub-threshold frames report 0 (unvoiced).
pub fn extract_f0(w: &Waveform, f0_min: f64, f0_max: f64, hop: usize) -> Result<F0Track> {
    extract_f0_with_threshold(w, f0_min, f0_max, hop, VOICING_THRESHOLD)
}

pub fn extract_f0_with_threshold(
    w: &Waveform,
    f0_min: f64,
    f0_max: f64,
    hop: usize,
    voicing_threshold: f64,
) -> Result<F0Track> {
    let rate = f64::from(w.sample_rate);
    if !(f0_min > 0.0 && f0_min < f0_max) {
        return Err(Error::Argument(format!("invalid f0 band [{f0_min}, {f0_max}]")));
    }
    if f0_max >= rate / 2.0 {
        return Err(Error::Argument(format!(
            "f0_max {f0_max} must be below Nyquist {}",
            rate / 2.0
        )));
    }
    if hop == 0 {
        return Err(Error::Argument("hop must be positive".into()));
    }

    let lag_max = (rate / f0_min).floor() as usize;
    let lag_min = ((rate / f0_max).ceil() as usize).max(1);
    // Window holds three full periods of the lowest candidate so the
    // correlation estimate at lag_max stays low-variance.
    let frame_len = 3 * lag_max;
    if w.samples.len() < frame_len {
        return Ok(F0Track { f0: Vec::new(), hop_length: hop });
    }

    let frames = 1 + (w.samples.len() - frame_len) / hop;
    let mut f0 = Vec::with_capacity(frames);
    for f in 0..frames {
        let seg = &w.samples[f * hop..f * hop + frame_len];
        f0.push(frame_f0(seg, lag_min, lag_max, rate, voicing_threshold));
    }
    Ok(F0Track { f0, hop_length: hop })
}

fn frame_f0(seg: &[f64], lag_min: usize, lag_max: usize, rate: f64, threshold: f64) -> f64 {
    let n = seg.len();
    let half = n - lag_max;
    let mean = seg.iter().sum::<f64>() / n as f64;
    let seg: Vec<f64> = seg.iter().map(|s| s - mean).collect();
    let energy0: f64 = seg[..half].iter().map(|s| s * s).sum();
    if energy0 < 1e-12 {
        return 0.0;
    }

    let corr_at = |lag: usize| -> f64 {
        let mut dot = 0.0;
        let mut energy_lag = 0.0;
        for t in 0..half {
            dot += seg[t] * seg[t + lag];
            energy_lag += seg[t + lag] * seg[t + lag];
        }
        let denom = (energy0 * energy_lag).sqrt();
        if denom < 1e-12 {
            0.0
        } else {
            dot / denom
        }
    };

    let mut best = f64::NEG_INFINITY;
    let mut corr = vec![0.0f64; lag_max + 1];
    for lag in lag_min..=lag_max {
        let c = corr_at(lag);
        corr[lag] = c;
        if c > best {
            best = c;
        }
    }
    if best < threshold {
        return 0.0;
    }
    // A periodic signal correlates equally well at every multiple of its
    // period; take the shortest lag that is a local peak near the maximum
    // to avoid subharmonic picks.
    let mut best_lag = 0usize;
    for lag in lag_min..=lag_max {
        let left = if lag > lag_min { corr[lag - 1] } else { f64::NEG_INFINITY };
        let right = if lag < lag_max { corr[lag + 1] } else { f64::NEG_INFINITY };
        if corr[lag] >= 0.98 * best && corr[lag] >= left && corr[lag] >= right {
            best_lag = lag;
            break;
        }
    }
    if best_lag == 0 {
        return 0.0;
    }

    // Parabolic interpolation around the integer peak for sub-sample lag.
    let lag = best_lag as f64
        + if best_lag > lag_min && best_lag < lag_max {
            let (a, b, c) = (corr[best_lag - 1], corr[best_lag], corr[best_lag + 1]);
            let denom = a - 2.0 * b + c;
            if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        } else {
            0.0
        };
    rate / lag
}
