//! Band-limited sample-rate conversion with a Hann-windowed sinc kernel.

use crate::error::{Error, Result};

use super::Waveform;

/// Kernel half-width in output-side zero crossings.
const KERNEL_ZEROS: usize = 32;

/// Resamples to `target_rate`, preserving duration within one output sample.
/// Equal rates return the input samples bit-identically.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Argument("target_rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = f64::from(target_rate) / f64::from(w.sample_rate);
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    if w.samples.is_empty() || out_len == 0 {
        return Ok(Waveform { samples: Vec::new(), sample_rate: target_rate });
    }

    // Downsampling widens the kernel by 1/cutoff to stay band-limited.
    let cutoff = ratio.min(1.0);
    let half_width = KERNEL_ZEROS as f64 / cutoff;

    let src = &w.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let lo = ((center - half_width).ceil() as i64).max(0) as usize;
        let hi = ((center + half_width).floor() as i64).min(src.len() as i64 - 1) as usize;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for j in lo..=hi {
            let x = j as f64 - center;
            let k = windowed_sinc(x, cutoff, half_width);
            acc += src[j] * k;
            norm += k;
        }
        // Kernel-sum normalization removes edge droop and DC ripple.
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    Ok(Waveform { samples: out, sample_rate: target_rate })
}

fn windowed_sinc(x: f64, cutoff: f64, half_width: f64) -> f64 {
    if x.abs() >= half_width {
        return 0.0;
    }
    let hann = 0.5 + 0.5 * (std::f64::consts::PI * x / half_width).cos();
    cutoff * sinc(cutoff * x) * hann
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}
