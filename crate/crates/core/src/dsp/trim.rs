//! RMS-gated silence trimming.

use crate::error::Result;

use super::Waveform;

/// Analysis frame for the RMS gate, 10 ms worth of samples.
fn gate_frame_len(sample_rate: u32) -> usize {
    ((f64::from(sample_rate) * 0.010).round() as usize).max(1)
}

/// Removes leading/trailing sub-threshold audio and internal silent runs of
/// at least `min_silence` seconds. Returns the trimmed waveform and the kept
/// sample ranges into the original; concatenating `original[ranges]`
/// reproduces the output exactly.
pub fn trim_silence(
    w: &Waveform,
    threshold_db: f64,
    min_silence: f64,
) -> Result<(Waveform, Vec<std::ops::Range<usize>>)> {
    if threshold_db >= 0.0 {
        return Err(crate::error::Error::Argument(
            "threshold_db must be negative (dBFS)".into(),
        ));
    }
    let frame_len = gate_frame_len(w.sample_rate);
    let threshold = 10f64.powf(threshold_db / 20.0);
    let n_frames = w.samples.len().div_ceil(frame_len);
    if n_frames == 0 {
        return Ok((Waveform { samples: Vec::new(), sample_rate: w.sample_rate }, Vec::new()));
    }

    let silent: Vec<bool> = (0..n_frames)
        .map(|f| {
            let start = f * frame_len;
            let end = (start + frame_len).min(w.samples.len());
            let sum_sq: f64 = w.samples[start..end].iter().map(|s| s * s).sum();
            let rms = (sum_sq / (end - start) as f64).sqrt();
            rms < threshold
        })
        .collect();

    let min_run = ((min_silence * f64::from(w.sample_rate)) / frame_len as f64).ceil() as usize;

    // Mark frames to drop: leading/trailing silent runs unconditionally,
    // internal silent runs only when they are at least min_run long.
    let mut drop = vec![false; n_frames];
    let mut f = 0;
    while f < n_frames {
        if !silent[f] {
            f += 1;
            continue;
        }
        let start = f;
        while f < n_frames && silent[f] {
            f += 1;
        }
        let run = f - start;
        let is_edge = start == 0 || f == n_frames;
        if is_edge || run >= min_run.max(1) {
            for d in drop.iter_mut().take(f).skip(start) {
                *d = true;
            }
        }
    }

    let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
    let mut samples = Vec::new();
    let mut f = 0;
    while f < n_frames {
        if drop[f] {
            f += 1;
            continue;
        }
        let start = f;
        while f < n_frames && !drop[f] {
            f += 1;
        }
        let s = start * frame_len;
        let e = (f * frame_len).min(w.samples.len());
        samples.extend_from_slice(&w.samples[s..e]);
        ranges.push(s..e);
    }

    Ok((Waveform { samples, sample_rate: w.sample_rate }, ranges))
}
