//! Exact dynamic time warping, the coarsen-project-refine approximation,
//! and reduction of alignment paths to total monotone frame mappings.

use ndarray::Array2;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};

/// Per-frame distance between feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Distance {
    Euclidean,
    Manhattan,
}

impl Distance {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Distance::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// Monotone, continuous, boundary-anchored warping path with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub steps: Vec<(usize, usize)>,
    pub cost: f64,
}

impl AlignmentPath {
    /// Checks monotonicity, continuity, and boundary anchoring against the
    /// given sequence lengths.
    pub fn validate(&self, len_a: usize, len_b: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Argument("empty alignment path".into()));
        }
        if self.steps[0] != (0, 0) {
            return Err(Error::Argument("path must start at (0, 0)".into()));
        }
        if *self.steps.last().unwrap() != (len_a - 1, len_b - 1) {
            return Err(Error::Argument("path must end at the last cell".into()));
        }
        for w in self.steps.windows(2) {
            let (di, dj) = (w[1].0 as i64 - w[0].0 as i64, w[1].1 as i64 - w[0].1 as i64);
            if !matches!((di, dj), (0, 1) | (1, 0) | (1, 1)) {
                return Err(Error::Argument(format!("illegal step {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }
}

/// Per-row column window [lo, hi) restricting the DP search space.
type Window = Vec<(usize, usize)>;

fn check_inputs(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Argument("dtw inputs must be non-empty".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Globally optimal path by full dynamic programming. Backtracking prefers
/// the diagonal step, then the i-advancing step, so outputs are
/// deterministic across runs and platforms.
pub fn dtw_exact(a: &Array2<f64>, b: &Array2<f64>, distance: Distance) -> Result<AlignmentPath> {
    check_inputs(a, b)?;
    let full: Window = (0..a.nrows()).map(|_| (0, b.nrows())).collect();
    Ok(dtw_windowed(a, b, &full, distance))
}

fn dtw_windowed(a: &Array2<f64>, b: &Array2<f64>, window: &Window, distance: Distance) -> AlignmentPath {
    let (n, m) = (a.nrows(), b.nrows());
    let row_starts: Vec<usize> = window
        .iter()
        .scan(0usize, |acc, (lo, hi)| {
            let s = *acc;
            *acc += hi - lo;
            Some(s)
        })
        .collect();
    let total: usize = window.iter().map(|(lo, hi)| hi - lo).sum();
    let mut acc = vec![f64::INFINITY; total];

    let cell = |acc: &[f64], i: usize, j: usize| -> f64 {
        let (lo, hi) = window[i];
        if j < lo || j >= hi {
            f64::INFINITY
        } else {
            acc[row_starts[i] + j - lo]
        }
    };

    let a_rows: Vec<&[f64]> = (0..n).map(|i| a.row(i).to_slice().unwrap()).collect();
    let b_rows: Vec<&[f64]> = (0..m).map(|j| b.row(j).to_slice().unwrap()).collect();

    for i in 0..n {
        let (lo, hi) = window[i];
        for j in lo..hi {
            let d = distance.eval(a_rows[i], b_rows[j]);
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cell(&acc, 0, j - 1),
                (_, 0) => cell(&acc, i - 1, 0),
                _ => cell(&acc, i - 1, j - 1)
                    .min(cell(&acc, i - 1, j))
                    .min(cell(&acc, i, j - 1)),
            };
            acc[row_starts[i] + j - lo] = prev + d;
        }
    }

    // Backtrack, preferring diagonal then i-advancing moves on ties.
    let mut steps = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n - 1, m - 1);
    steps.push((i, j));
    while i > 0 || j > 0 {
        let (pi, pj) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = cell(&acc, i - 1, j - 1);
                let up = cell(&acc, i - 1, j);
                let left = cell(&acc, i, j - 1);
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        steps.push((pi, pj));
        (i, j) = (pi, pj);
    }
    steps.reverse();
    AlignmentPath { cost: cell(&acc, n - 1, m - 1), steps }
}

fn coarsen(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let out_n = n / 2 + n % 2;
    let mut out = Array2::zeros((out_n, x.ncols()));
    for i in 0..n / 2 {
        for c in 0..x.ncols() {
            out[[i, c]] = 0.5 * (x[[2 * i, c]] + x[[2 * i + 1, c]]);
        }
    }
    if n % 2 == 1 {
        for c in 0..x.ncols() {
            out[[out_n - 1, c]] = x[[n - 1, c]];
        }
    }
    out
}

/// Projects a coarse path onto the fine grid and widens it by `radius`.
fn expand_window(path: &[(usize, usize)], n: usize, m: usize, radius: usize) -> Window {
    let mut lo = vec![usize::MAX; n];
    let mut hi = vec![0usize; n];
    let mut mark = |i: usize, j: usize| {
        if i < n {
            let j = j.min(m - 1);
            lo[i] = lo[i].min(j);
            hi[i] = hi[i].max(j + 1);
        }
    };
    let (mut last_i, mut last_j) = (usize::MAX, usize::MAX);
    for &(ci, cj) in path {
        for di in 0..2 {
            for dj in 0..2 {
                mark(2 * ci + di, 2 * cj + dj);
            }
        }
        // Keep diagonal doubling connected.
        if last_i != usize::MAX && ci > last_i && cj > last_j {
            mark(2 * ci - 1, 2 * cj);
            mark(2 * ci, 2 * cj - 1);
        }
        (last_i, last_j) = (ci, cj);
    }
    // Coarsening an odd-length series leaves the corner off the doubled
    // path; anchor it explicitly.
    mark(n - 1, m - 1);
    for i in 0..n {
        if lo[i] > hi[i] {
            // Unmarked row (odd-length tail); inherit the neighbor below.
            let (plo, phi) = if i > 0 { (lo[i - 1], hi[i - 1]) } else { (0, 1) };
            lo[i] = plo;
            hi[i] = phi.max(plo + 1);
        }
    }

    // Radius expansion spreads each row's interval to nearby rows and
    // widens it sideways.
    let snapshot: Vec<(usize, usize)> = lo.iter().copied().zip(hi.iter().copied()).collect();
    let mut out: Window = Vec::with_capacity(n);
    for i in 0..n {
        let top = i.saturating_sub(radius);
        let bottom = (i + radius).min(n - 1);
        let mut wlo = usize::MAX;
        let mut whi = 0usize;
        for (slo, shi) in snapshot.iter().take(bottom + 1).skip(top) {
            wlo = wlo.min(*slo);
            whi = whi.max(*shi);
        }
        out.push((wlo.saturating_sub(radius), (whi + radius).min(m)));
    }
    out
}

/// Coarsen-project-refine DTW. Sequences at or below radius + 2 fall back
/// to the exact DP, so small inputs match `dtw_exact` exactly; the
/// approximation never undercuts the exact cost.
pub fn fastdtw(
    a: &Array2<f64>,
    b: &Array2<f64>,
    radius: usize,
    distance: Distance,
) -> Result<AlignmentPath> {
    check_inputs(a, b)?;
    let min_size = radius + 2;
    if a.nrows() <= min_size || b.nrows() <= min_size {
        return dtw_exact(a, b, distance);
    }
    let coarse_path = fastdtw(&coarsen(a), &coarsen(b), radius, distance)?;
    let window = expand_window(&coarse_path.steps, a.nrows(), b.nrows(), radius);
    Ok(dtw_windowed(a, b, &window, distance))
}

/// Which sequence of the aligned pair plays the target role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingTarget {
    /// Target frames index sequence A; sources come from B.
    First,
    /// Target frames index sequence B; sources come from A.
    Second,
}

/// Total monotone mapping from target frames to source frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMapping {
    pub target_to_source: Vec<usize>,
}

/// Reduces a path to one source frame per target frame: the median of the
/// matched span, lower median on even spans.
pub fn path_to_frame_mapping(path: &AlignmentPath, target: MappingTarget) -> Result<FrameMapping> {
    if path.steps.is_empty() {
        return Err(Error::Argument("empty alignment path".into()));
    }
    let pick = |step: (usize, usize)| match target {
        MappingTarget::First => (step.0, step.1),
        MappingTarget::Second => (step.1, step.0),
    };
    let n_target = pick(*path.steps.last().unwrap()).0 + 1;
    let mut mapping = Vec::with_capacity(n_target);
    let mut span: Vec<usize> = Vec::new();
    let mut current = 0usize;
    for &step in &path.steps {
        let (t, s) = pick(step);
        if t != current {
            mapping.push(span[(span.len() - 1) / 2]);
            span.clear();
            current = t;
        }
        span.push(s);
    }
    mapping.push(span[(span.len() - 1) / 2]);
    if mapping.len() != n_target {
        return Err(Error::Argument("path does not cover every target frame".into()));
    }
    Ok(FrameMapping { target_to_source: mapping })
}

/// Warps `mel_source` onto the time axis of `mel_target`: FastDTW path,
/// median frame mapping, then frame gather. The output always has exactly
/// the target's frame count.
pub fn align_pair(
    mel_source: &MelSpectrogram,
    mel_target: &MelSpectrogram,
    radius: usize,
) -> Result<(MelSpectrogram, FrameMapping)> {
    if mel_source.frames() == 0 || mel_target.frames() == 0 {
        return Err(Error::Argument("cannot align empty spectrograms".into()));
    }
    if mel_source.bins() != mel_target.bins()
        || mel_source.hop_length != mel_target.hop_length
        || mel_source.sample_rate != mel_target.sample_rate
    {
        return Err(Error::Argument("incompatible mel configurations".into()));
    }
    let path = fastdtw(&mel_source.values, &mel_target.values, radius, Distance::Euclidean)?;
    let mapping = path_to_frame_mapping(&path, MappingTarget::Second)?;
    let mut values = Array2::zeros((mel_target.frames(), mel_target.bins()));
    for (t, &s) in mapping.target_to_source.iter().enumerate() {
        for c in 0..mel_target.bins() {
            values[[t, c]] = mel_source.values[[s, c]];
        }
    }
    Ok((
        MelSpectrogram {
            values,
            hop_length: mel_target.hop_length,
            sample_rate: mel_target.sample_rate,
        },
        mapping,
    ))
}
