//! Minimal reverse-mode autodiff over f64 matrices, sized for the small
//! sequence models in this crate. Every op has a hand-written backward;
//! gradients are exact (the FSQ op uses the straight-through convention).
//!
//! All values are frames x dim matrices; scalars are 1x1. A fresh `Tape`
//! is built per forward pass.

mod adam;
pub mod trunk;

pub use adam::Adam;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a . b^T
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// matrix + broadcast 1 x n row
    AddRow(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Rope { input: Var, positions: Vec<usize>, base: f64 },
    SoftmaxRows(Var),
    LayerNorm(Var),
    Silu(Var),
    Tanh(Var),
    Fsmn { hidden: Var, coeffs: Var, left: usize, right: usize },
    FsqSt { input: Var, levels: Vec<u32>, gamma: f64 },
    Gather { table: Var, indices: Vec<usize> },
    /// mean over rows of squared L2 row distance -> 1x1
    FrameMse(Var, Var),
    /// mean |pred - target| over masked rows -> 1x1
    MaskedL1 { pred: Var, target: Var, mask: Vec<bool> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

/// Stretch factor of the FSQ bounding tanh; keeps every grid value a
/// requantization fixed point for up to 9 levels per dimension.
pub const FSQ_GAMMA: f64 = 1.4;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bounds one scalar into the level grid: half * tanh(gamma * x / half).
pub fn fsq_bound(x: f64, levels: u32, gamma: f64) -> f64 {
    let half = (levels - 1) as f64 / 2.0;
    if half == 0.0 {
        return 0.0;
    }
    half * (gamma * x / half).tanh()
}

fn fsq_bound_deriv(x: f64, levels: u32, gamma: f64) -> f64 {
    let half = (levels - 1) as f64 / 2.0;
    if half == 0.0 {
        return 0.0;
    }
    let t = (gamma * x / half).tanh();
    gamma * (1.0 - t * t)
}

/// Rounds a bounded value to its level code in [0, levels).
pub fn fsq_code(bounded: f64, levels: u32) -> u32 {
    let half = (levels - 1) as f64 / 2.0;
    let code = (bounded + half).round();
    (code.max(0.0) as u32).min(levels - 1)
}

/// Grid value for a code.
pub fn fsq_grid_value(code: u32, levels: u32) -> f64 {
    let half = (levels - 1) as f64 / 2.0;
    f64::from(code) - half
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn rope(&mut self, input: Var, positions: Vec<usize>, base: f64) -> Result<Var> {
        let x = self.value(input);
        if x.ncols() % 2 != 0 {
            return Err(Error::Argument(format!(
                "rope needs an even head dimension, got {}",
                x.ncols()
            )));
        }
        if positions.len() != x.nrows() {
            return Err(Error::Argument("rope positions must match frame count".into()));
        }
        let value = rope_rotate_raw(x, &positions, base, false);
        Ok(self.push(value, Op::Rope { input, positions, base }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let denom = (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        self.push(value, Op::LayerNorm(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// out_t = hidden_t + sum_k coeffs_k (.) hidden_{t+k-left}, zero padded.
    pub fn fsmn(&mut self, hidden: Var, coeffs: Var, left: usize, right: usize) -> Result<Var> {
        let h = self.value(hidden);
        let a = self.value(coeffs);
        let taps = left + right + 1;
        if a.nrows() != taps || a.ncols() != h.ncols() {
            return Err(Error::Argument(format!(
                "fsmn coefficients must be {} x {}, got {} x {}",
                taps,
                h.ncols(),
                a.nrows(),
                a.ncols()
            )));
        }
        let value = fsmn_apply_raw(h, a, left, right);
        Ok(self.push(value, Op::Fsmn { hidden, coeffs, left, right }))
    }

    /// FSQ with the straight-through convention: the forward value is the
    /// rounded grid embedding; the backward Jacobian is the bounding
    /// function's (rounding treated as identity).
    pub fn fsq_st(&mut self, input: Var, levels: &[u32]) -> Result<Var> {
        let x = self.value(input);
        if x.ncols() != levels.len() {
            return Err(Error::Argument(format!(
                "fsq expects {} dims, got {}",
                levels.len(),
                x.ncols()
            )));
        }
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                let b = fsq_bound(*v, levels[k], FSQ_GAMMA);
                *v = fsq_grid_value(fsq_code(b, levels[k]), levels[k]);
            }
        }
        Ok(self.push(value, Op::FsqSt { input, levels: levels.to_vec(), gamma: FSQ_GAMMA }))
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        for &i in indices {
            if i >= t.nrows() {
                return Err(Error::Argument(format!(
                    "gather index {i} outside table of {} rows",
                    t.nrows()
                )));
            }
        }
        let mut value = Array2::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        Ok(self.push(value, Op::Gather { table, indices: indices.to_vec() }))
    }

    /// Mean over rows of the squared Euclidean distance between rows.
    pub fn frame_mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.dim() != t.dim() {
            return Err(Error::Argument(format!(
                "shape mismatch {:?} vs {:?}",
                p.dim(),
                t.dim()
            )));
        }
        let rows = p.nrows().max(1) as f64;
        let loss = p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / rows;
        let value = Array2::from_elem((1, 1), loss);
        Ok(self.push(value, Op::FrameMse(pred, target)))
    }

    /// Mean absolute error over masked rows only.
    pub fn masked_l1(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.dim() != t.dim() {
            return Err(Error::Argument(format!(
                "shape mismatch {:?} vs {:?}",
                p.dim(),
                t.dim()
            )));
        }
        if mask.len() != p.nrows() {
            return Err(Error::Argument("mask length must match frame count".into()));
        }
        let masked_rows = mask.iter().filter(|&&m| m).count();
        if masked_rows == 0 {
            return Err(Error::DegenerateInput("mask selects no frames".into()));
        }
        let count = (masked_rows * p.ncols()) as f64;
        let mut loss = 0.0;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..p.ncols() {
                    loss += (p[[r, c]] - t[[r, c]]).abs();
                }
            }
        }
        let value = Array2::from_elem((1, 1), loss / count);
        Ok(self.push(value, Op::MaskedL1 { pred, target, mask: mask.to_vec() }))
    }

    /// Reports the first non-finite intermediate, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value at node {i} ({})",
                    op_name(&node.op)
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss. Returns one gradient slot per
    /// node id; unreached nodes stay `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.value(loss).dim(), (1, 1));
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let grad = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&grad);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = grad.dot(self.value(*b));
                    let db = grad.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, -grad);
                }
                Op::Mul(a, b) => {
                    let da = &grad * self.value(*b);
                    let db = &grad * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &grad * *c);
                }
                Op::AddRow(a, row) => {
                    let drow = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *row, drow);
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(&grad);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let dp = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *p, dp);
                        offset += w;
                    }
                }
                Op::Rope { input, positions, base } => {
                    // The rotation is orthogonal; its adjoint rotates back.
                    let da = rope_rotate_raw(&grad, positions, *base, true);
                    accumulate(&mut grads, *input, da);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut da = Array2::zeros(p.dim());
                    for r in 0..p.nrows() {
                        let dot: f64 = (0..p.ncols()).map(|c| grad[[r, c]] * p[[r, c]]).sum();
                        for c in 0..p.ncols() {
                            da[[r, c]] = p[[r, c]] * (grad[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.ncols() as f64;
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let mean = x.row(r).mean().unwrap();
                        let var =
                            x.row(r).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let denom = (var + LN_EPS).sqrt();
                        let mean_dy: f64 = grad.row(r).sum() / n;
                        let mean_dyy: f64 =
                            (0..x.ncols()).map(|c| grad[[r, c]] * y[[r, c]]).sum::<f64>() / n;
                        for c in 0..x.ncols() {
                            da[[r, c]] = (grad[[r, c]] - mean_dy - y[[r, c]] * mean_dyy) / denom;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let da = ndarray::Zip::from(&grad).and(x).map_collect(|&g, &v| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da =
                        ndarray::Zip::from(&grad).and(y).map_collect(|&g, &t| g * (1.0 - t * t));
                    accumulate(&mut grads, *a, da);
                }
                Op::Fsmn { hidden, coeffs, left, right } => {
                    let h = self.value(*hidden);
                    let a = self.value(*coeffs);
                    let frames = h.nrows() as i64;
                    let mut dh = grad.clone();
                    let mut da = Array2::zeros(a.dim());
                    for k in 0..(*left + *right + 1) {
                        let offset = k as i64 - *left as i64;
                        for t in 0..h.nrows() {
                            let src = t as i64 + offset;
                            if src >= 0 && src < frames {
                                let src = src as usize;
                                for c in 0..h.ncols() {
                                    dh[[src, c]] += a[[k, c]] * grad[[t, c]];
                                    da[[k, c]] += grad[[t, c]] * h[[src, c]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *hidden, dh);
                    accumulate(&mut grads, *coeffs, da);
                }
                Op::FsqSt { input, levels, gamma } => {
                    let x = self.value(*input);
                    let mut da = grad.clone();
                    for r in 0..x.nrows() {
                        for c in 0..x.ncols() {
                            da[[r, c]] *= fsq_bound_deriv(x[[r, c]], levels[c], *gamma);
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::Gather { table, indices } => {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..dt.ncols() {
                            dt[[i, c]] += grad[[r, c]];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::FrameMse(pred, target) => {
                    let g = grad[[0, 0]];
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let rows = p.nrows().max(1) as f64;
                    let dp = (p - t) * (2.0 * g / rows);
                    accumulate(&mut grads, *target, -&dp);
                    accumulate(&mut grads, *pred, dp);
                }
                Op::MaskedL1 { pred, target, mask } => {
                    let g = grad[[0, 0]];
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let masked_rows = mask.iter().filter(|&&m| m).count();
                    let count = (masked_rows * p.ncols()) as f64;
                    let mut dp = Array2::zeros(p.dim());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..p.ncols() {
                                let d = p[[r, c]] - t[[r, c]];
                                dp[[r, c]] = g * d.signum() / count;
                            }
                        }
                    }
                    accumulate(&mut grads, *target, -&dp);
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Rope { .. } => "rope",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNorm(..) => "layer_norm",
        Op::Silu(..) => "silu",
        Op::Tanh(..) => "tanh",
        Op::Fsmn { .. } => "fsmn",
        Op::FsqSt { .. } => "fsq_st",
        Op::Gather { .. } => "gather",
        Op::FrameMse(..) => "frame_mse",
        Op::MaskedL1 { .. } => "masked_l1",
    }
}

/// Rotates consecutive value pairs (v_2i, v_2i+1) by pos * base^(-2i/dim);
/// `inverse` applies the adjoint rotation.
pub fn rope_rotate_raw(x: &Array2<f64>, positions: &[usize], base: f64, inverse: bool) -> Array2<f64> {
    let dim = x.ncols();
    let mut out = Array2::zeros(x.dim());
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..dim / 2 {
            let theta = pos as f64 * base.powf(-(2.0 * i as f64) / dim as f64);
            let theta = if inverse { -theta } else { theta };
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (x[[r, 2 * i]], x[[r, 2 * i + 1]]);
            out[[r, 2 * i]] = a * cos - b * sin;
            out[[r, 2 * i + 1]] = a * sin + b * cos;
        }
    }
    out
}

/// FSMN kernel shared by the tape op and the standalone operation.
pub fn fsmn_apply_raw(h: &Array2<f64>, coeffs: &Array2<f64>, left: usize, right: usize) -> Array2<f64> {
    let frames = h.nrows() as i64;
    let mut out = h.clone();
    for k in 0..(left + right + 1) {
        let offset = k as i64 - left as i64;
        for t in 0..h.nrows() {
            let src = t as i64 + offset;
            if src >= 0 && src < frames {
                let src = src as usize;
                for c in 0..h.ncols() {
                    out[[t, c]] += coeffs[[k, c]] * h[[src, c]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite differences for gradient verification.

    use super::*;

    pub const FD_H: f64 = 1e-4;
    pub const FD_RTOL: f64 = 1e-4;

    /// Checks every entry of `analytic` against a central difference of
    /// `eval` perturbed at the same entry.
    pub fn check_grad<F: FnMut(&Array2<f64>) -> f64>(
        base: &Array2<f64>,
        analytic: &Array2<f64>,
        mut eval: F,
        label: &str,
    ) {
        for r in 0..base.nrows() {
            for c in 0..base.ncols() {
                let mut plus = base.clone();
                plus[[r, c]] += FD_H;
                let mut minus = base.clone();
                minus[[r, c]] -= FD_H;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                let an = analytic[[r, c]];
                let tol = FD_RTOL * fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() <= tol,
                    "{label}[{r},{c}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
