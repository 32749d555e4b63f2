//! The transformer block stack shared by the semantic tokenizers and the
//! flow-matching acoustic model: pre-norm RoPE self-attention, an FSMN
//! memory block, and a feed-forward network, each with a residual.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub layers: usize,
    pub dim_model: usize,
    pub dim_ff: usize,
    pub heads: usize,
    pub fsmn_left: usize,
    pub fsmn_right: usize,
    pub rope_base: f64,
}

impl TrunkConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads, 3-tap FSMN context.
    pub fn small() -> Self {
        TrunkConfig {
            layers: 2,
            dim_model: 64,
            dim_ff: 128,
            heads: 4,
            fsmn_left: 3,
            fsmn_right: 3,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim_model == 0 || self.dim_ff == 0 || self.heads == 0 {
            return Err(Error::Argument("trunk dimensions must be positive".into()));
        }
        if self.dim_model % self.heads != 0 {
            return Err(Error::Argument(format!(
                "dim_model {} not divisible by {} heads",
                self.dim_model, self.heads
            )));
        }
        if (self.dim_model / self.heads) % 2 != 0 {
            return Err(Error::Argument(format!(
                "head dimension {} must be even for rope",
                self.dim_model / self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim_model / self.heads
    }

    pub fn fsmn_taps(&self) -> usize {
        self.fsmn_left + self.fsmn_right + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub fsmn: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

pub fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    // Box-Muller keeps us off rand_distr for one Gaussian.
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Unit-Gaussian matrix from the given stream.
pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    init_matrix(rng, rows, cols, 1.0)
}

impl LayerParams {
    pub fn init(cfg: &TrunkConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim_model;
        let scale = 1.0 / (d as f64).sqrt();
        LayerParams {
            wq: init_matrix(rng, d, d, scale),
            wk: init_matrix(rng, d, d, scale),
            wv: init_matrix(rng, d, d, scale),
            wo: init_matrix(rng, d, d, scale),
            fsmn: init_matrix(rng, cfg.fsmn_taps(), d, 0.02),
            ff_w1: init_matrix(rng, d, cfg.dim_ff, scale),
            ff_b1: Array2::zeros((1, cfg.dim_ff)),
            ff_w2: init_matrix(rng, cfg.dim_ff, d, 1.0 / (cfg.dim_ff as f64).sqrt()),
            ff_b2: Array2::zeros((1, d)),
        }
    }

    /// Field order here defines the canonical parameter order everywhere
    /// (checkpoints, gradients, optimizer state).
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.fsmn"), &self.fsmn);
        f(format!("{prefix}.ff_w1"), &self.ff_w1);
        f(format!("{prefix}.ff_b1"), &self.ff_b1);
        f(format!("{prefix}.ff_w2"), &self.ff_w2);
        f(format!("{prefix}.ff_b2"), &self.ff_b2);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Array2<f64>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.fsmn"), &mut self.fsmn);
        f(format!("{prefix}.ff_w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff_b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff_w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff_b2"), &mut self.ff_b2);
    }
}

pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub fsmn: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

pub fn register_layer(tape: &mut Tape, layer: &LayerParams) -> LayerVars {
    LayerVars {
        wq: tape.leaf(layer.wq.clone()),
        wk: tape.leaf(layer.wk.clone()),
        wv: tape.leaf(layer.wv.clone()),
        wo: tape.leaf(layer.wo.clone()),
        fsmn: tape.leaf(layer.fsmn.clone()),
        ff_w1: tape.leaf(layer.ff_w1.clone()),
        ff_b1: tape.leaf(layer.ff_b1.clone()),
        ff_w2: tape.leaf(layer.ff_w2.clone()),
        ff_b2: tape.leaf(layer.ff_b2.clone()),
    }
}

impl LayerVars {
    pub fn vars_in_order(&self) -> Vec<Var> {
        vec![
            self.wq, self.wk, self.wv, self.wo, self.fsmn, self.ff_w1, self.ff_b1, self.ff_w2,
            self.ff_b2,
        ]
    }
}

fn attention(tape: &mut Tape, x: Var, layer: &LayerVars, cfg: &TrunkConfig) -> Result<Var> {
    let frames = tape.value(x).nrows();
    let positions: Vec<usize> = (0..frames).collect();
    let q = tape.matmul(x, layer.wq);
    let k = tape.matmul(x, layer.wk);
    let v = tape.matmul(x, layer.wv);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let qr = tape.rope(qh, positions.clone(), cfg.rope_base)?;
        let kr = tape.rope(kh, positions.clone(), cfg.rope_base)?;
        let scores = tape.matmul_nt(qr, kr);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        heads.push(tape.matmul(probs, vh));
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(heads) };
    Ok(tape.matmul(merged, layer.wo))
}

/// One pre-norm block: attention, FSMN, FFN, each with a residual.
pub fn block_forward(tape: &mut Tape, x: Var, layer: &LayerVars, cfg: &TrunkConfig) -> Result<Var> {
    let h = tape.layer_norm(x);
    let att = attention(tape, h, layer, cfg)?;
    let x = tape.add(x, att);

    let h = tape.layer_norm(x);
    let mem = tape.fsmn(h, layer.fsmn, cfg.fsmn_left, cfg.fsmn_right)?;
    let x = tape.add(x, mem);

    let h = tape.layer_norm(x);
    let ff = tape.matmul(h, layer.ff_w1);
    let ff = tape.add_row(ff, layer.ff_b1);
    let ff = tape.silu(ff);
    let ff = tape.matmul(ff, layer.ff_w2);
    let ff = tape.add_row(ff, layer.ff_b2);
    Ok(tape.add(x, ff))
}

pub fn trunk_forward(tape: &mut Tape, mut x: Var, layers: &[LayerVars], cfg: &TrunkConfig) -> Result<Var> {
    for layer in layers {
        x = block_forward(tape, x, layer, cfg)?;
    }
    Ok(x)
}
