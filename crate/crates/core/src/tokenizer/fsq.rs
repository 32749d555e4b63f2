//! Finite scalar quantization: per-dimension bounded rounding onto a small
//! level grid, giving a product codebook with no learned vectors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fsq_bound, fsq_code, fsq_grid_value, FSQ_GAMMA};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    pub levels: Vec<u32>,
}

impl FsqConfig {
    /// Levels above 9 would break requantization fixed points under the
    /// tanh bound, so they are rejected.
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Argument("fsq needs at least one dimension".into()));
        }
        for &l in &levels {
            if !(2..=9).contains(&l) {
                return Err(Error::Argument(format!("fsq level count {l} outside 2..=9")));
            }
        }
        Ok(FsqConfig { levels })
    }

    /// The 1000-code default: [8, 5, 5, 5].
    pub fn default_levels() -> Self {
        FsqConfig { levels: vec![8, 5, 5, 5] }
    }

    pub fn embed_dim(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels.iter().map(|&l| l as usize).product()
    }

    /// Mixed-radix flat index, least-significant dimension first.
    pub fn codes_to_index(&self, codes: &[u32]) -> usize {
        let mut index = 0usize;
        let mut stride = 1usize;
        for (k, &c) in codes.iter().enumerate() {
            index += c as usize * stride;
            stride *= self.levels[k] as usize;
        }
        index
    }

    pub fn index_to_codes(&self, mut index: usize) -> Vec<u32> {
        let mut codes = Vec::with_capacity(self.levels.len());
        for &l in &self.levels {
            codes.push((index % l as usize) as u32);
            index /= l as usize;
        }
        codes
    }
}

/// Quantizer output: integer code coordinates, flat codebook indices, and
/// the grid embeddings the codes stand for.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokens {
    pub codes: Vec<Vec<u32>>,
    pub indices: Vec<usize>,
    pub dequantized: Array2<f64>,
}

impl SemanticTokens {
    pub fn frames(&self) -> usize {
        self.indices.len()
    }
}

/// Bound each dimension with the scaled tanh, round to the nearest level.
pub fn fsq_quantize(embeddings: &Array2<f64>, cfg: &FsqConfig) -> Result<SemanticTokens> {
    if embeddings.ncols() != cfg.embed_dim() {
        return Err(Error::Argument(format!(
            "embeddings have {} dims, fsq expects {}",
            embeddings.ncols(),
            cfg.embed_dim()
        )));
    }
    let frames = embeddings.nrows();
    let mut codes = Vec::with_capacity(frames);
    let mut indices = Vec::with_capacity(frames);
    let mut dequantized = Array2::zeros((frames, cfg.embed_dim()));
    for f in 0..frames {
        let mut frame_codes = Vec::with_capacity(cfg.embed_dim());
        for (k, &l) in cfg.levels.iter().enumerate() {
            let b = fsq_bound(embeddings[[f, k]], l, FSQ_GAMMA);
            let c = fsq_code(b, l);
            dequantized[[f, k]] = fsq_grid_value(c, l);
            frame_codes.push(c);
        }
        indices.push(cfg.codes_to_index(&frame_codes));
        codes.push(frame_codes);
    }
    Ok(SemanticTokens { codes, indices, dequantized })
}
