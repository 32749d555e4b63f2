//! Teacher embeddings for distillation: either tensor files keyed by
//! utterance id, or a fixed-seed random projection network that gives the
//! tests a reproducible target without any pretrained checkpoint.

use std::path::PathBuf;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::trunk::init_matrix;
use crate::seeding::component_rng;
use crate::tensor_file;

/// Two-layer random projection mel -> embed with a tanh in the middle.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    w1: Array2<f64>,
    w2: Array2<f64>,
    pub seed: u64,
}

/// Output scale of the synthetic teacher; modest targets keep the Stage 1
/// check well conditioned at the pinned learning rate.
const TEACHER_HIDDEN: usize = 32;

impl SyntheticTeacher {
    pub fn new(feature_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = component_rng("synthetic-teacher", seed);
        let w1 = init_matrix(&mut rng, feature_dim, TEACHER_HIDDEN, 1.0 / (feature_dim as f64).sqrt());
        let w2 = init_matrix(&mut rng, TEACHER_HIDDEN, embed_dim, 0.05);
        SyntheticTeacher { w1, w2, seed }
    }

    pub fn embed(&self, features: &Array2<f64>) -> Array2<f64> {
        let h = features.dot(&self.w1).mapv(f64::tanh);
        h.dot(&self.w2)
    }
}

pub enum TeacherHandle {
    /// `<dir>/<utterance id>.emb` tensor files, frames x embed_dim.
    FileBacked { dir: PathBuf },
    Synthetic(SyntheticTeacher),
}

impl TeacherHandle {
    pub fn synthetic(feature_dim: usize, embed_dim: usize, seed: u64) -> Self {
        TeacherHandle::Synthetic(SyntheticTeacher::new(feature_dim, embed_dim, seed))
    }

    pub fn embed(&self, utt_id: &str, features: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            TeacherHandle::Synthetic(t) => Ok(t.embed(features)),
            TeacherHandle::FileBacked { dir } => {
                let path = dir.join(format!("{utt_id}.emb"));
                let emb = tensor_file::read_matrix(&path)?;
                if emb.nrows() != features.nrows() {
                    return Err(Error::Validation(format!(
                        "teacher embedding for {utt_id} has {} frames, features have {}",
                        emb.nrows(),
                        features.nrows()
                    )));
                }
                Ok(emb)
            }
        }
    }
}
