//! Bidirectional whispered/normal speech conversion toolkit.
//!
//! The pipeline has three training stages over a shared set of primitives:
//! a distilled semantic tokenizer (RoPE attention + FSMN + FFN blocks with
//! FSQ quantization), a conditional flow-matching acoustic model over mel
//! spectrograms, and direction-specific unified tokenizers trained on
//! aligned real pairs plus generated pseudo pairs. Supporting modules cover
//! the DSP frontend, CTC/DTW corpus alignment, manifest management, and
//! objective evaluation.

pub mod align;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod seeding;
pub mod tensor_file;
pub mod tokenizer;

pub use error::{Error, Result};
