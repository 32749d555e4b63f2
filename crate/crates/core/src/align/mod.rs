//! Corpus alignment: CTC greedy decoding and forced alignment over
//! posteriorgrams, word merging, exact and approximate DTW, and the
//! quasi one-to-one frame mapping applied to spectrogram pairs.

mod ctc;
mod dtw;

pub use ctc::{
    ctc_forced_align, ctc_greedy_decode, load_vocab, merge_words, Posteriorgram, TokenSegment,
};
pub use dtw::{
    align_pair, dtw_exact, fastdtw, path_to_frame_mapping, AlignmentPath, Distance, FrameMapping,
    MappingTarget,
};
