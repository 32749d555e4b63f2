//! Dataset manifests, speaker-disjoint splitting, the aligned-corpus
//! builder, pseudo-parallel generation, ablation data modes, and corpus
//! statistics.

mod manifest;
mod pipeline;
mod stats;

pub use manifest::{
    load_manifest, parse_manifest, resolve_pairs, split_speakers, write_manifest, Language, Mode,
    Pair, Provenance, SplitSpec, UtteranceRecord,
};
pub use pipeline::{
    build_aligned_corpus, gen_pseudo_pair, ingest, load_aligned_manifest, make_ablation_config,
    select_prompts, write_aligned_manifest, AblationInputs, AblationMode, AlignOptions,
    AlignSummary, AlignedPairRecord, AlignmentRecord, PosteriorgramSource, PseudoOptions,
    NORMALIZE_PEAK, TRIM_MIN_SILENCE, TRIM_THRESHOLD_DB,
};
pub use stats::{corpus_stats, format_hours, format_pairs, CorpusStats, StatsRow};
