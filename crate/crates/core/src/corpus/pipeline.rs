//! The aligned-corpus builder, pseudo-pair generation, and the ablation
//! data modes. Pairs are processed independently; failures are recorded
//! per pair and the run continues.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align::{align_pair, ctc_forced_align, Posteriorgram, TokenSegment};
use crate::dsp::{
    self, mel_spectrogram, peak_normalize, resample, trim_silence, MelSpectrogram, StftConfig,
    Waveform, DEFAULT_MEL_BINS, FEATURE_SAMPLE_RATE, LOG_MEL_EPS,
};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, Direction, FlowModelParams};
use crate::tensor_file;
use crate::tokenizer::{encode_tokens, Role, SeqModelParams};

use super::manifest::{
    resolve_pairs, Language, Mode, Pair, Provenance, UtteranceRecord,
};

/// Trim gate and normalization defaults for ingest.
pub const TRIM_THRESHOLD_DB: f64 = -40.0;
pub const TRIM_MIN_SILENCE: f64 = 0.1;
pub const NORMALIZE_PEAK: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct AlignOptions {
    pub radius: usize,
    pub mel_bins: usize,
    pub stft: StftConfig,
    pub force: bool,
    pub trim: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            radius: 5,
            mel_bins: DEFAULT_MEL_BINS,
            stft: StftConfig::default_16k(),
            force: false,
            trim: true,
        }
    }
}

/// Where posteriorgrams for forced alignment come from. `None` skips the
/// word-boundary metadata; alignment itself runs on mel features either way.
pub enum PosteriorgramSource {
    None,
    /// `<dir>/<utterance id>.post` rank-2 tensors plus a vocabulary file.
    Files { dir: PathBuf, vocab: Vec<String> },
    /// One-hot posteriorgram synthesized from the transcript, spread evenly
    /// over the utterance's frames.
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub pair_id: String,
    pub path_len: usize,
    pub cost: f64,
    pub mapping: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word_segments: Option<Vec<(usize, usize, usize)>>,
}

#[derive(Debug, Default)]
pub struct AlignSummary {
    pub processed: usize,
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
}

/// One row of an aligned-pairs training manifest: equal-length whisper and
/// normal mel tensors on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPairRecord {
    pub pair_id: String,
    pub frames: usize,
    pub whisper_mel: PathBuf,
    pub normal_mel: PathBuf,
    pub speaker: String,
    pub language: Language,
    pub transcript: String,
}

pub fn write_aligned_manifest(path: &Path, records: &[AlignedPairRecord]) -> Result<()> {
    let mut out =
        String::from("# pair_id\tframes\twhisper_mel\tnormal_mel\tspeaker\tlanguage\ttranscript\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.pair_id,
            r.frames,
            r.whisper_mel.display(),
            r.normal_mel.display(),
            r.speaker,
            r.language.as_str(),
            r.transcript
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_aligned_manifest(path: &Path) -> Result<Vec<AlignedPairRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(7, '\t').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let frames: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad frame count {:?}", fields[1]),
        })?;
        let language = match fields[5] {
            "EN" => Language::En,
            "CN" => Language::Cn,
            other => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("unknown language {other:?}"),
                })
            }
        };
        records.push(AlignedPairRecord {
            pair_id: fields[0].to_owned(),
            frames,
            whisper_mel: PathBuf::from(fields[2]),
            normal_mel: PathBuf::from(fields[3]),
            speaker: fields[4].to_owned(),
            language,
            transcript: fields[6].to_owned(),
        });
    }
    Ok(records)
}

/// Ingest chain shared by the pipeline stages: resample to the feature
/// rate, peak-normalize, optionally trim silence.
pub fn ingest(w: &Waveform, trim: bool) -> Result<Waveform> {
    let w = resample(w, FEATURE_SAMPLE_RATE)?;
    let w = peak_normalize(&w, NORMALIZE_PEAK)?;
    if trim {
        let (trimmed, _) = trim_silence(&w, TRIM_THRESHOLD_DB, TRIM_MIN_SILENCE)?;
        if trimmed.is_empty() {
            return Err(Error::DegenerateInput("utterance is entirely silent".into()));
        }
        Ok(trimmed)
    } else {
        Ok(w)
    }
}

fn load_features(record: &UtteranceRecord, opts: &AlignOptions) -> Result<MelSpectrogram> {
    let w = dsp::load_wav(&record.audio_path)?;
    let w = ingest(&w, opts.trim)?;
    mel_spectrogram(&w, &opts.stft, opts.mel_bins)
}

/// Word segments from the posteriorgram source, used as alignment metadata.
fn word_alignment(
    source: &PosteriorgramSource,
    record: &UtteranceRecord,
    frames: usize,
) -> Result<Option<Vec<TokenSegment>>> {
    let words: Vec<&str> = record.transcript.split_whitespace().collect();
    if words.is_empty() {
        return Ok(None);
    }
    match source {
        PosteriorgramSource::None => Ok(None),
        PosteriorgramSource::Files { dir, vocab } => {
            let path = dir.join(format!("{}.post", record.id));
            let logits = tensor_file::read_matrix(&path)?;
            let post = Posteriorgram::new(logits)?;
            let tokens: Vec<usize> = words
                .iter()
                .map(|w| {
                    vocab.iter().position(|v| v == w).ok_or_else(|| {
                        Error::Validation(format!("word {w:?} missing from vocabulary"))
                    })
                })
                .collect::<Result<_>>()?;
            let segments = ctc_forced_align(&post, &tokens, 0)?;
            Ok(Some(segments))
        }
        PosteriorgramSource::Synthetic => {
            // One-hot emissions spread evenly over the frame axis; the word
            // list itself is the vocabulary (blank at 0).
            if frames < words.len() {
                return Ok(None);
            }
            let mut uniq: Vec<&str> = Vec::new();
            for w in &words {
                if !uniq.contains(w) {
                    uniq.push(w);
                }
            }
            let tokens: Vec<usize> = words
                .iter()
                .map(|w| uniq.iter().position(|v| v == w).unwrap() + 1)
                .collect();
            let vocab = uniq.len() + 1;
            let mut logits = Array2::from_elem((frames, vocab), -20.0);
            for f in 0..frames {
                let w = (f * words.len()) / frames;
                logits[[f, tokens[w]]] = 0.0;
            }
            let post = Posteriorgram::from_logits(&logits);
            let segments = ctc_forced_align(&post, &tokens, 0)?;
            Ok(Some(segments))
        }
    }
}

fn align_one_pair(
    pair: &Pair,
    source: &PosteriorgramSource,
    out_dir: &Path,
    opts: &AlignOptions,
) -> Result<(AlignedPairRecord, AlignmentRecord)> {
    let whisper_mel = load_features(pair.whisper, opts)?;
    let normal_mel = load_features(pair.normal, opts)?;
    let segments = word_alignment(source, pair.whisper, whisper_mel.frames())?;
    let (aligned, mapping) = align_pair(&whisper_mel, &normal_mel, opts.radius)?;

    let whisper_path = out_dir.join(format!("{}.whisper.mel", pair.pair_id));
    let normal_path = out_dir.join(format!("{}.normal.mel", pair.pair_id));
    let mapping_path = out_dir.join(format!("{}.mapping", pair.pair_id));
    tensor_file::write_matrix(&whisper_path, &aligned.values)?;
    tensor_file::write_matrix(&normal_path, &normal_mel.values)?;
    let mapping_f: Vec<f32> = mapping.target_to_source.iter().map(|&i| i as f32).collect();
    tensor_file::write_tensor(&mapping_path, &[mapping_f.len() as u64], &mapping_f)?;

    // Path statistics come from the same fastdtw run the mapping used.
    let path = crate::align::fastdtw(
        &whisper_mel.values,
        &normal_mel.values,
        opts.radius,
        crate::align::Distance::Euclidean,
    )?;
    Ok((
        AlignedPairRecord {
            pair_id: pair.pair_id.to_owned(),
            frames: aligned.frames(),
            whisper_mel: whisper_path,
            normal_mel: normal_path,
            speaker: pair.normal.speaker.clone(),
            language: pair.normal.language,
            transcript: pair.normal.transcript.clone(),
        },
        AlignmentRecord {
            pair_id: pair.pair_id.to_owned(),
            path_len: path.steps.len(),
            cost: path.cost,
            mapping: mapping.target_to_source,
            word_segments: segments
                .map(|s| s.iter().map(|x| (x.token, x.start_frame, x.end_frame)).collect()),
        },
    ))
}

/// Runs the full alignment pipeline over every resolvable pair: resample,
/// normalize, trim, mel analysis, forced-alignment metadata, FastDTW, and
/// frame-mapped whisper mels with exactly the normal member's frame count.
pub fn build_aligned_corpus(
    records: &[UtteranceRecord],
    source: &PosteriorgramSource,
    out_dir: &Path,
    opts: &AlignOptions,
) -> Result<AlignSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs = resolve_pairs(records);
    let mut summary = AlignSummary::default();
    let mut aligned_records = Vec::new();
    let mut alignment_records = Vec::new();

    for pair in &pairs {
        let marker = out_dir.join(format!("{}.whisper.mel", pair.pair_id));
        if !opts.force && marker.exists() {
            summary.skipped += 1;
            continue;
        }
        match align_one_pair(pair, source, out_dir, opts) {
            Ok((rec, alog)) => {
                aligned_records.push(rec);
                alignment_records.push(alog);
                summary.processed += 1;
            }
            Err(e) => summary.failures.push((pair.pair_id.to_owned(), e.to_string())),
        }
    }

    // Merge with any previously aligned pairs so reruns stay complete.
    let manifest_path = out_dir.join("aligned.tsv");
    if manifest_path.exists() {
        let existing = load_aligned_manifest(&manifest_path)?;
        for r in existing {
            if !aligned_records.iter().any(|n| n.pair_id == r.pair_id) {
                aligned_records.push(r);
            }
        }
    }
    aligned_records.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    write_aligned_manifest(&manifest_path, &aligned_records)?;

    let log_path = out_dir.join("alignments.jsonl");
    let mut log = String::new();
    for r in &alignment_records {
        log.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        log.push('\n');
    }
    if !log.is_empty() {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        f.write_all(log.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct PseudoOptions {
    pub sampler_steps: usize,
    pub griffin_lim_iters: usize,
    pub mel_bins: usize,
    pub stft: StftConfig,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        PseudoOptions {
            sampler_steps: 10,
            griffin_lim_iters: 32,
            mel_bins: DEFAULT_MEL_BINS,
            stft: StftConfig::default_16k(),
        }
    }
}

/// Synthesizes a pseudo-whisper twin for one normal utterance: n2w tokens,
/// flow sampling against a timbre prompt, mel inversion, Griffin-Lim.
/// Returns the waveform plus the two records of the new pair (both tagged
/// pseudo, sharing the source transcript).
pub fn gen_pseudo_pair(
    normal: &UtteranceRecord,
    n2w_tokenizer: &SeqModelParams,
    flow_params: &FlowModelParams,
    prompt_mel: &Array2<f64>,
    opts: &PseudoOptions,
    out_dir: &Path,
    seed: u64,
) -> Result<(Waveform, [UtteranceRecord; 2])> {
    if n2w_tokenizer.role != Role::N2w {
        return Err(Error::Usage(format!(
            "pseudo generation needs an n2w tokenizer, got role {}",
            n2w_tokenizer.role
        )));
    }
    if normal.mode != Mode::Normal {
        return Err(Error::Usage(format!("record {} is not normal speech", normal.id)));
    }
    let w = dsp::load_wav(&normal.audio_path)?;
    let w = ingest(&w, false)?;
    let mel = mel_spectrogram(&w, &opts.stft, opts.mel_bins)?;

    let target_tokens = encode_tokens(n2w_tokenizer, &mel.values)?;
    let prompt_tokens = if prompt_mel.nrows() > 0 {
        encode_tokens(n2w_tokenizer, prompt_mel)?.indices
    } else {
        Vec::new()
    };
    let mut indices = prompt_tokens;
    indices.extend_from_slice(&target_tokens.indices);

    let gen_mel = euler_sample(
        flow_params,
        &indices,
        Direction::N2w,
        prompt_mel,
        target_tokens.frames(),
        opts.sampler_steps,
        seed,
    )?;
    let gen = MelSpectrogram {
        values: gen_mel,
        hop_length: opts.stft.hop_length,
        sample_rate: FEATURE_SAMPLE_RATE,
    };
    let mag = dsp::mel_to_linear_magnitude(&gen, opts.stft.fft_size);
    let mut wav = dsp::griffin_lim(&mag, &opts.stft, opts.griffin_lim_iters)?;
    wav.sample_rate = FEATURE_SAMPLE_RATE;
    if wav.peak() > 0.0 {
        wav = peak_normalize(&wav, NORMALIZE_PEAK)?;
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let wav_path = out_dir.join(format!("{}_pseudo.wav", normal.id));
    dsp::write_wav(&wav, &wav_path)?;

    let pair_id = format!("{}_pp", normal.id);
    let whisper_record = UtteranceRecord {
        id: format!("{}_pw", normal.id),
        speaker: normal.speaker.clone(),
        mode: Mode::Whisper,
        language: normal.language,
        audio_path: wav_path,
        pair_id: Some(pair_id.clone()),
        provenance: Provenance::Pseudo,
        transcript: normal.transcript.clone(),
    };
    let mut normal_record = normal.clone();
    normal_record.id = format!("{}_pn", normal.id);
    normal_record.pair_id = Some(pair_id);
    normal_record.provenance = Provenance::Pseudo;
    Ok((wav, [whisper_record, normal_record]))
}

/// Longest normal clip per speaker serves as the timbre prompt.
pub fn select_prompts<'a>(
    records: &'a [UtteranceRecord],
) -> Result<BTreeMap<&'a str, &'a UtteranceRecord>> {
    let mut best: BTreeMap<&str, (&UtteranceRecord, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.mode == Mode::Normal) {
        let dur = dsp::wav_duration(&r.audio_path)?;
        match best.get(r.speaker.as_str()) {
            Some((_, d)) if *d >= dur => {}
            _ => {
                best.insert(&r.speaker, (r, dur));
            }
        }
    }
    Ok(best.into_iter().map(|(k, (r, _))| (k, r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Raw,
    Dsp,
    Aligned,
    Pseudo,
    APlusP,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(AblationMode::Raw),
            "dsp" => Ok(AblationMode::Dsp),
            "aligned" => Ok(AblationMode::Aligned),
            "pseudo" => Ok(AblationMode::Pseudo),
            "a_plus_p" | "a+p" => Ok(AblationMode::APlusP),
            other => Err(Error::Argument(format!(
                "unknown ablation mode {other:?}, want raw|dsp|aligned|pseudo|a_plus_p"
            ))),
        }
    }
}

/// Inputs for the ablation configurations; each mode uses the subset it
/// needs.
#[derive(Default)]
pub struct AblationInputs<'a> {
    /// Real whisper/normal pairs (RAW and DSP modes).
    pub pairs: Option<&'a [UtteranceRecord]>,
    /// Output of the alignment pipeline (ALIGNED and A+P).
    pub aligned_manifest: Option<PathBuf>,
    /// Aligned-style manifest built from pseudo pairs (PSEUDO and A+P).
    pub pseudo_manifest: Option<PathBuf>,
    /// Seed for the DSP whisperization noise.
    pub seed: u64,
}

fn silence_pad(mel: &MelSpectrogram, frames: usize) -> Array2<f64> {
    let mut out = Array2::from_elem((frames, mel.bins()), LOG_MEL_EPS.ln());
    for f in 0..mel.frames().min(frames) {
        for c in 0..mel.bins() {
            out[[f, c]] = mel.values[[f, c]];
        }
    }
    out
}

/// Builds the training manifest for one data-construction strategy:
/// RAW pads pairs to equal length with silence frames, DSP synthesizes
/// whispers from normal recordings with the spectral-whitening stand-in,
/// ALIGNED and PSEUDO pass through their pipelines' manifests, and A+P
/// concatenates both.
pub fn make_ablation_config(
    mode: AblationMode,
    inputs: &AblationInputs,
    out_dir: &Path,
    opts: &AlignOptions,
) -> Result<Vec<AlignedPairRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = match mode {
        AblationMode::Raw => {
            let pairs = inputs
                .pairs
                .ok_or_else(|| Error::Config("raw mode needs a pair manifest".into()))?;
            let mut out = Vec::new();
            for pair in resolve_pairs(pairs) {
                let no_trim = AlignOptions { trim: false, ..opts.clone() };
                let wm = load_features(pair.whisper, &no_trim)?;
                let nm = load_features(pair.normal, &no_trim)?;
                let frames = wm.frames().max(nm.frames());
                let w_pad = silence_pad(&wm, frames);
                let n_pad = silence_pad(&nm, frames);
                let wp = out_dir.join(format!("{}.whisper.mel", pair.pair_id));
                let np = out_dir.join(format!("{}.normal.mel", pair.pair_id));
                tensor_file::write_matrix(&wp, &w_pad)?;
                tensor_file::write_matrix(&np, &n_pad)?;
                out.push(AlignedPairRecord {
                    pair_id: pair.pair_id.to_owned(),
                    frames,
                    whisper_mel: wp,
                    normal_mel: np,
                    speaker: pair.normal.speaker.clone(),
                    language: pair.normal.language,
                    transcript: pair.normal.transcript.clone(),
                });
            }
            out
        }
        AblationMode::Dsp => {
            let pairs = inputs
                .pairs
                .ok_or_else(|| Error::Config("dsp mode needs a pair manifest".into()))?;
            let mut out = Vec::new();
            for r in pairs.iter().filter(|r| r.mode == Mode::Normal) {
                let w = dsp::load_wav(&r.audio_path)?;
                let w = ingest(&w, false)?;
                let whisperized = dsp::whisperize(&w, &opts.stft, inputs.seed)?;
                let nm = mel_spectrogram(&w, &opts.stft, opts.mel_bins)?;
                let wm = mel_spectrogram(&whisperized, &opts.stft, opts.mel_bins)?;
                let frames = nm.frames().max(wm.frames());
                let wp = out_dir.join(format!("{}_dsp.whisper.mel", r.id));
                let np = out_dir.join(format!("{}_dsp.normal.mel", r.id));
                tensor_file::write_matrix(&wp, &silence_pad(&wm, frames))?;
                tensor_file::write_matrix(&np, &silence_pad(&nm, frames))?;
                out.push(AlignedPairRecord {
                    pair_id: format!("{}_dsp", r.id),
                    frames,
                    whisper_mel: wp,
                    normal_mel: np,
                    speaker: r.speaker.clone(),
                    language: r.language,
                    transcript: r.transcript.clone(),
                });
            }
            out
        }
        AblationMode::Aligned => {
            let path = inputs
                .aligned_manifest
                .as_ref()
                .ok_or_else(|| Error::Config("aligned mode needs the aligned manifest".into()))?;
            load_aligned_manifest(path)?
        }
        AblationMode::Pseudo => {
            let path = inputs
                .pseudo_manifest
                .as_ref()
                .ok_or_else(|| Error::Config("pseudo mode needs the pseudo manifest".into()))?;
            load_aligned_manifest(path)?
        }
        AblationMode::APlusP => {
            let aligned = make_ablation_config(AblationMode::Aligned, inputs, out_dir, opts)?;
            let pseudo = make_ablation_config(AblationMode::Pseudo, inputs, out_dir, opts)?;
            let mut out = aligned;
            for p in pseudo {
                if !out.iter().any(|a| a.pair_id == p.pair_id) {
                    out.push(p);
                }
            }
            out
        }
    };
    write_aligned_manifest(&out_dir.join("train.tsv"), &records)?;
    Ok(records)
}
