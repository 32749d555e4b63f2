//! Utterance manifests: tab-separated records, validation, and the
//! speaker-disjoint train/val/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::component_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Whisper,
    Normal,
}

impl Mode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "whisper" => Some(Mode::Whisper),
            "normal" => Some(Mode::Normal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Whisper => "whisper",
            Mode::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    En,
    Cn,
}

impl Language {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "EN" => Some(Language::En),
            "CN" => Some(Language::Cn),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "EN",
            Language::Cn => "CN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Pseudo,
}

impl Provenance {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Provenance::Real),
            "pseudo" => Some(Provenance::Pseudo),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Pseudo => "pseudo",
        }
    }
}

/// One audio clip. `pair_id`, when present, links exactly one whispered and
/// one normal record.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub mode: Mode,
    pub language: Language,
    pub audio_path: PathBuf,
    pub pair_id: Option<String>,
    pub provenance: Provenance,
    pub transcript: String,
}

/// Field order: id, speaker, mode, language, audio_path, pair_id (may be
/// empty), provenance, transcript. Lines starting with '#' are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_number = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(8, '\t').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: line_number,
                msg: format!("expected 8 tab-separated fields, got {}", fields.len()),
            });
        }
        let mode = Mode::parse(fields[2]).ok_or_else(|| Error::Parse {
            line: line_number,
            msg: format!("unknown mode {:?}", fields[2]),
        })?;
        let language = Language::parse(fields[3]).ok_or_else(|| Error::Parse {
            line: line_number,
            msg: format!("unknown language {:?}", fields[3]),
        })?;
        let provenance = Provenance::parse(fields[6]).ok_or_else(|| Error::Parse {
            line: line_number,
            msg: format!("unknown provenance {:?}", fields[6]),
        })?;
        if fields[0].is_empty() {
            return Err(Error::Parse { line: line_number, msg: "empty id".into() });
        }
        records.push(UtteranceRecord {
            id: fields[0].to_owned(),
            speaker: fields[1].to_owned(),
            mode,
            language,
            audio_path: PathBuf::from(fields[4]),
            pair_id: if fields[5].is_empty() { None } else { Some(fields[5].to_owned()) },
            provenance,
            transcript: fields[7].to_owned(),
        });
    }
    validate_records(&records)?;
    Ok(records)
}

fn validate_records(records: &[UtteranceRecord]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for r in records {
        if !ids.insert(&r.id) {
            return Err(Error::Validation(format!("duplicate id {:?}", r.id)));
        }
    }
    let mut pairs: BTreeMap<&String, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        if let Some(p) = &r.pair_id {
            pairs.entry(p).or_default().push(r);
        }
    }
    for (pair_id, members) in pairs {
        if members.len() != 2 {
            return Err(Error::Validation(format!(
                "pair {pair_id:?} has {} members, want exactly 2",
                members.len()
            )));
        }
        let modes: BTreeSet<Mode> = members.iter().map(|r| r.mode).collect();
        if modes.len() != 2 {
            return Err(Error::Validation(format!(
                "pair {pair_id:?} must link one whisper and one normal record"
            )));
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut out = String::from("# id\tspeaker\tmode\tlanguage\taudio_path\tpair_id\tprovenance\ttranscript\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.speaker,
            r.mode.as_str(),
            r.language.as_str(),
            r.audio_path.display(),
            r.pair_id.as_deref().unwrap_or(""),
            r.provenance.as_str(),
            r.transcript
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A resolved whispered/normal pair.
#[derive(Debug, Clone)]
pub struct Pair<'a> {
    pub pair_id: &'a str,
    pub whisper: &'a UtteranceRecord,
    pub normal: &'a UtteranceRecord,
}

/// Pairs in first-appearance order.
pub fn resolve_pairs(records: &[UtteranceRecord]) -> Vec<Pair<'_>> {
    let mut order: Vec<&str> = Vec::new();
    let mut whisper: BTreeMap<&str, &UtteranceRecord> = BTreeMap::new();
    let mut normal: BTreeMap<&str, &UtteranceRecord> = BTreeMap::new();
    for r in records {
        if let Some(p) = &r.pair_id {
            if !whisper.contains_key(p.as_str()) && !normal.contains_key(p.as_str()) {
                order.push(p);
            }
            match r.mode {
                Mode::Whisper => whisper.insert(p, r),
                Mode::Normal => normal.insert(p, r),
            };
        }
    }
    order
        .into_iter()
        .filter_map(|p| {
            Some(Pair { pair_id: p, whisper: whisper.get(p)?, normal: normal.get(p)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    /// The 91:6:3 split.
    pub fn default_ratios(seed: u64) -> Self {
        SplitSpec { ratios: (91.0, 6.0, 3.0), seed }
    }
}

/// Speaker-disjoint split: speakers are shuffled by the seeded generator
/// and greedily assigned to the bucket with the largest remaining deficit
/// in utterance count. Deterministic per seed.
pub fn split_speakers(
    records: &[UtteranceRecord],
    spec: &SplitSpec,
) -> Result<[Vec<UtteranceRecord>; 3]> {
    let (a, b, c) = spec.ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c <= 0.0 {
        return Err(Error::Argument("split ratios must be non-negative with a positive sum".into()));
    }
    // Speakers in first-appearance order, then shuffled.
    let mut speakers: Vec<&str> = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if !counts.contains_key(r.speaker.as_str()) {
            speakers.push(&r.speaker);
        }
        *counts.entry(&r.speaker).or_insert(0) += 1;
    }
    if speakers.len() < 3 {
        return Err(Error::InfeasibleSplit(format!(
            "need at least 3 distinct speakers, got {}",
            speakers.len()
        )));
    }
    let mut rng = component_rng("speaker-split", spec.seed);
    speakers.shuffle(&mut rng);

    // Largest-remainder utterance targets per bucket.
    let total = records.len() as f64;
    let sum = a + b + c;
    let raw = [a / sum * total, b / sum * total, c / sum * total];
    let mut targets = [raw[0].floor() as i64, raw[1].floor() as i64, raw[2].floor() as i64];
    let mut remainder: i64 = records.len() as i64 - targets.iter().sum::<i64>();
    let mut order: Vec<usize> = vec![0, 1, 2];
    order.sort_by(|&x, &y| {
        (raw[y] - raw[y].floor())
            .partial_cmp(&(raw[x] - raw[x].floor()))
            .unwrap()
            .then(x.cmp(&y))
    });
    for &i in &order {
        if remainder > 0 {
            targets[i] += 1;
            remainder -= 1;
        }
    }

    let mut assigned: BTreeMap<&str, usize> = BTreeMap::new();
    let mut filled = [0i64; 3];
    for spk in speakers {
        let n = counts[spk] as i64;
        let bucket = (0..3)
            .max_by(|&x, &y| {
                (targets[x] - filled[x])
                    .cmp(&(targets[y] - filled[y]))
                    .then(y.cmp(&x))
            })
            .unwrap();
        filled[bucket] += n;
        assigned.insert(spk, bucket);
    }

    let mut out: [Vec<UtteranceRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for r in records {
        out[assigned[r.speaker.as_str()]].push(r.clone());
    }
    Ok(out)
}
