//! Corpus statistics per (language, provenance): total hours, pair count,
//! speaker count, rendered as a comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::dsp::wav_duration;

use super::manifest::{Language, Provenance, UtteranceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub language: Language,
    pub provenance: Provenance,
    pub seconds: f64,
    pub pairs: usize,
    pub speakers: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub rows: Vec<StatsRow>,
    pub warnings: Vec<String>,
}

impl CorpusStats {
    pub fn total_seconds(&self) -> f64 {
        self.rows.iter().map(|r| r.seconds).sum()
    }

    /// Merges disjoint-manifest stats; rows with matching keys are summed.
    pub fn merge(&self, other: &CorpusStats) -> CorpusStats {
        let mut acc: BTreeMap<(Language, Provenance), StatsRow> = BTreeMap::new();
        for row in self.rows.iter().chain(&other.rows) {
            let entry = acc.entry((row.language, row.provenance)).or_insert(StatsRow {
                language: row.language,
                provenance: row.provenance,
                seconds: 0.0,
                pairs: 0,
                speakers: 0,
            });
            entry.seconds += row.seconds;
            entry.pairs += row.pairs;
            entry.speakers += row.speakers;
        }
        let mut warnings = self.warnings.clone();
        warnings.extend(other.warnings.clone());
        CorpusStats { rows: acc.into_values().collect(), warnings }
    }

    /// Table rows like "CN 18 4k 146".
    pub fn render_table(&self) -> String {
        let mut out = String::from("Lang\tProv\tTime(h)\tPairs\tSpk\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.language.as_str(),
                r.provenance.as_str(),
                format_hours(r.seconds),
                format_pairs(r.pairs),
                r.speakers
            ));
        }
        out
    }
}

pub fn format_hours(seconds: f64) -> String {
    format!("{}", (seconds / 3600.0).round() as i64)
}

pub fn format_pairs(pairs: usize) -> String {
    if pairs >= 1000 {
        format!("{}k", ((pairs as f64) / 1000.0).round() as i64)
    } else {
        format!("{pairs}")
    }
}

/// Aggregates per (language, provenance). Durations come from WAV headers
/// and are cached per path; unreadable audio produces a warning and is
/// excluded from the duration total only.
pub fn corpus_stats(records: &[UtteranceRecord]) -> CorpusStats {
    let mut duration_cache: BTreeMap<PathBuf, Option<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<(Language, Provenance), (f64, BTreeSet<&str>, BTreeSet<&str>)> =
        BTreeMap::new();

    for r in records {
        let dur = duration_cache
            .entry(r.audio_path.clone())
            .or_insert_with(|| match wav_duration(&r.audio_path) {
                Ok(d) => Some(d),
                Err(e) => {
                    warnings.push(format!("{}: {e}", r.id));
                    None
                }
            })
            .unwrap_or(0.0);
        let entry = groups
            .entry((r.language, r.provenance))
            .or_insert_with(|| (0.0, BTreeSet::new(), BTreeSet::new()));
        entry.0 += dur;
        if let Some(p) = &r.pair_id {
            entry.1.insert(p);
        }
        entry.2.insert(&r.speaker);
    }

    let rows = groups
        .into_iter()
        .map(|((language, provenance), (seconds, pairs, speakers))| StatsRow {
            language,
            provenance,
            seconds,
            pairs: pairs.len(),
            speakers: speakers.len(),
        })
        .collect();
    CorpusStats { rows, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::manifest::Mode;
    use crate::dsp::{write_wav, Waveform};

    fn record(
        id: &str,
        speaker: &str,
        language: Language,
        provenance: Provenance,
        mode: Mode,
        pair: Option<&str>,
        path: PathBuf,
    ) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            speaker: speaker.into(),
            mode,
            language,
            audio_path: path,
            pair_id: pair.map(str::to_owned),
            provenance,
            transcript: String::new(),
        }
    }

    #[test]
    fn renders_the_real_cn_row() {
        // 4k pairs over 146 speakers totalling 18 h: one shared 8.1 s clip
        // stands in for every utterance.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        let samples = vec![0.1; (8.1 * 16_000.0) as usize];
        write_wav(&Waveform { samples, sample_rate: 16_000 }, &path).unwrap();

        let mut records = Vec::new();
        for i in 0..4000 {
            let spk = format!("s{}", i % 146);
            let pair = format!("p{i}");
            records.push(record(
                &format!("w{i}"),
                &spk,
                Language::Cn,
                Provenance::Real,
                Mode::Whisper,
                Some(&pair),
                path.clone(),
            ));
            records.push(record(
                &format!("n{i}"),
                &spk,
                Language::Cn,
                Provenance::Real,
                Mode::Normal,
                Some(&pair),
                path.clone(),
            ));
        }
        let stats = corpus_stats(&records);
        assert_eq!(stats.rows.len(), 1);
        let row = &stats.rows[0];
        assert_eq!(format_hours(row.seconds), "18");
        assert_eq!(format_pairs(row.pairs), "4k");
        assert_eq!(row.speakers, 146);
        let table = stats.render_table();
        assert!(table.contains("CN\treal\t18\t4k\t146"), "table:\n{table}");
    }

    #[test]
    fn empty_manifest_zero_stats() {
        let stats = corpus_stats(&[]);
        assert!(stats.rows.is_empty());
        assert_eq!(stats.total_seconds(), 0.0);
    }

    #[test]
    fn stats_are_additive_over_disjoint_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        write_wav(&Waveform { samples: vec![0.1; 16_000], sample_rate: 16_000 }, &path).unwrap();

        let a: Vec<UtteranceRecord> = (0..4)
            .map(|i| {
                record(
                    &format!("a{i}"),
                    &format!("sa{i}"),
                    Language::En,
                    Provenance::Real,
                    Mode::Normal,
                    None,
                    path.clone(),
                )
            })
            .collect();
        let b: Vec<UtteranceRecord> = (0..3)
            .map(|i| {
                record(
                    &format!("b{i}"),
                    &format!("sb{i}"),
                    Language::En,
                    Provenance::Real,
                    Mode::Normal,
                    None,
                    path.clone(),
                )
            })
            .collect();
        let merged: Vec<UtteranceRecord> = a.iter().chain(&b).cloned().collect();
        let direct = corpus_stats(&merged);
        let summed = corpus_stats(&a).merge(&corpus_stats(&b));
        assert_eq!(direct.rows, summed.rows);
    }

    #[test]
    fn unreadable_audio_warns_but_counts_speakers() {
        let records = vec![record(
            "x",
            "s",
            Language::En,
            Provenance::Real,
            Mode::Normal,
            None,
            PathBuf::from("/nonexistent/file.wav"),
        )];
        let stats = corpus_stats(&records);
        assert_eq!(stats.warnings.len(), 1);
        assert_eq!(stats.rows[0].speakers, 1);
        assert_eq!(stats.rows[0].seconds, 0.0);
    }
}
