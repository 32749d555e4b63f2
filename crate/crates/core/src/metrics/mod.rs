//! Objective evaluation: Levenshtein error rates, F0 Pearson correlation
//! against target normal speech, embedding cosine similarity, and report
//! aggregation over paired manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{Language, UtteranceRecord};
use crate::dsp::{self, extract_f0, mel_spectrogram, F0Track, StftConfig};
use crate::error::{Error, Result};
use crate::tensor_file;

/// Minimal edit counts (substitutions, insertions, deletions) turning
/// `reference` into `hypothesis`, unit costs. The backtrace tie-break
/// prefers substitution, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> (usize, usize, usize) {
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[idx(i - 1, j)] + 1;
            let ins = dp[idx(i, j - 1)] + 1;
            dp[idx(i, j)] = sub.min(del).min(ins);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        let here = dp[idx(i, j)];
        if i > 0
            && j > 0
            && here == dp[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hyp[j - 1])
        {
            if reference[i - 1] != hyp[j - 1] {
                subs += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dp[idx(i - 1, j)] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    (subs, ins, dels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Word,
    Character,
}

impl Unit {
    /// WER for English, CER for Chinese.
    pub fn for_language(language: Language) -> Unit {
        match language {
            Language::En => Unit::Word,
            Language::Cn => Unit::Character,
        }
    }

    fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Unit::Word => text.split_whitespace().map(str::to_owned).collect(),
            Unit::Character => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

/// (S + I + D) / |reference| after unit tokenization; may exceed 1.
pub fn error_rate(hyp: &str, reference: &str, unit: Unit) -> Result<f64> {
    let ref_tokens = unit.tokenize(reference);
    if ref_tokens.is_empty() {
        return Err(Error::UndefinedMetric("empty reference transcript".into()));
    }
    let hyp_tokens = unit.tokenize(hyp);
    let (s, i, d) = edit_distance(&hyp_tokens, &ref_tokens);
    Ok((s + i + d) as f64 / ref_tokens.len() as f64)
}

/// Minimum co-voiced frames for a defined F0 correlation.
pub const MIN_COVOICED_FRAMES: usize = 10;

fn resample_track(track: &[f64], target_len: usize) -> Vec<f64> {
    if track.len() == target_len || track.is_empty() {
        return track.to_vec();
    }
    if track.len() == 1 {
        return vec![track[0]; target_len];
    }
    (0..target_len)
        .map(|i| {
            let pos = i as f64 * (track.len() - 1) as f64 / (target_len - 1).max(1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(track.len() - 1);
            let w = pos - lo as f64;
            (1.0 - w) * track[lo] + w * track[hi]
        })
        .collect()
}

/// Pearson correlation over frames voiced in both tracks after linearly
/// resampling the shorter track to the longer one's length. Fewer than
/// `MIN_COVOICED_FRAMES` co-voiced frames yields `None`.
pub fn f0_corr(converted: &F0Track, target: &F0Track) -> Option<f64> {
    if converted.f0.is_empty() || target.f0.is_empty() {
        return None;
    }
    let len = converted.f0.len().max(target.f0.len());
    let a = resample_track(&converted.f0, len);
    let b = resample_track(&target.f0, len);
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (*x, *y))
        .collect();
    if pairs.len() < MIN_COVOICED_FRAMES {
        return None;
    }
    let n = pairs.len() as f64;
    let mean_a = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_b = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in &pairs {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return None;
    }
    Some(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// dot(a, b) / (|a| |b|).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedMetric("zero embedding vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Where speaker embeddings come from: tensor files per utterance id, or
/// the documented spectral stand-in (mel mean + std concatenated), which
/// reports as "proxy-SIM".
pub enum EmbeddingSource {
    Files { converted_dir: PathBuf, reference_dir: PathBuf },
    SpectralProxy,
}

impl EmbeddingSource {
    pub fn is_proxy(&self) -> bool {
        matches!(self, EmbeddingSource::SpectralProxy)
    }
}

/// Mel mean + std concatenated, the spectral speaker-embedding stand-in.
pub fn spectral_embedding(path: &Path, cfg: &StftConfig, mel_bins: usize) -> Result<Vec<f64>> {
    let w = dsp::load_wav(path)?;
    let w = crate::corpus::ingest(&w, false)?;
    let mel = mel_spectrogram(&w, cfg, mel_bins)?;
    let frames = mel.frames() as f64;
    let mut out = Vec::with_capacity(2 * mel_bins);
    for c in 0..mel.bins() {
        let mean = (0..mel.frames()).map(|f| mel.values[[f, c]]).sum::<f64>() / frames;
        out.push(mean);
    }
    for c in 0..mel.bins() {
        let mean = out[c];
        let var = (0..mel.frames())
            .map(|f| (mel.values[[f, c]] - mean).powi(2))
            .sum::<f64>()
            / frames;
        out.push(var.sqrt());
    }
    Ok(out)
}

/// Tab-separated `id<TAB>text` hypothesis manifest.
pub fn load_hypotheses(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, hyp) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected id<TAB>text".into(),
        })?;
        out.insert(id.to_owned(), hyp.to_owned());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMetrics {
    pub id: String,
    pub sim: Option<f64>,
    pub error_rate: Option<f64>,
    pub f0_corr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<UtteranceMetrics>,
    pub excluded: Vec<(String, String)>,
    pub proxy_sim: bool,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        (None, 0)
    } else {
        (Some(defined.iter().sum::<f64>() / defined.len() as f64), defined.len())
    }
}

impl MetricsReport {
    pub fn mean_sim(&self) -> (Option<f64>, usize) {
        mean_of(self.rows.iter().map(|r| r.sim))
    }

    pub fn mean_error_rate(&self) -> (Option<f64>, usize) {
        mean_of(self.rows.iter().map(|r| r.error_rate))
    }

    pub fn mean_f0_corr(&self) -> (Option<f64>, usize) {
        mean_of(self.rows.iter().map(|r| r.f0_corr))
    }

    /// Human-readable summary table.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        let sim_label = if self.proxy_sim { "proxy-SIM" } else { "SIM" };
        let (sim, sim_n) = self.mean_sim();
        let (er, er_n) = self.mean_error_rate();
        let (f0, f0_n) = self.mean_f0_corr();
        let mut out = String::from("metric\tmean\tutterances\n");
        out.push_str(&format!("{sim_label}\t{}\t{sim_n}\n", fmt(sim)));
        out.push_str(&format!("ERR\t{}\t{er_n}\n", fmt(er)));
        out.push_str(&format!("F0_CoRR\t{}\t{f0_n}\n", fmt(f0)));
        out.push_str(&format!("excluded\t{}\t-\n", self.excluded.len()));
        out
    }

    /// Machine-readable per-utterance records, one line each.
    pub fn write_records(&self, path: &Path) -> Result<()> {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
        let mut out = String::from("# id\tsim\terror_rate\tf0_corr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                fmt(r.sim),
                fmt(r.error_rate),
                fmt(r.f0_corr)
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_records(path: &Path) -> Result<Vec<UtteranceMetrics>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<Option<f64>> {
                if s == "NA" {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                        line: lineno + 1,
                        msg: e.to_string(),
                    })
                }
            };
            rows.push(UtteranceMetrics {
                id: fields[0].to_owned(),
                sim: parse(fields[1])?,
                error_rate: parse(fields[2])?,
                f0_corr: parse(fields[3])?,
            });
        }
        Ok(rows)
    }
}

/// F0 band and hop used for the prosody metric.
pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 400.0;
pub const F0_HOP: usize = 160;

fn utterance_f0(path: &Path) -> Result<F0Track> {
    let w = dsp::load_wav(path)?;
    let w = crate::corpus::ingest(&w, false)?;
    extract_f0(&w, F0_MIN, F0_MAX, F0_HOP)
}

fn embedding_for(
    source: &EmbeddingSource,
    id: &str,
    audio: &Path,
    converted: bool,
    cfg: &StftConfig,
    mel_bins: usize,
) -> Result<Vec<f64>> {
    match source {
        EmbeddingSource::SpectralProxy => spectral_embedding(audio, cfg, mel_bins),
        EmbeddingSource::Files { converted_dir, reference_dir } => {
            let dir = if converted { converted_dir } else { reference_dir };
            let v = tensor_file::read_vector(&dir.join(format!("{id}.emb")))?;
            Ok(v.to_vec())
        }
    }
}

/// Per-utterance metrics over manifests paired by id, plus corpus means.
/// Hypotheses (for error rates) are optional; missing pairings are listed
/// in the report and excluded from means.
pub fn evaluate(
    converted: &[UtteranceRecord],
    reference: &[UtteranceRecord],
    embeddings: &EmbeddingSource,
    hypotheses: Option<&BTreeMap<String, String>>,
) -> Result<MetricsReport> {
    let cfg = StftConfig::default_16k();
    let mel_bins = crate::dsp::DEFAULT_MEL_BINS;
    let ref_by_id: BTreeMap<&str, &UtteranceRecord> =
        reference.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut report = MetricsReport { proxy_sim: embeddings.is_proxy(), ..Default::default() };
    for conv in converted {
        let Some(target) = ref_by_id.get(conv.id.as_str()) else {
            report.excluded.push((conv.id.clone(), "no reference with this id".into()));
            continue;
        };
        let sim = match (
            embedding_for(embeddings, &conv.id, &conv.audio_path, true, &cfg, mel_bins),
            embedding_for(embeddings, &target.id, &target.audio_path, false, &cfg, mel_bins),
        ) {
            (Ok(a), Ok(b)) => cosine_sim(&a, &b).ok(),
            _ => None,
        };
        let er = hypotheses.and_then(|h| h.get(&conv.id)).and_then(|hyp| {
            error_rate(hyp, &target.transcript, Unit::for_language(target.language)).ok()
        });
        let f0 = match (utterance_f0(&conv.audio_path), utterance_f0(&target.audio_path)) {
            (Ok(a), Ok(b)) => f0_corr(&a, &b),
            _ => None,
        };
        report.rows.push(UtteranceMetrics { id: conv.id.clone(), sim, error_rate: er, f0_corr: f0 });
    }
    for r in reference {
        if !converted.iter().any(|c| c.id == r.id) {
            report.excluded.push((r.id.clone(), "no converted audio with this id".into()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn edit_distance_identity() {
        let a = vec!["a", "b", "c"];
        assert_eq!(edit_distance(&a, &a), (0, 0, 0));
    }

    #[test]
    fn edit_distance_single_substitution() {
        let hyp = vec!["a", "x", "c"];
        let reference = vec!["a", "b", "c"];
        assert_eq!(edit_distance(&hyp, &reference), (1, 0, 0));
    }

    #[test]
    fn edit_distance_matches_independent_dp() {
        // Full DP table recomputation as the oracle, random pairs.
        fn oracle(hyp: &[u8], reference: &[u8]) -> usize {
            let (n, m) = (reference.len(), hyp.len());
            let mut dp = vec![vec![0usize; m + 1]; n + 1];
            for (i, row) in dp.iter_mut().enumerate() {
                row[0] = i;
            }
            for j in 0..=m {
                dp[0][j] = j;
            }
            for i in 1..=n {
                for j in 1..=m {
                    let cost = usize::from(reference[i - 1] != hyp[j - 1]);
                    dp[i][j] = (dp[i - 1][j - 1] + cost)
                        .min(dp[i - 1][j] + 1)
                        .min(dp[i][j - 1] + 1);
                }
            }
            dp[n][m]
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(81);
        for _ in 0..200 {
            let hyp: Vec<u8> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..3)).collect();
            let reference: Vec<u8> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..3)).collect();
            let (s, i, d) = edit_distance(&hyp, &reference);
            assert_eq!(s + i + d, oracle(&hyp, &reference));
        }
    }

    #[test]
    fn edit_distance_total_symmetry() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(82);
        for _ in 0..100 {
            let a: Vec<u8> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..3)).collect();
            let (s1, i1, d1) = edit_distance(&a, &b);
            let (s2, i2, d2) = edit_distance(&b, &a);
            assert_eq!(s1 + i1 + d1, s2 + i2 + d2);
            assert_eq!(i1, d2);
            assert_eq!(d1, i2);
        }
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate("a b c", "a b c", Unit::Word).unwrap(), 0.0);
        let wer = error_rate("a b c d", "a b c", Unit::Word).unwrap();
        assert!((wer - 1.0 / 3.0).abs() < 1e-12);
        let over_one = error_rate("x y z", "a", Unit::Word).unwrap();
        assert_eq!(over_one, 3.0);
        assert!(matches!(
            error_rate("anything", "", Unit::Word),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn character_unit_drops_whitespace() {
        let cer = error_rate("ab cd", "abcd", Unit::Character).unwrap();
        assert_eq!(cer, 0.0);
    }

    #[test]
    fn f0_corr_self_is_one() {
        let track = F0Track { f0: (0..50).map(|i| 200.0 + i as f64).collect(), hop_length: 160 };
        let r = f0_corr(&track, &track).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f0_corr_affine_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(83);
        let f0: Vec<f64> = (0..100).map(|_| rng.gen_range(120.0..300.0)).collect();
        let track = F0Track { f0: f0.clone(), hop_length: 160 };
        let scaled = F0Track {
            f0: f0.iter().map(|v| 1.7 * v + 11.0).collect(),
            hop_length: 160,
        };
        let r = f0_corr(&track, &scaled).unwrap();
        assert!((r - 1.0).abs() <= 1e-6, "r = {r}");
    }

    #[test]
    fn f0_corr_undefined_when_unvoiced() {
        let voiced = F0Track { f0: vec![200.0; 50], hop_length: 160 };
        let unvoiced = F0Track { f0: vec![0.0; 50], hop_length: 160 };
        assert!(f0_corr(&voiced, &unvoiced).is_none());
    }

    #[test]
    fn f0_corr_near_zero_for_independent_walks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(84);
        let mut passes = 0;
        let trials = 40;
        for _ in 0..trials {
            let walk = |rng: &mut rand_chacha::ChaCha8Rng| -> F0Track {
                let mut v = 200.0f64;
                let f0 = (0..1000)
                    .map(|_| {
                        v += rng.gen_range(-2.0..2.0);
                        v = v.clamp(80.0, 380.0);
                        v
                    })
                    .collect();
                F0Track { f0, hop_length: 160 }
            };
            let a = walk(&mut rng);
            let b = walk(&mut rng);
            if f0_corr(&a, &b).unwrap().abs() <= 0.2 {
                passes += 1;
            }
        }
        // Random walks correlate spuriously sometimes; demand a clear
        // majority within the weak-correlation band.
        assert!(passes * 100 >= trials * 60, "only {passes}/{trials} within |r| <= 0.2");
    }

    #[test]
    fn f0_corr_handles_length_mismatch() {
        let a = F0Track { f0: (0..60).map(|i| 150.0 + i as f64).collect(), hop_length: 160 };
        let b = F0Track {
            f0: (0..120).map(|i| 150.0 + i as f64 / 2.0).collect(),
            hop_length: 160,
        };
        let r = f0_corr(&a, &b).unwrap();
        assert!(r > 0.99, "r = {r}");
    }

    #[test]
    fn cosine_sim_contract() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let a = [0.3, -0.4, 0.5];
        let b = [0.1, 0.9, -0.2];
        let s1 = cosine_sim(&a, &b).unwrap();
        let doubled: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let s2 = cosine_sim(&doubled, &b).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn records_round_trip() {
        let report = MetricsReport {
            rows: vec![
                UtteranceMetrics {
                    id: "u1".into(),
                    sim: Some(0.9),
                    error_rate: Some(0.25),
                    f0_corr: None,
                },
                UtteranceMetrics {
                    id: "u2".into(),
                    sim: None,
                    error_rate: None,
                    f0_corr: Some(-0.125),
                },
            ],
            excluded: vec![],
            proxy_sim: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.tsv");
        report.write_records(&path).unwrap();
        let rows = MetricsReport::read_records(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].id, "u1");
        assert_eq!(rows[0].sim, Some(0.9));
        assert_eq!(rows[1].sim, None);
        assert_eq!(rows[1].f0_corr, Some(-0.125));
    }
}
