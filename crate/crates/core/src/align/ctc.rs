//! CTC greedy decoding and Viterbi forced alignment on log-softmax
//! posteriorgrams. Blank is a vocabulary index, conventionally 0.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-frame log-probability distributions over a token vocabulary.
#[derive(Debug, Clone)]
pub struct Posteriorgram {
    log_probs: Array2<f64>,
}

impl Posteriorgram {
    /// Wraps a frames x vocab matrix, checking that each row is a
    /// log-softmax distribution (logsumexp 0 within 1e-4, entries <= 0).
    pub fn new(log_probs: Array2<f64>) -> Result<Self> {
        for (i, row) in log_probs.rows().into_iter().enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if !max.is_finite() {
                return Err(Error::Argument(format!("posteriorgram row {i} has no finite entry")));
            }
            if max > 1e-9 {
                return Err(Error::Argument(format!(
                    "posteriorgram row {i} has positive log-probability {max}"
                )));
            }
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            if lse.abs() > 1e-4 {
                return Err(Error::Argument(format!(
                    "posteriorgram row {i} is not normalized: logsumexp = {lse}"
                )));
            }
        }
        Ok(Posteriorgram { log_probs })
    }

    /// Applies a row-wise log-softmax to raw scores.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let mut log_probs = logits.clone();
        for mut row in log_probs.rows_mut() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        Posteriorgram { log_probs }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }
}

/// A token occupying the frame span [start_frame, end_frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSegment {
    pub token: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Per-frame argmax, collapse consecutive repeats, drop blanks.
pub fn ctc_greedy_decode(p: &Posteriorgram, blank: usize) -> Result<Vec<usize>> {
    if p.frames() > 0 && blank >= p.vocab() {
        return Err(Error::Argument(format!("blank {blank} outside vocab {}", p.vocab())));
    }
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for row in p.log_probs.rows() {
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    Ok(out)
}

/// Viterbi forced alignment through the standard CTC graph (the transcript
/// interleaved with blanks, self-loops, and skips between distinct tokens).
/// Each transcript token gets its maximal contiguous emitting frame span.
pub fn ctc_forced_align(
    p: &Posteriorgram,
    transcript: &[usize],
    blank: usize,
) -> Result<Vec<TokenSegment>> {
    if transcript.is_empty() {
        return Err(Error::Argument("transcript must be non-empty".into()));
    }
    if blank >= p.vocab() {
        return Err(Error::Argument(format!("blank {blank} outside vocab {}", p.vocab())));
    }
    for &t in transcript {
        if t >= p.vocab() {
            return Err(Error::Argument(format!("token {t} outside vocab {}", p.vocab())));
        }
        if t == blank {
            return Err(Error::Argument("transcript may not contain the blank token".into()));
        }
    }
    let frames = p.frames();
    let min_frames =
        transcript.len() + transcript.windows(2).filter(|w| w[0] == w[1]).count();
    if frames < min_frames {
        return Err(Error::InfeasibleAlignment(format!(
            "{} frames cannot emit a transcript needing at least {min_frames}",
            frames
        )));
    }

    // Expanded state s: even = blank, odd = transcript token (s-1)/2.
    let n_states = 2 * transcript.len() + 1;
    let state_token = |s: usize| -> usize {
        if s % 2 == 1 {
            transcript[(s - 1) / 2]
        } else {
            blank
        }
    };
    let lp = &p.log_probs;

    let mut delta = vec![f64::NEG_INFINITY; n_states];
    let mut next = vec![f64::NEG_INFINITY; n_states];
    // Backpointers: 0 = stay, 1 = from s-1, 2 = from s-2.
    let mut bp = vec![0u8; frames * n_states];

    delta[0] = lp[[0, blank]];
    if n_states > 1 {
        delta[1] = lp[[0, state_token(1)]];
    }

    for t in 1..frames {
        for s in 0..n_states {
            let mut best = delta[s];
            let mut step = 0u8;
            if s >= 1 && delta[s - 1] > best {
                best = delta[s - 1];
                step = 1;
            }
            let skip_ok = s >= 2 && s % 2 == 1 && state_token(s) != state_token(s - 2);
            if skip_ok && delta[s - 2] > best {
                best = delta[s - 2];
                step = 2;
            }
            next[s] = if best.is_finite() { best + lp[[t, state_token(s)]] } else { best };
            bp[t * n_states + s] = step;
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let mut s = n_states - 1;
    if n_states >= 2 && delta[n_states - 2] > delta[n_states - 1] {
        s = n_states - 2;
    }
    if !delta[s].is_finite() {
        return Err(Error::InfeasibleAlignment(
            "no valid path through the CTC graph".into(),
        ));
    }

    let mut states = vec![0usize; frames];
    states[frames - 1] = s;
    for t in (1..frames).rev() {
        s = match bp[t * n_states + s] {
            1 => s - 1,
            2 => s - 2,
            _ => s,
        };
        states[t - 1] = s;
    }

    let mut segments = Vec::with_capacity(transcript.len());
    let mut t = 0;
    while t < frames {
        let st = states[t];
        if st % 2 == 1 {
            let start = t;
            while t < frames && states[t] == st {
                t += 1;
            }
            segments.push(TokenSegment {
                token: state_token(st),
                start_frame: start,
                end_frame: t,
            });
        } else {
            t += 1;
        }
    }
    debug_assert_eq!(segments.len(), transcript.len());
    Ok(segments)
}

/// Groups consecutive sub-token segments into word spans.
pub fn merge_words(segments: &[TokenSegment], word_lengths: &[usize]) -> Result<Vec<TokenSegment>> {
    let total: usize = word_lengths.iter().sum();
    if total != segments.len() {
        return Err(Error::Argument(format!(
            "word lengths sum to {total} but there are {} segments",
            segments.len()
        )));
    }
    if word_lengths.iter().any(|&n| n == 0) {
        return Err(Error::Argument("word lengths must be positive".into()));
    }
    let mut out = Vec::with_capacity(word_lengths.len());
    let mut idx = 0;
    for (word, &n) in word_lengths.iter().enumerate() {
        let children = &segments[idx..idx + n];
        out.push(TokenSegment {
            token: word,
            start_frame: children.first().unwrap().start_frame,
            end_frame: children.last().unwrap().end_frame,
        });
        idx += n;
    }
    Ok(out)
}

/// One token string per line; line 0 is the blank.
pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab: Vec<String> = text.lines().map(str::to_owned).collect();
    if vocab.is_empty() {
        return Err(Error::Format(format!("{}: empty vocabulary", path.display())));
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One-hot-style posteriorgram: listed token gets log-prob ~0 per frame.
    fn one_hot(frames: &[usize], vocab: usize) -> Posteriorgram {
        let mut logits = Array2::from_elem((frames.len(), vocab), -20.0);
        for (t, &tok) in frames.iter().enumerate() {
            logits[[t, tok]] = 0.0;
        }
        Posteriorgram::from_logits(&logits)
    }

    #[test]
    fn greedy_collapses_repeats_and_blanks() {
        // a=1, b=2, blank=0
        let p = one_hot(&[1, 1, 0, 2, 2], 3);
        assert_eq!(ctc_greedy_decode(&p, 0).unwrap(), vec![1, 2]);
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let p = one_hot(&[0, 0, 0], 3);
        assert_eq!(ctc_greedy_decode(&p, 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn greedy_blank_separates_repeats() {
        let p = one_hot(&[1, 0, 1], 3);
        assert_eq!(ctc_greedy_decode(&p, 0).unwrap(), vec![1, 1]);
    }

    #[test]
    fn greedy_empty_input() {
        let p = Posteriorgram::new(Array2::zeros((0, 3))).unwrap();
        assert_eq!(ctc_greedy_decode(&p, 0).unwrap(), Vec::<usize>::new());
    }

    /// Brute force over all valid CTC state paths for a small instance.
    fn brute_force_align(
        p: &Posteriorgram,
        transcript: &[usize],
        blank: usize,
    ) -> Option<(f64, Vec<usize>)> {
        let n_states = 2 * transcript.len() + 1;
        let state_token = |s: usize| -> usize {
            if s % 2 == 1 {
                transcript[(s - 1) / 2]
            } else {
                blank
            }
        };
        let frames = p.frames();
        let lp = p.log_probs();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut stack: Vec<(usize, Vec<usize>, f64)> = Vec::new();
        for s0 in [0usize, 1] {
            if s0 < n_states {
                stack.push((1, vec![s0], lp[[0, state_token(s0)]]));
            }
        }
        while let Some((t, states, score)) = stack.pop() {
            let s = *states.last().unwrap();
            if t == frames {
                if s == n_states - 1 || s == n_states - 2 {
                    if best.as_ref().map(|(b, _)| score > *b).unwrap_or(true) {
                        best = Some((score, states));
                    }
                }
                continue;
            }
            let mut nexts = vec![s, s + 1];
            if s + 2 < n_states && (s + 2) % 2 == 1 && state_token(s + 2) != state_token(s) {
                nexts.push(s + 2);
            }
            for ns in nexts {
                if ns < n_states {
                    let mut path = states.clone();
                    path.push(ns);
                    stack.push((t + 1, path, score + lp[[t, state_token(ns)]]));
                }
            }
        }
        best
    }

    fn segments_from_states(states: &[usize], transcript: &[usize]) -> Vec<TokenSegment> {
        let mut segs = Vec::new();
        let mut t = 0;
        while t < states.len() {
            let st = states[t];
            if st % 2 == 1 {
                let start = t;
                while t < states.len() && states[t] == st {
                    t += 1;
                }
                segs.push(TokenSegment {
                    token: transcript[(st - 1) / 2],
                    start_frame: start,
                    end_frame: t,
                });
            } else {
                t += 1;
            }
        }
        segs
    }

    #[test]
    fn forced_align_four_frame_instance() {
        // Frames emit a, a, blank, b; transcript [a, b].
        let p = one_hot(&[1, 1, 0, 2], 3);
        let segs = ctc_forced_align(&p, &[1, 2], 0).unwrap();
        assert_eq!(
            segs,
            vec![
                TokenSegment { token: 1, start_frame: 0, end_frame: 2 },
                TokenSegment { token: 2, start_frame: 3, end_frame: 4 },
            ]
        );
        // Cross-check against exhaustive path enumeration.
        let (_, states) = brute_force_align(&p, &[1, 2], 0).unwrap();
        assert_eq!(segments_from_states(&states, &[1, 2]), segs);
    }

    #[test]
    fn forced_align_single_frame() {
        let p = one_hot(&[1], 3);
        let segs = ctc_forced_align(&p, &[1], 0).unwrap();
        assert_eq!(segs, vec![TokenSegment { token: 1, start_frame: 0, end_frame: 1 }]);
    }

    #[test]
    fn forced_align_infeasible_length() {
        let p = one_hot(&[1, 2], 4);
        assert!(matches!(
            ctc_forced_align(&p, &[1, 2, 3], 0),
            Err(Error::InfeasibleAlignment(_))
        ));
    }

    #[test]
    fn forced_align_matches_brute_force_on_soft_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for trial in 0..50 {
            let vocab = 4;
            let len = rng.gen_range(1..=3usize);
            let transcript: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
            let min_frames =
                transcript.len() + transcript.windows(2).filter(|w| w[0] == w[1]).count();
            let frames = rng.gen_range(min_frames..=min_frames + 3);
            let mut logits = Array2::zeros((frames, vocab));
            for v in logits.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let p = Posteriorgram::from_logits(&logits);
            let segs = ctc_forced_align(&p, &transcript, 0).unwrap();
            let (_, states) = brute_force_align(&p, &transcript, 0).unwrap();
            let brute = segments_from_states(&states, &transcript);
            // Scores tie between paths occasionally; compare path scores
            // rather than exact segmentations.
            let score = |segs: &[TokenSegment]| -> f64 {
                // Rebuild a state path from segments to score it.
                let mut states = vec![usize::MAX; frames];
                for (i, seg) in segs.iter().enumerate() {
                    for t in seg.start_frame..seg.end_frame {
                        states[t] = 2 * i + 1;
                    }
                }
                let mut score = 0.0;
                for (t, st) in states.iter().enumerate() {
                    let tok = if *st == usize::MAX { 0 } else { transcript[(st - 1) / 2] };
                    score += p.log_probs()[[t, tok]];
                }
                score
            };
            let (a, b) = (score(&segs), score(&brute));
            assert!((a - b).abs() < 1e-9, "trial {trial}: viterbi {a} vs brute {b}");
            // Re-collapsing the framewise labels must recover the transcript.
            let labels: Vec<usize> = segs.iter().map(|s| s.token).collect();
            assert_eq!(labels, transcript, "trial {trial}");
        }
    }

    #[test]
    fn merge_words_spans_children() {
        let segs = vec![
            TokenSegment { token: 5, start_frame: 0, end_frame: 2 },
            TokenSegment { token: 6, start_frame: 2, end_frame: 3 },
        ];
        let words = merge_words(&segs, &[2]).unwrap();
        assert_eq!(words, vec![TokenSegment { token: 0, start_frame: 0, end_frame: 3 }]);
    }

    #[test]
    fn merge_words_identity_when_singletons() {
        let segs = vec![
            TokenSegment { token: 5, start_frame: 0, end_frame: 2 },
            TokenSegment { token: 6, start_frame: 2, end_frame: 3 },
        ];
        let words = merge_words(&segs, &[1, 1]).unwrap();
        assert_eq!(words.len(), 2);
        assert_eq!(words[0].start_frame, 0);
        assert_eq!(words[0].end_frame, 2);
        assert_eq!(words[1].start_frame, 2);
        assert_eq!(words[1].end_frame, 3);
    }

    #[test]
    fn merge_words_two_groups() {
        let segs: Vec<TokenSegment> = (0..5)
            .map(|i| TokenSegment { token: i + 1, start_frame: 2 * i, end_frame: 2 * i + 2 })
            .collect();
        let words = merge_words(&segs, &[2, 3]).unwrap();
        assert_eq!(words[0].start_frame, 0);
        assert_eq!(words[0].end_frame, 4);
        assert_eq!(words[1].start_frame, 4);
        assert_eq!(words[1].end_frame, 10);
    }

    #[test]
    fn merge_words_length_mismatch() {
        let segs = vec![TokenSegment { token: 1, start_frame: 0, end_frame: 1 }];
        assert!(matches!(merge_words(&segs, &[2]), Err(Error::Argument(_))));
    }
}
