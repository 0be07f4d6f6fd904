//! Ranking candidate words for an emendation slot.
//!
//! A candidate of `k` subtokens is scored by filling the slot with `k`
//! `[MASK]` tokens and averaging the log-probabilities of its pieces at
//! those positions. For single-piece words this is the log of the masked-LM
//! probability; for longer words it is a length-normalised
//! pseudo-log-likelihood.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::EmendationExample;
use crate::encoder::EncoderState;
use crate::subword::{SubwordVocab, TokenId, CLS, MASK, SEP};
use crate::textproc::Sentence;
use crate::{Error, Result};

pub const DEFAULT_MIN_FREQUENCY: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRanking {
    pub source_id: String,
    /// `(word, mean log-probability)`, best first; ties in lexicographic order.
    pub entries: Vec<(String, f64)>,
    /// Context words were dropped to fit the model.
    #[serde(default)]
    pub truncated: bool,
}

impl CandidateRanking {
    /// 1-based rank of `word`.
    pub fn rank_of(&self, word: &str) -> Option<usize> {
        self.entries.iter().position(|(w, _)| w == word).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfillMetrics {
    pub n_examples: usize,
    pub top1: f64,
    pub top10: f64,
    pub top50: f64,
    pub mrr: f64,
}

/// Word types seen at least `min_frequency` times, case-folded.
pub fn candidate_lexicon(sentences: &[Sentence], min_frequency: u64) -> Vec<String> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in sentences {
        for t in &s.tokens {
            if t.is_word() && !t.is_enclitic && t.surface.chars().all(char::is_alphabetic) {
                *counts.entry(t.surface.to_lowercase()).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_frequency)
        .map(|(w, _)| w)
        .collect()
}

/// Subtoken ids of the context words, trimmed symmetrically so that the
/// slot of `k` pieces plus `[CLS]` and `[SEP]` fits in `max_len`.
fn fit_context(
    vocab: &SubwordVocab,
    left: &[String],
    right: &[String],
    k: usize,
    max_len: usize,
) -> Result<(Vec<Vec<TokenId>>, Vec<Vec<TokenId>>, bool)> {
    if k + 2 > max_len {
        return Err(Error::input(format!("slot of {k} pieces does not fit in {max_len} positions")));
    }
    let mut l: Vec<Vec<TokenId>> = left.iter().map(|w| vocab.encode_word(w)).collect();
    let mut r: Vec<Vec<TokenId>> = right.iter().map(|w| vocab.encode_word(w)).collect();
    let budget = max_len - k - 2;
    let mut ln: usize = l.iter().map(Vec::len).sum();
    let mut rn: usize = r.iter().map(Vec::len).sum();
    let mut truncated = false;
    while ln + rn > budget {
        truncated = true;
        if ln >= rn {
            ln -= l.remove(0).len();
        } else {
            rn -= r.pop().unwrap().len();
        }
    }
    Ok((l, r, truncated))
}

/// Score every candidate in `lexicon` for the slot of `example`.
///
/// Duplicate candidates are merged, so the ranking does not depend on the
/// order of the lexicon.
pub fn rank_candidates(
    state: &EncoderState,
    vocab: &SubwordVocab,
    example: &EmendationExample,
    lexicon: &[String],
) -> Result<CandidateRanking> {
    let words: BTreeSet<&str> = lexicon.iter().map(String::as_str).collect();
    if words.is_empty() {
        return Err(Error::input("empty candidate lexicon"));
    }
    let mut by_length: BTreeMap<usize, Vec<(&str, Vec<TokenId>)>> = BTreeMap::new();
    for w in words {
        let pieces = vocab.encode_word(w);
        by_length.entry(pieces.len()).or_default().push((w, pieces));
    }
    let max_len = state.config().max_positions;
    let mut entries = Vec::new();
    let mut truncated = false;
    for (k, group) in by_length {
        let (left, right, cut) = fit_context(vocab, &example.left_context, &example.right_context, k, max_len)?;
        truncated |= cut;
        let mut ids = vec![CLS];
        ids.extend(left.iter().flatten());
        let slot = ids.len();
        ids.extend(std::iter::repeat_n(MASK, k));
        ids.extend(right.iter().flatten());
        ids.push(SEP);
        let hidden = state.forward(&ids, ids.len(), None)?;
        let top = hidden.last().unwrap();
        let rows: Array2<f64> = top.slice(ndarray::s![slot..slot + k, ..]).to_owned();
        let logp = state.mlm_log_probabilities(&rows);
        for (w, pieces) in group {
            let score = pieces.iter().enumerate().map(|(j, &p)| logp[[j, p as usize]]).sum::<f64>() / k as f64;
            entries.push((w.to_string(), score));
        }
    }
    if truncated {
        log::warn!("{}: context truncated around the slot", example.source_id);
    }
    if let Some((w, s)) = entries.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::input(format!("non-finite score {s} for candidate {w}")));
    }
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    Ok(CandidateRanking {
        source_id: example.source_id.clone(),
        entries,
        truncated,
    })
}

/// Rank every example in parallel; output order follows input order.
pub fn rank_all(
    state: &EncoderState,
    vocab: &SubwordVocab,
    examples: &[EmendationExample],
    lexicon: &[String],
) -> Result<Vec<CandidateRanking>> {
    examples
        .par_iter()
        .map(|ex| rank_candidates(state, vocab, ex, lexicon))
        .collect()
}

/// Top-k rates and mean reciprocal rank from 1-based ranks.
pub fn metrics_from_ranks(ranks: &[usize]) -> InfillMetrics {
    let n = ranks.len();
    let rate = |k: usize| {
        if n == 0 {
            0.0
        } else {
            ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64
        }
    };
    InfillMetrics {
        n_examples: n,
        top1: rate(1),
        top10: rate(10),
        top50: rate(50),
        mrr: if n == 0 {
            0.0
        } else {
            ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64
        },
    }
}

pub fn evaluate_infilling(rankings: &[CandidateRanking], golds: &[String]) -> Result<InfillMetrics> {
    if rankings.len() != golds.len() {
        return Err(Error::input(format!(
            "{} rankings but {} gold words",
            rankings.len(),
            golds.len()
        )));
    }
    let ranks = rankings
        .iter()
        .zip(golds)
        .map(|(r, g)| {
            r.rank_of(&g.to_lowercase())
                .or_else(|| r.rank_of(g))
                .ok_or_else(|| Error::input(format!("{}: gold word {g:?} not among candidates", r.source_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_from_ranks(&ranks))
}

/// Top candidates with their probabilities, one per line.
pub fn format_ranking(example: &EmendationExample, ranking: &CandidateRanking, top: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", example.display());
    for (i, (w, s)) in ranking.entries.iter().take(top).enumerate() {
        let _ = writeln!(out, "{:>3}  {:<20} {:.3}", i + 1, w, s.exp());
    }
    out
}
