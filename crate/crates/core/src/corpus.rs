//! Corpus preparation: OCR quality filtering, source-mixture upsampling and
//! whole-word-masked pretraining examples.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::subword::{SubwordVocab, TokenId, MASK, NUM_SPECIALS, PAD};
use crate::textproc::{self, RawDocument, Sentence, Source};
use crate::{seed, Error, Result};

pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.40;

/// Share of selected words replaced by `[MASK]`, by a random id, or kept.
pub const MASK_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub doc_id: String,
    pub in_vocab_fraction: f64,
    pub retained: bool,
}

/// Case-folded word list used as the born-digital reference vocabulary.
#[derive(Debug, Clone, Default)]
pub struct ReferenceVocab(HashSet<String>);

impl ReferenceVocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        ReferenceVocab(
            words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// Every word token of the given documents.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a RawDocument>) -> Self {
        let mut set = HashSet::new();
        for doc in docs {
            for s in textproc::split_document(doc) {
                set.extend(s.tokens.iter().filter(|t| t.is_word()).map(|t| t.surface.to_lowercase()));
            }
        }
        ReferenceVocab(set)
    }

    /// One word per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sorted_words(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.0.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

/// Fraction of word tokens (punctuation and numbers excluded) found in the
/// reference vocabulary. Documents without word tokens are rejected.
pub fn quality_filter(doc: &RawDocument, reference: &ReferenceVocab, threshold: f64) -> QualityReport {
    let mut total = 0usize;
    let mut known = 0usize;
    for sentence in textproc::split_document(doc) {
        for tok in sentence.tokens.iter().filter(|t| t.is_word()) {
            total += 1;
            if reference.contains(&tok.surface) {
                known += 1;
            }
        }
    }
    let in_vocab_fraction = if total == 0 {
        0.0
    } else {
        known as f64 / total as f64
    };
    QualityReport {
        doc_id: doc.id.clone(),
        in_vocab_fraction,
        retained: total > 0 && in_vocab_fraction >= threshold - 1e-12,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    pub weights: BTreeMap<Source, f64>,
    pub target_ia_fraction: f64,
}

impl MixturePlan {
    pub fn weight(&self, source: Source) -> f64 {
        self.weights.get(&source).copied().unwrap_or(1.0)
    }

    /// Internet Archive share of the token stream under this plan.
    pub fn expected_ia_fraction(&self, counts: &BTreeMap<Source, u64>) -> f64 {
        let mut ia = 0.0;
        let mut total = 0.0;
        for (&src, &n) in counts {
            let w = self.weight(src) * n as f64;
            total += w;
            if src == Source::InternetArchive {
                ia += w;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            ia / total
        }
    }
}

/// Give every non-Internet-Archive source one uniform weight so that the
/// archive's share of the stream equals `target_ia_fraction`.
pub fn plan_mixture(counts: &BTreeMap<Source, u64>, target_ia_fraction: f64) -> Result<MixturePlan> {
    if !(target_ia_fraction > 0.0 && target_ia_fraction < 1.0) {
        return Err(Error::config(format!(
            "target IA fraction {target_ia_fraction} outside (0, 1)"
        )));
    }
    let ia = counts.get(&Source::InternetArchive).copied().unwrap_or(0);
    let non_ia: u64 = counts
        .iter()
        .filter(|(&s, _)| s != Source::InternetArchive)
        .map(|(_, &n)| n)
        .sum();
    if ia == 0 || non_ia == 0 {
        return Err(Error::config(format!(
            "mixture needs tokens on both sides (ia={ia}, non-ia={non_ia})"
        )));
    }
    let w = ia as f64 * target_ia_fraction / (1.0 - target_ia_fraction) / non_ia as f64;
    let weights = counts
        .keys()
        .map(|&s| (s, if s == Source::InternetArchive { 1.0 } else { w }))
        .collect();
    Ok(MixturePlan {
        weights,
        target_ia_fraction,
    })
}

/// Word tokens per source.
pub fn source_token_counts<'a>(docs: impl IntoIterator<Item = &'a RawDocument>) -> BTreeMap<Source, u64> {
    let mut counts = BTreeMap::new();
    for doc in docs {
        let n: usize = textproc::split_document(doc)
            .iter()
            .map(|s| s.tokens.iter().filter(|t| t.is_word()).count())
            .sum();
        *counts.entry(doc.source).or_insert(0) += n as u64;
    }
    counts
}

/// How many times a document is repeated: `floor(w)` plus one more with
/// probability `w - floor(w)`.
pub fn repetitions<R: Rng>(weight: f64, rng: &mut R) -> usize {
    let base = weight.floor();
    let extra = rng.random::<f64>() < weight - base;
    base as usize + usize::from(extra)
}

/// Expand documents according to the plan. Each document's repetition draw
/// depends only on `(seed, doc.id)`.
pub fn upsample<'a>(docs: &'a [RawDocument], plan: &MixturePlan, seed: u64) -> Vec<&'a RawDocument> {
    let mut out = Vec::new();
    for doc in docs {
        let mut rng = seed::rng(seed, &format!("mixture:{}", doc.id), &[]);
        let n = repetitions(plan.weight(doc.source), &mut rng);
        out.extend(std::iter::repeat_n(doc, n));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input_ids: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
    pub original_ids: Vec<TokenId>,
    pub attention_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub seq_len: usize,
    pub mask_prob: f64,
    /// Mask one word when the independent draws selected none.
    pub force_one: bool,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            seq_len: 256,
            mask_prob: 0.15,
            force_one: true,
            seed: 0,
        }
    }
}

/// What happened to a selected word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Mask,
    Random,
    Keep,
}

fn draw_mode<R: Rng>(rng: &mut R) -> MaskMode {
    let r: f64 = rng.random();
    if r < MASK_SPLIT.0 {
        MaskMode::Mask
    } else if r < MASK_SPLIT.0 + MASK_SPLIT.1 {
        MaskMode::Random
    } else {
        MaskMode::Keep
    }
}

/// Build one whole-word-masked example per sentence (per pass).
///
/// Each sentence draws from its own stream seeded by
/// `(seed, doc_id, sentence index, pass)`, so the output does not depend on
/// how sentences are grouped or sharded.
pub fn make_masked_examples(
    sentences: &[Sentence],
    vocab: &SubwordVocab,
    config: &MaskingConfig,
    pass: u64,
) -> Result<Vec<MaskedExample>> {
    if config.seq_len < 3 {
        return Err(Error::config("sequence length must be at least 3"));
    }
    if !(0.0..=1.0).contains(&config.mask_prob) {
        return Err(Error::config(format!("mask probability {} outside [0, 1]", config.mask_prob)));
    }
    if vocab.len() <= NUM_SPECIALS {
        return Err(Error::config("vocabulary has no non-special entries"));
    }
    Ok(sentences
        .iter()
        .map(|s| mask_sentence(s, vocab, config, pass))
        .collect())
}

fn mask_sentence(s: &Sentence, vocab: &SubwordVocab, config: &MaskingConfig, pass: u64) -> MaskedExample {
    let mut rng = seed::rng(config.seed, &format!("mask:{}", s.doc_id), &[s.index as u64, pass]);
    let enc = vocab.encode_sentence(&s.tokens, true, config.seq_len);
    let words = &enc.word_alignment;
    let mut selected: Vec<bool> = words.iter().map(|_| rng.random::<f64>() < config.mask_prob).collect();
    if config.force_one && !words.is_empty() && !selected.iter().any(|&b| b) {
        let pick = rng.random_range(0..words.len());
        selected[pick] = true;
    }

    let mut input_ids = enc.ids.clone();
    let mut mask_positions = Vec::new();
    let mut original_ids = Vec::new();
    for (&(start, end), _) in words.iter().zip(&selected).filter(|(_, &sel)| sel) {
        let mode = draw_mode(&mut rng);
        for pos in start..end {
            mask_positions.push(pos);
            original_ids.push(enc.ids[pos]);
            input_ids[pos] = match mode {
                MaskMode::Mask => MASK,
                MaskMode::Random => rng.random_range(NUM_SPECIALS as TokenId..vocab.len() as TokenId),
                MaskMode::Keep => enc.ids[pos],
            };
        }
    }
    let attention_length = input_ids.len();
    input_ids.resize(config.seq_len, PAD);
    MaskedExample {
        input_ids,
        mask_positions,
        original_ids,
        attention_length,
    }
}

/// Mask every word of a sentence in turn with `[MASK]` on all of its
/// subtokens. Used to measure memorisation.
pub fn single_word_probes(sentence: &Sentence, vocab: &SubwordVocab, seq_len: usize) -> Vec<MaskedExample> {
    let enc = vocab.encode_sentence(&sentence.tokens, true, seq_len);
    enc.word_alignment
        .iter()
        .map(|&(start, end)| {
            let mut input_ids = enc.ids.clone();
            let positions: Vec<usize> = (start..end).collect();
            let original_ids = positions.iter().map(|&p| enc.ids[p]).collect();
            for &p in &positions {
                input_ids[p] = MASK;
            }
            let attention_length = input_ids.len();
            input_ids.resize(seq_len, PAD);
            MaskedExample {
                input_ids,
                mask_positions: positions,
                original_ids,
                attention_length,
            }
        })
        .collect()
}
