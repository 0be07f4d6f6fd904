//! WordPiece vocabularies: learning, greedy encoding and decoding.
//!
//! Vocabulary learning starts from single characters (each in a word-initial
//! and a `##` continuation form) and repeatedly merges the adjacent pair with
//! the highest likelihood score `count(ab) / (count(a) * count(b))` until the
//! target size is reached.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const CONTINUATION: &str = "##";

/// Words longer than this (in characters) encode as `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    entries: Vec<String>,
    ids: HashMap<String, TokenId>,
    lowercase: bool,
    max_piece_chars: usize,
}

impl SubwordVocab {
    /// Build a vocabulary from pieces that follow the five specials.
    pub fn from_pieces<I, S>(pieces: I, lowercase: bool) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        entries.extend(pieces.into_iter().map(Into::into));
        Self::from_entries(entries, lowercase)
    }

    fn from_entries(entries: Vec<String>, lowercase: bool) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if entries.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Parse {
                    line: i,
                    message: format!("expected special {special} at id {i}"),
                });
            }
        }
        let mut ids = HashMap::with_capacity(entries.len());
        let mut max_piece_chars = 1;
        for (i, e) in entries.iter().enumerate() {
            let bare = e.strip_prefix(CONTINUATION).unwrap_or(e);
            if bare.is_empty() {
                return Err(Error::Parse {
                    line: i,
                    message: "empty vocabulary entry".into(),
                });
            }
            if ids.insert(e.clone(), i as TokenId).is_some() {
                return Err(Error::Parse {
                    line: i,
                    message: format!("duplicate vocabulary entry {e:?}"),
                });
            }
            max_piece_chars = max_piece_chars.max(bare.chars().count());
        }
        Ok(SubwordVocab {
            entries,
            ids,
            lowercase,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    fn normalize<'w>(&self, word: &'w str) -> std::borrow::Cow<'w, str> {
        if self.lowercase {
            std::borrow::Cow::Owned(word.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(word)
        }
    }

    /// Greedy longest-match-first segmentation. A word with any position
    /// that no piece matches encodes as a single `[UNK]`.
    pub fn encode_word(&self, word: &str) -> Vec<TokenId> {
        let word = self.normalize(word);
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut ids = Vec::new();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut end = chars.len().min(start + self.max_piece_chars);
            let mut found = None;
            while end > start {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[start..end]);
                if let Some(&id) = self.ids.get(piece.as_str()) {
                    if !Self::is_special(id) {
                        found = Some(id);
                        break;
                    }
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    ids.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        ids
    }

    /// Encode a word sequence, optionally wrapped in `[CLS]` ... `[SEP]`.
    /// Words that do not fit in `max_len` are dropped whole, from the first
    /// one that overflows onwards.
    pub fn encode_sentence<S: AsRef<str>>(
        &self,
        words: &[S],
        add_specials: bool,
        max_len: usize,
    ) -> SubwordEncoding {
        let reserved = if add_specials { 2 } else { 0 };
        let budget = max_len.saturating_sub(reserved);
        let mut ids = Vec::new();
        if add_specials {
            ids.push(CLS);
        }
        let mut word_alignment = Vec::with_capacity(words.len());
        let mut used = 0;
        for w in words {
            let pieces = self.encode_word(w.as_ref());
            if used + pieces.len() > budget {
                break;
            }
            let start = ids.len();
            ids.extend_from_slice(&pieces);
            used += pieces.len();
            word_alignment.push((start, ids.len()));
        }
        if add_specials {
            ids.push(SEP);
        }
        SubwordEncoding {
            truncated_words: words.len() - word_alignment.len(),
            ids,
            word_alignment,
            has_specials: add_specials,
        }
    }

    /// Join pieces back into space-separated words. Specials are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            let piece = self.piece(id).ok_or_else(|| {
                Error::input(format!("unknown token id {id} at position {pos}"))
            })?;
            if Self::is_special(id) {
                continue;
            }
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
                Some(rest) => words.push(rest.to_string()),
                None => words.push(piece.to_string()),
            }
        }
        Ok(words.join(" "))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#lowercase={}", self.lowercase)?;
        writeln!(w, "#continuation={CONTINUATION}")?;
        for e in &self.entries {
            writeln!(w, "{e}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::file(path, e))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lowercase = None;
        let mut entries = Vec::new();
        let mut in_header = true;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if in_header {
                if let Some(v) = line.strip_prefix("#lowercase=") {
                    lowercase = Some(v.trim().parse::<bool>().map_err(|_| Error::Parse {
                        line: n + 1,
                        message: format!("bad lowercase flag {v:?}"),
                    })?);
                    continue;
                }
                if let Some(v) = line.strip_prefix("#continuation=") {
                    if v.trim() != CONTINUATION {
                        return Err(Error::Parse {
                            line: n + 1,
                            message: format!("unsupported continuation marker {v:?}"),
                        });
                    }
                    continue;
                }
                in_header = false;
            }
            entries.push(line);
        }
        let lowercase = lowercase.ok_or(Error::Parse {
            line: 1,
            message: "missing #lowercase header".into(),
        })?;
        Self::from_entries(entries, lowercase)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Subtoken ids for a word sequence plus the id range of each word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordEncoding {
    pub ids: Vec<TokenId>,
    /// Half-open `[start, end)` positions in `ids` for every retained word.
    pub word_alignment: Vec<(usize, usize)>,
    pub has_specials: bool,
    /// Trailing words dropped to respect `max_len`.
    pub truncated_words: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub target_size: usize,
    pub min_frequency: u64,
    pub lowercase: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            target_size: 4000,
            min_frequency: 2,
            lowercase: true,
        }
    }
}

/// Count word tokens across sentences.
pub fn word_counts<'a, I>(words: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = BTreeMap::new();
    for w in words {
        *counts.entry(w.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Learn a WordPiece vocabulary from `(word, count)` pairs.
///
/// The alphabet is every character seen at least `min_frequency` times, in
/// both initial and continuation form. Merges are taken greedily by score,
/// ties going to the lexicographically smaller merged string. Learning stops
/// at `target_size` entries or when no pair occurs `min_frequency` times.
pub fn learn_vocab<I, S>(stream: I, config: &LearnConfig) -> Result<SubwordVocab>
where
    I: IntoIterator<Item = (S, u64)>,
    S: AsRef<str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (w, c) in stream {
        let w = w.as_ref();
        let w = if config.lowercase {
            w.to_lowercase()
        } else {
            w.to_string()
        };
        if !w.is_empty() && c > 0 {
            *counts.entry(w).or_insert(0) += c;
        }
    }

    let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
    for (w, &c) in &counts {
        for ch in w.chars() {
            *char_counts.entry(ch).or_insert(0) += c;
        }
    }
    let alphabet: BTreeSet<char> = char_counts
        .iter()
        .filter(|&(_, &c)| c >= config.min_frequency)
        .map(|(&ch, _)| ch)
        .collect();

    let mut units: BTreeSet<String> = BTreeSet::new();
    for &ch in &alphabet {
        units.insert(ch.to_string());
        units.insert(format!("{CONTINUATION}{ch}"));
    }
    if config.target_size < NUM_SPECIALS + units.len() {
        return Err(Error::config(format!(
            "target size {} cannot hold {} specials and {} alphabet units",
            config.target_size,
            NUM_SPECIALS,
            units.len()
        )));
    }

    let mut learner = MergeLearner::new(units.into_iter().collect());
    for (w, &c) in &counts {
        if w.chars().all(|ch| alphabet.contains(&ch)) {
            learner.add_word(w, c);
        }
    }
    learner.run(config.target_size - NUM_SPECIALS, config.min_frequency);
    SubwordVocab::from_pieces(learner.pieces, config.lowercase)
}

type Pair = (u32, u32);

struct MergeLearner {
    /// Vocabulary pieces in insertion order (alphabet, then merges).
    pieces: Vec<String>,
    in_vocab: HashSet<String>,
    symbols: Vec<String>,
    symbol_ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    unit_counts: HashMap<u32, u64>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, HashSet<usize>>,
}

impl MergeLearner {
    fn new(alphabet: Vec<String>) -> Self {
        let mut learner = MergeLearner {
            in_vocab: alphabet.iter().cloned().collect(),
            pieces: alphabet,
            symbols: Vec::new(),
            symbol_ids: HashMap::new(),
            words: Vec::new(),
            unit_counts: HashMap::new(),
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
        };
        for p in learner.pieces.clone() {
            learner.symbol(&p);
        }
        learner
    }

    fn symbol(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.symbol_ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_string());
        self.symbol_ids.insert(s.to_string(), id);
        id
    }

    fn add_word(&mut self, word: &str, count: u64) {
        let syms: Vec<u32> = word
            .chars()
            .enumerate()
            .map(|(i, ch)| {
                let unit = if i == 0 {
                    ch.to_string()
                } else {
                    format!("{CONTINUATION}{ch}")
                };
                self.symbol_ids[&unit]
            })
            .collect();
        let idx = self.words.len();
        self.words.push((syms, count));
        self.account(idx, true);
    }

    /// Add or remove a word's contribution to unit and pair counts.
    fn account(&mut self, idx: usize, add: bool) {
        let (syms, count) = &self.words[idx];
        let count = *count;
        for &s in syms {
            let e = self.unit_counts.entry(s).or_insert(0);
            if add {
                *e += count;
            } else {
                *e -= count;
            }
        }
        for w in syms.windows(2) {
            let pair = (w[0], w[1]);
            if add {
                *self.pair_counts.entry(pair).or_insert(0) += count;
                self.pair_words.entry(pair).or_default().insert(idx);
            } else if let Some(c) = self.pair_counts.get_mut(&pair) {
                *c -= count;
                if *c == 0 {
                    self.pair_counts.remove(&pair);
                }
            }
        }
    }

    fn merged_string(&self, (a, b): Pair) -> String {
        let right = &self.symbols[b as usize];
        let mut s = self.symbols[a as usize].clone();
        s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
        s
    }

    /// Total order on candidate pairs: higher score first, then the smaller
    /// marker-free merged surface, then the smaller pair of unit strings.
    fn compare(&self, x: (Pair, u64), y: (Pair, u64)) -> Ordering {
        let score_num = |(p, c): (Pair, u64)| -> (u128, u128) {
            let denom = self.unit_counts[&p.0] as u128 * self.unit_counts[&p.1] as u128;
            (c as u128, denom)
        };
        let (nx, dx) = score_num(x);
        let (ny, dy) = score_num(y);
        // compare nx/dx against ny/dy without rounding
        (ny * dx).cmp(&(nx * dy)).then_with(|| {
            let mx = self.merged_string(x.0);
            let my = self.merged_string(y.0);
            let bare = |s: &str| s.trim_start_matches(CONTINUATION).to_string();
            bare(&mx)
                .cmp(&bare(&my))
                .then_with(|| self.symbols[x.0 .0 as usize].cmp(&self.symbols[y.0 .0 as usize]))
                .then_with(|| self.symbols[x.0 .1 as usize].cmp(&self.symbols[y.0 .1 as usize]))
        })
    }

    fn best_pair(&self, min_frequency: u64) -> Option<Pair> {
        self.pair_counts
            .iter()
            .filter(|&(_, &c)| c >= min_frequency.max(1))
            .map(|(&p, &c)| (p, c))
            .min_by(|&x, &y| self.compare(x, y))
            .map(|(p, _)| p)
    }

    fn run(&mut self, max_pieces: usize, min_frequency: u64) {
        while self.pieces.len() < max_pieces {
            let Some(pair) = self.best_pair(min_frequency) else {
                break;
            };
            let merged = self.merged_string(pair);
            let new_sym = self.symbol(&merged);
            if self.in_vocab.insert(merged.clone()) {
                self.pieces.push(merged);
            }
            let mut affected: Vec<usize> = self
                .pair_words
                .remove(&pair)
                .unwrap_or_default()
                .into_iter()
                .collect();
            affected.sort_unstable();
            for idx in affected {
                if !self.words[idx].0.windows(2).any(|w| (w[0], w[1]) == pair) {
                    continue;
                }
                self.account(idx, false);
                let syms = &mut self.words[idx].0;
                let mut merged_syms = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                        merged_syms.push(new_sym);
                        i += 2;
                    } else {
                        merged_syms.push(syms[i]);
                        i += 1;
                    }
                }
                *syms = merged_syms;
                self.account(idx, true);
            }
        }
    }
}
