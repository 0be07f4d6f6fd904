//! Evaluation datasets: treebanks for tagging, bracketed emendations for
//! infilling, and dictionary citations for sense disambiguation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::textproc::{segment_sentences, tokenize, word_count, Token};
use crate::{seed, Error, Result};

// ---------------------------------------------------------------------------
// Treebanks

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub upos: Vec<String>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, upos: Vec<String>) -> Result<Self> {
        if tokens.len() != upos.len() {
            return Err(Error::input(format!(
                "{} tokens but {} tags",
                tokens.len(),
                upos.len()
            )));
        }
        Ok(TaggedSentence { tokens, upos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn read_conllu(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    parse_conllu(BufReader::new(file))
}

/// Extract FORM and UPOS from 10-column treebank text. Multi-word token
/// ranges (`3-4`) and empty nodes (`5.1`) are skipped; their component rows
/// carry the tags.
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<TaggedSentence>> {
    let mut sentences = Vec::new();
    let mut current = TaggedSentence {
        tokens: Vec::new(),
        upos: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::replace(
                    &mut current,
                    TaggedSentence {
                        tokens: Vec::new(),
                        upos: Vec::new(),
                    },
                ));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        if id.parse::<usize>().is_err() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("bad token id {id:?}"),
            });
        }
        current.tokens.push(cols[1].to_string());
        current.upos.push(cols[3].to_string());
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

/// Write sentences as minimal 10-column blocks (FORM and UPOS filled).
pub fn write_conllu<W: Write>(mut w: W, sentences: &[TaggedSentence]) -> Result<()> {
    for (s, sent) in sentences.iter().enumerate() {
        writeln!(w, "# sent_id = {}", s + 1)?;
        for (i, (form, tag)) in sent.tokens.iter().zip(&sent.upos).enumerate() {
            writeln!(w, "{}\t{form}\t_\t{tag}\t_\t_\t_\t_\t_\t_", i + 1)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Emendations

pub const MIN_GOLD_CHARS: usize = 2;
pub const MIN_SENTENCE_WORDS: usize = 10;
pub const MAX_SENTENCE_WORDS: usize = 100;

/// Padding used for n-grams that run past a sentence edge.
const START: &str = "<s>";
const END: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmendationExample {
    pub left_context: Vec<String>,
    pub right_context: Vec<String>,
    pub gold_word: String,
    pub sentence_len: usize,
    pub source_id: String,
}

impl EmendationExample {
    /// Context with the slot shown as `___`.
    pub fn display(&self) -> String {
        let mut parts: Vec<&str> = self.left_context.iter().map(String::as_str).collect();
        parts.push("___");
        parts.extend(self.right_context.iter().map(String::as_str));
        parts.join(" ")
    }
}

/// Why a candidate sentence was not emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmendationFilter {
    /// Nested or unbalanced angle brackets.
    MalformedBrackets,
    /// More than one bracketed span in the sentence.
    MultipleSlots,
    /// Gold shorter than two characters or containing non-letters.
    Characters,
    /// Sentence outside 10 to 100 words.
    Length,
    /// Centered 5-gram seen in the training data.
    Leakage,
}

impl fmt::Display for EmendationFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmendationReport {
    pub sentences: usize,
    pub candidates: usize,
    pub emitted: usize,
    pub rejected: BTreeMap<EmendationFilter, usize>,
}

/// Case-folded word 5-grams of the pretraining text.
#[derive(Debug, Clone, Default)]
pub struct NgramSet(HashSet<String>);

impl NgramSet {
    pub fn contains(&self, gram: &[String; 5]) -> bool {
        self.0.contains(&gram.join(" "))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn ngram_units(tokens: &[Token]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| t.is_word())
        .map(|t| t.surface.to_lowercase())
        .collect()
}

/// 5-grams over case-folded word tokens (enclitics split, punctuation
/// dropped), each sentence padded with two boundary markers on each side.
pub fn training_ngrams<'a>(sentences: impl IntoIterator<Item = &'a [Token]>) -> NgramSet {
    let mut set = HashSet::new();
    for tokens in sentences {
        let mut units = vec![START.to_string(), START.to_string()];
        units.extend(ngram_units(tokens));
        units.push(END.to_string());
        units.push(END.to_string());
        for w in units.windows(5) {
            set.insert(w.join(" "));
        }
    }
    NgramSet(set)
}

/// The 5-gram centered on the slot: two words left, the gold word's first
/// token, and the next two word tokens.
pub fn centered_ngram(left: &[Token], gold: &str, right: &[Token]) -> [String; 5] {
    let l = ngram_units(left);
    let mut after = ngram_units(&tokenize(gold));
    let center = if after.is_empty() {
        gold.to_lowercase()
    } else {
        after.remove(0)
    };
    after.extend(ngram_units(right));
    let left_at = |k: usize| {
        l.len()
            .checked_sub(k)
            .map_or_else(|| START.to_string(), |i| l[i].clone())
    };
    let right_at = |k: usize| after.get(k).cloned().unwrap_or_else(|| END.to_string());
    [left_at(2), left_at(1), center, right_at(0), right_at(1)]
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BracketSpan {
    /// Char offsets of `<` and `>`.
    open: usize,
    close: usize,
    single_word: bool,
}

/// Locate `<...>` spans. `None` when brackets are nested or unbalanced.
fn bracket_spans(chars: &[char]) -> Option<Vec<BracketSpan>> {
    let mut spans = Vec::new();
    let mut open = None;
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '<' if open.is_some() => return None,
            '<' => open = Some(i),
            '>' => {
                let o = open.take()?;
                let inner = &chars[o + 1..i];
                let single_word = !inner.is_empty() && !inner.iter().any(|c| c.is_whitespace());
                spans.push(BracketSpan {
                    open: o,
                    close: i,
                    single_word,
                });
            }
            _ => {}
        }
    }
    open.is_none().then_some(spans)
}

/// Whether a sentence holds a `<word>` span, regardless of how the rest of
/// its brackets balance.
fn has_single_word_span(chars: &[char]) -> bool {
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' {
            let mut j = i + 1;
            while j < chars.len() && !chars[j].is_whitespace() && chars[j] != '<' && chars[j] != '>' {
                j += 1;
            }
            if j > i + 1 && chars.get(j) == Some(&'>') {
                return true;
            }
        }
        i += 1;
    }
    false
}

/// Drop every sentence containing a single bracketed word and strip the
/// brackets from multi-word spans. Returns the kept sentences and the
/// number removed.
pub fn remove_bracketed_sentences(text: &str) -> (Vec<String>, usize) {
    let mut kept = Vec::new();
    let mut removed = 0;
    for sentence in segment_sentences(text) {
        let chars: Vec<char> = sentence.chars().collect();
        if has_single_word_span(&chars) {
            removed += 1;
        } else if chars.contains(&'<') || chars.contains(&'>') {
            kept.push(sentence.replace(['<', '>'], ""));
        } else {
            kept.push(sentence);
        }
    }
    (kept, removed)
}

fn surfaces(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.surface.clone()).collect()
}

/// Mine single-word emendation slots from `(source_id, text)` pairs.
///
/// Example source ids are `"{source_id}:{sentence index}"`, and output is
/// sorted by them.
pub fn mine_emendations(texts: &[(String, String)], training: &NgramSet) -> (Vec<EmendationExample>, EmendationReport) {
    let mut report = EmendationReport::default();
    let mut out = Vec::new();
    let reject = |report: &mut EmendationReport, f: EmendationFilter| {
        *report.rejected.entry(f).or_insert(0) += 1;
    };
    for (source, text) in texts {
        for (si, sentence) in segment_sentences(text).into_iter().enumerate() {
            report.sentences += 1;
            let chars: Vec<char> = sentence.chars().collect();
            if !chars.contains(&'<') && !chars.contains(&'>') {
                continue;
            }
            let Some(spans) = bracket_spans(&chars) else {
                if has_single_word_span(&chars) {
                    report.candidates += 1;
                    log::warn!("{source}:{si}: skipping sentence with unbalanced brackets");
                    reject(&mut report, EmendationFilter::MalformedBrackets);
                }
                continue;
            };
            if !spans.iter().any(|s| s.single_word) {
                continue;
            }
            report.candidates += 1;
            if spans.len() != 1 {
                reject(&mut report, EmendationFilter::MultipleSlots);
                continue;
            }
            let span = &spans[0];
            let gold: String = chars[span.open + 1..span.close].iter().collect();
            if gold.chars().count() < MIN_GOLD_CHARS || !gold.chars().all(char::is_alphabetic) {
                reject(&mut report, EmendationFilter::Characters);
                continue;
            }
            let left_text: String = chars[..span.open].iter().collect();
            let right_text: String = chars[span.close + 1..].iter().collect();
            let left = tokenize(&left_text);
            let right = tokenize(&right_text);
            let sentence_len = word_count(&left) + 1 + word_count(&right);
            if !(MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS).contains(&sentence_len) {
                reject(&mut report, EmendationFilter::Length);
                continue;
            }
            if training.contains(&centered_ngram(&left, &gold, &right)) {
                reject(&mut report, EmendationFilter::Leakage);
                continue;
            }
            out.push(EmendationExample {
                left_context: surfaces(&left),
                right_context: surfaces(&right),
                gold_word: gold,
                sentence_len,
                source_id: format!("{source}:{si}"),
            });
        }
    }
    out.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    report.emitted = out.len();
    (out, report)
}

/// Re-check an example against every filter from its stored fields.
pub fn validate_emendation(ex: &EmendationExample, training: &NgramSet) -> std::result::Result<(), EmendationFilter> {
    if ex.gold_word.chars().count() < MIN_GOLD_CHARS || !ex.gold_word.chars().all(char::is_alphabetic) {
        return Err(EmendationFilter::Characters);
    }
    let left = crate::textproc::parse_token_line(&ex.left_context.join(" "));
    let right = crate::textproc::parse_token_line(&ex.right_context.join(" "));
    if ex.left_context.iter().chain(&ex.right_context).any(|t| t.contains(['<', '>'])) {
        return Err(EmendationFilter::MultipleSlots);
    }
    let n = word_count(&left) + 1 + word_count(&right);
    if n != ex.sentence_len || !(MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS).contains(&n) {
        return Err(EmendationFilter::Length);
    }
    if training.contains(&centered_ngram(&left, &ex.gold_word, &right)) {
        return Err(EmendationFilter::Leakage);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dictionary senses

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sense {
    /// Roman numeral of the major sense: `I`, `II`, ...
    pub level: String,
    pub citations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub headword: String,
    pub senses: Vec<Sense>,
}

/// Value of an upper-case roman numeral, `None` if malformed.
pub fn roman_value(s: &str) -> Option<u32> {
    let digit = |c| match c {
        'I' => Some(1),
        'V' => Some(5),
        'X' => Some(10),
        'L' => Some(50),
        'C' => Some(100),
        _ => None,
    };
    let values: Vec<u32> = s.chars().map(digit).collect::<Option<_>>()?;
    if values.is_empty() {
        return None;
    }
    let mut total = 0;
    for (i, &v) in values.iter().enumerate() {
        if values.get(i + 1).is_some_and(|&next| next > v) {
            total -= v as i64;
        } else {
            total += v as i64;
        }
    }
    (total > 0).then_some(total as u32)
}

impl DictionaryEntry {
    pub fn validate(&self) -> Result<()> {
        if self.headword.trim().is_empty() {
            return Err(Error::input("empty headword"));
        }
        let mut last = 0;
        for s in &self.senses {
            let v = roman_value(&s.level)
                .ok_or_else(|| Error::input(format!("{}: bad sense level {:?}", self.headword, s.level)))?;
            if v <= last {
                return Err(Error::input(format!("{}: sense levels out of order", self.headword)));
            }
            last = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseExample {
    pub headword: String,
    /// 0 for the first major sense, 1 for the second.
    pub sense: u8,
    pub text: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SenseMiningConfig {
    pub min_per_sense: usize,
    pub min_words: usize,
    /// Fractions for dev and test; train receives the rest.
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SenseMiningConfig {
    fn default() -> Self {
        SenseMiningConfig {
            min_per_sense: 10,
            min_words: 6,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SenseMiningReport {
    pub headwords: usize,
    pub kept: usize,
    pub malformed: usize,
    pub single_sense: usize,
    pub too_few_citations: usize,
    pub examples: usize,
}

/// Number of `(train, dev, test)` examples per sense for `n` citations.
pub fn split_sizes(n: usize, config: &SenseMiningConfig) -> (usize, usize, usize) {
    let dev = (n as f64 * config.dev_fraction).floor() as usize;
    let test = (n as f64 * config.test_fraction).floor() as usize;
    (n - dev - test, dev, test)
}

/// Build balanced binary sense datasets from the first two major senses.
///
/// A citation qualifies when it has at least `min_words` words. The larger
/// sense is downsampled so both contribute the same number of examples, and
/// each sense is split with the same sizes, so every split is balanced.
pub fn mine_sense_examples(
    entries: &[DictionaryEntry],
    config: &SenseMiningConfig,
) -> Result<(Vec<SenseExample>, SenseMiningReport)> {
    if config.dev_fraction < 0.0 || config.test_fraction < 0.0 || config.dev_fraction + config.test_fraction >= 1.0 {
        return Err(Error::config("dev and test fractions must be non-negative and sum below 1"));
    }
    let mut report = SenseMiningReport::default();
    let mut out = Vec::new();
    let mut sorted: Vec<&DictionaryEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.headword.cmp(&b.headword));
    for entry in sorted {
        report.headwords += 1;
        if entry.validate().is_err() {
            report.malformed += 1;
            continue;
        }
        if entry.senses.len() < 2 {
            report.single_sense += 1;
            continue;
        }
        let qualifying: Vec<Vec<&String>> = entry.senses[..2]
            .iter()
            .map(|s| {
                s.citations
                    .iter()
                    .filter(|c| word_count(&tokenize(c)) >= config.min_words)
                    .collect()
            })
            .collect();
        let n = qualifying.iter().map(Vec::len).min().unwrap();
        if n < config.min_per_sense {
            report.too_few_citations += 1;
            continue;
        }
        report.kept += 1;
        let (train, dev, _) = split_sizes(n, config);
        for (label, mut cites) in qualifying.into_iter().enumerate() {
            cites.shuffle(&mut seed::rng(
                config.seed,
                &format!("senses:{}", entry.headword),
                &[label as u64],
            ));
            for (i, text) in cites.into_iter().take(n).enumerate() {
                let split = if i < train {
                    Split::Train
                } else if i < train + dev {
                    Split::Dev
                } else {
                    Split::Test
                };
                out.push(SenseExample {
                    headword: entry.headword.clone(),
                    sense: label as u8,
                    text: text.clone(),
                    split,
                });
            }
        }
    }
    report.examples = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONLLU: &str = "# text = cum amicis venit\n\
1\tcum\tcum\tADP\t_\t_\t3\tcase\t_\t_\n\
2\tamicis\tamicus\tNOUN\t_\t_\t3\tobl\t_\t_\n\
\n\
# multi-word token\n\
1-2\tvirumque\t_\t_\t_\t_\t_\t_\t_\t_\n\
1\tvirum\tvir\tNOUN\t_\t_\t0\troot\t_\t_\n\
2\tque\tque\tCCONJ\t_\t_\t1\tcc\t_\t_\n\
2.1\tx\t_\t_\t_\t_\t_\t_\t_\t_\n\
3\tcano\tcano\tVERB\t_\t_\t1\tconj\t_\t_\n";

    #[test]
    fn reads_forms_and_tags() {
        let s = parse_conllu(CONLLU.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].tokens, ["cum", "amicis"]);
        assert_eq!(s[0].upos, ["ADP", "NOUN"]);
        assert_eq!(s[1].tokens, ["virum", "que", "cano"]);
    }

    #[test]
    fn wrong_column_count_names_line() {
        let bad = "1\tcum\tADP\n";
        match parse_conllu(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conllu_round_trip() {
        let s = parse_conllu(CONLLU.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_conllu(&mut buf, &s).unwrap();
        assert_eq!(parse_conllu(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn ter_is_parsed_then_dropped_for_length() {
        let texts = vec![(
            "t".to_string(),
            "populus romanus <ter> cum carthaginiensibus dimicavit.".to_string(),
        )];
        let (ex, report) = mine_emendations(&texts, &NgramSet::default());
        assert!(ex.is_empty());
        assert_eq!(report.candidates, 1);
        assert_eq!(report.rejected[&EmendationFilter::Length], 1);
    }

    #[test]
    fn centered_ngram_pads_at_edges() {
        let g = centered_ngram(&tokenize("arma"), "virum", &[]);
        assert_eq!(g, ["<s>", "arma", "virum", "</s>", "</s>"].map(String::from));
        let g = centered_ngram(&tokenize("Arma"), "virumque", &tokenize("cano"));
        assert_eq!(g, ["<s>", "arma", "virum", "-que", "cano"].map(String::from));
    }

    #[test]
    fn removal_counts_and_strips() {
        let text = "Una <duo> tres. Quattuor quinque. Sex <septem octo> novem.";
        let (kept, removed) = remove_bracketed_sentences(text);
        assert_eq!(removed, 1);
        assert_eq!(kept, ["Quattuor quinque.", "Sex septem octo novem."]);
        let plain = "Gallia est omnis divisa. In partes tres.";
        assert_eq!(remove_bracketed_sentences(plain).0, segment_sentences(plain));
    }

    #[test]
    fn roman_numerals() {
        assert_eq!(roman_value("I"), Some(1));
        assert_eq!(roman_value("IV"), Some(4));
        assert_eq!(roman_value("XII"), Some(12));
        assert_eq!(roman_value("A"), None);
    }

    fn entry(head: &str, counts: &[usize]) -> DictionaryEntry {
        let levels = ["I", "II", "III"];
        DictionaryEntry {
            headword: head.into(),
            senses: counts
                .iter()
                .enumerate()
                .map(|(s, &n)| Sense {
                    level: levels[s].into(),
                    citations: (0..n)
                        .map(|i| format!("{head} verbum sextum septimum octavum sensus {s} numerus {i}"))
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn twelve_and_thirty_give_ten_one_one() {
        let (ex, report) = mine_sense_examples(&[entry("acies", &[12, 30])], &SenseMiningConfig::default()).unwrap();
        assert_eq!(report.kept, 1);
        assert_eq!(ex.len(), 24);
        for sense in 0..2 {
            for (split, n) in [(Split::Train, 10), (Split::Dev, 1), (Split::Test, 1)] {
                let c = ex.iter().filter(|e| e.sense == sense && e.split == split).count();
                assert_eq!(c, n);
            }
        }
    }

    #[test]
    fn single_sense_and_short_citations_are_dropped() {
        let mut short = entry("b", &[20, 20]);
        for c in &mut short.senses[1].citations {
            *c = "tres verba sola".into();
        }
        let (ex, report) =
            mine_sense_examples(&[entry("a", &[40]), short], &SenseMiningConfig::default()).unwrap();
        assert!(ex.is_empty());
        assert_eq!(report.single_sense, 1);
        assert_eq!(report.too_few_citations, 1);
    }
}
