//! Sentence segmentation and Latin word tokenization.
//!
//! Tokenization is reversible: every token carries the half-open character
//! span it was cut from, and enclitics (`-que`, `-ne`, `-ve`) are detached
//! from their host word with a leading `-` marker. No case folding happens
//! here; casing is a property of the subword vocabulary.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Marker prefixed to detached enclitics.
pub const ENCLITIC_MARKER: char = '-';

/// Enclitics detached from host words, longest first.
pub const ENCLITICS: [&str; 3] = ["que", "ne", "ve"];

/// Hosts shorter than this are never split.
pub const MIN_HOST_CHARS: usize = 2;

const DEFAULT_EXCEPTIONS: &str = include_str!("../data/enclitic_exceptions.txt");

/// Characters after which a sentence may end.
const SENTENCE_FINAL: [char; 5] = ['.', '?', '!', ';', ':'];

/// Multi-letter praenomen abbreviations that never end a sentence.
const PRAENOMINA: [&str; 7] = ["Ap", "Cn", "Mam", "Ser", "Sex", "Sp", "Ti"];

/// Origin of a document in the pretraining mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Perseus,
    LatinLibrary,
    Patrologia,
    Thomisticum,
    Wikipedia,
    InternetArchive,
    Other,
}

impl Source {
    pub const ALL: [Source; 7] = [
        Source::Perseus,
        Source::LatinLibrary,
        Source::Patrologia,
        Source::Thomisticum,
        Source::Wikipedia,
        Source::InternetArchive,
        Source::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Source::Perseus => "perseus",
            Source::LatinLibrary => "latin_library",
            Source::Patrologia => "patrologia",
            Source::Thomisticum => "thomisticum",
            Source::Wikipedia => "wikipedia",
            Source::InternetArchive => "internet_archive",
            Source::Other => "other",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|src| src.label() == s)
            .ok_or_else(|| Error::input(format!("unknown source label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub source: Source,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    /// Half-open `[start, end)` character offsets into the sentence text.
    pub span: (usize, usize),
    pub is_enclitic: bool,
}

impl Token {
    /// True when the token contains at least one letter.
    pub fn is_word(&self) -> bool {
        self.surface.chars().any(char::is_alphabetic)
    }

    pub fn is_punctuation(&self) -> bool {
        !self.surface.chars().any(char::is_alphanumeric)
    }

    /// Surface as it appears in the source text (marker removed).
    pub fn text(&self) -> &str {
        if self.is_enclitic {
            self.surface.trim_start_matches(ENCLITIC_MARKER)
        } else {
            &self.surface
        }
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.surface
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(doc_id: impl Into<String>, index: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence {
            doc_id: doc_id.into(),
            index,
            text,
            tokens,
        }
    }

    /// Rebuild a sentence from a line written by [`token_line`].
    pub fn from_token_line(doc_id: impl Into<String>, index: usize, line: &str) -> Self {
        Sentence {
            doc_id: doc_id.into(),
            index,
            text: line.to_string(),
            tokens: parse_token_line(line),
        }
    }

    /// Tokens joined by single spaces, enclitics keeping their marker.
    pub fn token_line(&self) -> String {
        token_line(&self.tokens)
    }
}

pub fn token_line(tokens: &[Token]) -> String {
    let surfaces: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
    surfaces.join(" ")
}

/// Inverse of [`token_line`]. Spans index into the line itself.
pub fn parse_token_line(line: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    for surface in line.split(' ') {
        let len = surface.chars().count();
        if len > 0 {
            let is_enclitic = len > 1 && surface.starts_with(ENCLITIC_MARKER) && surface[1..].chars().all(char::is_alphabetic);
            let start = if is_enclitic { pos + 1 } else { pos };
            tokens.push(Token {
                surface: surface.to_string(),
                span: (start, pos + len),
                is_enclitic,
            });
        }
        pos += len + 1;
    }
    tokens
}

/// Number of orthographic words: letter-bearing tokens, enclitics not
/// counted separately, punctuation and numerals excluded.
pub fn word_count(tokens: &[Token]) -> usize {
    tokens.iter().filter(|t| t.is_word() && !t.is_enclitic).count()
}

/// Words whose final `que`/`ne`/`ve` is part of the stem.
#[derive(Debug, Clone, Default)]
pub struct ExceptionList {
    words: HashSet<String>,
    suffixes: Vec<String>,
    version: Option<String>,
}

impl ExceptionList {
    /// Parse the shipped list format: one lowercase word per line, `#`
    /// comments, `*suffix` for suffix patterns, `# version: N` header.
    pub fn parse(text: &str) -> Self {
        let mut list = ExceptionList::default();
        for line in text.lines() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    list.version = Some(v.trim().to_string());
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            match line.strip_prefix('*') {
                Some(suffix) => list.suffixes.push(suffix.to_lowercase()),
                None => {
                    list.words.insert(line.to_lowercase());
                }
            }
        }
        list
    }

    /// The list bundled with the crate.
    pub fn bundled() -> &'static ExceptionList {
        static LIST: OnceLock<ExceptionList> = OnceLock::new();
        LIST.get_or_init(|| ExceptionList::parse(DEFAULT_EXCEPTIONS))
    }

    pub fn version(&self) -> Option<&str> {
        self.version.as_deref()
    }

    /// Membership test on the lowercased form.
    pub fn contains(&self, word: &str) -> bool {
        let lower = word.to_lowercase();
        self.words.contains(&lower) || self.suffixes.iter().any(|s| lower.ends_with(s.as_str()))
    }
}

/// Tokenizer parameterised by its enclitic exception list.
#[derive(Debug, Clone, Copy)]
pub struct Tokenizer<'a> {
    exceptions: &'a ExceptionList,
}

impl Default for Tokenizer<'static> {
    fn default() -> Self {
        Tokenizer {
            exceptions: ExceptionList::bundled(),
        }
    }
}

impl<'a> Tokenizer<'a> {
    pub fn with_exceptions(exceptions: &'a ExceptionList) -> Self {
        Tokenizer { exceptions }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut tokens = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_alphabetic() {
                let start = i;
                while i < chars.len() && chars[i].is_alphabetic() {
                    i += 1;
                }
                self.push_word(&chars[start..i], start, &mut tokens);
            } else if c.is_numeric() {
                let start = i;
                while i < chars.len() && chars[i].is_numeric() {
                    i += 1;
                }
                tokens.push(Token {
                    surface: chars[start..i].iter().collect(),
                    span: (start, i),
                    is_enclitic: false,
                });
            } else {
                tokens.push(Token {
                    surface: c.to_string(),
                    span: (i, i + 1),
                    is_enclitic: false,
                });
                i += 1;
            }
        }
        tokens
    }

    fn push_word(&self, word: &[char], start: usize, out: &mut Vec<Token>) {
        let end = start + word.len();
        let surface: String = word.iter().collect();
        if let Some(host_len) = self.enclitic_split(&surface, word.len()) {
            out.push(Token {
                surface: word[..host_len].iter().collect(),
                span: (start, start + host_len),
                is_enclitic: false,
            });
            let mut enclitic = String::from(ENCLITIC_MARKER);
            enclitic.extend(&word[host_len..]);
            out.push(Token {
                surface: enclitic,
                span: (start + host_len, end),
                is_enclitic: true,
            });
        } else {
            out.push(Token {
                surface,
                span: (start, end),
                is_enclitic: false,
            });
        }
    }

    /// Host length in characters when `word` should be split.
    fn enclitic_split(&self, word: &str, char_len: usize) -> Option<usize> {
        let lower = word.to_lowercase();
        let enclitic = ENCLITICS.iter().find(|e| lower.ends_with(*e))?;
        let host_len = char_len.checked_sub(enclitic.len())?;
        if host_len < MIN_HOST_CHARS || self.exceptions.contains(&lower) {
            return None;
        }
        Some(host_len)
    }
}

/// Tokenize with the bundled exception list.
pub fn tokenize(text: &str) -> Vec<Token> {
    Tokenizer::default().tokenize(text)
}

/// Split running text into sentences.
///
/// A boundary follows `.`, `?`, `!`, `;` or `:` when the next character is
/// whitespace. A period after a single-letter word or a praenomen
/// abbreviation (`M. Tullius`, `Cn. Pompeius`) does not end a sentence.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        let c = chars[i];
        if !SENTENCE_FINAL.contains(&c) {
            continue;
        }
        let at_break = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if !at_break || (c == '.' && is_abbreviation(&chars[..i])) {
            continue;
        }
        push_trimmed(&chars[start..=i], &mut sentences);
        start = i + 1;
    }
    if start < chars.len() {
        push_trimmed(&chars[start..], &mut sentences);
    }
    sentences
}

fn push_trimmed(chars: &[char], out: &mut Vec<String>) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Whether the letters immediately before a period form an abbreviation.
fn is_abbreviation(before: &[char]) -> bool {
    let word_start = before
        .iter()
        .rposition(|c| !c.is_alphabetic())
        .map_or(0, |p| p + 1);
    let word: String = before[word_start..].iter().collect();
    match word.chars().count() {
        0 => false,
        1 => true,
        _ => PRAENOMINA.contains(&word.as_str()),
    }
}

/// Segment and tokenize a document.
pub fn split_document(doc: &RawDocument) -> Vec<Sentence> {
    segment_sentences(&doc.text)
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sentence::new(doc.id.clone(), i, s))
        .collect()
}

/// Rebuild sentence text from tokens and their spans, copying the
/// inter-token gaps from `original`. Equals `original` exactly when every
/// token surface (enclitic marker removed) matches the text under its span.
pub fn detokenize(tokens: &[Token], original: &str) -> String {
    let chars: Vec<char> = original.chars().collect();
    let mut out = String::with_capacity(original.len());
    let mut cursor = 0;
    for tok in tokens {
        let (start, end) = tok.span;
        if start < cursor || end > chars.len() {
            break;
        }
        out.extend(&chars[cursor..start]);
        out.push_str(tok.text());
        cursor = end;
    }
    out.extend(&chars[cursor.min(chars.len())..]);
    out
}
