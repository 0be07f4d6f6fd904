//! Exact cosine nearest neighbours over contextual word vectors.
//!
//! Vectors are unit-normalised and stored contiguously as `f32`; scores are
//! accumulated in `f64`. A query scans every record.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::subword::SubwordVocab;
use crate::textproc::Sentence;
use crate::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"PLNN";
pub const INDEX_VERSION: u32 = 1;

/// Records scored per parallel work unit.
const BLOCK: usize = 4096;

/// Position of a word in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub doc_id: String,
    pub sentence_index: u32,
    pub word_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub key: RecordKey,
    pub surface: String,
    pub citation: String,
}

/// A record with its vector, as returned by [`EmbeddingIndex::record`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord<'a> {
    pub meta: &'a RecordMeta,
    pub vector: &'a [f32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dimension: usize,
    layer: usize,
    meta: Vec<RecordMeta>,
    vectors: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborHit {
    /// Position of the record in the index.
    pub index: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Hidden layer to read; `None` means the final layer.
    pub layer: Option<usize>,
    pub include_punctuation: bool,
    /// Number of parallel build shards. Does not affect the output.
    pub shards: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            layer: None,
            include_punctuation: false,
            shards: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub sentences: usize,
    pub records: usize,
    /// Words dropped because their sentence exceeded the model length.
    pub truncated_words: usize,
}

fn normalized(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| (x / norm) as f32).collect())
}

impl EmbeddingIndex {
    pub fn new(dimension: usize, layer: usize) -> Self {
        EmbeddingIndex {
            dimension,
            layer,
            meta: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn record(&self, i: usize) -> TokenRecord<'_> {
        TokenRecord {
            meta: &self.meta[i],
            vector: &self.vectors[i * self.dimension..(i + 1) * self.dimension],
        }
    }

    /// Append a record; the vector is normalised to unit length.
    pub fn push(&mut self, meta: RecordMeta, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::input(format!(
                "vector of length {} for an index of dimension {}",
                vector.len(),
                self.dimension
            )));
        }
        let v = normalized(vector).ok_or_else(|| Error::input("cannot index a zero or non-finite vector"))?;
        self.meta.push(meta);
        self.vectors.extend(v);
        Ok(())
    }

    fn sort_records(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.meta[a].key.cmp(&self.meta[b].key));
        let d = self.dimension;
        let mut vectors = Vec::with_capacity(self.vectors.len());
        let mut meta = Vec::with_capacity(self.meta.len());
        for i in order {
            vectors.extend_from_slice(&self.vectors[i * d..(i + 1) * d]);
            meta.push(self.meta[i].clone());
        }
        self.vectors = vectors;
        self.meta = meta;
    }

    /// Exact top-`k` records by cosine to `query`, best first, ties going to
    /// the earlier record. A record at `exclude` is skipped.
    pub fn query_vector(&self, query: &[f64], k: usize, exclude: Option<&RecordKey>) -> Result<Vec<NeighborHit>> {
        if query.len() != self.dimension {
            return Err(Error::input(format!(
                "query of length {} for an index of dimension {}",
                query.len(),
                self.dimension
            )));
        }
        if k == 0 || k > self.len() {
            return Err(Error::input(format!("k = {k} outside 1..={}", self.len())));
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::input("query vector has zero or non-finite norm"));
        }
        let q: Vec<f64> = query.iter().map(|x| x / norm).collect();
        let d = self.dimension;
        let mut scores = vec![0.0f64; self.len()];
        scores
            .par_chunks_mut(BLOCK)
            .zip(self.vectors.par_chunks(BLOCK * d))
            .for_each(|(out, block)| {
                for (s, v) in out.iter_mut().zip(block.chunks_exact(d)) {
                    let mut acc = 0.0;
                    for (a, &b) in q.iter().zip(v) {
                        acc += a * b as f64;
                    }
                    *s = acc;
                }
            });
        let mut candidates: Vec<usize> = match exclude {
            Some(key) => (0..self.len()).filter(|&i| &self.meta[i].key != key).collect(),
            None => (0..self.len()).collect(),
        };
        let better = |a: &usize, b: &usize| -> Ordering {
            scores[*b]
                .partial_cmp(&scores[*a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        let k = k.min(candidates.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, better);
            candidates.truncate(k);
        }
        candidates.sort_by(better);
        Ok(candidates
            .into_iter()
            .map(|i| NeighborHit {
                index: i,
                cosine: scores[i],
            })
            .collect())
    }

    /// Embed `tokens` and query with the vector of word `target`.
    pub fn query<S: AsRef<str>>(
        &self,
        state: &EncoderState,
        vocab: &SubwordVocab,
        tokens: &[S],
        target: usize,
        k: usize,
        origin: Option<&RecordKey>,
    ) -> Result<Vec<NeighborHit>> {
        if state.hidden_size() != self.dimension {
            return Err(Error::input(format!(
                "model dimension {} differs from index dimension {}",
                state.hidden_size(),
                self.dimension
            )));
        }
        if target >= tokens.len() {
            return Err(Error::input(format!("target word {target} outside 0..{}", tokens.len())));
        }
        let emb = state.embed_words(vocab, tokens, self.layer)?;
        let word = emb
            .words
            .get(target)
            .ok_or_else(|| Error::input(format!("target word {target} lost to truncation")))?;
        self.query_vector(&word.vector, k, origin)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.vectors.len() * 4 + self.len() * 32);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.layer as u32).to_le_bytes());
        for i in 0..self.len() {
            let r = self.record(i);
            for s in [&r.meta.key.doc_id, &r.meta.surface, &r.meta.citation] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.extend_from_slice(&r.meta.key.sentence_index.to_le_bytes());
            out.extend_from_slice(&r.meta.key.word_index.to_le_bytes());
            for v in r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not an index file (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported index version {version}"),
            });
        }
        let dimension = r.u32()? as usize;
        if dimension == 0 {
            return Err(Error::Format {
                offset: 8,
                message: "zero dimension".into(),
            });
        }
        let count_at = r.pos;
        let count = r.u64()? as usize;
        // Every record needs at least its fixed-size fields.
        if (bytes.len() as u64) < 24 + count as u64 * (20 + 4 * dimension as u64) {
            return Err(Error::Format {
                offset: count_at as u64,
                message: format!("file too short for {count} records"),
            });
        }
        let layer = r.u32()? as usize;
        let mut index = EmbeddingIndex {
            dimension,
            layer,
            meta: Vec::with_capacity(count),
            vectors: Vec::with_capacity(count * dimension),
        };
        for _ in 0..count {
            let doc_id = r.string()?;
            let surface = r.string()?;
            let citation = r.string()?;
            let sentence_index = r.u32()?;
            let word_index = r.u32()?;
            let raw = r.take(4 * dimension)?;
            index
                .vectors
                .extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            index.meta.push(RecordMeta {
                key: RecordKey {
                    doc_id,
                    sentence_index,
                    word_index,
                },
                surface,
                citation,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after the last record"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated index file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "string field is not UTF-8".into(),
        })
    }
}

/// Index every word of `sentences`. Citations are looked up by document id
/// (empty when absent). Records are ordered by document, sentence and word
/// whatever the shard count.
pub fn build_index(
    state: &EncoderState,
    vocab: &SubwordVocab,
    sentences: &[Sentence],
    citations: &BTreeMap<String, String>,
    config: &IndexConfig,
) -> Result<(EmbeddingIndex, BuildReport)> {
    let layer = config.layer.unwrap_or(state.num_layers());
    if layer > state.num_layers() {
        return Err(Error::config(format!("layer {layer} outside 0..={}", state.num_layers())));
    }
    let shards = config.shards.max(1);
    let per_shard = sentences.len().div_ceil(shards).max(1);
    let parts: Vec<(EmbeddingIndex, usize)> = sentences
        .par_chunks(per_shard)
        .map(|chunk| {
            let mut part = EmbeddingIndex::new(state.hidden_size(), layer);
            let mut truncated = 0;
            for s in chunk {
                let emb = state.embed_words(vocab, &s.tokens, layer)?;
                truncated += emb.truncated.len();
                for w in emb.words {
                    let tok = &s.tokens[w.word_index];
                    if tok.is_punctuation() && !config.include_punctuation {
                        continue;
                    }
                    let meta = RecordMeta {
                        key: RecordKey {
                            doc_id: s.doc_id.clone(),
                            sentence_index: s.index as u32,
                            word_index: w.word_index as u32,
                        },
                        surface: tok.surface.clone(),
                        citation: citations.get(&s.doc_id).cloned().unwrap_or_default(),
                    };
                    part.push(meta, &w.vector)?;
                }
            }
            Ok((part, truncated))
        })
        .collect::<Result<_>>()?;
    let mut index = EmbeddingIndex::new(state.hidden_size(), layer);
    let mut report = BuildReport {
        sentences: sentences.len(),
        ..Default::default()
    };
    for (part, truncated) in parts {
        report.truncated_words += truncated;
        index.meta.extend(part.meta);
        index.vectors.extend(part.vectors);
    }
    index.sort_records();
    report.records = index.len();
    Ok((index, report))
}

/// Sentence texts by `(doc_id, sentence_index)`, for result snippets.
#[derive(Debug, Clone, Default)]
pub struct SentenceStore(HashMap<(String, u32), Sentence>);

impl SentenceStore {
    pub fn new(sentences: &[Sentence]) -> Self {
        SentenceStore(
            sentences
                .iter()
                .map(|s| ((s.doc_id.clone(), s.index as u32), s.clone()))
                .collect(),
        )
    }

    /// Sentence text with the word at `key` wrapped in `*...*`.
    pub fn snippet(&self, key: &RecordKey) -> Option<String> {
        let s = self.0.get(&(key.doc_id.clone(), key.sentence_index))?;
        let words: Vec<String> = s
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == key.word_index as usize {
                    format!("*{}*", t.surface)
                } else {
                    t.surface.clone()
                }
            })
            .collect();
        Some(words.join(" "))
    }
}

/// One hit with its metadata, as written to JSON-lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRow {
    pub rank: usize,
    pub cosine: f64,
    pub doc_id: String,
    pub sentence_index: u32,
    pub word_index: u32,
    pub surface: String,
    pub citation: String,
    pub sentence: Option<String>,
}

pub fn hit_rows(index: &EmbeddingIndex, hits: &[NeighborHit], store: Option<&SentenceStore>) -> Vec<HitRow> {
    hits.iter()
        .enumerate()
        .map(|(i, h)| {
            let m = index.record(h.index).meta;
            HitRow {
                rank: i + 1,
                cosine: h.cosine,
                doc_id: m.key.doc_id.clone(),
                sentence_index: m.key.sentence_index,
                word_index: m.key.word_index,
                surface: m.surface.clone(),
                citation: m.citation.clone(),
                sentence: store.and_then(|s| s.snippet(&m.key)),
            }
        })
        .collect()
}

/// Cosine, snippet and citation columns.
pub fn format_hits(rows: &[HitRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}  {:<60}  citation", "cosine", "text");
    for r in rows {
        let text = r.sentence.clone().unwrap_or_else(|| r.surface.clone());
        let cite = if r.citation.is_empty() {
            format!("{}:{}", r.doc_id, r.sentence_index)
        } else {
            r.citation.clone()
        };
        let _ = writeln!(out, "{:>6.3}  {:<60}  {}", r.cosine, text, cite);
    }
    out
}
