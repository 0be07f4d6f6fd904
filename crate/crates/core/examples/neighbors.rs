//! Index contextual word vectors and look up the nearest occurrences.

use std::collections::BTreeMap;

use verba::encoder::{EncoderState, TransformerConfig};
use verba::neighbors::{build_index, format_hits, hit_rows, IndexConfig, SentenceStore};
use verba::subword::{learn_vocab, word_counts, LearnConfig};
use verba::textproc::Sentence;

fn main() {
    let sentences: Vec<Sentence> = include_str!("../data/sententiae.txt")
        .lines()
        .enumerate()
        .map(|(i, l)| Sentence::new("s", i, l))
        .collect();
    let counts = word_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));
    let vocab = learn_vocab(
        counts,
        &LearnConfig {
            target_size: 400,
            min_frequency: 1,
            lowercase: true,
        },
    )
    .unwrap();
    let state = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
    let (index, report) = build_index(&state, &vocab, &sentences, &BTreeMap::new(), &IndexConfig::default()).unwrap();
    println!("{} vectors; {report:?}", index.len());

    let query = &sentences[3];
    let words: Vec<&str> = query.tokens.iter().map(|t| t.surface.as_str()).collect();
    let hits = index.query(&state, &vocab, &words, 1, 5, None).unwrap();
    println!("neighbours of {:?} in {:?}", words[1], query.text);
    print!("{}", format_hits(&hit_rows(&index, &hits, Some(&SentenceStore::new(&sentences)))));
}
