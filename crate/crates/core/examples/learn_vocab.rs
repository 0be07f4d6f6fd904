//! Learn a WordPiece vocabulary and encode a few words with it.

use verba::subword::{learn_vocab, word_counts, LearnConfig};
use verba::synth;
use verba::textproc::Sentence;

fn main() {
    let mut texts = synth::latin_like_sentences(5, 4000);
    texts.extend(include_str!("../data/sententiae.txt").lines().map(String::from));
    let sentences: Vec<Sentence> = texts.iter().enumerate().map(|(i, t)| Sentence::new("demo", i, t.as_str())).collect();
    let counts = word_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));
    let vocab = learn_vocab(
        counts,
        &LearnConfig {
            target_size: 2000,
            ..Default::default()
        },
    )
    .expect("vocabulary");
    println!("{} entries", vocab.len());
    for w in ["fortuna", "audentes", "milites", "populus", "xyzzy"] {
        let pieces: Vec<&str> = vocab.encode_word(w).iter().map(|&i| vocab.piece(i).unwrap()).collect();
        println!("{w:<10} {pieces:?}");
    }
}
