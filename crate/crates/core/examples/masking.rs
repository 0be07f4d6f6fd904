//! Whole-word masked examples for pretraining.

use verba::corpus::{make_masked_examples, MaskingConfig};
use verba::subword::{learn_vocab, word_counts, LearnConfig};
use verba::textproc::Sentence;

fn main() {
    let sentences: Vec<Sentence> = include_str!("../data/sententiae.txt")
        .lines()
        .enumerate()
        .map(|(i, l)| Sentence::new("sententiae", i, l))
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
    let cfg = MaskingConfig {
        seq_len: 32,
        seed: 7,
        ..Default::default()
    };
    for ex in make_masked_examples(&sentences[..4], &vocab, &cfg, 0).unwrap() {
        let shown: Vec<&str> = ex.input_ids.iter().map(|&i| vocab.piece(i).unwrap()).filter(|p| *p != "[PAD]").collect();
        println!("{}", shown.join(" "));
        println!("  masked positions {:?}", ex.mask_positions);
    }
}
