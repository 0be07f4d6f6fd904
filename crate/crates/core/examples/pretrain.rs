//! Memorise a handful of sentences with the masked-LM objective.

use verba::corpus::{make_masked_examples, MaskedExample, MaskingConfig};
use verba::encoder::{train_mlm, EncoderState, TrainConfig, TransformerConfig};
use verba::subword::{learn_vocab, word_counts, LearnConfig};
use verba::textproc::Sentence;

fn main() {
    let sentences: Vec<Sentence> = include_str!("../data/sententiae.txt")
        .lines()
        .take(10)
        .enumerate()
        .map(|(i, l)| Sentence::new("s", i, l))
        .collect();
    let counts = word_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));
    let vocab = learn_vocab(
        counts,
        &LearnConfig {
            target_size: 200,
            min_frequency: 1,
            lowercase: true,
        },
    )
    .unwrap();
    let cfg = MaskingConfig {
        seq_len: 32,
        ..Default::default()
    };
    let examples: Vec<MaskedExample> = (0..10)
        .flat_map(|pass| make_masked_examples(&sentences, &vocab, &cfg, pass).unwrap())
        .collect();
    let mut state = EncoderState::new(TransformerConfig::tiny(vocab.len()).without_dropout()).unwrap();
    println!("before: {:?}", state.evaluate_mlm(&examples).unwrap());
    let losses = train_mlm(
        &mut state,
        &examples,
        &TrainConfig {
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
            ..Default::default()
        },
    )
    .unwrap();
    for (step, loss) in losses.iter().enumerate().step_by(50) {
        println!("step {step:>4}  loss {loss:.3}");
    }
    println!("after:  {:?}", state.evaluate_mlm(&examples).unwrap());
}
