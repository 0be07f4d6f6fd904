//! Rank candidate words for a gap and score the rankings.

use verba::datasets::EmendationExample;
use verba::encoder::{EncoderState, TransformerConfig};
use verba::infill::{candidate_lexicon, evaluate_infilling, format_ranking, rank_all};
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
    // An untrained encoder: the scores are meaningless, the mechanics are not.
    let state = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
    let lexicon = candidate_lexicon(&sentences, 2);
    let words = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let examples = vec![EmendationExample {
        left_context: words("Audentes"),
        right_context: words("iuvat , timidosque repellit ."),
        gold_word: "fortuna".into(),
        sentence_len: 7,
        source_id: "demo:0".into(),
    }];
    let rankings = rank_all(&state, &vocab, &examples, &lexicon).unwrap();
    print!("{}", format_ranking(&examples[0], &rankings[0], 5));
    let golds: Vec<String> = examples.iter().map(|e| e.gold_word.clone()).collect();
    println!("{:?}", evaluate_infilling(&rankings, &golds).unwrap());
}
