//! Mine balanced sense examples from dictionary citations and train one
//! classifier per headword.

use verba::datasets::{mine_sense_examples, SenseMiningConfig, Split};
use verba::encoder::{EncoderState, TransformerConfig};
use verba::heads::{evaluate_wsd, train_wsd_all, FineTuneConfig};
use verba::subword::{learn_vocab, word_counts, LearnConfig};
use verba::synth;
use verba::textproc::Sentence;

fn main() {
    let entries = synth::sense_dictionary(3, &["acies", "fides"], 60, true);
    let (examples, report) = mine_sense_examples(&entries, &SenseMiningConfig::default()).unwrap();
    println!("{report:?}");
    let texts: Vec<Sentence> = examples.iter().enumerate().map(|(i, e)| Sentence::new("c", i, e.text.as_str())).collect();
    let counts = word_counts(texts.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));
    let vocab = learn_vocab(
        counts,
        &LearnConfig {
            target_size: 200,
            min_frequency: 1,
            lowercase: true,
        },
    )
    .unwrap();
    let enc = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
    let cfg = FineTuneConfig {
        learning_rate: 1e-3,
        max_epochs: 15,
        ..Default::default()
    };
    let models = train_wsd_all(&enc, &vocab, &examples, &cfg)
        .unwrap()
        .into_iter()
        .map(|(h, (m, _))| (h, m))
        .collect();
    let test: Vec<_> = examples.into_iter().filter(|e| e.split == Split::Test).collect();
    let eval = evaluate_wsd(&models, &vocab, &test).unwrap();
    for (h, s) in &eval.per_headword {
        println!("{h:<8} {s:?}");
    }
    println!("overall {:.3} on {}", eval.accuracy, eval.total);
}
