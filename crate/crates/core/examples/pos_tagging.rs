//! Fine-tune a tagging head on sentences where `cum` is ambiguous.

use verba::encoder::{EncoderState, TransformerConfig};
use verba::heads::{evaluate_pos, train_pos, FineTuneConfig};
use verba::subword::{learn_vocab, word_counts, LearnConfig};
use verba::synth;

fn main() {
    let data = synth::homograph_corpus(1, 300);
    let (train, rest) = data.split_at(200);
    let (dev, test) = rest.split_at(50);
    let counts = word_counts(data.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
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
    let (model, log) = train_pos(&enc, &vocab, train, Some(dev), &cfg).unwrap();
    println!("best epoch {:?} of {}", log.best_epoch, log.epochs.len());
    println!("test accuracy {:.3}", evaluate_pos(&model, &vocab, test).unwrap().accuracy);
    let s = &test[0];
    for (w, t) in s.tokens.iter().zip(model.tag(&vocab, &s.tokens).tags) {
        print!("{w}/{t} ");
    }
    println!();
}
