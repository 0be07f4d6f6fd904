//! Compare analytic gradients of the masked-LM loss with central differences.

use verba::corpus::{make_masked_examples, MaskingConfig};
use verba::encoder::{gradient_check, EncoderState, TransformerConfig};
use verba::subword::SubwordVocab;
use verba::textproc::Sentence;

fn main() {
    let vocab = SubwordVocab::from_pieces(["arma", "virum", "-que", "cano", "troiae", "qui", "primus", "ab", "oris"], true).unwrap();
    let sentence = Sentence::new("aen", 0, "arma virumque cano Troiae qui primus ab oris");
    let cfg = MaskingConfig {
        seq_len: 16,
        mask_prob: 0.3,
        force_one: true,
        seed: 1,
    };
    let ex = make_masked_examples(&[sentence], &vocab, &cfg, 0).unwrap().remove(0);
    let state = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
    let rep = gradient_check(&state, &ex, 1e-4, 100, 3).unwrap();
    for t in &rep.per_tensor {
        println!("{:<32} {:>3} sampled  max rel {:.2e}", t.name, t.sampled, t.max_relative_error);
    }
    println!("overall max relative error {:.2e}, passes 1e-3: {}", rep.max_relative_error, rep.passes(1e-3));
}
