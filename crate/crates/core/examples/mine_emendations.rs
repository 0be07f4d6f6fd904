//! Turn editorial `<...>` insertions into infilling examples.

use verba::datasets::{mine_emendations, training_ngrams};
use verba::textproc::Sentence;

fn main() {
    let training = [Sentence::new("train", 0, "Milites fortiter in acie pugnaverunt et hostes vicerunt.")];
    let ngrams = training_ngrams(training.iter().map(|s| s.tokens.as_slice()));
    let text = "Hannibal cum exercitu <ingenti> per Alpes in Italiam magno labore pervenit. \
                Eo die milites fortiter <in> acie pugnaverunt neque hostes impetum sustinere potuerunt. \
                Caesar <statim> castra movit.";
    let (examples, report) = mine_emendations(&[("demo".to_string(), text.to_string())], &ngrams);
    for ex in &examples {
        println!("{}  -> {}", ex.display(), ex.gold_word);
    }
    println!("{} of {} candidates kept; rejected {:?}", report.emitted, report.candidates, report.rejected);
}
