//! Split Latin text into sentences and tokens, enclitics included.

use verba::textproc::{detokenize, split_document, tokenize, RawDocument, Source};

fn main() {
    let line = "Senatus populusque Romanus, arma virumque cano.";
    let tokens = tokenize(line);
    for t in &tokens {
        println!("{:<10} {:?}{}", t.surface, t.span, if t.is_enclitic { "  enclitic" } else { "" });
    }
    assert_eq!(detokenize(&tokens, line), line);

    let doc = RawDocument {
        id: "aeneid".into(),
        source: Source::Other,
        text: "Arma virumque cano. Troiae qui primus ab oris Italiam venit? Musa, mihi causas memora.".into(),
    };
    for s in split_document(&doc) {
        println!("{}:{}  {}", s.doc_id, s.index, s.token_line());
    }
}
