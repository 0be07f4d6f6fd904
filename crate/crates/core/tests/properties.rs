//! Property tests for the invariants each module promises.

use std::collections::BTreeMap;

use proptest::prelude::*;
use verba::datasets::{mine_emendations, mine_sense_examples, training_ngrams, DictionaryEntry, Sense, SenseMiningConfig};
use verba::datasets::{EmendationExample, EmendationFilter};
use verba::encoder::{EncoderState, TransformerConfig};
use verba::infill::{metrics_from_ranks, rank_candidates};
use verba::neighbors::{EmbeddingIndex, RecordKey, RecordMeta};
use verba::subword::{learn_vocab, LearnConfig, SubwordVocab, UNK};
use verba::textproc::{detokenize, tokenize, Sentence};

const WORDS: [&str; 12] = [
    "arma", "virumque", "cano", "Troiae", "qui", "primus", "ab", "oris", "populusque", "bellum", "fortuna", "iuvat",
];

/// Words without enclitics, so that one word is one token.
const PLAIN: [&str; 6] = ["arma", "cano", "qui", "primus", "ab", "oris"];

fn latin_text() -> impl Strategy<Value = String> {
    let word = prop::sample::select(WORDS.to_vec());
    let sep = prop::sample::select(vec![" ", "  ", ", ", " (", ") ", ".", "? ", "\t", "\n"]);
    prop::collection::vec((word, sep), 0..20).prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect())
}

fn meta(i: usize) -> RecordMeta {
    RecordMeta {
        key: RecordKey {
            doc_id: "d".into(),
            sentence_index: i as u32,
            word_index: 0,
        },
        surface: format!("w{i}"),
        citation: String::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detokenize_restores_text(text in latin_text()) {
        prop_assert_eq!(detokenize(&tokenize(&text), &text), text);
    }

    #[test]
    fn spans_cover_token_text(text in latin_text()) {
        let chars: Vec<char> = text.chars().collect();
        for t in tokenize(&text) {
            let span: String = chars[t.span.0..t.span.1].iter().collect();
            prop_assert_eq!(span, t.text());
        }
    }

    #[test]
    fn encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,12}", 1..60), probe in "[a-z]{1,15}") {
        let mut counts = BTreeMap::new();
        for w in &words {
            *counts.entry(w.clone()).or_insert(0u64) += 1;
        }
        let vocab = learn_vocab(counts, &LearnConfig { target_size: 120, min_frequency: 1, lowercase: true }).unwrap();
        for w in words.iter().chain([&probe]) {
            let ids = vocab.encode_word(w);
            if !ids.contains(&UNK) {
                prop_assert_eq!(vocab.decode(&ids).unwrap(), w.clone());
            }
        }
    }

    #[test]
    fn neighbors_match_full_scan(
        pool in prop::collection::vec(prop::collection::vec(-4i8..4, 4), 1..12),
        picks in prop::collection::vec(0usize..12, 1..80),
        q in prop::collection::vec(-4i8..4, 4),
        k in 1usize..20,
    ) {
        // Small integer vectors drawn from a small pool: exact ties are common.
        prop_assume!(q.iter().any(|&x| x != 0));
        let mut index = EmbeddingIndex::new(4, 1);
        for (i, &p) in picks.iter().enumerate() {
            let v: Vec<f64> = pool[p % pool.len()].iter().map(|&x| f64::from(x)).collect();
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            index.push(meta(i), &v).unwrap();
        }
        prop_assume!(!index.is_empty());
        let k = k.min(index.len());
        let q: Vec<f64> = q.iter().map(|&x| f64::from(x)).collect();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut want: Vec<(usize, f64)> = (0..index.len())
            .map(|i| (i, index.record(i).vector.iter().zip(&q).map(|(&a, b)| f64::from(a) * b).sum::<f64>() / qn))
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(k);
        let got = index.query_vector(&q, k, None).unwrap();
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g.index, w.0);
            prop_assert!((g.cosine - w.1).abs() <= 1e-12);
        }
    }

    #[test]
    fn infill_metrics_are_monotone(ranks in prop::collection::vec(1usize..500, 1..100)) {
        let m = metrics_from_ranks(&ranks);
        prop_assert!(m.top1 <= m.top10 && m.top10 <= m.top50 && m.top50 <= 1.0);
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0 && m.top1 <= m.mrr);
    }

    #[test]
    fn sense_datasets_are_balanced(sizes in prop::collection::vec((10usize..40, 10usize..40), 1..4), seed in 0u64..1000) {
        let entries: Vec<DictionaryEntry> = sizes
            .iter()
            .enumerate()
            .map(|(h, &(a, b))| {
                let head = format!("caput{h}");
                let cite = |n: usize, w: &str| (0..n).map(|i| format!("{w} {head} et alia verba numero {i}")).collect();
                DictionaryEntry {
                    headword: head.clone(),
                    senses: vec![
                        Sense { level: "I".into(), citations: cite(a, "bellum") },
                        Sense { level: "II".into(), citations: cite(b, "domus") },
                    ],
                }
            })
            .collect();
        let (examples, _) = mine_sense_examples(&entries, &SenseMiningConfig { seed, ..Default::default() }).unwrap();
        let mut counts: BTreeMap<(String, String, u8), usize> = BTreeMap::new();
        for e in &examples {
            *counts.entry((e.headword.clone(), format!("{:?}", e.split), e.sense)).or_default() += 1;
        }
        for ((h, split, sense), n) in &counts {
            let other = counts.get(&(h.clone(), split.clone(), 1 - sense)).copied().unwrap_or(0);
            prop_assert_eq!(*n, other);
        }
    }

    #[test]
    fn emitted_emendations_never_leak(
        train in prop::collection::vec(prop::collection::vec(prop::sample::select(PLAIN.to_vec()), 5..14), 1..6),
        test in prop::collection::vec(prop::sample::select(PLAIN.to_vec()), 10..16),
        slot in 0usize..10,
    ) {
        let train: Vec<Sentence> = train.iter().enumerate().map(|(i, w)| Sentence::new("t", i, w.join(" "))).collect();
        let ngrams = training_ngrams(train.iter().map(|s| s.tokens.as_slice()));
        let test: Vec<String> = test.into_iter().map(String::from).collect();
        let mut words = test.clone();
        words[slot] = format!("<{}>", words[slot].to_lowercase());
        let text = format!("{}.", words.join(" "));
        let (examples, _) = mine_emendations(&[("x".to_string(), text)], &ngrams);
        for ex in &examples {
            prop_assert!(verba::datasets::validate_emendation(ex, &ngrams).is_ok());
        }

        // The same sentence in training always leaks.
        let plain = Sentence::new("t", 0, format!("{}.", test.join(" ")));
        let own = training_ngrams([plain.tokens.as_slice()]);
        let ex = EmendationExample {
            left_context: test[..slot].to_vec(),
            right_context: test[slot + 1..].iter().cloned().chain([".".to_string()]).collect(),
            gold_word: test[slot].to_lowercase(),
            sentence_len: test.len(),
            source_id: "x".into(),
        };
        prop_assert_eq!(verba::datasets::validate_emendation(&ex, &own), Err(EmendationFilter::Leakage));
    }
}

fn tiny_model() -> (EncoderState, SubwordVocab) {
    let vocab = SubwordVocab::from_pieces(["arma", "virum", "-que", "cano", "troiae", "qui", "primus", "ab", "oris", "##s"], true).unwrap();
    let state = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
    (state, vocab)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ranking_ignores_lexicon_order(lex in prop::collection::vec(prop::sample::select(WORDS[..8].to_vec()), 1..10), seed in any::<u64>()) {
        let (state, vocab) = tiny_model();
        let ex = EmendationExample {
            left_context: vec!["arma".into(), "virum".into()],
            right_context: vec!["troiae".into(), "qui".into()],
            gold_word: "cano".into(),
            sentence_len: 5,
            source_id: "p".into(),
        };
        let lex: Vec<String> = lex.iter().map(|w| w.to_lowercase()).collect();
        let mut shuffled = lex.clone();
        let mut rng = verba::seed::rng(seed, "shuffle", &[]);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        prop_assert_eq!(rank_candidates(&state, &vocab, &ex, &lex).unwrap(), rank_candidates(&state, &vocab, &ex, &shuffled).unwrap());
    }
}
