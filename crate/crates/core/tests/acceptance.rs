//! Acceptance suite. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the harness capture) and then asserts.
//!
//! Tests share one lock so that the timing checks measure a criterion on
//! its own, not eleven criteria competing for the same cores.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::Rng;
use verba::corpus::{make_masked_examples, single_word_probes, MaskedExample, MaskingConfig};
use verba::datasets::{
    self, mine_emendations, mine_sense_examples, training_ngrams, EmendationExample, EmendationFilter, NgramSet,
    SenseMiningConfig, Split, TaggedSentence,
};
use verba::encoder::{compare_gradients, gradient_check, train_mlm, EncoderState, MlmEval, TrainConfig, TransformerConfig};
use verba::heads::{self, FineTuneConfig};
use verba::infill::{self, metrics_from_ranks};
use verba::neighbors::{EmbeddingIndex, RecordKey, RecordMeta};
use verba::subword::{self, learn_vocab, LearnConfig, SubwordVocab, MASK, UNK};
use verba::textproc::{detokenize, tokenize, ExceptionList, Sentence, ENCLITICS, ENCLITIC_MARKER, MIN_HOST_CHARS};
use verba::{seed, synth};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, limit: Duration) -> bool {
    let pass = pass && elapsed < limit;
    let _ = writeln!(
        std::io::stdout(),
        "criterion {n:>2} {name}: {} ({detail}; {:.1} s of {} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn sententiae() -> Vec<Sentence> {
    include_str!("../data/sententiae.txt")
        .lines()
        .enumerate()
        .map(|(i, l)| Sentence::new("sententiae", i, l))
        .collect()
}

fn word_counts(sentences: &[Sentence]) -> BTreeMap<String, u64> {
    subword::word_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())))
}

fn tagged_counts(sentences: &[TaggedSentence]) -> BTreeMap<String, u64> {
    subword::word_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_tokenizer() {
    let _g = serial();
    let t = Instant::now();
    let mut problems = Vec::new();

    let surfaces: Vec<String> = tokenize("arma virumque cano").into_iter().map(|t| t.surface).collect();
    if surfaces != ["arma", "virum", "-que", "cano"] {
        problems.push(format!("arma virumque cano -> {surfaces:?}"));
    }

    let exceptions = ExceptionList::bundled();
    let texts = synth::latin_like_sentences(11, 10_000);
    let mut splits = 0;
    for text in &texts {
        let tokens = tokenize(text);
        if detokenize(&tokens, text) != *text {
            problems.push(format!("detokenize changed {text:?}"));
        }
        let chars: Vec<char> = text.chars().collect();
        for (i, tok) in tokens.iter().enumerate() {
            let span: String = chars[tok.span.0..tok.span.1].iter().collect();
            if span != tok.text() {
                problems.push(format!("span of {:?} reads {span:?}", tok.surface));
            }
            if tok.is_enclitic {
                splits += 1;
                let host = i.checked_sub(1).map(|h| &tokens[h]);
                let ok = tok.surface.starts_with(ENCLITIC_MARKER)
                    && ENCLITICS.contains(&tok.text())
                    && host.is_some_and(|h| h.span.1 == tok.span.0 && h.surface.chars().count() >= MIN_HOST_CHARS);
                if !ok {
                    problems.push(format!("bad enclitic token {:?} in {text:?}", tok.surface));
                }
            }
        }
        // Oracle: every alphabetic word ending in an enclitic, with a long
        // enough host and not listed as an exception, must be split.
        for word in text.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
            let lower = word.to_lowercase();
            let Some(enc) = ENCLITICS.iter().find(|e| lower.ends_with(*e)) else { continue };
            let host_len = lower.chars().count() - enc.len();
            let expect_split = host_len >= MIN_HOST_CHARS && !exceptions.contains(&lower);
            let host = &word[..word.len() - enc.len()];
            let split = tokens.windows(2).any(|w| w[0].surface == host && w[1].is_enclitic);
            let whole = tokens.iter().any(|t| t.surface == word);
            if expect_split && !split || !expect_split && !whole {
                problems.push(format!("{word:?} split={split} expected {expect_split}"));
            }
        }
    }
    let pass = problems.is_empty() && splits > 1000;
    let detail = format!("{} sentences, {splits} enclitics split, {} problems", texts.len(), problems.len());
    let pass = report(1, "tokenizer", pass, &detail, t.elapsed(), Duration::from_secs(5));
    assert!(pass, "{:?}", &problems[..problems.len().min(5)]);
}

fn megabyte_corpus() -> Vec<Sentence> {
    let mut texts = synth::latin_like_sentences(5, 12_000);
    texts.extend(include_str!("../data/sententiae.txt").lines().map(String::from));
    let mut bytes = 0;
    let mut out = Vec::new();
    for (i, t) in texts.iter().enumerate() {
        bytes += t.len() + 1;
        out.push(Sentence::new("mb", i, t.as_str()));
    }
    assert!(bytes >= 1_000_000, "corpus of {bytes} bytes");
    out
}

#[test]
fn criterion_02_subword() {
    let _g = serial();
    let t = Instant::now();
    let corpus = megabyte_corpus();
    let cfg = LearnConfig {
        target_size: 4000,
        min_frequency: 2,
        lowercase: true,
    };
    let learn = || {
        let v = learn_vocab(word_counts(&corpus), &cfg).unwrap();
        let mut bytes = Vec::new();
        v.write_to(&mut bytes).unwrap();
        (v, bytes)
    };
    let (vocab, first) = learn();
    let (_, second) = learn();
    let identical = first == second;

    let mut words = 0;
    let mut failures = 0;
    let mut unk = 0;
    for s in &corpus {
        for tok in &s.tokens {
            let ids = vocab.encode_word(&tok.surface);
            if ids.contains(&UNK) {
                unk += 1;
                continue;
            }
            words += 1;
            if vocab.decode(&ids).unwrap() != tok.surface.to_lowercase() {
                failures += 1;
            }
        }
    }
    let audentes = vocab.encode_word("audentes");
    let pieces: Vec<&str> = audentes.iter().map(|&i| vocab.piece(i).unwrap()).collect();
    let joined: String = pieces.iter().map(|p| p.trim_start_matches("##")).collect();
    let audentes_ok = pieces.len() == 2 && joined == "audentes";

    let pass = identical && failures == 0 && words > 100_000 && vocab.len() == 4000 && audentes_ok;
    let detail = format!(
        "vocab {} entries, identical runs {identical}, round-trip {}/{words} ({unk} [UNK] skipped), audentes -> {pieces:?}",
        vocab.len(),
        words - failures
    );
    let pass = report(2, "subword", pass, &detail, t.elapsed(), Duration::from_secs(60));
    assert!(pass);
}

#[test]
fn criterion_03_masking() {
    let _g = serial();
    let t = Instant::now();
    let sentences: Vec<Sentence> = synth::latin_like_sentences(9, 10_000)
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sentence::new(format!("d{}", i / 100), i % 100, s))
        .collect();
    let vocab = learn_vocab(
        word_counts(&sentences),
        &LearnConfig {
            target_size: 2000,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = MaskingConfig {
        seq_len: 128,
        seed: 21,
        ..Default::default()
    };
    let examples = make_masked_examples(&sentences, &vocab, &cfg, 0).unwrap();
    let unforced = MaskingConfig { force_one: false, ..cfg };
    let plain: usize = make_masked_examples(&sentences, &vocab, &unforced, 0)
        .unwrap()
        .iter()
        .zip(&sentences)
        .map(|(ex, s)| {
            let enc = vocab.encode_sentence(&s.tokens, true, cfg.seq_len);
            enc.word_alignment.iter().filter(|(a, _)| ex.mask_positions.contains(a)).count()
        })
        .sum();

    let (mut total_words, mut selected, mut violations) = (0usize, 0usize, 0usize);
    let mut modes = [0usize; 3];
    for (s, ex) in sentences.iter().zip(&examples) {
        let enc = vocab.encode_sentence(&s.tokens, true, cfg.seq_len);
        let masked: HashSet<usize> = ex.mask_positions.iter().copied().collect();
        for &(start, end) in &enc.word_alignment {
            total_words += 1;
            let hit = (start..end).filter(|p| masked.contains(p)).count();
            if hit == 0 {
                continue;
            }
            if hit != end - start {
                violations += 1;
                continue;
            }
            selected += 1;
            let input = &ex.input_ids[start..end];
            if input.iter().all(|&i| i == MASK) {
                modes[0] += 1;
            } else if input == &enc.ids[start..end] {
                modes[2] += 1;
            } else {
                modes[1] += 1;
            }
        }
    }
    let rate = selected as f64 / total_words as f64;
    let split: Vec<f64> = modes.iter().map(|&m| m as f64 / selected as f64).collect();
    let pass = examples.len() >= 10_000
        && (rate - 0.15).abs() <= 0.01
        && (split[0] - 0.8).abs() <= 0.02
        && (split[1] - 0.1).abs() <= 0.02
        && (split[2] - 0.1).abs() <= 0.02
        && violations == 0;
    let detail = format!(
        "{} examples, word rate {rate:.4} ({:.4} without forcing), split {:.3}/{:.3}/{:.3}, {violations} whole-word violations",
        examples.len(),
        plain as f64 / total_words as f64,
        split[0],
        split[1],
        split[2]
    );
    let pass = report(3, "masking statistics", pass, &detail, t.elapsed(), Duration::from_secs(60));
    assert!(pass);
}

#[test]
fn criterion_04_gradient_check() {
    let _g = serial();
    let t = Instant::now();
    let sentences = sententiae();
    let vocab = learn_vocab(
        word_counts(&sentences),
        &LearnConfig {
            target_size: 300,
            min_frequency: 1,
            lowercase: true,
        },
    )
    .unwrap();
    let cfg = MaskingConfig {
        seq_len: 32,
        mask_prob: 0.3,
        force_one: true,
        seed: 4,
    };
    let ex = make_masked_examples(&sentences[..1], &vocab, &cfg, 0).unwrap().remove(0);
    let model_cfg = TransformerConfig::tiny(vocab.len());
    assert_eq!((model_cfg.num_layers, model_cfg.hidden_size, model_cfg.num_heads), (2, 32, 2));
    let state = EncoderState::new(model_cfg).unwrap();
    let rep = gradient_check(&state, &ex, 1e-4, 200, 7).unwrap();
    let every_tensor = rep.per_tensor.iter().all(|c| c.sampled > 0);

    let (_, mut grads) = verba::encoder::analytic_gradients(&state, &ex).unwrap();
    grads.iter_mut().for_each(|g| *g = -*g);
    let flipped = compare_gradients(&state, &ex, &grads, 1e-4, 200, 7).unwrap();

    let pass = rep.passes(1e-3) && rep.sampled >= 200 && every_tensor && !flipped.passes(1e-3);
    let detail = format!(
        "max relative error {:.2e} over {} parameters in {} tensors; sign-flipped control {:.2e}",
        rep.max_relative_error,
        rep.sampled,
        rep.per_tensor.len(),
        flipped.max_relative_error
    );
    let pass = report(4, "gradient check", pass, &detail, t.elapsed(), Duration::from_secs(300));
    assert!(pass);
}

struct Overfit {
    state: EncoderState,
    vocab: SubwordVocab,
    sentences: Vec<Sentence>,
    initial: MlmEval,
    last: MlmEval,
    elapsed: Duration,
}

/// Train the tiny encoder without dropout on the 50 sentences until it
/// memorises them. With `probes`, one example per word masked alone is added
/// to the random masking passes, which is the shape of an infilling slot.
fn overfit(vocab_size: usize, probes: bool, steps: usize) -> Overfit {
    let t = Instant::now();
    let sentences = sententiae();
    let vocab = learn_vocab(
        word_counts(&sentences),
        &LearnConfig {
            target_size: vocab_size,
            min_frequency: 1,
            lowercase: true,
        },
    )
    .unwrap();
    let cfg = MaskingConfig {
        seq_len: 64,
        mask_prob: 0.15,
        force_one: true,
        seed: 1,
    };
    let mut examples: Vec<MaskedExample> = (0..20)
        .flat_map(|pass| make_masked_examples(&sentences, &vocab, &cfg, pass).unwrap())
        .collect();
    if probes {
        examples.extend(sentences.iter().flat_map(|s| single_word_probes(s, &vocab, cfg.seq_len)));
    }
    let mut state = EncoderState::new(TransformerConfig::tiny(vocab.len()).without_dropout()).unwrap();
    let initial = state.evaluate_mlm(&examples).unwrap();
    let train = TrainConfig {
        steps,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 3,
        ..Default::default()
    };
    train_mlm(&mut state, &examples, &train).unwrap();
    let last = state.evaluate_mlm(&examples).unwrap();
    Overfit {
        state,
        vocab,
        sentences,
        initial,
        last,
        elapsed: t.elapsed(),
    }
}

#[test]
fn criterion_05_mlm_overfit() {
    let _g = serial();
    let o = overfit(600, false, 2000);
    let ln_v = (o.vocab.len() as f64).ln();
    let initial_ok = (o.initial.mean_loss - ln_v).abs() <= 0.1 * ln_v;
    let pass = o.last.accuracy >= 0.95 && initial_ok;
    let detail = format!(
        "training accuracy {:.3} on {} masked tokens after 2000 steps; initial loss {:.3} vs ln V {ln_v:.3}",
        o.last.accuracy, o.last.masked, o.initial.mean_loss
    );
    let pass = report(5, "MLM overfit", pass, &detail, o.elapsed, Duration::from_secs(600));
    assert!(pass);
}

/// Per-form majority tag from `train`, falling back to the overall
/// majority for unseen forms.
fn majority_baseline(train: &[TaggedSentence], test: &[TaggedSentence]) -> f64 {
    let mut by_form: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut overall: BTreeMap<&str, usize> = BTreeMap::new();
    for s in train {
        for (w, t) in s.tokens.iter().zip(&s.upos) {
            *by_form.entry(w).or_default().entry(t).or_default() += 1;
            *overall.entry(t).or_default() += 1;
        }
    }
    let best = |m: &BTreeMap<&str, usize>| m.iter().max_by_key(|(_, &c)| c).map(|(t, _)| t.to_string()).unwrap();
    let fallback = best(&overall);
    let (mut right, mut total) = (0, 0);
    for s in test {
        for (w, t) in s.tokens.iter().zip(&s.upos) {
            let guess = by_form.get(w.as_str()).map(best).unwrap_or_else(|| fallback.clone());
            right += usize::from(&guess == t);
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn criterion_06_pos_tagging() {
    let _g = serial();
    let t = Instant::now();
    let data = synth::homograph_corpus(6, 700);
    let (train, rest) = data.split_at(400);
    let (dev, test) = rest.split_at(100);
    let vocab = learn_vocab(
        tagged_counts(&data),
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
        patience: 5,
        max_epochs: 40,
        seed: 6,
        ..Default::default()
    };
    let (model, log) = heads::train_pos(&enc, &vocab, train, Some(dev), &cfg).unwrap();
    let eval = heads::evaluate_pos(&model, &vocab, test).unwrap();
    let mut cum = (0, 0);
    for s in test {
        let tags = model.tag(&vocab, &s.tokens).tags;
        for ((w, gold), pred) in s.tokens.iter().zip(&s.upos).zip(&tags) {
            if w == "cum" {
                cum.0 += usize::from(gold == pred);
                cum.1 += 1;
            }
        }
    }
    let best = log.best_epoch.unwrap();
    let last = log.epochs.last().unwrap().epoch;
    let halted = last <= best + cfg.patience && (last + 1 == cfg.max_epochs || last == best + cfg.patience);
    let mut pass = eval.accuracy >= 0.99 && halted;
    let mut detail = format!(
        "synthetic held-out accuracy {:.4} ({}/{}), cum {}/{}; best epoch {best}, stopped after epoch {last} with patience {}",
        eval.accuracy, eval.correct, eval.total, cum.0, cum.1, cfg.patience
    );

    match (std::env::var_os("VERBA_UD_TRAIN"), std::env::var_os("VERBA_UD_TEST")) {
        (Some(train_path), Some(test_path)) => {
            let train = datasets::read_conllu(&train_path).unwrap();
            let test = datasets::read_conllu(&test_path).unwrap();
            let dev = std::env::var_os("VERBA_UD_DEV").map(|p| datasets::read_conllu(p).unwrap());
            let vocab = learn_vocab(tagged_counts(&train), &LearnConfig::default()).unwrap();
            let enc = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
            let (model, _) = heads::train_pos(&enc, &vocab, &train, dev.as_deref(), &cfg).unwrap();
            let acc = heads::evaluate_pos(&model, &vocab, &test).unwrap().accuracy;
            let baseline = majority_baseline(&train, &test);
            pass &= acc > baseline;
            detail.push_str(&format!("; treebank accuracy {acc:.4} vs majority baseline {baseline:.4}"));
        }
        _ => detail.push_str("; no treebank supplied (VERBA_UD_TRAIN/VERBA_UD_TEST), real-data check not run"),
    }
    let pass = report(6, "POS tagging", pass, &detail, t.elapsed(), Duration::from_secs(900));
    assert!(pass);
}

struct WsdOutcome {
    accuracy: f64,
    total: usize,
    balanced: bool,
}

fn wsd_run(separable: bool) -> WsdOutcome {
    let heads_words = ["acies", "ratio", "fides", "virtus"];
    let entries = synth::sense_dictionary(17, &heads_words, 100, separable);
    let (examples, _) = mine_sense_examples(
        &entries,
        &SenseMiningConfig {
            seed: 17,
            ..Default::default()
        },
    )
    .unwrap();
    let mut counts: BTreeMap<(&str, Split, u8), usize> = BTreeMap::new();
    for e in &examples {
        *counts.entry((&e.headword, e.split, e.sense)).or_default() += 1;
    }
    let balanced = heads_words.iter().all(|h| {
        [Split::Train, Split::Dev, Split::Test].iter().all(|&s| {
            let n: BTreeSet<usize> = counts
                .iter()
                .filter(|((hh, ss, _), _)| hh == h && *ss == s)
                .map(|(_, &c)| c)
                .collect();
            n.len() == 1
        })
    });
    let texts: Vec<Sentence> = examples.iter().enumerate().map(|(i, e)| Sentence::new("c", i, e.text.as_str())).collect();
    let vocab = learn_vocab(
        word_counts(&texts),
        &LearnConfig {
            target_size: 300,
            min_frequency: 1,
            lowercase: true,
        },
    )
    .unwrap();
    let enc = EncoderState::new(TransformerConfig::tiny(vocab.len())).unwrap();
    let cfg = FineTuneConfig {
        learning_rate: 1e-3,
        patience: 4,
        max_epochs: 30,
        seed: 17,
        ..Default::default()
    };
    let trained = heads::train_wsd_all(&enc, &vocab, &examples, &cfg).unwrap();
    let models = trained.into_iter().map(|(h, (m, _))| (h, m)).collect();
    let test: Vec<_> = examples.into_iter().filter(|e| e.split == Split::Test).collect();
    let eval = heads::evaluate_wsd(&models, &vocab, &test).unwrap();
    WsdOutcome {
        accuracy: eval.accuracy,
        total: eval.total,
        balanced,
    }
}

#[test]
fn criterion_07_wsd() {
    let _g = serial();
    let t = Instant::now();
    let sep = wsd_run(true);
    let same = wsd_run(false);
    let half_width = 1.96 * (0.25 / same.total as f64).sqrt();
    let pass = sep.accuracy >= 0.95 && (same.accuracy - 0.5).abs() <= half_width && sep.balanced && same.balanced;
    let detail = format!(
        "separable {:.3} on {}; identical contexts {:.3} on {} (interval 0.5 ± {half_width:.3}); balanced {}",
        sep.accuracy,
        sep.total,
        same.accuracy,
        same.total,
        sep.balanced && same.balanced
    );
    let pass = report(7, "word sense", pass, &detail, t.elapsed(), Duration::from_secs(600));
    assert!(pass);
}

#[test]
fn criterion_08_emendation_miner() {
    let _g = serial();
    let t = Instant::now();
    let training = [Sentence::new("train", 0, "Milites fortiter in acie pugnaverunt et hostes vicerunt.")];
    let ngrams: NgramSet = training_ngrams(training.iter().map(|s| s.tokens.as_slice()));
    let fixture = "Hannibal cum exercitu <ingenti> per Alpes in Italiam magno labore pervenit. \
                   Consul legiones <suas> in castra reduxit et milites de victoria laudavit. \
                   Senatus populusque Romanus bellum <indixit> regi Macedonum propter iniurias sociorum illatas. \
                   Caesar <statim> castra movit. \
                   Eo anno consules novi <a> senatu in provincias missi sunt et bellum gesserunt. \
                   Eo die milites fortiter <in> acie pugnaverunt neque hostes impetum sustinere potuerunt. \
                   Legati <duo> ad regem <tres> ad consulem missi sunt ut de pace agerent. \
                   Nulla hic emendatio inest.";
    let texts = vec![
        ("fx".to_string(), fixture.to_string()),
        ("livy".to_string(), "populus romanus <ter> cum carthaginiensibus dimicavit.".to_string()),
    ];
    let (examples, rep) = mine_emendations(&texts, &ngrams);
    let words = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let expected = vec![
        EmendationExample {
            left_context: words("Hannibal cum exercitu"),
            right_context: words("per Alpes in Italiam magno labore pervenit ."),
            gold_word: "ingenti".into(),
            sentence_len: 11,
            source_id: "fx:0".into(),
        },
        EmendationExample {
            left_context: words("Consul legiones"),
            right_context: words("in castra reduxit et milites de victoria laudavit ."),
            gold_word: "suas".into(),
            sentence_len: 11,
            source_id: "fx:1".into(),
        },
        EmendationExample {
            left_context: words("Senatus populus -que Romanus bellum"),
            right_context: words("regi Macedonum propter iniurias sociorum illatas ."),
            gold_word: "indixit".into(),
            sentence_len: 11,
            source_id: "fx:2".into(),
        },
    ];
    let expected_rejections: BTreeMap<EmendationFilter, usize> = [
        (EmendationFilter::Length, 2),
        (EmendationFilter::Characters, 1),
        (EmendationFilter::Leakage, 1),
        (EmendationFilter::MultipleSlots, 1),
    ]
    .into_iter()
    .collect();
    let pass = examples == expected && rep.rejected == expected_rejections && rep.candidates == 8 && rep.sentences == 9;
    let detail = format!(
        "{} emitted of {} candidates, rejections {:?}",
        rep.emitted, rep.candidates, rep.rejected
    );
    let pass = report(8, "emendation miner", pass, &detail, t.elapsed(), Duration::from_secs(5));
    assert!(pass, "{examples:#?}");
}

#[test]
fn criterion_09_infilling() {
    let _g = serial();
    let fixture = metrics_from_ranks(&[1, 2, 11, 51]);
    let mrr = (1.0 + 0.5 + 1.0 / 11.0 + 1.0 / 51.0) / 4.0;
    let mut pass = fixture.top1 == 0.25 && fixture.top10 == 0.5 && fixture.top50 == 0.75 && (fixture.mrr - mrr).abs() <= 1e-12;

    let mut rng = seed::rng(9, "infill-fixtures", &[]);
    for _ in 0..1000 {
        let ranks: Vec<usize> = (0..rng.random_range(1..40)).map(|_| rng.random_range(1..200)).collect();
        let m = metrics_from_ranks(&ranks);
        pass &= m.top1 <= m.top10 && m.top10 <= m.top50;
    }

    let t = Instant::now();
    // Vocabulary large enough that no sentence is truncated at 64 positions,
    // so every word of the corpus is a training slot.
    let o = overfit(1000, true, 3000);
    let longest = o.sentences.iter().map(|s| o.vocab.encode_sentence(&s.tokens, true, 512).ids.len()).max().unwrap();
    pass &= longest <= 64;
    let lexicon = infill::candidate_lexicon(&o.sentences, 1);
    let mut slots = Vec::new();
    for s in &o.sentences {
        for (i, tok) in s.tokens.iter().enumerate() {
            if tok.is_word() && !tok.is_enclitic && tok.surface.chars().all(char::is_alphabetic) {
                let surf = |r: &[verba::textproc::Token]| r.iter().map(|t| t.surface.clone()).collect::<Vec<_>>();
                slots.push(EmendationExample {
                    left_context: surf(&s.tokens[..i]),
                    right_context: surf(&s.tokens[i + 1..]),
                    gold_word: tok.surface.to_lowercase(),
                    sentence_len: 0,
                    source_id: format!("{}:{}:{i}", s.doc_id, s.index),
                });
            }
        }
    }
    let rankings = infill::rank_all(&o.state, &o.vocab, &slots, &lexicon).unwrap();
    let ranks: Vec<usize> = rankings
        .iter()
        .zip(&slots)
        .map(|(r, ex)| r.rank_of(&ex.gold_word).unwrap())
        .collect();
    let firsts = ranks.iter().filter(|&&r| r == 1).count();
    let m = metrics_from_ranks(&ranks);
    pass &= firsts == slots.len();
    let detail = format!(
        "fixture exact, monotone on 1000 random fixtures; overfit model ({} steps, masked accuracy {:.3}) ranks \
         {firsts}/{} training slots first among {} candidates (MRR {:.4})",
        3000,
        o.last.accuracy,
        slots.len(),
        lexicon.len(),
        m.mrr
    );
    let pass = report(9, "infilling metrics", pass, &detail, t.elapsed(), Duration::from_secs(300));
    assert!(pass);
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn meta(i: usize) -> RecordMeta {
    RecordMeta {
        key: RecordKey {
            doc_id: format!("d{}", i / 1000),
            sentence_index: (i % 1000 / 10) as u32,
            word_index: (i % 10) as u32,
        },
        surface: format!("w{i}"),
        citation: String::new(),
    }
}

/// Full scan over the stored vectors, best first, ties by record order.
fn naive_top_k(index: &EmbeddingIndex, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(usize, f64)> = (0..index.len())
        .map(|i| {
            let v = index.record(i).vector;
            (i, v.iter().zip(q).map(|(&a, b)| a as f64 * b).sum::<f64>() / n)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn criterion_10_neighbors() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = seed::rng(10, "neighbors", &[]);
    let d = 32;
    let mut index = EmbeddingIndex::new(d, 2);
    let mut stored: Vec<Vec<f64>> = Vec::new();
    for i in 0..10_000 {
        // Every tenth vector repeats an earlier one, so ties are common.
        let v = if i % 10 == 9 { stored[rng.random_range(0..i)].clone() } else { unit_vector(&mut rng, d) };
        index.push(meta(i), &v).unwrap();
        stored.push(v);
    }
    let mut mismatches = 0;
    let mut queries = 0;
    let mut ties = 0;
    let mut self_error: f64 = 0.0;
    for qi in 0..60 {
        let q = if qi % 2 == 0 { stored[rng.random_range(0..stored.len())].clone() } else { unit_vector(&mut rng, d) };
        for k in [1, 10, 50] {
            queries += 1;
            let got = index.query_vector(&q, k, None).unwrap();
            let want = naive_top_k(&index, &q, k);
            ties += want.windows(2).filter(|w| w[0].1 == w[1].1).count();
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(g, w)| g.index == w.0 && (g.cosine - w.1).abs() <= 1e-12);
            mismatches += usize::from(!same);
            if qi % 2 == 0 {
                self_error = self_error.max((got[0].cosine - 1.0).abs());
            }
        }
    }
    let bytes = index.to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.plnn");
    index.save(&path).unwrap();
    let loaded = EmbeddingIndex::load(&path).unwrap();
    let round_trip = loaded == index && loaded.to_bytes() == bytes && fs::read(&path).unwrap() == bytes;
    drop((index, loaded, bytes, stored));

    let big_d = 128;
    let n = 1_000_000;
    let mut big = EmbeddingIndex::new(big_d, 2);
    let blank = RecordMeta {
        key: RecordKey {
            doc_id: String::new(),
            sentence_index: 0,
            word_index: 0,
        },
        surface: String::new(),
        citation: String::new(),
    };
    let mut v = vec![0.0; big_d];
    for i in 0..n {
        v.iter_mut().for_each(|x| *x = rng.random::<f64>() - 0.5);
        let mut m = blank.clone();
        m.key.sentence_index = i as u32;
        big.push(m, &v).unwrap();
    }
    let q = unit_vector(&mut rng, big_d);
    let qt = Instant::now();
    let hits = big.query_vector(&q, 10, None).unwrap();
    let query_time = qt.elapsed();
    let bounded = hits.iter().all(|h| h.cosine.abs() <= 1.0 + 1e-6);

    let pass = mismatches == 0
        && ties > 0
        && self_error <= 1e-6
        && round_trip
        && query_time < Duration::from_secs(2)
        && bounded
        && big.len() == n;
    let detail = format!(
        "{queries} queries on 10k vectors, {mismatches} mismatches vs full scan, {ties} tied neighbours; \
         self cosine error {self_error:.1e}; round-trip {round_trip}; 1M x 128 query {:.3} s",
        query_time.as_secs_f64()
    );
    let pass = report(10, "neighbor exactness", pass, &detail, t.elapsed(), Duration::from_secs(600));
    assert!(pass);
}

fn run_ok(args: &[&str]) {
    let mut argv = vec!["verba"];
    argv.extend_from_slice(args);
    assert_eq!(verba::cli::run(&argv), 0, "verba {}", args.join(" "));
}

/// Run the scripted pipeline in `dir` and return every file it wrote.
fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let docs = synth::documents(31, 12, 8);
    verba::jsonl::write(dir.join("docs.jsonl"), &docs).unwrap();
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    run_ok(&["tokenize", "--in", &p("docs.jsonl"), "--out", &p("corpus.tok")]);
    run_ok(&["learn-vocab", "--in", &p("corpus.tok"), "--out", &p("vocab.txt"), "--size", "800", "--min-frequency", "1"]);
    run_ok(&[
        "make-examples", "--in", &p("corpus.tok"), "--vocab", &p("vocab.txt"), "--out", &p("examples.jsonl"),
        "--seq-len", "64", "--passes", "2", "--seed", "31",
    ]);
    run_ok(&[
        "pretrain", "--vocab", &p("vocab.txt"), "--examples", &p("examples.jsonl"), "--out", &p("model.ckpt"),
        "--model-size", "tiny", "--steps", "40", "--batch-size", "16", "--learning-rate", "1e-3", "--seed", "31",
    ]);
    run_ok(&[
        "index-build", "--checkpoint", &p("model.ckpt"), "--vocab", &p("vocab.txt"), "--in", &p("docs.jsonl"),
        "--out", &p("index.plnn"),
    ]);
    run_ok(&[
        "index-query", "--index", &p("index.plnn"), "--checkpoint", &p("model.ckpt"), "--vocab", &p("vocab.txt"),
        "--corpus", &p("docs.jsonl"), "--doc", &docs[0].id, "--sentence", "1", "--word", "2", "--k", "10", "--out",
        &p("hits.jsonl"),
    ]);
    let prefix = dir.to_string_lossy().into_owned();
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let mut bytes = fs::read(&path).unwrap();
        if name.ends_with(".config.json") {
            bytes = String::from_utf8(bytes).unwrap().replace(&prefix, "<dir>").into_bytes();
        }
        files.insert(name, bytes);
    }
    files
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let _g = serial();
    let t = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| second.get(*k) != first.get(*k))
        .collect();
    let hits: Vec<serde_json::Value> = verba::jsonl::read(a.path().join("hits.jsonl")).unwrap();
    let self_hit = (hits[0]["cosine"].as_f64().unwrap() - 1.0).abs() <= 1e-6;
    let pass = differing.is_empty() && first.len() == second.len() && first.len() >= 12 && self_hit;
    let detail = format!(
        "{} artifacts compared, {} differ {differing:?}; self-query rank-1 cosine {:.6}",
        first.len(),
        differing.len(),
        hits[0]["cosine"]
    );
    let pass = report(11, "end-to-end determinism", pass, &detail, t.elapsed(), Duration::from_secs(1200));
    assert!(pass);
}
