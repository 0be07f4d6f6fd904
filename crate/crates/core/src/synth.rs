//! Deterministic synthetic corpora for tests, examples and benchmarks.
//!
//! None of this is real Latin. The generators build text with the
//! properties a test needs: Latin-like orthography with enclitics, a
//! homograph whose tag depends only on context, and dictionary senses whose
//! citations are (or are not) separable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{DictionaryEntry, Sense, TaggedSentence};
use crate::seed;
use crate::textproc::{RawDocument, Source};

const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "l", "m", "n", "p", "qu", "r", "s", "t", "v", "pr", "tr"];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "a", "i"];
/// Stem-final consonants; open syllables elsewhere, as in most Latin stems.
const CODAS: [&str; 8] = ["", "n", "r", "s", "t", "nt", "ct", "l"];

/// Inflection classes: first and second declension, third declension, and
/// first-conjugation verbs.
const PARADIGMS: [&[&str]; 4] = [
    &["a", "ae", "am", "arum", "is", "as"],
    &["us", "i", "o", "um", "orum", "os"],
    &["es", "em", "is", "ibus", "e", "ium"],
    &["at", "ant", "abat", "abant", "avit", "are"],
];

/// Real stems, spread through the frequency ranking.
const REAL_STEMS: [(&str, usize); 24] = [
    ("fortun", 0), ("milit", 2), ("bell", 1), ("amic", 1), ("patri", 0), ("urb", 2),
    ("popul", 1), ("leg", 2), ("gent", 2), ("vit", 0), ("anim", 1), ("port", 3), ("laud", 3), ("pugn", 3),
    ("am", 3), ("serv", 1), ("terr", 0), ("domin", 1), ("rom", 0), ("hom", 2), ("vulner", 3), ("sapient", 2),
    ("nav", 3), ("audent", 2),
];

/// Rank distance between consecutive real stems.
const REAL_STEP: usize = 20;

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
    s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    s
}

/// `(stem, paradigm)` pairs, most frequent first.
fn stems(seed: u64, size: usize) -> Vec<(String, usize)> {
    let mut rng = seed::rng(seed, "synth-stems", &[]);
    let mut seen = std::collections::HashSet::new();
    seen.extend(REAL_STEMS.iter().map(|(s, _)| s.to_string()));
    let mut out: Vec<(String, usize)> = Vec::with_capacity(size);
    while out.len() < size {
        let real = out.len() / REAL_STEP;
        if out.len() % REAL_STEP == 0 && real < REAL_STEMS.len() {
            let (s, p) = REAL_STEMS[real];
            out.push((s.to_string(), p));
            continue;
        }
        let n = rng.random_range(1..=3);
        let mut stem: String = (0..n).map(|_| syllable(&mut rng)).collect();
        stem.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        if stem.len() >= 2 && seen.insert(stem.clone()) {
            out.push((stem, rng.random_range(0..PARADIGMS.len())));
        }
    }
    out
}

/// Inflected form of a stem. Forms that would read as host + enclitic are
/// replaced by the paradigm's first ending.
fn inflect(stem: &str, paradigm: usize, ending: usize) -> String {
    let endings = PARADIGMS[paradigm];
    let w = format!("{stem}{}", endings[ending % endings.len()]);
    if ["que", "ne", "ve"].iter().any(|e| w.ends_with(e)) {
        format!("{stem}{}", endings[0])
    } else {
        w
    }
}

/// Latin-looking word forms, stem by stem, most frequent stems first.
pub fn lexicon(seed: u64, stems_wanted: usize) -> Vec<String> {
    let mut words = Vec::new();
    for (stem, p) in stems(seed, stems_wanted) {
        for e in 0..PARADIGMS[p].len() {
            let w = inflect(&stem, p, e);
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    words
}

/// Zipf-like draw over `n` ranks: `floor(n^u)` with `u` uniform.
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let u: f64 = rng.random();
    ((n as f64).powf(u) as usize).saturating_sub(1).min(n - 1)
}

/// `n` sentences of 6 to 24 words with occasional commas and `-que`.
pub fn latin_like_sentences(seed: u64, n: usize) -> Vec<String> {
    let stems = stems(seed, 20_000);
    let mut rng = seed::rng(seed, "synth-sentences", &[]);
    (0..n)
        .map(|_| {
            let len = rng.random_range(6..=24);
            let mut s = String::new();
            for i in 0..len {
                let (stem, p) = &stems[zipf(&mut rng, stems.len())];
                let mut w = inflect(stem, *p, rng.random_range(0..PARADIGMS[*p].len()));
                if i == 0 {
                    let mut c = w.chars();
                    w = c.next().unwrap().to_uppercase().chain(c).collect();
                } else {
                    s.push(' ');
                }
                s.push_str(&w);
                if i > 0 && rng.random_bool(0.08) {
                    s.push_str("que");
                }
                if i + 1 < len && rng.random_bool(0.06) {
                    s.push(',');
                }
            }
            s.push(if rng.random_bool(0.1) { '?' } else { '.' });
            s
        })
        .collect()
}

/// Documents of `sentences_per_doc` sentences each, spread over sources.
pub fn documents(seed: u64, n_docs: usize, sentences_per_doc: usize) -> Vec<RawDocument> {
    let sentences = latin_like_sentences(seed, n_docs * sentences_per_doc);
    sentences
        .chunks(sentences_per_doc.max(1))
        .enumerate()
        .map(|(i, chunk)| RawDocument {
            id: format!("doc{i:04}"),
            source: Source::ALL[i % Source::ALL.len()],
            text: chunk.join(" "),
        })
        .collect()
}

const SUBJECTS: [&str; 10] = [
    "miles", "consul", "rex", "puer", "dux", "legatus", "civis", "hostis", "Caesar", "Brutus",
];
const ABLATIVES: [&str; 10] = [
    "amicis", "militibus", "gladio", "copiis", "legionibus", "servis", "uxore", "fratre", "equitibus", "comitibus",
];
const PERFECTS: [&str; 6] = ["venit", "pugnavit", "discessit", "rediit", "ambulavit", "fugit"];
const SUBJUNCTIVES: [&str; 6] = ["venisset", "vidisset", "audivisset", "esset", "pervenisset", "rediisset"];
const ADVERBS: [&str; 4] = ["tum", "statim", "deinde", "mox"];

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list[rng.random_range(0..list.len())]
}

fn subject_tag(w: &str) -> &'static str {
    if w.starts_with(char::is_uppercase) {
        "PROPN"
    } else {
        "NOUN"
    }
}

/// Sentences with the homograph `cum`: a preposition (ADP) when followed by
/// an ablative noun, a conjunction (SCONJ) when followed by a subject and a
/// subjunctive verb. Every other form has a single tag.
pub fn homograph_corpus(seed: u64, n: usize) -> Vec<TaggedSentence> {
    let mut rng = seed::rng(seed, "synth-homograph", &[]);
    (0..n)
        .map(|_| {
            let mut t: Vec<(&str, &str)> = Vec::new();
            if rng.random_bool(0.3) {
                t.push((pick(&mut rng, &ADVERBS), "ADV"));
            }
            if rng.random_bool(0.5) {
                let subj = pick(&mut rng, &SUBJECTS);
                let abl = pick(&mut rng, &ABLATIVES);
                if rng.random_bool(0.5) {
                    t.extend([(subj, subject_tag(subj)), ("cum", "ADP"), (abl, "NOUN")]);
                } else {
                    t.extend([("cum", "ADP"), (abl, "NOUN"), (subj, subject_tag(subj))]);
                }
                t.push((pick(&mut rng, &PERFECTS), "VERB"));
            } else {
                let s1 = pick(&mut rng, &SUBJECTS);
                let s2 = pick(&mut rng, &SUBJECTS);
                t.extend([
                    ("cum", "SCONJ"),
                    (s1, subject_tag(s1)),
                    (pick(&mut rng, &SUBJUNCTIVES), "VERB"),
                    (",", "PUNCT"),
                    (s2, subject_tag(s2)),
                ]);
                if rng.random_bool(0.5) {
                    t.push((pick(&mut rng, &ADVERBS), "ADV"));
                }
                t.push((pick(&mut rng, &PERFECTS), "VERB"));
            }
            t.push((".", "PUNCT"));
            TaggedSentence {
                tokens: t.iter().map(|(w, _)| w.to_string()).collect(),
                upos: t.iter().map(|(_, g)| g.to_string()).collect(),
            }
        })
        .collect()
}

const MILITARY: [&str; 12] = [
    "proelium", "hostes", "legio", "castra", "gladius", "signa", "equites", "impetus", "vallum", "agmen", "pugna",
    "tela",
];
const DOMESTIC: [&str; 12] = [
    "domus", "mensa", "cena", "hortus", "ancilla", "lectus", "vinum", "panis", "focus", "cubiculum", "mater", "pueri",
];

/// Dictionary entries with two major senses of `per_sense` citations each.
///
/// When `separable`, citations of sense I draw their context words from one
/// vocabulary and sense II from a disjoint one; otherwise both senses share
/// the same context distribution and carry no signal.
pub fn sense_dictionary(seed: u64, headwords: &[&str], per_sense: usize, separable: bool) -> Vec<DictionaryEntry> {
    headwords
        .iter()
        .enumerate()
        .map(|(h, &head)| {
            let senses = (0..2)
                .map(|s| {
                    let mut rng = seed::rng(seed, "synth-senses", &[h as u64, s as u64]);
                    let citations = (0..per_sense)
                        .map(|_| {
                            let len = rng.random_range(6..=10);
                            let at = rng.random_range(0..len);
                            (0..len)
                                .map(|i| {
                                    if i == at {
                                        head
                                    } else if !separable {
                                        let all = [MILITARY, DOMESTIC].concat();
                                        all[rng.random_range(0..all.len())]
                                    } else if s == 0 {
                                        pick(&mut rng, &MILITARY)
                                    } else {
                                        pick(&mut rng, &DOMESTIC)
                                    }
                                })
                                .collect::<Vec<_>>()
                                .join(" ")
                        })
                        .collect();
                    Sense {
                        level: ["I", "II"][s].to_string(),
                        citations,
                    }
                })
                .collect();
            DictionaryEntry {
                headword: head.to_string(),
                senses,
            }
        })
        .collect()
}
