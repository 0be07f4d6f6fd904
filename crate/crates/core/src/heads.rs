//! Fine-tuned word classifiers: part-of-speech tagging and per-headword
//! sense disambiguation.
//!
//! Both heads are a linear layer and softmax over a word's contextual
//! vector (the mean of its subtoken states in the final layer, or its first
//! subtoken). The encoder and the head are trained jointly with Adam.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{SenseExample, Split, TaggedSentence};
use crate::encoder::{self, Adam, EncoderState, HeadSection, NamedTensor};
use crate::subword::{SubwordVocab, TokenId};
use crate::textproc::{tokenize, Sentence};
use crate::{seed, Error, Result};

/// Reserved tag for labels never seen in training.
pub const UNK_TAG: &str = "<unk>";

const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean of the word's subtoken vectors.
    #[default]
    Mean,
    /// The word's first subtoken vector.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Upper bound on epochs under early stopping.
    pub max_epochs: usize,
    /// Epochs to train when no dev set is given.
    pub fixed_epochs: usize,
    pub pooling: Pooling,
    /// Train only the head.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            learning_rate: 5e-5,
            batch_size: 16,
            patience: 10,
            max_epochs: 100,
            fixed_epochs: 5,
            pooling: Pooling::Mean,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned, under early stopping.
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: Option<f64>,
}

/// Dense layer `hidden -> classes`, weight stored row-major as
/// `[hidden, classes]` followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    inputs: usize,
    classes: usize,
    params: Vec<f64>,
}

impl LinearHead {
    pub fn new(inputs: usize, classes: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut rng = seed::rng(seed, "head-init", &[]);
        let mut params = vec![0.0; inputs * classes + classes];
        for v in &mut params[..inputs * classes] {
            *v = normal.sample(&mut rng) as f32 as f64;
        }
        LinearHead {
            inputs,
            classes,
            params,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn weight(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.inputs, self.classes), &self.params[..self.inputs * self.classes]).unwrap()
    }

    fn bias(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.inputs * self.classes..])
    }

    pub fn logits(&self, v: ArrayView1<f64>) -> Array1<f64> {
        v.dot(&self.weight()) + self.bias()
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let split = self.inputs * self.classes;
        vec![
            NamedTensor {
                name: "head.weight".into(),
                shape: vec![self.inputs, self.classes],
                data: self.params[..split].to_vec(),
            },
            NamedTensor {
                name: "head.bias".into(),
                shape: vec![self.classes],
                data: self.params[split..].to_vec(),
            },
        ]
    }

    fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        match tensors {
            [w, b] if w.name == "head.weight" && b.name == "head.bias" && w.shape.len() == 2 && b.shape == [w.shape[1]] => {
                let mut params = w.data.clone();
                params.extend(&b.data);
                Ok(LinearHead {
                    inputs: w.shape[0],
                    classes: w.shape[1],
                    params,
                })
            }
            _ => Err(Error::input("head section does not hold a linear head")),
        }
    }
}

/// A sentence prepared for word classification.
struct Instance {
    ids: Vec<TokenId>,
    alignment: Vec<(usize, usize)>,
    /// `(word index, label)` pairs; words lost to truncation are absent.
    targets: Vec<(usize, usize)>,
}

impl Instance {
    fn new<S: AsRef<str>>(vocab: &SubwordVocab, words: &[S], targets: Vec<(usize, usize)>, max_len: usize) -> Self {
        let enc = vocab.encode_sentence(words, true, max_len);
        let kept = enc.word_alignment.len();
        Instance {
            ids: enc.ids,
            alignment: enc.word_alignment,
            targets: targets.into_iter().filter(|&(w, _)| w < kept).collect(),
        }
    }
}

fn pooled(top: &Array2<f64>, span: (usize, usize), pooling: Pooling) -> Array1<f64> {
    match pooling {
        Pooling::Mean => encoder::mean_rows(top, span.0, span.1),
        Pooling::First => top.row(span.0).to_owned(),
    }
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// Gradients are laid out as encoder parameters followed by head parameters.
struct Classifier<'a> {
    encoder: &'a EncoderState,
    head: &'a LinearHead,
    pooling: Pooling,
    freeze_encoder: bool,
}

impl Classifier<'_> {
    /// Per-word log-distributions for every aligned word (eval mode).
    fn log_probs(&self, inst: &Instance) -> Vec<Array1<f64>> {
        if inst.alignment.is_empty() {
            return Vec::new();
        }
        let cache = self.encoder.forward_cached(&inst.ids, inst.ids.len(), None);
        let top = cache.hidden.last().unwrap();
        inst.alignment
            .iter()
            .map(|&span| log_softmax(&self.head.logits(pooled(top, span, self.pooling).view())))
            .collect()
    }

    /// Summed loss and correct count over the targets of one instance,
    /// accumulating `scale * gradient` when asked.
    fn step(&self, inst: &Instance, rng: Option<&mut ChaCha8Rng>, grads: Option<(&mut [f64], f64)>) -> (f64, usize) {
        if inst.targets.is_empty() {
            return (0.0, 0);
        }
        let cache = self.encoder.forward_cached(&inst.ids, inst.ids.len(), rng);
        let top = cache.hidden.last().unwrap();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut outputs = Vec::with_capacity(inst.targets.len());
        for &(w, label) in &inst.targets {
            let span = inst.alignment[w];
            let v = pooled(top, span, self.pooling);
            let logp = log_softmax(&self.head.logits(v.view()));
            loss -= logp[label];
            if encoder::argmax(logp.iter().copied()) == label {
                correct += 1;
            }
            outputs.push((span, v, logp, label));
        }
        if let Some((grads, scale)) = grads {
            let n_enc = self.encoder.params().len();
            let (g_enc, g_head) = grads.split_at_mut(n_enc);
            let (inputs, classes) = (self.head.inputs, self.head.classes);
            let mut d_top = Array2::zeros(top.raw_dim());
            let w = self.head.weight();
            for (span, v, logp, label) in outputs {
                let mut dl = logp.mapv(f64::exp);
                dl[label] -= 1.0;
                dl *= scale;
                for i in 0..inputs {
                    let row = &mut g_head[i * classes..(i + 1) * classes];
                    for c in 0..classes {
                        row[c] += v[i] * dl[c];
                    }
                }
                for c in 0..classes {
                    g_head[inputs * classes + c] += dl[c];
                }
                let dv = w.dot(&dl);
                match self.pooling {
                    Pooling::Mean => {
                        let share = dv / (span.1 - span.0) as f64;
                        for p in span.0..span.1 {
                            let mut row = d_top.row_mut(p);
                            row += &share;
                        }
                    }
                    Pooling::First => {
                        let mut row = d_top.row_mut(span.0);
                        row += &dv;
                    }
                }
            }
            if !self.freeze_encoder {
                self.encoder.backward(&cache, d_top, g_enc);
            }
        }
        (loss, correct)
    }

    fn accuracy(&self, instances: &[Instance]) -> f64 {
        let (correct, total) = instances
            .par_iter()
            .map(|inst| {
                let lp = self.log_probs(inst);
                let c = inst
                    .targets
                    .iter()
                    .filter(|&&(w, label)| encoder::argmax(lp[w].iter().copied()) == label)
                    .count();
                (c, inst.targets.len())
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Joint fine-tuning with dev-based early stopping (or a fixed number of
/// epochs without dev data). Under early stopping the best-dev parameters
/// are restored before returning.
fn fine_tune(
    encoder: &mut EncoderState,
    head: &mut LinearHead,
    train: &[Instance],
    dev: Option<&[Instance]>,
    config: &FineTuneConfig,
) -> Result<TrainingLog> {
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(config.learning_rate >= 0.0) {
        return Err(Error::config("learning rate must be non-negative"));
    }
    let usable: Vec<usize> = (0..train.len()).filter(|&i| !train[i].targets.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::input("no training targets"));
    }
    let dev = dev.filter(|d| d.iter().any(|i| !i.targets.is_empty()));
    let epochs = if dev.is_some() {
        config.max_epochs
    } else {
        config.fixed_epochs
    };
    let n_enc = encoder.params().len();
    let mut enc_adam = Adam::new(n_enc);
    let mut head_adam = Adam::new(head.params.len());
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;

    for epoch in 0..epochs {
        let mut order = usable.clone();
        order.shuffle(&mut seed::rng(config.seed, "finetune-order", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut epoch_targets = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let targets: usize = batch.iter().map(|&i| train[i].targets.len()).sum();
            let scale = 1.0 / targets as f64;
            let clf = Classifier {
                encoder,
                head,
                pooling: config.pooling,
                freeze_encoder: config.freeze_encoder,
            };
            let total = n_enc + head.params.len();
            let partials: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(c, chunk)| {
                    let mut g = vec![0.0; total];
                    let mut loss = 0.0;
                    for (k, &i) in chunk.iter().enumerate() {
                        let slot = (c * CHUNK + k) as u64;
                        let mut rng = seed::rng(config.seed, "finetune-dropout", &[epoch as u64, b as u64, slot]);
                        loss += clf.step(&train[i], Some(&mut rng), Some((&mut g, scale))).0;
                    }
                    (loss, g)
                })
                .collect();
            let mut grads = vec![0.0; total];
            let mut loss = 0.0;
            for (l, g) in partials {
                loss += l;
                grads.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch,
                    loss,
                });
            }
            epoch_loss += loss;
            epoch_targets += targets;
            let (g_enc, g_head) = grads.split_at(n_enc);
            if !config.freeze_encoder {
                enc_adam.step(encoder.params_mut(), g_enc, config.learning_rate);
            }
            head_adam.step(&mut head.params, g_head, config.learning_rate);
        }
        let dev_accuracy = dev.map(|d| {
            Classifier {
                encoder,
                head,
                pooling: config.pooling,
                freeze_encoder: config.freeze_encoder,
            }
            .accuracy(d)
        });
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_targets as f64,
            dev_accuracy,
        });
        if let Some(acc) = dev_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, encoder.params().to_vec(), head.params.clone()));
                log.best_epoch = Some(epoch);
                log.best_dev_accuracy = Some(acc);
            }
            if epoch - log.best_epoch.unwrap() >= config.patience {
                break;
            }
        }
    }
    if let Some((_, enc_params, head_params)) = best {
        encoder.params_mut().copy_from_slice(&enc_params);
        head.params = head_params;
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Part of speech

/// Tag inventory built from training data; id 0 is [`UNK_TAG`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagSet {
    pub fn from_tags<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = tags.into_iter().map(|t| t.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        sorted.retain(|t| t != UNK_TAG);
        let mut all = vec![UNK_TAG.to_string()];
        all.extend(sorted);
        Self::from_list(all)
    }

    fn from_list(tags: Vec<String>) -> Self {
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TagSet { tags, index }
    }

    pub fn from_sentences(sentences: &[TaggedSentence]) -> Self {
        Self::from_tags(sentences.iter().flat_map(|s| s.upos.iter()))
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn get(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    /// Id of `tag`, or of the reserved unknown tag.
    pub fn id(&self, tag: &str) -> usize {
        self.get(tag).unwrap_or(0)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

#[derive(Debug, Clone)]
pub struct PosModel {
    pub encoder: EncoderState,
    pub tags: TagSet,
    pub head: LinearHead,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tagging {
    pub tags: Vec<String>,
    /// Words beyond the length limit; they receive the unknown tag.
    pub truncated: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosEval {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

fn pos_instances(vocab: &SubwordVocab, tags: &TagSet, data: &[TaggedSentence], max_len: usize) -> Vec<Instance> {
    data.iter()
        .map(|s| {
            let targets = s.upos.iter().enumerate().map(|(w, t)| (w, tags.id(t))).collect();
            Instance::new(vocab, &s.tokens, targets, max_len)
        })
        .collect()
}

pub fn train_pos(
    encoder: &EncoderState,
    vocab: &SubwordVocab,
    train: &[TaggedSentence],
    dev: Option<&[TaggedSentence]>,
    config: &FineTuneConfig,
) -> Result<(PosModel, TrainingLog)> {
    let tags = TagSet::from_sentences(train);
    if let Some(dev) = dev {
        let unseen = dev
            .iter()
            .flat_map(|s| &s.upos)
            .filter(|t| tags.get(t).is_none())
            .count();
        if unseen > 0 {
            log::warn!("{unseen} dev tokens carry tags absent from training; scored as {UNK_TAG}");
        }
    }
    let max_len = encoder.config().max_positions;
    let train_inst = pos_instances(vocab, &tags, train, max_len);
    let dev_inst = dev.map(|d| pos_instances(vocab, &tags, d, max_len));
    let mut enc = encoder.clone();
    let mut head = LinearHead::new(enc.hidden_size(), tags.len(), seed::derive(config.seed, "pos-head", &[]));
    let log = fine_tune(&mut enc, &mut head, &train_inst, dev_inst.as_deref(), config)?;
    Ok((
        PosModel {
            encoder: enc,
            tags,
            head,
            pooling: config.pooling,
        },
        log,
    ))
}

impl PosModel {
    fn classifier(&self) -> Classifier<'_> {
        Classifier {
            encoder: &self.encoder,
            head: &self.head,
            pooling: self.pooling,
            freeze_encoder: true,
        }
    }

    /// Tag distributions for each word that fits in the model.
    pub fn distributions<S: AsRef<str>>(&self, vocab: &SubwordVocab, tokens: &[S]) -> Vec<Vec<f64>> {
        let inst = Instance::new(vocab, tokens, Vec::new(), self.encoder.config().max_positions);
        self.classifier()
            .log_probs(&inst)
            .into_iter()
            .map(|lp| lp.iter().map(|v| v.exp()).collect())
            .collect()
    }

    pub fn tag<S: AsRef<str>>(&self, vocab: &SubwordVocab, tokens: &[S]) -> Tagging {
        let dists = self.distributions(vocab, tokens);
        let mut tags: Vec<String> = dists
            .iter()
            .map(|d| self.tags.tag(encoder::argmax(d.iter().copied())).to_string())
            .collect();
        let truncated: Vec<usize> = (tags.len()..tokens.len()).collect();
        if !truncated.is_empty() {
            log::warn!("{} words past the length limit tagged {UNK_TAG}", truncated.len());
        }
        tags.resize(tokens.len(), UNK_TAG.to_string());
        Tagging { tags, truncated }
    }

    pub fn head_section(&self) -> HeadSection {
        HeadSection {
            kind: "pos".into(),
            metadata: serde_json::json!({ "tags": self.tags.tags(), "pooling": self.pooling }),
            tensors: self.head.to_tensors(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encoder.save_with_head(path, &self.head_section())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (encoder, head) = EncoderState::load_with_head(path)?;
        let head = head.filter(|h| h.kind == "pos").ok_or_else(|| Error::input("checkpoint has no tagging head"))?;
        let tags: Vec<String> = serde_json::from_value(head.metadata["tags"].clone())?;
        let pooling: Pooling = serde_json::from_value(head.metadata["pooling"].clone())?;
        let linear = LinearHead::from_tensors(&head.tensors)?;
        if linear.classes != tags.len() || linear.inputs != encoder.hidden_size() {
            return Err(Error::input("tagging head does not match its tag list or encoder"));
        }
        Ok(PosModel {
            encoder,
            tags: TagSet::from_list(tags),
            head: linear,
            pooling,
        })
    }
}

/// Token-level accuracy. Gold tags unknown to the model always count as
/// errors.
pub fn evaluate_pos(model: &PosModel, vocab: &SubwordVocab, test: &[TaggedSentence]) -> Result<PosEval> {
    let total: usize = test.iter().map(TaggedSentence::len).sum();
    if total == 0 {
        return Err(Error::input("empty test set"));
    }
    let correct: usize = test
        .par_iter()
        .map(|s| {
            let predicted = model.tag(vocab, &s.tokens).tags;
            predicted.iter().zip(&s.upos).filter(|(p, g)| p == g && *p != UNK_TAG).count()
        })
        .sum();
    Ok(PosEval {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
    })
}

// ---------------------------------------------------------------------------
// Word sense

#[derive(Debug, Clone)]
pub struct WsdModel {
    pub headword: String,
    pub encoder: EncoderState,
    pub head: LinearHead,
    pub pooling: Pooling,
}

/// Tokens of `text` and the index of the first token matching `headword`
/// after case folding and enclitic splitting.
pub fn locate_headword(headword: &str, text: &str) -> Option<(Vec<String>, usize)> {
    let target = headword.to_lowercase();
    let words: Vec<String> = tokenize(text).into_iter().map(|t| t.surface).collect();
    let at = words.iter().position(|w| w.to_lowercase() == target)?;
    Some((words, at))
}

fn wsd_instances(vocab: &SubwordVocab, examples: &[&SenseExample], max_len: usize) -> (Vec<Instance>, usize) {
    let mut rejected = 0;
    let mut out = Vec::new();
    for ex in examples {
        match locate_headword(&ex.headword, &ex.text) {
            Some((words, at)) => out.push(Instance::new(vocab, &words, vec![(at, ex.sense as usize)], max_len)),
            None => rejected += 1,
        }
    }
    (out, rejected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsdTraining {
    pub log: TrainingLog,
    /// Examples dropped because the headword was not found in their text.
    pub rejected: usize,
}

/// Fine-tune a binary classifier for one headword on its train split,
/// early-stopping on its dev split.
pub fn train_wsd(
    encoder: &EncoderState,
    vocab: &SubwordVocab,
    headword: &str,
    examples: &[SenseExample],
    config: &FineTuneConfig,
) -> Result<(WsdModel, WsdTraining)> {
    let max_len = encoder.config().max_positions;
    let of = |split| {
        examples
            .iter()
            .filter(|e| e.headword == headword && e.split == split)
            .collect::<Vec<_>>()
    };
    let (train, r1) = wsd_instances(vocab, &of(Split::Train), max_len);
    let (dev, r2) = wsd_instances(vocab, &of(Split::Dev), max_len);
    if r1 + r2 > 0 {
        log::warn!("{headword}: {} examples rejected, headword not found", r1 + r2);
    }
    let mut enc = encoder.clone();
    let mut head = LinearHead::new(enc.hidden_size(), 2, seed::derive(config.seed, "wsd-head", &[]));
    let log = fine_tune(&mut enc, &mut head, &train, (!dev.is_empty()).then_some(&dev[..]), config)?;
    Ok((
        WsdModel {
            headword: headword.to_string(),
            encoder: enc,
            head,
            pooling: config.pooling,
        },
        WsdTraining {
            log,
            rejected: r1 + r2,
        },
    ))
}

/// Train one model per headword, in parallel.
pub fn train_wsd_all(
    encoder: &EncoderState,
    vocab: &SubwordVocab,
    examples: &[SenseExample],
    config: &FineTuneConfig,
) -> Result<BTreeMap<String, (WsdModel, WsdTraining)>> {
    let mut heads: Vec<&str> = examples.iter().map(|e| e.headword.as_str()).collect();
    heads.sort();
    heads.dedup();
    heads
        .par_iter()
        .map(|&h| Ok((h.to_string(), train_wsd(encoder, vocab, h, examples, config)?)))
        .collect()
}

impl WsdModel {
    /// Predicted sense, `None` when the headword is absent or truncated.
    pub fn predict(&self, vocab: &SubwordVocab, text: &str) -> Option<u8> {
        let (words, at) = locate_headword(&self.headword, text)?;
        let inst = Instance::new(vocab, &words, Vec::new(), self.encoder.config().max_positions);
        let lp = Classifier {
            encoder: &self.encoder,
            head: &self.head,
            pooling: self.pooling,
            freeze_encoder: true,
        }
        .log_probs(&inst);
        lp.get(at).map(|l| encoder::argmax(l.iter().copied()) as u8)
    }

    pub fn head_section(&self) -> HeadSection {
        HeadSection {
            kind: "wsd".into(),
            metadata: serde_json::json!({ "headword": self.headword, "pooling": self.pooling }),
            tensors: self.head.to_tensors(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encoder.save_with_head(path, &self.head_section())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (encoder, head) = EncoderState::load_with_head(path)?;
        let head = head.filter(|h| h.kind == "wsd").ok_or_else(|| Error::input("checkpoint has no sense head"))?;
        let headword: String = serde_json::from_value(head.metadata["headword"].clone())?;
        let pooling: Pooling = serde_json::from_value(head.metadata["pooling"].clone())?;
        let linear = LinearHead::from_tensors(&head.tensors)?;
        if linear.classes != 2 || linear.inputs != encoder.hidden_size() {
            return Err(Error::input("sense head has the wrong shape"));
        }
        Ok(WsdModel {
            headword,
            encoder,
            head: linear,
            pooling,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadwordScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsdEval {
    /// Micro-average over all scored examples.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_headword: BTreeMap<String, HeadwordScore>,
    /// Examples whose headword could not be located.
    pub skipped: usize,
}

pub fn evaluate_wsd(models: &BTreeMap<String, WsdModel>, vocab: &SubwordVocab, test: &[SenseExample]) -> Result<WsdEval> {
    if let Some(ex) = test.iter().find(|e| !models.contains_key(&e.headword)) {
        return Err(Error::input(format!("no model for headword {:?}", ex.headword)));
    }
    let predictions: Vec<Option<bool>> = test
        .par_iter()
        .map(|ex| models[&ex.headword].predict(vocab, &ex.text).map(|p| p == ex.sense))
        .collect();
    let mut per_headword: BTreeMap<String, HeadwordScore> = BTreeMap::new();
    let mut skipped = 0;
    for (ex, pred) in test.iter().zip(predictions) {
        let Some(ok) = pred else {
            skipped += 1;
            continue;
        };
        let s = per_headword.entry(ex.headword.clone()).or_insert(HeadwordScore {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        s.total += 1;
        s.correct += ok as usize;
    }
    for s in per_headword.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    let correct = per_headword.values().map(|s| s.correct).sum();
    let total = per_headword.values().map(|s| s.total).sum();
    Ok(WsdEval {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        correct,
        total,
        per_headword,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Embedding dumps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    /// `doc_id:sentence_index`.
    pub sentence_id: String,
    /// Token index within the sentence.
    pub position: usize,
    pub vector: Vec<f64>,
}

/// Vectors for every occurrence of `target_form` (case-folded match).
pub fn dump_embeddings(
    state: &EncoderState,
    vocab: &SubwordVocab,
    sentences: &[Sentence],
    target_form: &str,
    layer: usize,
) -> Result<Vec<EmbeddingDump>> {
    let target = target_form.to_lowercase();
    let per_sentence: Vec<Vec<EmbeddingDump>> = sentences
        .par_iter()
        .map(|s| {
            if !s.tokens.iter().any(|t| t.surface.to_lowercase() == target) {
                return Ok(Vec::new());
            }
            let emb = state.embed_words(vocab, &s.tokens, layer)?;
            Ok(emb
                .words
                .into_iter()
                .filter(|w| s.tokens[w.word_index].surface.to_lowercase() == target)
                .map(|w| EmbeddingDump {
                    sentence_id: format!("{}:{}", s.doc_id, s.index),
                    position: w.word_index,
                    vector: w.vector,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_sentence.into_iter().flatten().collect())
}

/// CSV with columns `sentence_id, position, v0 .. v{h-1}`.
pub fn write_embedding_csv<W: Write>(mut w: W, dumps: &[EmbeddingDump], dimension: usize) -> Result<()> {
    write!(w, "sentence_id,position")?;
    for i in 0..dimension {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for d in dumps {
        write!(w, "{},{}", d.sentence_id, d.position)?;
        for v in &d.vector {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TransformerConfig;

    fn vocab() -> SubwordVocab {
        let pieces = ["cum", "amicis", "venit", "caesar", "esset", "##que", "a", "b", "c"];
        SubwordVocab::from_pieces(pieces, true).unwrap()
    }

    fn encoder(v: &SubwordVocab) -> EncoderState {
        EncoderState::new(TransformerConfig::tiny(v.len()).without_dropout()).unwrap()
    }

    fn sentence(words: &[&str], tags: &[&str]) -> TaggedSentence {
        TaggedSentence::new(
            words.iter().map(|s| s.to_string()).collect(),
            tags.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tag_set_reserves_unknown() {
        let t = TagSet::from_tags(["VERB", "ADP", "VERB"]);
        assert_eq!(t.tags(), [UNK_TAG, "ADP", "VERB"]);
        assert_eq!(t.id("NOUN"), 0);
        assert_eq!(t.id("VERB"), 2);
    }

    #[test]
    fn single_tag_corpus_is_learned_in_one_epoch() {
        let v = vocab();
        let data = vec![sentence(&["cum", "amicis", "venit"], &["X", "X", "X"]); 8];
        let cfg = FineTuneConfig {
            learning_rate: 1e-2,
            fixed_epochs: 1,
            ..Default::default()
        };
        let (model, log) = train_pos(&encoder(&v), &v, &data, None, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(evaluate_pos(&model, &v, &data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn empty_sentence_and_empty_test() {
        let v = vocab();
        let data = vec![sentence(&["cum"], &["ADP"])];
        let cfg = FineTuneConfig {
            fixed_epochs: 1,
            ..Default::default()
        };
        let (model, _) = train_pos(&encoder(&v), &v, &data, None, &cfg).unwrap();
        assert!(model.tag(&v, &Vec::<String>::new()).tags.is_empty());
        assert!(evaluate_pos(&model, &v, &[]).is_err());
    }

    #[test]
    fn distributions_are_normalised() {
        let v = vocab();
        let data = vec![sentence(&["cum", "amicis"], &["ADP", "NOUN"])];
        let (model, _) = train_pos(&encoder(&v), &v, &data, None, &FineTuneConfig::default()).unwrap();
        for d in model.distributions(&v, &["cum", "amicis", "venit"]) {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_words_get_unknown_tag() {
        let v = vocab();
        let mut cfg = TransformerConfig::tiny(v.len());
        cfg.max_positions = 4;
        let enc = EncoderState::new(cfg).unwrap();
        let data = vec![sentence(&["cum", "amicis"], &["ADP", "NOUN"])];
        let (model, _) = train_pos(&enc, &v, &data, None, &FineTuneConfig::default()).unwrap();
        let t = model.tag(&v, &["cum", "amicis", "venit", "caesar"]);
        assert_eq!(t.truncated, [2, 3]);
        assert_eq!(t.tags[2], UNK_TAG);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let v = vocab();
        let data = vec![
            sentence(&["cum", "amicis", "venit"], &["ADP", "NOUN", "VERB"]),
            sentence(&["cum", "caesar", "esset"], &["SCONJ", "PROPN", "AUX"]),
        ];
        let enc = encoder(&v);
        let cfg = FineTuneConfig {
            learning_rate: 0.0,
            fixed_epochs: 2,
            ..Default::default()
        };
        let (joint, _) = train_pos(&enc, &v, &data, None, &cfg).unwrap();
        let (frozen, _) = train_pos(&enc, &v, &data, None, &FineTuneConfig { freeze_encoder: true, ..cfg }).unwrap();
        assert_eq!(joint.encoder, enc);
        assert_eq!(
            evaluate_pos(&joint, &v, &data).unwrap(),
            evaluate_pos(&frozen, &v, &data).unwrap()
        );
    }

    #[test]
    fn early_stopping_respects_patience_and_restores_best() {
        let v = vocab();
        let train = vec![sentence(&["cum", "amicis", "venit"], &["ADP", "NOUN", "VERB"]); 4];
        let dev = vec![sentence(&["cum", "amicis", "venit"], &["ADP", "NOUN", "VERB"])];
        let cfg = FineTuneConfig {
            learning_rate: 1e-3,
            patience: 3,
            max_epochs: 40,
            ..Default::default()
        };
        let (model, log) = train_pos(&encoder(&v), &v, &train, Some(&dev), &cfg).unwrap();
        let best = log.best_epoch.unwrap();
        let last = log.epochs.last().unwrap().epoch;
        assert!(last - best <= cfg.patience);
        let again = evaluate_pos(&model, &v, &dev).unwrap().accuracy;
        assert_eq!(Some(again), log.best_dev_accuracy);
    }

    #[test]
    fn pos_model_round_trips_through_checkpoint() {
        let v = vocab();
        let data = vec![sentence(&["cum", "amicis"], &["ADP", "NOUN"])];
        let (model, _) = train_pos(&encoder(&v), &v, &data, None, &FineTuneConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pos.ckpt");
        model.save(&path).unwrap();
        let back = PosModel::load(&path).unwrap();
        assert_eq!(back.tags, model.tags);
        assert_eq!(back.head, model.head);
        assert_eq!(back.tag(&v, &["cum", "amicis"]), model.tag(&v, &["cum", "amicis"]));
    }

    #[test]
    fn headword_found_after_enclitic_split() {
        let (words, at) = locate_headword("acies", "Tum aciesque instructa est").unwrap();
        assert_eq!(words[at], "acies");
        assert!(locate_headword("acies", "nihil hic").is_none());
    }

    #[test]
    fn dumps_only_matching_forms() {
        let v = vocab();
        let enc = encoder(&v);
        let s = vec![
            Sentence::new("d", 0, "cum amicis venit"),
            Sentence::new("d", 1, "caesar venit"),
            Sentence::new("d", 2, "cum amicis venit"),
        ];
        let dumps = dump_embeddings(&enc, &v, &s, "cum", 2).unwrap();
        assert_eq!(dumps.len(), 2);
        assert_eq!(dumps[0].vector, dumps[1].vector);
        assert_eq!(dumps[0].vector.len(), 32);
        assert!(dump_embeddings(&enc, &v, &s[1..2], "cum", 2).unwrap().is_empty());
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let v = vocab();
        let mut enc = encoder(&v);
        let mut head = LinearHead::new(32, 3, 4);
        head.params.iter_mut().enumerate().for_each(|(i, p)| *p += 0.01 * (i % 7) as f64);
        let inst = Instance::new(&v, &["cum", "amicisque", "venit"], vec![(0, 1), (1, 2), (3, 0)], 64);
        for pooling in [Pooling::Mean, Pooling::First] {
            let n_enc = enc.params().len();
            let mut grads = vec![0.0; n_enc + head.params.len()];
            let clf = Classifier { encoder: &enc, head: &head, pooling, freeze_encoder: false };
            clf.step(&inst, None, Some((&mut grads, 1.0)));
            let loss = |e: &EncoderState, h: &LinearHead| {
                Classifier { encoder: e, head: h, pooling, freeze_encoder: false }.step(&inst, None, None).0
            };
            let eps = 1e-5;
            let mut rng = seed::rng(9, "t", &[]);
            let picks: Vec<usize> = (0..60).map(|_| rand::Rng::random_range(&mut rng, 0..grads.len())).collect();
            for i in picks.into_iter().chain([n_enc, grads.len() - 1]) {
                let numeric = if i < n_enc {
                    let orig = enc.params()[i];
                    enc.params_mut()[i] = orig + eps;
                    let p = loss(&enc, &head);
                    enc.params_mut()[i] = orig - eps;
                    let m = loss(&enc, &head);
                    enc.params_mut()[i] = orig;
                    (p - m) / (2.0 * eps)
                } else {
                    let j = i - n_enc;
                    let orig = head.params[j];
                    head.params[j] = orig + eps;
                    let p = loss(&enc, &head);
                    head.params[j] = orig - eps;
                    let m = loss(&enc, &head);
                    head.params[j] = orig;
                    (p - m) / (2.0 * eps)
                };
                let a = grads[i];
                assert!((a - numeric).abs() <= 1e-6 + 1e-4 * a.abs().max(numeric.abs()), "{i}: {a} vs {numeric}");
            }
        }
    }
}
