//! A bidirectional transformer encoder with a masked-language-model head.
//!
//! Everything is computed in `f64` on the CPU with hand-written
//! backpropagation. Stored parameters are kept at `f32` precision (values are
//! rounded after initialisation and after every optimiser step) so that
//! checkpoints, which hold 32-bit floats, reload bit for bit.

mod checkpoint;
mod gradcheck;
pub(crate) mod model;
mod optim;
pub mod params;

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{HeadSection, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{analytic_gradients, compare_gradients, gradient_check, GradCheckReport};
pub use optim::{train_mlm, Adam, TrainConfig};
pub use params::{Layout, TensorId, TensorSpec};

use crate::corpus::MaskedExample;
use crate::subword::{SubwordVocab, TokenId};
use crate::{seed, Error, Result};
use model::ForwardCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub type_vocab_size: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub activation: Activation,
    pub initializer_range: f64,
    pub seed: u64,
    /// Share the output projection with the token embeddings.
    pub tie_mlm_weights: bool,
}

impl TransformerConfig {
    /// The full-size architecture: 12 layers, hidden 768, 12 heads.
    pub fn full_scale(vocab_size: usize) -> Self {
        TransformerConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            max_positions: 512,
            vocab_size,
            type_vocab_size: 2,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            activation: Activation::Gelu,
            initializer_range: 0.02,
            seed: 0,
            tie_mlm_weights: true,
        }
    }

    /// CPU-trainable default: 2 layers, hidden 128, 4 heads, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            num_layers: 2,
            hidden_size: 128,
            num_heads: 4,
            intermediate_size: 512,
            max_positions: 128,
            ..Self::full_scale(vocab_size)
        }
    }

    /// Smallest shipped configuration: 2 layers, hidden 32, 2 heads.
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            intermediate_size: 128,
            max_positions: 64,
            ..Self::full_scale(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.hidden_size == 0 || self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.type_vocab_size == 0 || self.intermediate_size == 0 {
            return bad("vocab, position, segment and intermediate sizes must be positive".into());
        }
        for (name, p) in [("hidden", self.hidden_dropout), ("attention", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} dropout {p} outside [0, 1)"));
            }
        }
        if !(self.initializer_range >= 0.0) {
            return bad("initializer range must be non-negative".into());
        }
        Ok(())
    }

    pub fn without_dropout(&self) -> Self {
        TransformerConfig {
            hidden_dropout: 0.0,
            attention_dropout: 0.0,
            ..self.clone()
        }
    }
}

/// Round to the nearest `f32`, the precision parameters are stored at.
pub(crate) fn to_storage(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone)]
pub struct EncoderState {
    config: TransformerConfig,
    layout: Arc<Layout>,
    params: Vec<f64>,
    step_count: u64,
}

impl PartialEq for EncoderState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.step_count == other.step_count
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Contextual vector for one word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRepresentation {
    pub vector: Vec<f64>,
    pub layer: usize,
    pub word_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddings {
    pub words: Vec<TokenRepresentation>,
    /// Indices of words dropped because the sentence exceeded the length limit.
    pub truncated: Vec<usize>,
}

/// Masked-LM loss statistics over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MlmEval {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

impl EncoderState {
    /// Fresh parameters: normal(0, initializer_range) weights, zero biases,
    /// unit layer-norm scales.
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let mut params = vec![0.0; layout.total()];
        let mut rng = seed::rng(config.seed, "init", &[]);
        let normal = Normal::new(0.0, config.initializer_range)
            .map_err(|e| Error::config(format!("initializer range: {e}")))?;
        for spec in layout.specs() {
            let slice = &mut params[spec.range()];
            if spec.is_ln_gamma() {
                slice.fill(1.0);
            } else if !spec.is_vector() {
                for v in slice.iter_mut() {
                    *v = to_storage(normal.sample(&mut rng));
                }
            }
        }
        Ok(EncoderState {
            config,
            layout,
            params,
            step_count: 0,
        })
    }

    pub(crate) fn from_parts(config: TransformerConfig, params: Vec<f64>, step_count: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        if params.len() != layout.total() {
            return Err(Error::config(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(EncoderState {
            config,
            layout,
            params,
            step_count,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_input(&self, ids: &[TokenId], attention_length: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::input("empty input sequence"));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::input(format!(
                "sequence length {} exceeds {} positions",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= self.config.vocab_size) {
            return Err(Error::input(format!("token id {id} at position {pos} outside vocabulary")));
        }
        if attention_length == 0 || attention_length > ids.len() {
            return Err(Error::input(format!(
                "attention length {attention_length} outside 1..={}",
                ids.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(
        &self,
        ids: &[TokenId],
        attention_length: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardCache {
        model::forward(&self.config, &self.layout, &self.params, ids, attention_length, rng)
    }

    pub(crate) fn backward(&self, cache: &ForwardCache, d_top: Array2<f64>, grads: &mut [f64]) {
        model::backward(&self.config, &self.layout, &self.params, cache, d_top, grads)
    }

    /// Hidden states of every layer (`num_layers + 1` matrices of shape
    /// `len × hidden`). Positions at or beyond `attention_length` are padding
    /// and never attended to. Dropout is applied iff `train_rng` is given.
    pub fn forward(
        &self,
        ids: &[TokenId],
        attention_length: usize,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_input(ids, attention_length)?;
        Ok(self.forward_cached(ids, attention_length, train_rng).hidden)
    }

    /// Attention probabilities, per layer and head (eval mode).
    pub fn attention_maps(&self, ids: &[TokenId], attention_length: usize) -> Result<Vec<Vec<Array2<f64>>>> {
        self.check_input(ids, attention_length)?;
        let cache = self.forward_cached(ids, attention_length, None);
        Ok(cache.layers.iter().map(|l| l.attention_probs().to_vec()).collect())
    }

    /// Vocabulary logits for final-layer hidden rows.
    pub fn mlm_logits(&self, hidden_rows: &Array2<f64>) -> Array2<f64> {
        model::mlm_logits(&self.layout, &self.params, hidden_rows.clone()).0
    }

    /// Probability distribution over the vocabulary for each row.
    pub fn mlm_probabilities(&self, hidden_rows: &Array2<f64>) -> Array2<f64> {
        model::softmax_rows(&self.mlm_logits(hidden_rows))
    }

    pub fn mlm_log_probabilities(&self, hidden_rows: &Array2<f64>) -> Array2<f64> {
        model::log_softmax_rows(&self.mlm_logits(hidden_rows))
    }

    /// Summed cross-entropy at the masked positions of one example and the
    /// number of correct argmax predictions. When `grads` is given, the
    /// gradient of `scale * loss` is accumulated into it.
    pub(crate) fn mlm_example(
        &self,
        ex: &MaskedExample,
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<(&mut [f64], f64)>,
    ) -> (f64, usize) {
        if ex.mask_positions.is_empty() {
            return (0.0, 0);
        }
        let len = ex.attention_length;
        let cache = self.forward_cached(&ex.input_ids[..len], len, rng);
        let top = cache.hidden.last().unwrap();
        let h = self.config.hidden_size;
        let mut rows = Array2::zeros((ex.mask_positions.len(), h));
        for (r, &p) in ex.mask_positions.iter().enumerate() {
            rows.row_mut(r).assign(&top.row(p));
        }
        let (logits, mlm_cache) = model::mlm_logits(&self.layout, &self.params, rows);
        let logp = model::log_softmax_rows(&logits);
        let mut loss = 0.0;
        let mut correct = 0;
        for (r, &gold) in ex.original_ids.iter().enumerate() {
            let row = logp.row(r);
            loss -= row[gold as usize];
            if argmax(row.iter().copied()) == gold as usize {
                correct += 1;
            }
        }
        if let Some((grads, scale)) = grads {
            let mut dlogits = logp.mapv(f64::exp);
            for (r, &gold) in ex.original_ids.iter().enumerate() {
                dlogits[[r, gold as usize]] -= 1.0;
            }
            dlogits *= scale;
            let drows = model::mlm_backward(&self.layout, &self.params, &mlm_cache, &dlogits, grads);
            let mut d_top = Array2::zeros(top.raw_dim());
            for (r, &p) in ex.mask_positions.iter().enumerate() {
                let mut row = d_top.row_mut(p);
                row += &drows.row(r);
            }
            self.backward(&cache, d_top, grads);
        }
        (loss, correct)
    }

    /// Mean masked-token loss and top-1 accuracy in eval mode.
    pub fn evaluate_mlm(&self, examples: &[MaskedExample]) -> Result<MlmEval> {
        let mut loss = 0.0;
        let mut correct = 0;
        let mut masked = 0;
        for ex in examples {
            self.check_example(ex)?;
            let (l, c) = self.mlm_example(ex, None, None);
            loss += l;
            correct += c;
            masked += ex.mask_positions.len();
        }
        Ok(MlmEval {
            mean_loss: if masked == 0 { 0.0 } else { loss / masked as f64 },
            accuracy: if masked == 0 { 0.0 } else { correct as f64 / masked as f64 },
            masked,
        })
    }

    pub(crate) fn check_example(&self, ex: &MaskedExample) -> Result<()> {
        self.check_input(&ex.input_ids[..ex.attention_length.min(ex.input_ids.len())], ex.attention_length)?;
        if ex.mask_positions.len() != ex.original_ids.len() {
            return Err(Error::input("mask positions and original ids differ in length"));
        }
        if let Some(&p) = ex.mask_positions.iter().find(|&&p| p >= ex.attention_length) {
            return Err(Error::input(format!("mask position {p} beyond attention length")));
        }
        if let Some(&id) = ex.original_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::input(format!("target id {id} outside vocabulary")));
        }
        Ok(())
    }

    /// Subtoken-averaged vectors for each word at `layer` (eval mode).
    pub fn embed_words<S: AsRef<str>>(&self, vocab: &SubwordVocab, words: &[S], layer: usize) -> Result<WordEmbeddings> {
        if layer > self.config.num_layers {
            return Err(Error::input(format!(
                "layer {layer} outside 0..={}",
                self.config.num_layers
            )));
        }
        let enc = vocab.encode_sentence(words, true, self.config.max_positions);
        let hidden = self.forward(&enc.ids, enc.ids.len(), None)?;
        let states = &hidden[layer];
        let words_out = enc
            .word_alignment
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| TokenRepresentation {
                vector: mean_rows(states, start, end).to_vec(),
                layer,
                word_index: i,
            })
            .collect();
        Ok(WordEmbeddings {
            words: words_out,
            truncated: (enc.word_alignment.len()..words.len()).collect(),
        })
    }
}

pub(crate) fn mean_rows(states: &Array2<f64>, start: usize, end: usize) -> Array1<f64> {
    let mut acc = Array1::zeros(states.ncols());
    for p in start..end {
        acc += &states.row(p);
    }
    acc / (end - start) as f64
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
