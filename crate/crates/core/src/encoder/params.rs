//! Flat parameter storage with a named tensor layout.
//!
//! All trainable values of an encoder live in one `Vec<f64>`; the layout maps
//! tensor names to offsets and shapes. Optimiser state, gradients and
//! checkpoints all share the same layout.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::TransformerConfig;

pub type TensorId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Name with the layer index replaced by `*`.
    pub fn role(&self) -> String {
        match self.name.strip_prefix("layer.") {
            Some(rest) => match rest.split_once('.') {
                Some((_, tail)) => format!("layer.*.{tail}"),
                None => self.name.clone(),
            },
            None => self.name.clone(),
        }
    }

    /// Whether the tensor is a layer-norm scale (initialised to one).
    pub(crate) fn is_ln_gamma(&self) -> bool {
        self.name.ends_with(".gamma")
    }

    pub(crate) fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingSlots {
    pub token: TensorId,
    pub position: TensorId,
    pub segment: TensorId,
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlots {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmSlots {
    pub transform_w: TensorId,
    pub transform_b: TensorId,
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    /// `None` when the output projection is tied to the token embeddings.
    pub decoder: Option<TensorId>,
    pub bias: TensorId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    pub embeddings: EmbeddingSlots,
    pub layers: Vec<LayerSlots>,
    pub mlm: MlmSlots,
}

struct Builder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> TensorId {
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }
}

impl Layout {
    pub fn new(config: &TransformerConfig) -> Self {
        let h = config.hidden_size;
        let i = config.intermediate_size;
        let v = config.vocab_size;
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let embeddings = EmbeddingSlots {
            token: b.add("embeddings.token".into(), &[v, h]),
            position: b.add("embeddings.position".into(), &[config.max_positions, h]),
            segment: b.add("embeddings.segment".into(), &[config.type_vocab_size, h]),
            ln_gamma: b.add("embeddings.ln.gamma".into(), &[h]),
            ln_beta: b.add("embeddings.ln.beta".into(), &[h]),
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                let mut t = |name: &str, shape: &[usize]| b.add(format!("layer.{l}.{name}"), shape);
                LayerSlots {
                    wq: t("attention.query.weight", &[h, h]),
                    bq: t("attention.query.bias", &[h]),
                    wk: t("attention.key.weight", &[h, h]),
                    bk: t("attention.key.bias", &[h]),
                    wv: t("attention.value.weight", &[h, h]),
                    bv: t("attention.value.bias", &[h]),
                    wo: t("attention.output.weight", &[h, h]),
                    bo: t("attention.output.bias", &[h]),
                    ln1_gamma: t("attention.ln.gamma", &[h]),
                    ln1_beta: t("attention.ln.beta", &[h]),
                    w1: t("ffn.intermediate.weight", &[h, i]),
                    b1: t("ffn.intermediate.bias", &[i]),
                    w2: t("ffn.output.weight", &[i, h]),
                    b2: t("ffn.output.bias", &[h]),
                    ln2_gamma: t("ffn.ln.gamma", &[h]),
                    ln2_beta: t("ffn.ln.beta", &[h]),
                }
            })
            .collect();
        let mlm = MlmSlots {
            transform_w: b.add("mlm.transform.weight".into(), &[h, h]),
            transform_b: b.add("mlm.transform.bias".into(), &[h]),
            ln_gamma: b.add("mlm.ln.gamma".into(), &[h]),
            ln_beta: b.add("mlm.ln.beta".into(), &[h]),
            decoder: (!config.tie_mlm_weights).then(|| b.add("mlm.decoder.weight".into(), &[h, v])),
            bias: b.add("mlm.bias".into(), &[v]),
        };
        Layout {
            specs: b.specs,
            total: b.total,
            embeddings,
            layers,
            mlm,
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.specs[id]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn mat<'a>(&self, data: &'a [f64], id: TensorId) -> ArrayView2<'a, f64> {
        let s = &self.specs[id];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &data[s.range()]).expect("matrix tensor")
    }

    pub fn vec<'a>(&self, data: &'a [f64], id: TensorId) -> ArrayView1<'a, f64> {
        let s = &self.specs[id];
        ArrayView1::from(&data[s.range()])
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], id: TensorId) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[id];
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut data[s.range()]).expect("matrix tensor")
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64], id: TensorId) -> ArrayViewMut1<'a, f64> {
        let s = &self.specs[id];
        ArrayViewMut1::from(&mut data[s.range()])
    }
}
