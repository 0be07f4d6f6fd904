//! Forward and backward passes of the encoder and its masked-LM head.
//!
//! Weights are stored `[in, out]`, so a dense layer is `x · W + b` with `x`
//! holding one row per position. Residual blocks use post-layer-norm ordering.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Layout, TensorId};
use super::TransformerConfig;
use crate::subword::TokenId;

pub(crate) const LN_EPS: f64 = 1e-12;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let scale = *r;
        row.mapv_inplace(|v| v * scale);
    }
    let y = &xhat * &gamma + &beta;
    (y, LnCache { xhat, inv_std })
}

/// Returns dL/dx and accumulates the scale and shift gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array2<f64> {
    let n = dy.ncols() as f64;
    for (dy_row, xh_row) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        for j in 0..dy_row.len() {
            dgamma[j] += dy_row[j] * xh_row[j];
            dbeta[j] += dy_row[j];
        }
    }
    let dxhat = dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let r = cache.inv_std[i];
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gj, &xj| *o = r / n * (n * gj - sum_g - xj * sum_gx));
    }
    dx
}

fn dense(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulate the weight and bias gradients of `y = x W + b` and return dL/dx.
fn dense_backward(
    layout: &Layout,
    params: &[f64],
    grads: &mut [f64],
    x: &Array2<f64>,
    dy: &Array2<f64>,
    w: TensorId,
    b: TensorId,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut layout.mat_mut(grads, w));
    let mut gb = layout.vec_mut(grads, b);
    gb += &dy.sum_axis(Axis(0));
    dy.dot(&layout.mat(params, w).t())
}

/// Inverted dropout mask (entries 0 or 1/(1-p)), or `None` when inactive.
fn dropout_mask(rows: usize, cols: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub(crate) struct LayerCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    prob_masks: Vec<Option<Array2<f64>>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1: LnCache,
    attn_ln: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
    ln2: LnCache,
}

impl LayerCache {
    pub(crate) fn attention_probs(&self) -> &[Array2<f64>] {
        &self.probs
    }
}

pub(crate) struct ForwardCache {
    ids: Vec<TokenId>,
    emb_mask: Option<Array2<f64>>,
    emb_ln: LnCache,
    pub(crate) layers: Vec<LayerCache>,
    /// Output of every layer, index 0 being the embedding layer.
    pub hidden: Vec<Array2<f64>>,
}

/// Apply the encoder to `ids`. Keys at positions `>= attention_length` are
/// masked out. Dropout is active iff `rng` is given.
pub(crate) fn forward(
    config: &TransformerConfig,
    layout: &Layout,
    params: &[f64],
    ids: &[TokenId],
    attention_length: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> ForwardCache {
    let t = ids.len();
    let h = config.hidden_size;
    let e = &layout.embeddings;
    let tok = layout.mat(params, e.token);
    let pos = layout.mat(params, e.position);
    let seg = layout.mat(params, e.segment);
    let mut x = Array2::zeros((t, h));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&tok.row(ids[i] as usize));
        row += &pos.row(i);
        row += &seg.row(0);
    }
    let (mut h0, emb_ln) = layer_norm(&x, layout.vec(params, e.ln_gamma), layout.vec(params, e.ln_beta));
    let emb_mask = dropout_mask(t, h, config.hidden_dropout, rng.as_deref_mut());
    apply_mask(&mut h0, &emb_mask);

    let mut hidden = vec![h0];
    let mut layers = Vec::with_capacity(config.num_layers);
    for slots in &layout.layers {
        let input = hidden.last().unwrap();
        let (out, cache) = layer_forward(config, layout, params, slots, input, attention_length, rng.as_deref_mut());
        layers.push(cache);
        hidden.push(out);
    }
    ForwardCache {
        ids: ids.to_vec(),
        emb_mask,
        emb_ln,
        layers,
        hidden,
    }
}

fn layer_forward(
    config: &TransformerConfig,
    layout: &Layout,
    params: &[f64],
    p: &super::params::LayerSlots,
    input: &Array2<f64>,
    attention_length: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let t = input.nrows();
    let h = config.hidden_size;
    let heads = config.num_heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let valid = attention_length.min(t);

    let q = dense(input, layout.mat(params, p.wq), layout.vec(params, p.bq));
    let k = dense(input, layout.mat(params, p.wk), layout.vec(params, p.bk));
    let v = dense(input, layout.mat(params, p.wv), layout.vec(params, p.bv));

    let mut ctx = Array2::zeros((t, h));
    let mut probs = Vec::with_capacity(heads);
    let mut prob_masks = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * d..(hd + 1) * d];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        for mut row in scores.rows_mut() {
            let live = row.slice(s![..valid]);
            let max = live.fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
            let mut sum = 0.0;
            for j in 0..t {
                if j < valid {
                    let e = (row[j] * scale - max).exp();
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = 0.0;
                }
            }
            row.mapv_inplace(|x| x / sum);
        }
        let mask = dropout_mask(t, t, config.attention_dropout, rng.as_deref_mut());
        let ctx_h = match &mask {
            Some(m) => (&scores * m).dot(&vh),
            None => scores.dot(&vh),
        };
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(scores);
        prob_masks.push(mask);
    }

    let mut attn = dense(&ctx, layout.mat(params, p.wo), layout.vec(params, p.bo));
    let attn_mask = dropout_mask(t, h, config.hidden_dropout, rng.as_deref_mut());
    apply_mask(&mut attn, &attn_mask);
    attn += input;
    let (attn_ln, ln1) = layer_norm(&attn, layout.vec(params, p.ln1_gamma), layout.vec(params, p.ln1_beta));

    let ff_pre = dense(&attn_ln, layout.mat(params, p.w1), layout.vec(params, p.b1));
    let ff_act = ff_pre.mapv(gelu);
    let mut ff = dense(&ff_act, layout.mat(params, p.w2), layout.vec(params, p.b2));
    let ff_mask = dropout_mask(t, h, config.hidden_dropout, rng.as_deref_mut());
    apply_mask(&mut ff, &ff_mask);
    ff += &attn_ln;
    let (out, ln2) = layer_norm(&ff, layout.vec(params, p.ln2_gamma), layout.vec(params, p.ln2_beta));

    let cache = LayerCache {
        q,
        k,
        v,
        probs,
        prob_masks,
        ctx,
        attn_mask,
        ln1,
        attn_ln,
        ff_pre,
        ff_act,
        ff_mask,
        ln2,
    };
    (out, cache)
}

/// Backpropagate dL/d(final layer output) through the encoder, accumulating
/// parameter gradients into `grads`.
pub(crate) fn backward(
    config: &TransformerConfig,
    layout: &Layout,
    params: &[f64],
    cache: &ForwardCache,
    d_top: Array2<f64>,
    grads: &mut [f64],
) {
    let mut dh = d_top;
    for (l, slots) in layout.layers.iter().enumerate().rev() {
        dh = layer_backward(config, layout, params, slots, &cache.layers[l], &cache.hidden[l], dh, grads);
    }
    let e = &layout.embeddings;
    apply_mask(&mut dh, &cache.emb_mask);
    let (dgamma, dbeta) = split_pair(layout, grads, e.ln_gamma, e.ln_beta);
    let dx = layer_norm_backward(&dh, &cache.emb_ln, layout.vec(params, e.ln_gamma), dgamma, dbeta);
    {
        let mut dtok = layout.mat_mut(grads, e.token);
        for (i, row) in dx.rows().into_iter().enumerate() {
            let mut r = dtok.row_mut(cache.ids[i] as usize);
            r += &row;
        }
    }
    {
        let mut dpos = layout.mat_mut(grads, e.position);
        for (i, row) in dx.rows().into_iter().enumerate() {
            let mut r = dpos.row_mut(i);
            r += &row;
        }
    }
    let mut dseg = layout.mat_mut(grads, e.segment);
    let mut r = dseg.row_mut(0);
    r += &dx.sum_axis(Axis(0));
}

/// Mutable slices of two distinct tensors.
fn split_pair<'a>(layout: &Layout, grads: &'a mut [f64], a: TensorId, b: TensorId) -> (&'a mut [f64], &'a mut [f64]) {
    let ra = layout.spec(a).range();
    let rb = layout.spec(b).range();
    assert!(ra.end <= rb.start, "tensors must be ordered and disjoint");
    let (lo, hi) = grads.split_at_mut(rb.start);
    (&mut lo[ra], &mut hi[..rb.len()])
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    config: &TransformerConfig,
    layout: &Layout,
    params: &[f64],
    p: &super::params::LayerSlots,
    c: &LayerCache,
    input: &Array2<f64>,
    d_out: Array2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let t = input.nrows();
    let h = config.hidden_size;
    let heads = config.num_heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let (dg2, db2) = split_pair(layout, grads, p.ln2_gamma, p.ln2_beta);
    let dz2 = layer_norm_backward(&d_out, &c.ln2, layout.vec(params, p.ln2_gamma), dg2, db2);
    let mut d_attn_ln = dz2.clone();
    let mut dff = dz2;
    apply_mask(&mut dff, &c.ff_mask);
    let d_act = dense_backward(layout, params, grads, &c.ff_act, &dff, p.w2, p.b2);
    let d_pre = &d_act * &c.ff_pre.mapv(gelu_grad);
    d_attn_ln += &dense_backward(layout, params, grads, &c.attn_ln, &d_pre, p.w1, p.b1);

    let (dg1, db1) = split_pair(layout, grads, p.ln1_gamma, p.ln1_beta);
    let dz1 = layer_norm_backward(&d_attn_ln, &c.ln1, layout.vec(params, p.ln1_gamma), dg1, db1);
    let mut d_input = dz1.clone();
    let mut d_attn = dz1;
    apply_mask(&mut d_attn, &c.attn_mask);
    let d_ctx = dense_backward(layout, params, grads, &c.ctx, &d_attn, p.wo, p.bo);

    let mut dq = Array2::zeros((t, h));
    let mut dk = Array2::zeros((t, h));
    let mut dv = Array2::zeros((t, h));
    for hd in 0..heads {
        let cols = s![.., hd * d..(hd + 1) * d];
        let probs = &c.probs[hd];
        let dropped = match &c.prob_masks[hd] {
            Some(m) => probs * m,
            None => probs.clone(),
        };
        let dctx_h = d_ctx.slice(cols);
        let mut dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&dropped.t().dot(&dctx_h));
        if let Some(m) = &c.prob_masks[hd] {
            dp *= m;
        }
        // softmax backward, row by row
        let mut ds = Array2::zeros((t, t));
        for i in 0..t {
            let pr = probs.row(i);
            let dpr = dp.row(i);
            let dot = pr.dot(&dpr);
            Zip::from(ds.row_mut(i))
                .and(&pr)
                .and(&dpr)
                .for_each(|o, &pj, &gj| *o = pj * (gj - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    d_input += &dense_backward(layout, params, grads, input, &dq, p.wq, p.bq);
    d_input += &dense_backward(layout, params, grads, input, &dk, p.wk, p.bk);
    d_input += &dense_backward(layout, params, grads, input, &dv, p.wv, p.bv);
    d_input
}

pub(crate) struct MlmCache {
    rows: Array2<f64>,
    pre: Array2<f64>,
    ln: LnCache,
    transformed: Array2<f64>,
}

/// Vocabulary logits for the given final-layer rows.
pub(crate) fn mlm_logits(layout: &Layout, params: &[f64], rows: Array2<f64>) -> (Array2<f64>, MlmCache) {
    let m = &layout.mlm;
    let pre = dense(&rows, layout.mat(params, m.transform_w), layout.vec(params, m.transform_b));
    let act = pre.mapv(gelu);
    let (transformed, ln) = layer_norm(&act, layout.vec(params, m.ln_gamma), layout.vec(params, m.ln_beta));
    let mut logits = match m.decoder {
        Some(dec) => transformed.dot(&layout.mat(params, dec)),
        None => transformed.dot(&layout.mat(params, layout.embeddings.token).t()),
    };
    logits += &layout.vec(params, m.bias);
    (
        logits,
        MlmCache {
            rows,
            pre,
            ln,
            transformed,
        },
    )
}

/// Backpropagate dL/dlogits through the head; returns dL/d(rows).
pub(crate) fn mlm_backward(
    layout: &Layout,
    params: &[f64],
    cache: &MlmCache,
    dlogits: &Array2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let m = &layout.mlm;
    {
        let mut gb = layout.vec_mut(grads, m.bias);
        gb += &dlogits.sum_axis(Axis(0));
    }
    let dt = match m.decoder {
        Some(dec) => {
            general_mat_mul(1.0, &cache.transformed.t(), dlogits, 1.0, &mut layout.mat_mut(grads, dec));
            dlogits.dot(&layout.mat(params, dec).t())
        }
        None => {
            let tok = layout.embeddings.token;
            general_mat_mul(1.0, &dlogits.t(), &cache.transformed, 1.0, &mut layout.mat_mut(grads, tok));
            dlogits.dot(&layout.mat(params, tok))
        }
    };
    let (dg, db) = split_pair(layout, grads, m.ln_gamma, m.ln_beta);
    let dact = layer_norm_backward(&dt, &cache.ln, layout.vec(params, m.ln_gamma), dg, db);
    let dpre = &dact * &cache.pre.mapv(gelu_grad);
    dense_backward(layout, params, grads, &cache.rows, &dpre, m.transform_w, m.transform_b)
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}
