//! Building blocks shared by the encoder and the recommender.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{concat_cols, Mat, Var};

pub const LN_EPS: f64 = 1e-5;

/// Uniform samples in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Glorot-uniform initialisation.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, bound)
}

pub fn identity(n: usize) -> Mat {
    Mat::eye(n)
}

/// Row-wise layer normalization with a learned gain and offset (`1 x d`).
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, offset: Var<'t>) -> Var<'t> {
    x.normalize_rows(LN_EPS).mul(gain).add(offset)
}

/// Two-layer GELU feed-forward block.
pub fn feed_forward<'t>(x: Var<'t>, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, b2: Var<'t>) -> Var<'t> {
    x.matmul(w1).add(b1).gelu().matmul(w2).add(b2)
}

#[derive(Clone, Copy)]
pub struct AttentionWeights<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
    pub value: Var<'t>,
    pub output: Var<'t>,
}

/// Multi-head scaled dot-product attention.
///
/// Head `h` uses logits `(Q_h K_hᵀ + bias[h]) / sqrt(d_head)`; entries where
/// `mask` is 0 are excluded, and a fully masked row attends to nothing
/// (zero output before the output projection). Returns the projected output
/// and each head's attention matrix.
pub fn multi_head_attention<'t>(
    queries: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
    bias: Option<&[Var<'t>]>,
    mask: Option<Rc<Mat>>,
) -> (Var<'t>, Vec<Var<'t>>) {
    let q = queries.matmul(w.query);
    let k = keys.matmul(w.key);
    let v = values.matmul(w.value);
    let d = q.shape().1;
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if heads == 1 { q } else { q.slice_cols(lo, hi) };
        let kh = if heads == 1 { k } else { k.slice_cols(lo, hi) };
        let vh = if heads == 1 { v } else { v.slice_cols(lo, hi) };
        let mut logits = qh.matmul(kh.t());
        if let Some(b) = bias {
            logits = logits.add(b[h]);
        }
        let a = logits.scale(scale).softmax_rows(mask.clone());
        outs.push(a.matmul(vh));
        attn.push(a);
    }
    let joined = if heads == 1 { outs[0] } else { concat_cols(&outs) };
    (joined.matmul(w.output), attn)
}
