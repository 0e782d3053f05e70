//! Building blocks: pre-norm multiheaded attention, feed-forward, layer
//! norm, the gated feed-forward, xPos relative positions, pooling.
//!
//! Builders take graph [`Var`]s for weights; the models layer binds its
//! parameter store into a graph once per forward pass and passes the handles
//! here, so weight sharing is literal (one leaf, many uses).

mod xpos;

pub use xpos::{build_tables, xpos_logit, XPosConfig, XPosTables};

use crate::tensor::{AttnMask, Graph, Scalar, Var};

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// MHA projections plus the two pre-norm applications of Eq-style
/// `MHA(LN(Q), LN(K), LN(V)) + Q`; K and V share one LN of their source.
#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_q: LayerNormVars,
    pub ln_kv: LayerNormVars,
    pub heads: usize,
}

#[derive(Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln: LayerNormVars,
}

/// Gate branch of the gated feed-forward; it reuses the feed-forward's
/// LN(A) so both read the same normalized activation.
#[derive(Clone, Copy)]
pub struct GateVars {
    pub wg1: Var,
    pub bg1: Var,
    pub wg2: Var,
    pub bg2: Var,
}

/// Normalize rows then apply the affine gain/shift.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, ln: &LayerNormVars, x: Var) -> Var {
    let n = g.layer_norm_rows(x);
    let scaled = g.mul_row(n, ln.gamma);
    g.add_row(scaled, ln.beta)
}

/// Pre-norm multiheaded attention with residual:
/// `MHA(LN(q_src), LN(kv_src), LN(kv_src)) + q_src`.
///
/// `pos` carries xPos tables for self-attention; pass `None` for
/// cross-attention against unpositioned memory slots. Masked keys receive
/// exactly zero weight.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AttentionVars,
    q_src: Var,
    kv_src: Var,
    mask: &AttnMask,
    pos: Option<&XPosTables>,
) -> Var {
    let (nq, d) = g.dims(q_src);
    let (nk, dkv) = g.dims(kv_src);
    assert_eq!(d, dkv, "attention: query/key width mismatch");
    assert_eq!(d % vars.heads, 0, "heads must divide d");
    let dk = d / vars.heads;

    let lnq = layer_norm(g, &vars.ln_q, q_src);
    let lnkv = layer_norm(g, &vars.ln_kv, kv_src);

    let qp = g.matmul(lnq, vars.wq);
    let kp = g.matmul(lnkv, vars.wk);
    let vp = g.matmul(lnkv, vars.wv);

    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut mixed = Vec::with_capacity(vars.heads);
    for h in 0..vars.heads {
        let mut qh = g.slice_cols(qp, h * dk, dk);
        let mut kh = g.slice_cols(kp, h * dk, dk);
        let vh = g.slice_cols(vp, h * dk, dk);

        if let Some(t) = pos {
            assert_eq!(nq, nk, "positional attention requires aligned q/k positions");
            if let Some(rope) = t.rope {
                qh = g.rope(qh, rope);
                kh = g.rope(kh, rope);
            }
            if let (Some(zpos), Some(zneg)) = (t.zpos, t.zneg) {
                let q_up = g.mul(qh, zpos);
                let k_down = g.mul(kh, zneg);
                let k_down_t = g.transpose(k_down);
                let lower = g.matmul(q_up, k_down_t);
                let logits = if matches!(mask, AttnMask::Causal) {
                    // masked softmax never reads the i < j half
                    lower
                } else {
                    let q_down = g.mul(qh, zneg);
                    let k_up = g.mul(kh, zpos);
                    let k_up_t = g.transpose(k_up);
                    let upper = g.matmul(q_down, k_up_t);
                    g.tri_select(lower, upper)
                };
                let logits = g.affine_scalar(logits, scale, T::ZERO);
                let w = g.row_softmax(logits, mask);
                mixed.push(g.matmul(w, vh));
                continue;
            }
        }
        let kh_t = g.transpose(kh);
        let logits = g.matmul(qh, kh_t);
        let logits = g.affine_scalar(logits, scale, T::ZERO);
        let w = g.row_softmax(logits, mask);
        mixed.push(g.matmul(w, vh));
    }
    let mix = if mixed.len() == 1 { mixed[0] } else { g.concat_cols(&mixed) };
    let out = g.matmul(mix, vars.wo);
    g.add(out, q_src)
}

/// `(GeLU(LN(A) W1 + b1) W2 + b2) + A`
pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, vars: &FeedForwardVars, a: Var) -> Var {
    let norm = layer_norm(g, &vars.ln, a);
    ff_from_norm(g, vars, norm, a)
}

fn ff_from_norm<T: Scalar>(g: &mut Graph<T>, vars: &FeedForwardVars, norm: Var, a: Var) -> Var {
    let h = g.matmul(norm, vars.w1);
    let h = g.add_row(h, vars.b1);
    let h = g.gelu(h);
    let h = g.matmul(h, vars.w2);
    let h = g.add_row(h, vars.b2);
    g.add(h, a)
}

/// Gated update: `G . FeedForward(A) + (1 - G) . H_prev` with
/// `G = sigmoid(GeLU(LN(A) Wg1 + bg1) Wg2 + bg2)`. A closed gate keeps the
/// hidden state unchanged.
pub fn gated_feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    ff: &FeedForwardVars,
    gate: &GateVars,
    h_prev: Var,
    a: Var,
) -> Var {
    let norm = layer_norm(g, &ff.ln, a);
    let h_inter = ff_from_norm(g, ff, norm, a);

    let gh = g.matmul(norm, gate.wg1);
    let gh = g.add_row(gh, gate.bg1);
    let gh = g.gelu(gh);
    let gh = g.matmul(gh, gate.wg2);
    let gh = g.add_row(gh, gate.bg2);
    let gate_open = g.sigmoid(gh);

    let kept = g.one_minus(gate_open);
    let new_part = g.mul(gate_open, h_inter);
    let old_part = g.mul(kept, h_prev);
    g.add(new_part, old_part)
}

/// Mean over the temporal axis: `[n,d] -> [1,d]`.
pub fn mean_pool<T: Scalar>(g: &mut Graph<T>, h: Var) -> Var {
    g.mean_rows(h)
}

/// Row t is the mean of rows 0..=t; row n-1 equals `mean_pool`.
pub fn prefix_mean_pool<T: Scalar>(g: &mut Graph<T>, h: Var) -> Var {
    g.prefix_mean_rows(h)
}
