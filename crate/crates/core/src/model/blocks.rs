//! Transformer building blocks over named parameters.
//!
//! All blocks are pre-layer-norm residual: `x + Attn(LN(x), LN(ctx))`
//! followed by `x + FFN(LN(x))`. Self-attention normalizes query and
//! context with the same affine; cross-attention keeps a separate context
//! norm. Attention is multi-head scaled dot-product; masked keys get a
//! large negative score before the softmax.

use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::tensor::{ParameterStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Additive score for masked-out keys. Not `-inf` (which would poison the
/// softmax max-subtraction with NaNs) but far below any real logit.
pub const MASK_SCORE: f64 = -1e30;

/// Builds the additive key mask `[B, 1, 1, S]` from per-token validity.
/// A sample whose keys are all masked can only produce NaN attention, so it
/// is rejected here.
pub fn additive_mask(valid: &[bool], b: usize, s: usize) -> Result<Tensor, ModelError> {
    debug_assert_eq!(valid.len(), b * s);
    let mut data = Vec::with_capacity(b * s);
    for sample in 0..b {
        let row = &valid[sample * s..(sample + 1) * s];
        if !row.iter().any(|&v| v) {
            return Err(ModelError::AllMasked { sample });
        }
        data.extend(row.iter().map(|&v| if v { 0.0 } else { MASK_SCORE }));
    }
    Ok(Tensor::from_vec(data, &[b, 1, 1, s]).expect("mask shape"))
}

pub(super) fn layer_norm(
    store: &ParameterStore,
    prefix: &str,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let gain = store.expect(&format!("{prefix}.gain"));
    let bias = store.expect(&format!("{prefix}.bias"));
    Ok(x.layer_norm(gain, bias, LN_EPS)?)
}

pub(super) fn linear(
    store: &ParameterStore,
    prefix: &str,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let w = store.expect(&format!("{prefix}.weight"));
    let b = store.expect(&format!("{prefix}.bias"));
    Ok(x.matmul(w)?.add(b)?)
}

/// Weight-only projection. The key projection uses this: a key bias shifts
/// every key identically, which adds a per-query constant to all scores and
/// cancels in the softmax — the parameter would be exactly gradient-free.
fn linear_no_bias(store: &ParameterStore, prefix: &str, x: &Tensor) -> Result<Tensor, ModelError> {
    Ok(x.matmul(store.expect(&format!("{prefix}.weight")))?)
}

/// Splits `[B, L, d]` into heads `[B, h, L, d/h]`.
fn split_heads(x: &Tensor, n_heads: usize) -> Result<Tensor, ModelError> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / n_heads;
    Ok(x.reshape(&[b, l, n_heads, dh])?.permute(&[0, 2, 1, 3])?)
}

/// Inverse of [`split_heads`].
fn merge_heads(x: &Tensor) -> Result<Tensor, ModelError> {
    let (b, h, l, dh) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    Ok(x.permute(&[0, 2, 1, 3])?.reshape(&[b, l, h * dh])?)
}

/// Multi-head scaled dot-product attention. `q_in` is `[B, Lq, d]`,
/// `kv_in` is `[B, Lk, d]`, `mask` an optional additive `[B, 1, 1, Lk]`.
pub fn attention(
    store: &ParameterStore,
    prefix: &str,
    q_in: &Tensor,
    kv_in: &Tensor,
    mask: Option<&Tensor>,
    n_heads: usize,
) -> Result<Tensor, ModelError> {
    let d = q_in.shape()[2];
    if d % n_heads != 0 {
        return Err(ModelError::Config(format!("width {d} not divisible by {n_heads} heads")));
    }
    let q = split_heads(&linear(store, &format!("{prefix}.wq"), q_in)?, n_heads)?;
    let k = split_heads(&linear_no_bias(store, &format!("{prefix}.wk"), kv_in)?, n_heads)?;
    let v = split_heads(&linear(store, &format!("{prefix}.wv"), kv_in)?, n_heads)?;
    let scale = 1.0 / ((d / n_heads) as f64).sqrt();
    let mut scores = q.matmul_nt(&k)?.mul_scalar(scale);
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let probs = scores.softmax(3)?;
    let ctx = merge_heads(&probs.matmul(&v)?)?;
    linear(store, &format!("{prefix}.wo"), &ctx)
}

fn feed_forward(store: &ParameterStore, prefix: &str, x: &Tensor) -> Result<Tensor, ModelError> {
    let mid = linear(store, &format!("{prefix}.w1"), x)?.gelu();
    linear(store, &format!("{prefix}.w2"), &mid)
}

fn maybe_dropout(x: Tensor, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Tensor {
    match rng {
        Some(r) if p > 0.0 => x.dropout(p, *r),
        _ => x,
    }
}

/// Pre-LN self-attention block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn self_block(
    store: &ParameterStore,
    prefix: &str,
    x: &Tensor,
    mask: Option<&Tensor>,
    n_heads: usize,
    dropout: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let ln = layer_norm(store, &format!("{prefix}.ln1"), x)?;
    let attn = attention(store, &format!("{prefix}.attn"), &ln, &ln, mask, n_heads)?;
    let x = x.add(&maybe_dropout(attn, dropout, rng))?;
    let ln2 = layer_norm(store, &format!("{prefix}.ln2"), &x)?;
    let ffn = feed_forward(store, &format!("{prefix}.ffn"), &ln2)?;
    Ok(x.add(&maybe_dropout(ffn, dropout, rng))?)
}

/// Pre-LN cross-attention block: queries attend to a fixed context.
/// Queries never attend to each other, so each output position depends only
/// on its own input row and the context.
pub fn cross_block(
    store: &ParameterStore,
    prefix: &str,
    x: &Tensor,
    ctx: &Tensor,
    ctx_mask: Option<&Tensor>,
    n_heads: usize,
    dropout: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let ln_q = layer_norm(store, &format!("{prefix}.ln_q"), x)?;
    let ln_ctx = layer_norm(store, &format!("{prefix}.ln_ctx"), ctx)?;
    let attn = attention(store, &format!("{prefix}.attn"), &ln_q, &ln_ctx, ctx_mask, n_heads)?;
    let x = x.add(&maybe_dropout(attn, dropout, rng))?;
    let ln2 = layer_norm(store, &format!("{prefix}.ln2"), &x)?;
    let ffn = feed_forward(store, &format!("{prefix}.ffn"), &ln2)?;
    Ok(x.add(&maybe_dropout(ffn, dropout, rng))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Registers one block's parameters with small random values.
    fn block_params(store: &mut ParameterStore, prefix: &str, d: usize, f: usize, cross: bool) {
        let mut rng = crate::rng::stream(9, prefix);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec((0..n).map(|_| rng.gen_range(-0.2..0.2)).collect(), shape)
                .unwrap()
                .with_grad()
        };
        let lns: &[&str] = if cross { &["ln_q", "ln_ctx", "ln2"] } else { &["ln1", "ln2"] };
        for ln in lns {
            store.insert(format!("{prefix}.{ln}.gain"), Tensor::full(&[d], 1.0).with_grad());
            store.insert(format!("{prefix}.{ln}.bias"), Tensor::zeros(&[d]).with_grad());
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}.attn.{w}.weight"), rand_t(&[d, d]));
            if w != "wk" {
                store.insert(format!("{prefix}.attn.{w}.bias"), Tensor::zeros(&[d]).with_grad());
            }
        }
        store.insert(format!("{prefix}.ffn.w1.weight"), rand_t(&[d, f]));
        store.insert(format!("{prefix}.ffn.w1.bias"), Tensor::zeros(&[f]).with_grad());
        store.insert(format!("{prefix}.ffn.w2.weight"), rand_t(&[f, d]));
        store.insert(format!("{prefix}.ffn.w2.bias"), Tensor::zeros(&[d]).with_grad());
    }

    fn random(shape: &[usize], tag: &str) -> Tensor {
        let mut rng = crate::rng::stream(10, tag);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        // With one query and one key the softmax is a singleton, so the
        // attention output is exactly wo(v) regardless of the score.
        let d = 8;
        let mut store = ParameterStore::new();
        block_params(&mut store, "blk", d, 16, false);
        let x = random(&[1, 1, d], "single");
        let ln = layer_norm(&store, "blk.ln1", &x).unwrap();
        let got = attention(&store, "blk.attn", &ln, &ln, None, 2).unwrap();
        let v = linear(&store, "blk.attn.wv", &ln).unwrap();
        let want = linear(&store, "blk.attn.wo", &v).unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_context_is_rejected() {
        match additive_mask(&[true, false, false, false], 2, 2) {
            Err(ModelError::AllMasked { sample }) => assert_eq!(sample, 1),
            other => panic!("expected all-masked error, got {other:?}"),
        }
    }

    #[test]
    fn masked_keys_do_not_influence_output() {
        let d = 8;
        let mut store = ParameterStore::new();
        block_params(&mut store, "blk", d, 16, true);
        let q = random(&[1, 3, d], "mq");
        let ctx_a = random(&[1, 4, d], "mctx");
        // corrupt the masked position only
        let mut data = ctx_a.to_vec();
        for v in &mut data[2 * d..3 * d] {
            *v += 1000.0;
        }
        let ctx_b = Tensor::from_vec(data, &[1, 4, d]).unwrap();
        let mask = additive_mask(&[true, true, false, true], 1, 4).unwrap();
        let mut none = None;
        let ya = cross_block(&store, "blk", &q, &ctx_a, Some(&mask), 2, 0.0, &mut none).unwrap();
        let yb = cross_block(&store, "blk", &q, &ctx_b, Some(&mask), 2, 0.0, &mut none).unwrap();
        for (a, b) in ya.to_vec().iter().zip(yb.to_vec()) {
            assert!((a - b).abs() < 1e-9, "masked key leaked: {a} vs {b}");
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant_without_positions() {
        // Blocks add no positional information themselves: permuting the
        // sequence permutes the output rows identically.
        let d = 8;
        let mut store = ParameterStore::new();
        block_params(&mut store, "blk", d, 16, false);
        let x = random(&[1, 4, d], "perm");
        let mut none = None;
        let y = self_block(&store, "blk", &x, None, 2, 0.0, &mut none).unwrap();
        // swap rows 1 and 3
        let mut swapped = x.to_vec();
        for j in 0..d {
            swapped.swap(d + j, 3 * d + j);
        }
        let xs = Tensor::from_vec(swapped, &[1, 4, d]).unwrap();
        let ys = self_block(&store, "blk", &xs, None, 2, 0.0, &mut none).unwrap();
        let (yv, ysv) = (y.to_vec(), ys.to_vec());
        for j in 0..d {
            assert!((yv[d + j] - ysv[3 * d + j]).abs() < 1e-10);
            assert!((yv[3 * d + j] - ysv[d + j]).abs() < 1e-10);
            assert!((yv[j] - ysv[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let d = 8;
        let mut store = ParameterStore::new();
        block_params(&mut store, "blk", d, 12, false);
        let x0 = random(&[1, 3, d], "fdx").to_vec();
        crate::tensor::check_unary(
            |x| {
                let mut none = None;
                let y = self_block(&store, "blk", x, None, 2, 0.0, &mut none).unwrap();
                let w = random(&[1, 3, d], "fdw");
                y.mul(&w).unwrap().sum_all()
            },
            &x0,
            &[1, 3, d],
            1e-5,
        );
    }

    #[test]
    fn cross_block_rows_are_independent() {
        let d = 8;
        let mut store = ParameterStore::new();
        block_params(&mut store, "blk", d, 16, true);
        let ctx = random(&[1, 5, d], "indctx");
        let q = random(&[1, 4, d], "indq");
        let mut none = None;
        let joint = cross_block(&store, "blk", &q, &ctx, None, 2, 0.0, &mut none).unwrap();
        for row in 0..4 {
            let single = q.slice(1, row, 1).unwrap();
            let alone = cross_block(&store, "blk", &single, &ctx, None, 2, 0.0, &mut none).unwrap();
            let jv = joint.to_vec();
            for (j, a) in alone.to_vec().iter().enumerate() {
                assert!((jv[row * d + j] - a).abs() < 1e-12, "row {row} depends on its neighbors");
            }
        }
    }
}
