//! Transformer building blocks shared by the encoders, the fusor and the generator.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::Result;
use crate::graph::{Graph, Mask, Var};
use crate::params::{Initializer, ParameterTree};

pub fn init_linear(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    tree.insert(format!("{prefix}.weight"), init.normal(fan_in, fan_out))?;
    if bias {
        tree.insert(format!("{prefix}.bias"), init.zeros(1, fan_out))?;
    }
    Ok(())
}

pub fn linear(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let y = g.matmul(x, w);
    let bias = format!("{prefix}.bias");
    if g.params().index_of(&bias).is_some() {
        let b = g.param(&bias);
        g.add_row(y, b)
    } else {
        y
    }
}

pub fn init_layer_norm(
    tree: &mut ParameterTree,
    init: &Initializer,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    tree.insert(format!("{prefix}.gamma"), init.ones(1, dim))?;
    tree.insert(format!("{prefix}.beta"), init.zeros(1, dim))?;
    Ok(())
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var, eps: f64) -> Var {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta, eps)
}

/// Self-attention parameters: fused `qkv` projection plus output projection.
pub fn init_self_attention(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    init_linear(tree, init, &format!("{prefix}.qkv"), dim, 3 * dim, true)?;
    init_linear(tree, init, &format!("{prefix}.out"), dim, dim, true)
}

/// Cross-attention parameters: query from the stream, keys/values from the context.
pub fn init_cross_attention(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    prefix: &str,
    dim: usize,
    context_dim: usize,
) -> Result<()> {
    init_linear(tree, init, &format!("{prefix}.q"), dim, dim, true)?;
    init_linear(
        tree,
        init,
        &format!("{prefix}.kv"),
        context_dim,
        2 * dim,
        true,
    )?;
    init_linear(tree, init, &format!("{prefix}.out"), dim, dim, true)
}

pub fn init_ffn(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    prefix: &str,
    dim: usize,
    mult: usize,
) -> Result<()> {
    init_layer_norm(tree, init, &format!("{prefix}.norm"), dim)?;
    init_linear(tree, init, &format!("{prefix}.fc1"), dim, mult * dim, true)?;
    init_linear(tree, init, &format!("{prefix}.fc2"), mult * dim, dim, true)
}

/// Scaled dot-product attention split over `heads` column groups.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: Option<Mask>) -> Var {
    let dim = g.shape(q).1;
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores, mask.clone());
        g.note_attention(weights);
        outs.push(g.matmul(weights, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

pub fn self_attention(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Mask>,
) -> Var {
    let dim = g.shape(x).1;
    let qkv = linear(g, &format!("{prefix}.qkv"), x);
    let q = g.slice_cols(qkv, 0, dim);
    let k = g.slice_cols(qkv, dim, 2 * dim);
    let v = g.slice_cols(qkv, 2 * dim, 3 * dim);
    let a = attend(g, q, k, v, heads, mask);
    linear(g, &format!("{prefix}.out"), a)
}

pub fn cross_attention(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    context: Var,
    heads: usize,
    mask: Option<Mask>,
) -> Var {
    let dim = g.shape(x).1;
    let q = linear(g, &format!("{prefix}.q"), x);
    let kv = linear(g, &format!("{prefix}.kv"), context);
    let k = g.slice_cols(kv, 0, dim);
    let v = g.slice_cols(kv, dim, 2 * dim);
    let a = attend(g, q, k, v, heads, mask);
    linear(g, &format!("{prefix}.out"), a)
}

/// `fc2(gelu(fc1(norm(x))))`, without the residual.
pub fn ffn(g: &mut Graph, prefix: &str, x: Var, eps: f64) -> Var {
    let h = layer_norm(g, &format!("{prefix}.norm"), x, eps);
    let h = linear(g, &format!("{prefix}.fc1"), h);
    let h = g.gelu(h);
    linear(g, &format!("{prefix}.fc2"), h)
}

/// Mask letting every query see the keys flagged `true`.
pub fn key_padding_mask(queries: usize, keys: &[bool]) -> Mask {
    Arc::new(Array2::from_shape_fn((queries, keys.len()), |(_, k)| {
        keys[k]
    }))
}

/// Lower-triangular mask: position `t` sees positions `0..=t`.
pub fn causal_mask(len: usize) -> Mask {
    Arc::new(Array2::from_shape_fn((len, len), |(q, k)| k <= q))
}
