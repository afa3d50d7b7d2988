use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

pub(super) fn param(t: &mut Tape, name: &str) -> Result<Var> {
    t.param_by_name(name)
}

pub(super) fn linear(t: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let w = param(t, &format!("{name}.w"))?;
    let b = param(t, &format!("{name}.b"))?;
    let h = t.matmul(x, w)?;
    t.add_row(h, b)
}

pub(super) fn layer_norm(t: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let g = param(t, &format!("{name}.g"))?;
    let b = param(t, &format!("{name}.b"))?;
    t.layer_norm(x, g, b)
}

pub(super) fn sinusoid(rows: usize, dim: usize) -> Tensor {
    Tensor::from_fn(rows, dim, |p, j| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Scaled dot-product attention over `heads` column groups; only the first
/// `valid_keys` key rows can be attended to.
pub(super) fn attend(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    valid_keys: usize,
    counter: &mut usize,
) -> Result<Var> {
    let d = t.value(q).cols();
    let dh = d / heads;
    let scale = (dh as f64).powf(-0.5);
    let (tq, tk) = (t.value(q).rows(), t.value(k).rows());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.cols(q, h * dh, dh)?;
        let kh = t.cols(k, h * dh, dh)?;
        let vh = t.cols(v, h * dh, dh)?;
        let s = t.matmul_nt(qh, kh)?;
        let s = t.scale(s, scale);
        let p = t.softmax_prefix(s, valid_keys)?;
        outs.push(t.matmul(p, vh)?);
    }
    *counter += heads * tq * tk;
    if heads == 1 {
        Ok(outs[0])
    } else {
        t.concat_cols(&outs)
    }
}

/// Multi-head attention with projections `{name}.q/k/v/o`.
#[allow(clippy::too_many_arguments)]
pub(super) fn mha(
    t: &mut Tape,
    query: Var,
    memory: Var,
    name: &str,
    out_name: &str,
    heads: usize,
    valid_keys: usize,
    counter: &mut usize,
) -> Result<Var> {
    let q = linear(t, query, &format!("{name}.q"))?;
    let kw = param(t, &format!("{name}.k.w"))?;
    let k = t.matmul(memory, kw)?;
    let v = linear(t, memory, &format!("{name}.v"))?;
    let a = attend(t, q, k, v, heads, valid_keys, counter)?;
    linear(t, a, out_name)
}

/// Two-branch encoder layer: self-attention in parallel with a
/// convolutional gating MLP, concatenated, merged and added back.
pub(super) fn branch_layer(
    t: &mut Tape,
    x: Var,
    name: &str,
    heads: usize,
    cg_hidden: usize,
    valid: usize,
    counter: &mut usize,
) -> Result<Var> {
    let h = layer_norm(t, x, &format!("{name}.att_ln"))?;
    let att = mha(
        t,
        h,
        h,
        &format!("{name}.att"),
        &format!("{name}.att.o"),
        heads,
        valid,
        counter,
    )?;

    let g = layer_norm(t, x, &format!("{name}.cg_ln"))?;
    let up = linear(t, g, &format!("{name}.cg.up"))?;
    let up = t.gelu(up);
    let z1 = t.cols(up, 0, cg_hidden)?;
    let z2 = t.cols(up, cg_hidden, cg_hidden)?;
    let z2 = layer_norm(t, z2, &format!("{name}.cg.gate_ln"))?;
    let z2 = t.mask_rows(z2, valid);
    let w = param(t, &format!("{name}.cg.conv"))?;
    let z2 = t.depthwise_conv(z2, w)?;
    let gated = t.mul(z1, z2)?;
    let cg = linear(t, gated, &format!("{name}.cg.down"))?;

    let both = t.concat_cols(&[att, cg])?;
    let merged = linear(t, both, &format!("{name}.merge"))?;
    t.add(x, merged)
}

/// Pre-norm Transformer layer of the prompt encoder.
pub(super) fn prompt_layer(t: &mut Tape, x: Var, name: &str, heads: usize, counter: &mut usize) -> Result<Var> {
    let rows = t.value(x).rows();
    let h = layer_norm(t, x, &format!("{name}.ln1"))?;
    let att = mha(
        t,
        h,
        h,
        &format!("{name}.att"),
        &format!("{name}.att.o"),
        heads,
        rows,
        counter,
    )?;
    let x = t.add(x, att)?;
    let h = layer_norm(t, x, &format!("{name}.ln2"))?;
    let f = linear(t, h, &format!("{name}.ffn1"))?;
    let f = t.gelu(f);
    let f = linear(t, f, &format!("{name}.ffn2"))?;
    t.add(x, f)
}
