use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{conv2d, linear, ConvKind, Graph, ParamStore, Scalar, Var};

fn param<T: Scalar>(g: &mut Graph<T>, w: &ParamStore<T>, prefix: &str, name: &str) -> Result<Var> {
    g.param(w, &format!("{prefix}.{name}"))
}

/// `(W1 phi + b1) * Norm(A) + (W2 phi + b2)`, broadcast over positions.
pub fn modulate<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    prefix: &str,
    a: Var,
    phi: Var,
) -> Result<Var> {
    let (w1, b1) = (param(g, w, prefix, "w1")?, param(g, w, prefix, "b1")?);
    let (w2, b2) = (param(g, w, prefix, "w2")?, param(g, w, prefix, "b2")?);
    let scale = linear(g, phi, w1, Some(b1))?;
    let shift = linear(g, phi, w2, Some(b2))?;
    g.layer_norm(a, scale, shift)
}

/// Channel ("transposed") attention of `a_mod` with the residual `a_res` added back. Also returns
/// the per-head `(c/heads, c/heads)` attention maps.
pub fn transposed_attention_maps<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    prefix: &str,
    a_mod: Var,
    a_res: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let dims = g.dims(a_mod).to_vec();
    let (c, h, wd) = (dims[0], dims[1], dims[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(
            "transposed_attention",
            format!("{heads} heads over {c} channels"),
        ));
    }
    let ch = c / heads;
    let qkv_pw = param(g, w, prefix, "qkv_pw")?;
    let qkv_dw = param(g, w, prefix, "qkv_dw")?;
    let gamma = param(g, w, prefix, "gamma")?;
    let out_pw = param(g, w, prefix, "out")?;

    let qkv = conv2d(g, a_mod, qkv_pw, ConvKind::Pointwise)?;
    let qkv = conv2d(g, qkv, qkv_dw, ConvKind::Depthwise3x3)?;
    let qkv = g.reshape(qkv, &[3 * c, h * wd])?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = g.narrow(qkv, i * ch, ch)?;
        let k = g.narrow(qkv, c + i * ch, ch)?;
        let v = g.narrow(qkv, 2 * c + i * ch, ch)?;
        let q = g.l2_normalize_rows(q)?;
        let k = g.l2_normalize_rows(k)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let gi = g.narrow(gamma, i, 1)?;
        let logits = g.mul_scalar(logits, gi)?;
        let attn = g.softmax(logits)?;
        outs.push(g.matmul(attn, v)?);
        maps.push(attn);
    }
    let y = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    let y = g.reshape(y, &[c, h, wd])?;
    let y = conv2d(g, y, out_pw, ConvKind::Pointwise)?;
    Ok((g.add(y, a_res)?, maps))
}

pub fn transposed_attention<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    prefix: &str,
    a_mod: Var,
    a_res: Var,
    heads: usize,
) -> Result<Var> {
    Ok(transposed_attention_maps(g, w, prefix, a_mod, a_res, heads)?.0)
}

/// `W_out(GELU(x1) * x2) + A` where `x1`, `x2` are the two halves of a pointwise then depthwise
/// expansion of `a_mod`.
pub fn gated_ffn<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    prefix: &str,
    a_mod: Var,
    a_res: Var,
) -> Result<Var> {
    let pw = param(g, w, prefix, "pw")?;
    let dw = param(g, w, prefix, "dw")?;
    let out = param(g, w, prefix, "out")?;
    let hidden = g.dims(pw)[0] / 2;
    let x = conv2d(g, a_mod, pw, ConvKind::Pointwise)?;
    let x = conv2d(g, x, dw, ConvKind::Depthwise3x3)?;
    let x1 = g.narrow(x, 0, hidden)?;
    let x2 = g.narrow(x, hidden, hidden)?;
    let x1 = g.gelu(x1);
    let y = g.mul(x1, x2)?;
    let y = conv2d(g, y, out, ConvKind::Pointwise)?;
    g.add(y, a_res)
}

/// modulate, attention, modulate, gated FFN.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    prefix: &str,
    a: Var,
    phi: Var,
    heads: usize,
) -> Result<Var> {
    let m1 = modulate(g, w, &format!("{prefix}.mod1"), a, phi)?;
    let a1 = transposed_attention(g, w, &format!("{prefix}.attn"), m1, a, heads)?;
    let m2 = modulate(g, w, &format!("{prefix}.mod2"), a1, phi)?;
    gated_ffn(g, w, &format!("{prefix}.ffn"), m2, a1)
}

/// Four-level encoder-decoder over an `(N, h, w)` block guided by the prior `phi`. Inputs whose
/// extents are not multiples of 8 are zero-padded internally and cropped back.
pub fn transformer_forward<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    cfg: &ModelConfig,
    block: Var,
    phi: Var,
) -> Result<Var> {
    let dims = g.dims(block).to_vec();
    if dims.len() != 3 || dims[0] != cfg.block_channels {
        return Err(Error::dim(
            "transformer_forward",
            format!("block {dims:?} for {} channels", cfg.block_channels),
        ));
    }
    if g.value(phi).len() != cfg.d_phi() {
        return Err(Error::dim(
            "transformer_forward",
            format!("prior length {} vs {}", g.value(phi).len(), cfg.d_phi()),
        ));
    }
    let (h, wd) = (dims[1], dims[2]);
    let x = g.pad(block, h.div_ceil(8) * 8, wd.div_ceil(8) * 8)?;

    let embed_pw = g.param(w, "transformer.embed.pw")?;
    let embed_dw = g.param(w, "transformer.embed.dw")?;
    let mut f = conv2d(g, x, embed_pw, ConvKind::Pointwise)?;
    f = conv2d(g, f, embed_dw, ConvKind::Depthwise3x3)?;

    let last = ModelConfig::LEVELS - 1;
    let mut skips = Vec::with_capacity(last);
    for (level, stage) in cfg.stages() {
        let decoding = stage.starts_with("dec");
        if decoding {
            let up = g.param(w, &format!("transformer.up{level}"))?;
            let fuse = g.param(w, &format!("transformer.fuse{level}"))?;
            f = conv2d(g, f, up, ConvKind::Pointwise)?;
            f = g.pixel_shuffle(f, 2)?;
            let skip = skips.pop().expect("one skip per level");
            f = g.concat(&[f, skip])?;
            f = conv2d(g, f, fuse, ConvKind::Pointwise)?;
        }
        for b in 0..cfg.blocks[level] {
            let prefix = format!("transformer.{stage}.{b}");
            f = transformer_block(g, w, &prefix, f, phi, cfg.heads[level])?;
        }
        if level < last && !decoding {
            skips.push(f);
            let down = g.param(w, &format!("transformer.down{level}"))?;
            f = g.pixel_unshuffle(f, 2)?;
            f = conv2d(g, f, down, ConvKind::Pointwise)?;
        }
    }
    let out = g.param(w, "transformer.out")?;
    let y = conv2d(g, f, out, ConvKind::Pointwise)?;
    let y = g.crop(y, h, wd)?;
    g.add(y, block)
}
