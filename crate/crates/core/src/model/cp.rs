use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{conv2d, linear, ConvKind, Graph, ParamStore, Scalar, Var};

/// Two pixel-unshuffle steps, a GELU conv stack at the prior width, global pooling and a
/// bias-free linear head.
fn pathway<T: Scalar>(g: &mut Graph<T>, w: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let d = g.dims(x).to_vec();
    let x = g.pad(x, d[1].div_ceil(4) * 4, d[2].div_ceil(4) * 4)?;
    let x = g.pixel_unshuffle(x, 2)?;
    let x = g.pixel_unshuffle(x, 2)?;
    let pw1 = g.param(w, &format!("{prefix}.pw1"))?;
    let dw = g.param(w, &format!("{prefix}.dw"))?;
    let pw2 = g.param(w, &format!("{prefix}.pw2"))?;
    let head = g.param(w, &format!("{prefix}.head"))?;
    let mut f = conv2d(g, x, pw1, ConvKind::Pointwise)?;
    f = g.gelu(f);
    f = conv2d(g, f, dw, ConvKind::Depthwise3x3)?;
    f = g.gelu(f);
    f = conv2d(g, f, pw2, ConvKind::Pointwise)?;
    f = g.gelu(f);
    let pooled = g.spatial_mean(f);
    linear(g, pooled, head, None)
}

fn check_block<T: Scalar>(g: &Graph<T>, cfg: &ModelConfig, v: Var, op: &'static str) -> Result<()> {
    let d = g.dims(v);
    if d.len() != 3 || d[0] != cfg.block_channels {
        return Err(Error::dim(
            op,
            format!("block {d:?} for {} channels", cfg.block_channels),
        ));
    }
    Ok(())
}

/// Prior from the clean and noisy blocks together: the sinogram head reads the unmasked channels,
/// the mask head the masked ones. Output is `scp ++ mcp`.
pub fn cp_extract_full<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    cfg: &ModelConfig,
    clean: Var,
    noisy: Var,
) -> Result<Var> {
    check_block(g, cfg, clean, "cp_extract_full")?;
    if g.dims(clean) != g.dims(noisy) {
        return Err(Error::dim(
            "cp_extract_full",
            format!("clean {:?} vs noisy {:?}", g.dims(clean), g.dims(noisy)),
        ));
    }
    let n = cfg.block_channels;
    let (cu, nu) = (g.narrow(clean, n - 1, 1)?, g.narrow(noisy, n - 1, 1)?);
    let (cm, nm) = (g.narrow(clean, 0, n - 1)?, g.narrow(noisy, 0, n - 1)?);
    let unmasked = g.concat(&[cu, nu])?;
    let masked = g.concat(&[cm, nm])?;
    let scp = pathway(g, w, "cp_full.scp", unmasked)?;
    let mcp = pathway(g, w, "cp_full.mcp", masked)?;
    g.concat(&[scp, mcp])
}

/// Condition vector from the noisy block alone, same layout as [`cp_extract_full`].
pub fn cp_extract_lq<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    cfg: &ModelConfig,
    noisy: Var,
) -> Result<Var> {
    check_block(g, cfg, noisy, "cp_extract_lq")?;
    let n = cfg.block_channels;
    let unmasked = g.narrow(noisy, n - 1, 1)?;
    let masked = g.narrow(noisy, 0, n - 1)?;
    let scp = pathway(g, w, "cp_lq.scp", unmasked)?;
    let mcp = pathway(g, w, "cp_lq.mcp", masked)?;
    g.concat(&[scp, mcp])
}
