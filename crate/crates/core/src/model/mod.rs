//! Compact-prior guided restoration network: prior extractors, the modulated encoder-decoder
//! transformer and a short diffusion over the prior vector.

mod blocks;
mod cp;
mod diffusion;

pub use blocks::{
    gated_ffn, modulate, transformer_block, transformer_forward, transposed_attention,
    transposed_attention_maps,
};
pub use cp::{cp_extract_full, cp_extract_lq};
pub use diffusion::{
    denoise_step, diffuse_forward, diffuse_one_step, reverse_update, rollout, sample_smcp,
    timestep_embedding, DiffusionSchedule, MlpDenoiser, NoisePredictor, OracleDenoiser,
};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::rng;

/// Name of the stored data scale; sinogram values are divided by it before entering the network.
pub const NORM_SCALE: &str = "norm.scale";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the stacked sinogram block (`N`).
    pub block_channels: usize,
    /// Feature width per encoder level.
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    /// Transformer blocks per level; the decoder reuses the count of its level.
    pub blocks: Vec<usize>,
    pub ffn_expansion: usize,
    pub cp_width: usize,
    pub d_scp: usize,
    pub d_mcp: usize,
    pub denoiser_hidden: usize,
    pub time_embed_dim: usize,
}

impl ModelConfig {
    pub const LEVELS: usize = 4;

    /// CPU-sized network that keeps the full-size head/channel ratios.
    pub fn desk() -> Self {
        ModelConfig {
            block_channels: 3,
            channels: vec![8, 16, 32, 64],
            heads: vec![1, 2, 4, 8],
            blocks: vec![1, 1, 1, 1],
            ffn_expansion: 2,
            cp_width: 16,
            d_scp: 16,
            d_mcp: 16,
            denoiser_hidden: 64,
            time_embed_dim: 16,
        }
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            block_channels: 3,
            channels: vec![48, 96, 192, 384],
            heads: vec![1, 2, 4, 8],
            blocks: vec![3, 5, 6, 6],
            ffn_expansion: 2,
            cp_width: 64,
            d_scp: 128,
            d_mcp: 128,
            denoiser_hidden: 256,
            time_embed_dim: 32,
        }
    }

    pub fn d_phi(&self) -> usize {
        self.d_scp + self.d_mcp
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_channels < 2 {
            return bad(format!("block_channels must be >= 2, got {}", self.block_channels));
        }
        for (name, v) in [
            ("channels", &self.channels),
            ("heads", &self.heads),
            ("blocks", &self.blocks),
        ] {
            if v.len() != Self::LEVELS {
                return bad(format!("{name} needs {} levels, got {}", Self::LEVELS, v.len()));
            }
        }
        for l in 0..Self::LEVELS {
            let (c, h) = (self.channels[l], self.heads[l]);
            if h == 0 || c % h != 0 {
                return bad(format!("level {l}: {h} heads do not divide {c} channels"));
            }
            if c < 2 {
                return bad(format!("level {l}: need at least 2 channels"));
            }
        }
        if self.ffn_expansion == 0
            || self.cp_width == 0
            || self.d_scp == 0
            || self.d_mcp == 0
            || self.denoiser_hidden == 0
        {
            return bad("widths must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        Ok(())
    }

    /// Every learnable tensor with its shape and initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, dims: Vec<usize>, init: Init| {
            out.push(ParamSpec { name, dims, init })
        };
        let n = self.block_channels;
        let dphi = self.d_phi();
        let c0 = self.channels[0];

        push("transformer.embed.pw".into(), vec![c0, n], Init::fan_in(n));
        push("transformer.embed.dw".into(), vec![c0, 3, 3], Init::Delta);
        for (level, stage) in self.stages() {
            let c = self.channels[level];
            let hidden = c * self.ffn_expansion;
            for b in 0..self.blocks[level] {
                let p = format!("transformer.{stage}.{b}");
                for m in ["mod1", "mod2"] {
                    push(format!("{p}.{m}.w1"), vec![c, dphi], Init::Normal(0.02));
                    push(format!("{p}.{m}.b1"), vec![c], Init::Ones);
                    push(format!("{p}.{m}.w2"), vec![c, dphi], Init::Normal(0.02));
                    push(format!("{p}.{m}.b2"), vec![c], Init::Zeros);
                }
                push(format!("{p}.attn.qkv_pw"), vec![3 * c, c], Init::fan_in(c));
                push(format!("{p}.attn.qkv_dw"), vec![3 * c, 3, 3], Init::Delta);
                push(
                    format!("{p}.attn.gamma"),
                    vec![self.heads[level]],
                    Init::Const(1.0 / ((c / self.heads[level]) as f64).sqrt()),
                );
                push(format!("{p}.attn.out"), vec![c, c], Init::fan_in(c));
                push(format!("{p}.ffn.pw"), vec![2 * hidden, c], Init::fan_in(c));
                push(format!("{p}.ffn.dw"), vec![2 * hidden, 3, 3], Init::Delta);
                push(format!("{p}.ffn.out"), vec![c, hidden], Init::fan_in(hidden));
            }
        }
        for l in 0..Self::LEVELS - 1 {
            let (c, next) = (self.channels[l], self.channels[l + 1]);
            push(format!("transformer.down{l}"), vec![next, 4 * c], Init::fan_in(4 * c));
            push(format!("transformer.up{l}"), vec![4 * c, next], Init::fan_in(next));
            push(format!("transformer.fuse{l}"), vec![c, 2 * c], Init::fan_in(2 * c));
        }
        push("transformer.out".into(), vec![n, c0], Init::Zeros);

        for (enc, scp_in) in [("cp_full", 2), ("cp_lq", 1)] {
            let mcp_in = scp_in * (n - 1);
            for (head, c_in, d) in [("scp", scp_in, self.d_scp), ("mcp", mcp_in, self.d_mcp)] {
                let p = format!("{enc}.{head}");
                let w = self.cp_width;
                push(format!("{p}.pw1"), vec![w, 16 * c_in], Init::fan_in(16 * c_in));
                push(format!("{p}.dw"), vec![w, 3, 3], Init::Delta);
                push(format!("{p}.pw2"), vec![w, w], Init::fan_in(w));
                push(format!("{p}.head"), vec![d, w], Init::fan_in(w));
            }
        }

        let h = self.denoiser_hidden;
        let d_in = 2 * dphi + self.time_embed_dim;
        push("denoiser.l1.w".into(), vec![h, d_in], Init::fan_in(d_in));
        push("denoiser.l1.b".into(), vec![h], Init::Zeros);
        push("denoiser.l2.w".into(), vec![h, h], Init::fan_in(h));
        push("denoiser.l2.b".into(), vec![h], Init::Zeros);
        push("denoiser.l3.w".into(), vec![dphi, h], Init::fan_in(h));
        push("denoiser.l3.b".into(), vec![dphi], Init::Zeros);

        push(NORM_SCALE.into(), vec![1], Init::Ones);
        out
    }

    /// `(level, stage name)` in execution order: encoder, bottleneck, decoder.
    pub fn stages(&self) -> Vec<(usize, String)> {
        let last = Self::LEVELS - 1;
        let mut s: Vec<(usize, String)> = (0..last).map(|l| (l, format!("enc{l}"))).collect();
        s.push((last, "mid".into()));
        s.extend((0..last).rev().map(|l| (l, format!("dec{l}"))));
        s
    }

    /// Zero-valued store with the expected shapes, for shape-checked loading.
    pub fn shape_template<T: Scalar>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for s in self.param_specs() {
            store.insert(s.name, Tensor::zeros(&s.dims));
        }
        store
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    /// Depthwise kernel that starts as the identity tap plus small noise.
    Delta,
    Ones,
    Zeros,
    Const(f64),
}

impl Init {
    fn fan_in(n: usize) -> Self {
        Init::Normal(1.0 / (n as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Fresh weights; each tensor draws from its own named substream, so adding a parameter does not
/// perturb the others.
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for spec in cfg.param_specs() {
        let mut r = rng::substream(seed, &spec.name, 0);
        let mut normal = |std: f64| T::lit(std * r.sample::<f64, _>(StandardNormal));
        let t = match spec.init {
            Init::Normal(std) => Tensor::from_fn(&spec.dims, |_| normal(std)),
            Init::Delta => Tensor::from_fn(&spec.dims, |i| {
                let tap = if i % 9 == 4 { T::one() } else { T::zero() };
                tap + normal(0.05)
            }),
            Init::Ones => Tensor::ones(&spec.dims),
            Init::Zeros => Tensor::zeros(&spec.dims),
            Init::Const(v) => Tensor::full(&spec.dims, T::lit(v)),
        };
        store.insert(spec.name, t);
    }
    Ok(store)
}

/// The stored data scale of a weight set.
pub fn norm_scale<T: Scalar>(w: &ParamStore<T>) -> Result<T> {
    let s = w
        .get(NORM_SCALE)
        .ok_or_else(|| Error::Contract(format!("weights lack `{NORM_SCALE}`")))?
        .data()[0];
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::Numeric(format!("invalid data scale {s}")));
    }
    Ok(s)
}
