//! Flat `key = value` configuration. Keys are dotted (`geometry.num_angles`), `#` starts a
//! comment, lists are comma separated. Every key must appear in [`SCHEMA`]; unset keys take the
//! default listed there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SimConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::ParamStore;
use crate::projection::Geometry;
use crate::reconstruction::{AdmmParams, RecombineWeights, Reconstructor};
use crate::training::{TargetMode, TrainConfig};

/// `(key, default, description)`.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("geometry.num_angles", "60", "projection angles over [0, pi)"),
    ("geometry.num_radial_bins", "95", "radial bins per angle, unit spacing"),
    ("geometry.image_size", "64", "image side length in pixels"),
    ("simulate.total_counts", "100000", "expected counts per sinogram, randoms included"),
    ("simulate.randoms_fraction", "0.2", "fraction of counts that are uniform randoms"),
    ("simulate.n_train", "64", "training cases"),
    ("simulate.n_val", "8", "validation cases"),
    ("simulate.n_test", "8", "test cases"),
    ("model.block_channels", "3", "channels N of the sinogram block"),
    ("model.channels", "8,16,32,64", "feature width per level"),
    ("model.heads", "1,2,4,8", "attention heads per level"),
    ("model.blocks", "1,1,1,1", "transformer blocks per level"),
    ("model.ffn_expansion", "2", "hidden width factor of the gated feed-forward"),
    ("model.cp_width", "16", "prior extractor width"),
    ("model.d_scp", "16", "sinogram prior length"),
    ("model.d_mcp", "16", "mask prior length"),
    ("model.denoiser_hidden", "64", "denoiser hidden width"),
    ("model.time_embed_dim", "16", "timestep embedding length (even)"),
    ("masks.enabled", "true", "mask the first N-1 channels"),
    ("masks.block_size", "16", "mask block side"),
    ("masks.coverage", "0.1", "masked fraction per channel"),
    ("masks.hierarchical", "true", "grow crops over stage 1; otherwise use the last size"),
    ("masks.crop_sizes", "16,32,48,64", "crop side per hierarchical phase"),
    ("train.target", "full", "masked-channel target: full or masked"),
    ("train.stage1_iters", "2000", "stage 1 iterations"),
    ("train.stage2_iters", "400", "stage 2 iterations"),
    ("train.lr1", "0.001", "stage 1 Adam learning rate"),
    ("train.lr2", "0.002", "stage 2 Adam learning rate"),
    ("train.beta1", "0.9", "Adam first moment decay"),
    ("train.beta2", "0.99", "Adam second moment decay"),
    ("diffusion.steps", "4", "diffusion steps T"),
    ("diffusion.beta_lo", "0.1", "first beta of the linear schedule"),
    ("diffusion.beta_hi", "0.99", "last beta of the linear schedule"),
    ("recon.omega", "uniform", "channel weights: uniform or N comma separated values"),
    ("recon.admm_iterations", "1", "outer iterations J"),
    ("recon.rho", "1.0", "multiplier penalty"),
    ("recon.mu", "0.1", "regularization weight (recorded, unused by the learned step)"),
    ("recon.eta", "1.0", "relaxation of the restoration step, in (0, 1]"),
    ("recon.mlem_iterations", "60", "MLEM iterations for images"),
    ("recon.pgm", "false", "also write 16-bit PGM images"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    /// `None` means uniform over the block channels.
    pub omega: Option<Vec<f64>>,
    pub admm: AdmmParams,
    pub mlem_iters: usize,
    pub pgm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub recon: ReconConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::from_pairs(&BTreeMap::new()).expect("schema defaults are valid")
    }
}

fn value<'a>(pairs: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    pairs.get(key).map(String::as_str).unwrap_or_else(|| {
        SCHEMA
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, d, _)| *d)
            .expect("key is in the schema")
    })
}

fn get<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = value(pairs, key);
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    value(pairs, key)
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse list item `{}`", s.trim())))
        })
        .collect()
}

impl Config {
    /// Parses config text; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !SCHEMA.iter().any(|(s, _, _)| *s == k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Config::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_pairs(p: &BTreeMap<String, String>) -> Result<Self> {
        let geometry = Geometry {
            num_angles: get(p, "geometry.num_angles")?,
            num_radial_bins: get(p, "geometry.num_radial_bins")?,
            image_size: get(p, "geometry.image_size")?,
        };
        geometry
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let sim = SimConfig {
            geometry,
            total_counts: get(p, "simulate.total_counts")?,
            randoms_fraction: get(p, "simulate.randoms_fraction")?,
            n_train: get(p, "simulate.n_train")?,
            n_val: get(p, "simulate.n_val")?,
            n_test: get(p, "simulate.n_test")?,
        };
        if !(sim.total_counts > 0.0) || !(0.0..1.0).contains(&sim.randoms_fraction) {
            return Err(Error::Config(
                "simulate.total_counts must be positive and randoms_fraction in [0, 1)".into(),
            ));
        }
        let model = ModelConfig {
            block_channels: get(p, "model.block_channels")?,
            channels: list(p, "model.channels")?,
            heads: list(p, "model.heads")?,
            blocks: list(p, "model.blocks")?,
            ffn_expansion: get(p, "model.ffn_expansion")?,
            cp_width: get(p, "model.cp_width")?,
            d_scp: get(p, "model.d_scp")?,
            d_mcp: get(p, "model.d_mcp")?,
            denoiser_hidden: get(p, "model.denoiser_hidden")?,
            time_embed_dim: get(p, "model.time_embed_dim")?,
        };
        let target = match value(p, "train.target") {
            "full" => TargetMode::Full,
            "masked" => TargetMode::Masked,
            other => {
                return Err(Error::Config(format!(
                    "train.target: expected full or masked, got `{other}`"
                )))
            }
        };
        let train = TrainConfig {
            model,
            block_size: get(p, "masks.block_size")?,
            coverage: get(p, "masks.coverage")?,
            masks: get(p, "masks.enabled")?,
            hierarchical: get(p, "masks.hierarchical")?,
            crop_sizes: list(p, "masks.crop_sizes")?,
            target,
            stage1_iters: get(p, "train.stage1_iters")?,
            stage2_iters: get(p, "train.stage2_iters")?,
            lr1: get(p, "train.lr1")?,
            lr2: get(p, "train.lr2")?,
            beta1: get(p, "train.beta1")?,
            beta2: get(p, "train.beta2")?,
            diffusion_steps: get(p, "diffusion.steps")?,
            beta_lo: get(p, "diffusion.beta_lo")?,
            beta_hi: get(p, "diffusion.beta_hi")?,
        };
        train.validate()?;
        let omega = match value(p, "recon.omega") {
            "uniform" => None,
            _ => Some(list(p, "recon.omega")?),
        };
        let recon = ReconConfig {
            omega,
            admm: AdmmParams {
                iterations: get(p, "recon.admm_iterations")?,
                rho: get(p, "recon.rho")?,
                mu: get(p, "recon.mu")?,
                eta: get(p, "recon.eta")?,
            },
            mlem_iters: get(p, "recon.mlem_iterations")?,
            pgm: get(p, "recon.pgm")?,
        };
        recon.admm.validate()?;
        let cfg = Config { sim, train, recon };
        cfg.omega()?;
        Ok(cfg)
    }

    pub fn omega(&self) -> Result<RecombineWeights> {
        let n = self.train.model.block_channels;
        match &self.recon.omega {
            None => Ok(RecombineWeights::uniform(n)),
            Some(w) if w.len() == n => {
                RecombineWeights::new(w.clone()).map_err(|e| Error::Config(format!("recon.omega: {e}")))
            }
            Some(w) => Err(Error::Config(format!(
                "recon.omega has {} weights for {n} channels",
                w.len()
            ))),
        }
    }

    /// Inference engine for `weights` with this configuration's settings.
    pub fn reconstructor(&self, weights: ParamStore<f32>) -> Result<Reconstructor> {
        let mut r = Reconstructor::new(&self.train, weights)?;
        r.omega = self.omega()?;
        r.admm = self.recon.admm;
        r.mlem_iters = self.recon.mlem_iters;
        Ok(r)
    }

    /// The schema as a commented config file holding every default.
    pub fn template() -> String {
        let mut out = String::new();
        for (k, d, help) in SCHEMA {
            let _ = writeln!(out, "# {help}\n{k} = {d}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_library() {
        let c = Config::default();
        assert_eq!(c.sim, SimConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.recon.admm, AdmmParams::default());
        assert_eq!(c.recon.mlem_iters, 60);
        assert_eq!(Config::parse(&Config::template()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = Config::parse(
            "# header\n\ngeometry.image_size = 32  # smaller\nmodel.block_channels=4\nrecon.omega = 0.1,0.2,0.3,0.4\nmasks.crop_sizes = 8, 16\n",
        )
        .unwrap();
        assert_eq!(c.sim.geometry.image_size, 32);
        assert_eq!(c.train.model.block_channels, 4);
        assert_eq!(c.train.crop_sizes, vec![8, 16]);
        assert_eq!(c.omega().unwrap().as_slice(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn rejections() {
        for bad in [
            "geometry.angles = 3",
            "geometry.num_angles = 3\ngeometry.num_angles = 4",
            "geometry.num_angles = many",
            "no equals sign",
            "recon.omega = 0.5,0.5",
            "recon.eta = 2",
            "train.target = half",
            "masks.coverage = 1.5",
            "model.heads = 1,2,4",
            "simulate.randoms_fraction = 1",
        ] {
            assert!(matches!(Config::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
