use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{linear, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng;

/// Noise levels `beta_1..beta_T` with `alpha_t = 1 - beta_t` and `alpha_bar_t = prod alpha_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    /// `steps` betas evenly spaced over `[lo, hi]`.
    pub fn linear(steps: usize, lo: f64, hi: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..steps)
                .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn gaussian<T: Scalar>(dims: &[usize], seed: u64, purpose: &str, index: u64) -> Tensor<T> {
    let mut r = rng::substream(seed, purpose, index);
    Tensor::from_fn(dims, |_| T::lit(r.sample::<f64, _>(StandardNormal)))
}

/// `phi_t = sqrt(abar_t) phi + sqrt(1 - abar_t) eps`; returns `(phi_t, eps)`.
pub fn diffuse_forward<T: Scalar>(
    phi: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    sched.check_step(t)?;
    let eps = gaussian::<T>(phi.dims(), seed, "diffusion", t as u64);
    let (a, b) = (
        T::lit(sched.alpha_bar(t).sqrt()),
        T::lit((1.0 - sched.alpha_bar(t)).sqrt()),
    );
    let data = phi
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| a * p + b * e)
        .collect();
    Ok((Tensor::new(phi.dims().to_vec(), data)?, eps))
}

/// Single forward step from `phi_{t-1}` that the reverse update undoes exactly:
/// `sqrt(alpha_t) phi_{t-1} + (1 - alpha_t) / sqrt(1 - abar_t) eps`.
pub fn diffuse_one_step<T: Scalar>(
    phi_prev: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if !phi_prev.same_dims(eps) {
        return Err(Error::dim(
            "diffuse_one_step",
            format!("{:?} vs {:?}", phi_prev.dims(), eps.dims()),
        ));
    }
    let a = T::lit(sched.alpha(t).sqrt());
    let c = T::lit((1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(Tensor::from_fn(phi_prev.dims(), |i| {
        a * phi_prev.data()[i] + c * eps.data()[i]
    }))
}

/// `(phi_t - eps_hat (1 - alpha) / sqrt(1 - abar)) / sqrt(alpha)`, no stochastic term.
pub fn reverse_update<T: Scalar>(
    phi_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    alpha: f64,
    alpha_bar: f64,
) -> Tensor<T> {
    let c = if alpha == 1.0 {
        0.0
    } else {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    };
    let (c, inv) = (T::lit(c), T::lit(1.0 / alpha.sqrt()));
    Tensor::from_fn(phi_t.dims(), |i| {
        (phi_t.data()[i] - c * eps_hat.data()[i]) * inv
    })
}

/// Predicts the noise component of `phi_t` at step `t` given a condition vector.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, g: &mut Graph<T>, phi_t: Var, t: usize, cond: Var) -> Result<Var>;
}

/// Three fully connected layers on `phi_t ++ cond ++ embed(t)`. The network output is read as
/// an estimate of the clean prior and converted to noise, `(phi_t - sqrt(abar_t) out) /
/// sqrt(1 - abar_t)`, so errors in it are not amplified by the reverse step.
pub struct MlpDenoiser<'a, T> {
    pub weights: &'a ParamStore<T>,
    pub cfg: &'a ModelConfig,
    pub schedule: &'a DiffusionSchedule,
}

impl<T: Scalar> NoisePredictor<T> for MlpDenoiser<'_, T> {
    fn predict(&self, g: &mut Graph<T>, phi_t: Var, t: usize, cond: Var) -> Result<Var> {
        let w = self.weights;
        let emb = g.constant(timestep_embedding(t, self.cfg.time_embed_dim));
        let x = g.concat(&[phi_t, cond, emb])?;
        let mut h = x;
        for (layer, act) in [("l1", true), ("l2", true), ("l3", false)] {
            let wt = g.param(w, &format!("denoiser.{layer}.w"))?;
            let b = g.param(w, &format!("denoiser.{layer}.b"))?;
            h = linear(g, h, wt, Some(b))?;
            if act {
                h = g.gelu(h);
            }
        }
        let ab = self.schedule.alpha_bar(t);
        if !(ab < 1.0) {
            return Err(Error::Contract(format!("step {t} has no noise to predict")));
        }
        let inv = 1.0 / (1.0 - ab).sqrt();
        let clean = g.scale(h, T::lit(ab.sqrt() * inv));
        let cur = g.scale(phi_t, T::lit(inv));
        g.sub(cur, clean)
    }
}

/// Knows the clean prior and returns the exact noise `(phi_t - sqrt(abar_t) phi) / sqrt(1 - abar_t)`.
pub struct OracleDenoiser<T> {
    pub phi: Tensor<T>,
    pub schedule: DiffusionSchedule,
}

impl<T: Scalar> NoisePredictor<T> for OracleDenoiser<T> {
    fn predict(&self, g: &mut Graph<T>, phi_t: Var, t: usize, _cond: Var) -> Result<Var> {
        let a = T::lit(self.schedule.alpha_bar(t).sqrt());
        let inv = T::lit(1.0 / (1.0 - self.schedule.alpha_bar(t)).sqrt());
        let cur = g.value(phi_t);
        let eps = Tensor::from_fn(cur.dims(), |i| (cur.data()[i] - a * self.phi.data()[i]) * inv);
        Ok(g.constant(eps))
    }
}

/// `[sin(t f_k), cos(t f_k)]` with frequencies spaced geometrically from 1 to 1/1000.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[dim], |i| {
        let k = i % half;
        let f = (-(1000f64).ln() * k as f64 / half as f64).exp();
        let x = t as f64 * f;
        T::lit(if i < half { x.sin() } else { x.cos() })
    })
}

/// One reverse step on the graph: `phi_{t-1}` from `phi_t` and the predicted noise.
pub fn denoise_step<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    predictor: &P,
    phi_t: Var,
    t: usize,
    cond: Var,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    sched.check_step(t)?;
    let eps = predictor.predict(g, phi_t, t, cond)?;
    let c = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    let scaled = g.scale(eps, T::lit(c));
    let diff = g.sub(phi_t, scaled)?;
    Ok(g.scale(diff, T::lit(1.0 / sched.alpha(t).sqrt())))
}

/// Runs steps `T..=1` from `phi_T`.
pub fn rollout<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    predictor: &P,
    phi_big_t: Var,
    cond: Var,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let mut phi = phi_big_t;
    for t in (1..=sched.steps()).rev() {
        phi = denoise_step(g, predictor, phi, t, cond, sched)?;
    }
    Ok(phi)
}

/// Prior estimate from standard normal `phi_T` drawn from the seed.
pub fn sample_smcp<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    predictor: &P,
    cond: Var,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Var> {
    let dims = g.dims(cond).to_vec();
    let start = g.constant(gaussian(&dims, seed, "smcp", 0));
    rollout(g, predictor, start, cond, sched)
}
