//! Inference: stack and mask the noisy sinogram, sample the prior, restore with the transformer,
//! recombine channels under the multiplier update, and reconstruct with MLEM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, Sinogram};
use crate::masks::{crop_sinogram, pad_sinogram, SinogramBlock};
use crate::model::{
    cp_extract_lq, norm_scale, sample_smcp, transformer_forward, DiffusionSchedule, MlpDenoiser,
    ModelConfig,
};
use crate::numerics::{drt1, Graph, ParamStore, Scalar, Tensor};
use crate::projection::SystemMatrix;
use crate::rng;
use crate::training::{canvas, TrainConfig};

/// Channel weights `omega_0..omega_{N-1}`, nonnegative and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RecombineWeights(Vec<f64>);

impl RecombineWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract(format!(
                "recombination weights must be nonnegative: {w:?}"
            )));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "recombination weights sum to {s}, not 1"
            )));
        }
        Ok(RecombineWeights(w))
    }

    pub fn uniform(n: usize) -> Self {
        RecombineWeights(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        RecombineWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `sum_i omega_i * channel_i` over a `(N, h, w)` tensor.
pub fn recombine_tensor<T: Scalar>(t: &Tensor<T>, omega: &RecombineWeights) -> Result<Sinogram<T>> {
    let d = t.dims();
    if d.len() != 3 || d[0] != omega.0.len() {
        return Err(Error::Contract(format!(
            "{} weights for a block of shape {d:?}",
            omega.0.len()
        )));
    }
    let plane = d[1] * d[2];
    let mut out = vec![T::zero(); plane];
    for (i, &wi) in omega.0.iter().enumerate() {
        let wi = T::lit(wi);
        for (o, &v) in out.iter_mut().zip(&t.data()[i * plane..(i + 1) * plane]) {
            *o += wi * v;
        }
    }
    Sinogram::new(d[1], d[2], out)
}

pub fn recombine<T: Scalar>(block: &SinogramBlock<T>, omega: &RecombineWeights) -> Result<Sinogram<T>> {
    recombine_tensor(block.tensor(), omega)
}

/// `sum_m S_m log(GI)_m - (GI)_m`; bins with zero expectation contribute 0 if empty, `-inf`
/// otherwise.
pub fn poisson_log_likelihood<T: Scalar>(g: &SystemMatrix<T>, s: &Sinogram<T>, img: &Image<T>) -> Result<f64> {
    let proj = g.forward_project(img)?;
    let mut ll = 0.0;
    for (&sm, &pm) in s.data().iter().zip(proj.data()) {
        let (sm, pm) = (sm.as_f64(), pm.as_f64());
        if pm > 0.0 {
            ll += sm * pm.ln() - pm;
        } else if sm > 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(ll)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlemOutput<T> {
    pub image: Image<T>,
    /// Log-likelihood of the initial image and after every iteration.
    pub log_likelihood: Vec<f64>,
    /// Pixels no ray touches; they keep their initial value.
    pub untouched: Vec<usize>,
}

fn mlem_inner<T: Scalar>(
    g: &SystemMatrix<T>,
    s: &Sinogram<T>,
    iterations: usize,
    init: &Image<T>,
    trace: bool,
) -> Result<MlemOutput<T>> {
    let geom = g.geometry();
    let n = geom.image_size;
    if init.shape() != (n, n) {
        return Err(Error::dim("mlem", format!("init {:?} for a {n}x{n} image", init.shape())));
    }
    if s.shape() != (geom.num_angles, geom.num_radial_bins) {
        return Err(Error::dim(
            "mlem",
            format!(
                "sinogram {:?} for {}x{} bins",
                s.shape(),
                geom.num_angles,
                geom.num_radial_bins
            ),
        ));
    }
    if init.data().iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::Contract("MLEM init must be strictly positive".into()));
    }
    if s.data().iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::Contract("MLEM data must be finite and nonnegative".into()));
    }
    let sens = g.sensitivity();
    let untouched: Vec<usize> = sens
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= T::zero())
        .map(|(i, _)| i)
        .collect();
    let mut img = init.data().to_vec();
    let mut ll = Vec::new();
    if trace {
        ll.push(poisson_log_likelihood(g, s, init)?);
    }
    for _ in 0..iterations {
        let proj = g.apply(&img);
        let ratio: Vec<T> = proj
            .iter()
            .zip(s.data())
            .map(|(&p, &sm)| if p > T::zero() { sm / p } else { T::zero() })
            .collect();
        let back = g.apply_transpose(&ratio);
        for ((v, &b), &sn) in img.iter_mut().zip(&back).zip(&sens) {
            if sn > T::zero() {
                *v = *v * b / sn;
            }
        }
        if trace {
            ll.push(poisson_log_likelihood(g, s, &Image::new(n, n, img.clone())?)?);
        }
    }
    Ok(MlemOutput {
        image: Image::new(n, n, img)?,
        log_likelihood: ll,
        untouched,
    })
}

/// Multiplicative EM update `I <- I * G^T(S / GI) / G^T 1`, with `0/0` ratios taken as 0.
pub fn mlem<T: Scalar>(g: &SystemMatrix<T>, s: &Sinogram<T>, iterations: usize, init: &Image<T>) -> Result<Image<T>> {
    Ok(mlem_inner(g, s, iterations, init, false)?.image)
}

/// [`mlem`] that also records the log-likelihood trajectory.
pub fn mlem_traced<T: Scalar>(
    g: &SystemMatrix<T>,
    s: &Sinogram<T>,
    iterations: usize,
    init: &Image<T>,
) -> Result<MlemOutput<T>> {
    mlem_inner(g, s, iterations, init, true)
}

pub fn uniform_init<T: Scalar>(g: &SystemMatrix<T>) -> Image<T> {
    let n = g.geometry().image_size;
    Image::filled(n, n, T::one())
}

/// `||G MLEM(S_all) - S_noisy||^2 / bins`: agreement of the recombined sinogram's reconstruction
/// with the measurement.
pub fn data_fidelity<T: Scalar>(
    s_all: &Sinogram<T>,
    s_noisy: &Sinogram<T>,
    g: &SystemMatrix<T>,
    mlem_iters: usize,
) -> Result<f64> {
    s_all.ensure_same_shape(s_noisy, "data_fidelity")?;
    let img = mlem(g, &s_all.map(|v| v.max(T::zero())), mlem_iters, &uniform_init(g))?;
    let proj = g.forward_project(&img)?;
    let sq: f64 = proj
        .data()
        .iter()
        .zip(s_noisy.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sq / s_noisy.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmParams {
    pub iterations: usize,
    pub rho: f64,
    pub mu: f64,
    pub eta: f64,
}

impl Default for AdmmParams {
    fn default() -> Self {
        AdmmParams {
            iterations: 1,
            rho: 1.0,
            mu: 0.1,
            eta: 1.0,
        }
    }
}

impl AdmmParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("admm iterations must be >= 1".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be nonnegative, got {}", self.mu)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// `lambda + rho (s_all - target)`.
pub fn lambda_update<T: Scalar>(
    lambda: &Sinogram<T>,
    s_all: &Sinogram<T>,
    target: &Sinogram<T>,
    rho: f64,
) -> Result<Sinogram<T>> {
    lambda.ensure_same_shape(s_all, "lambda_update")?;
    lambda.ensure_same_shape(target, "lambda_update")?;
    let rho = T::lit(rho);
    Sinogram::new(
        lambda.rows(),
        lambda.cols(),
        (0..lambda.len())
            .map(|i| lambda.data()[i] + rho * (s_all.data()[i] - target.data()[i]))
            .collect(),
    )
}

/// Trained weights plus the inference settings that must match how they were trained.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub model: ModelConfig,
    pub weights: ParamStore<f32>,
    pub schedule: DiffusionSchedule,
    pub train: TrainConfig,
    pub omega: RecombineWeights,
    pub admm: AdmmParams,
    pub mlem_iters: usize,
}

impl Reconstructor {
    pub fn new(train: &TrainConfig, weights: ParamStore<f32>) -> Result<Self> {
        train.validate()?;
        let template = train.model.shape_template::<f32>();
        for (name, t) in template.iter() {
            match weights.get(name) {
                Some(w) if w.dims() == t.dims() => {}
                Some(w) => {
                    return Err(Error::Contract(format!(
                        "weight `{name}` has shape {:?}, expected {:?}",
                        w.dims(),
                        t.dims()
                    )))
                }
                None => return Err(Error::Contract(format!("weights lack `{name}`"))),
            }
        }
        if weights
            .get("transformer.out")
            .is_some_and(|t| t.data().iter().all(|&v| v == 0.0))
        {
            return Err(Error::Contract(
                "weights are untrained (zero output projection)".into(),
            ));
        }
        norm_scale(&weights)?;
        Ok(Reconstructor {
            model: train.model.clone(),
            weights,
            schedule: train.diffusion()?,
            train: train.clone(),
            omega: RecombineWeights::uniform(train.model.block_channels),
            admm: AdmmParams::default(),
            mlem_iters: 60,
        })
    }

    fn prepare(&self, noisy: &Sinogram<f32>, seed: u64) -> Result<(SinogramBlock<f32>, f32)> {
        if noisy.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("noisy sinogram has non-finite values".into()));
        }
        let scale = norm_scale(&self.weights)?;
        let (h, w) = canvas(noisy.rows(), noisy.cols());
        let s = pad_sinogram(&noisy.map(|v| v / scale), h, w)?;
        let block = self
            .train
            .noisy_block(&s, rng::substream_seed(seed, "recon-masks", 0))?;
        Ok((block, scale))
    }

    fn prior(&self, g: &mut Graph<f32>, block: crate::numerics::Var, seed: u64) -> Result<crate::numerics::Var> {
        let cond = cp_extract_lq(g, &self.weights, &self.model, block)?;
        let d = MlpDenoiser {
            weights: &self.weights,
            cfg: &self.model,
            schedule: &self.schedule,
        };
        sample_smcp(g, &d, cond, &self.schedule, rng::substream_seed(seed, "recon-prior", 0))
    }

    fn finish(&self, s: &Sinogram<f32>, rows: usize, cols: usize, scale: f32) -> Result<Sinogram<f32>> {
        let out = crop_sinogram(s, rows, cols)?.map(|v| (v * scale).max(0.0));
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("restored sinogram has non-finite values".into()));
        }
        Ok(out)
    }

    /// Single restoration pass with the outputs recombined: the `J = 1, eta = 1` path.
    pub fn feedforward(&self, noisy: &Sinogram<f32>, seed: u64) -> Result<Sinogram<f32>> {
        let (block, scale) = self.prepare(noisy, seed)?;
        let mut g = Graph::new();
        let x = g.constant(block.tensor().clone());
        let phi = self.prior(&mut g, x, seed)?;
        let out = transformer_forward(&mut g, &self.weights, &self.model, x, phi)?;
        let s = recombine_tensor(g.value(out), &self.omega)?;
        self.finish(&s, noisy.rows(), noisy.cols(), scale)
    }

    /// Relaxed restoration passes alternating with the multiplier update; returns `S'`.
    pub fn admm_reconstruct(&self, noisy: &Sinogram<f32>, seed: u64) -> Result<Sinogram<f32>> {
        self.admm.validate()?;
        let (block, scale) = self.prepare(noisy, seed)?;
        let mut g = Graph::new();
        let x = g.constant(block.tensor().clone());
        let phi = self.prior(&mut g, x, seed)?;
        let phi = g.value(phi).clone();
        let target = recombine(&block, &self.omega)?;
        let mut lambda = Sinogram::zeros(target.rows(), target.cols());
        let mut current = block.tensor().clone();
        let (eta, rho) = (self.admm.eta as f32, self.admm.rho as f32);
        let mut s_all = target.clone();
        for _ in 0..self.admm.iterations {
            let mut g = Graph::new();
            let xv = g.constant(current.clone());
            let pv = g.constant(phi.clone());
            let out = transformer_forward(&mut g, &self.weights, &self.model, xv, pv)?;
            let out = g.value(out);
            current = Tensor::from_fn(current.dims(), |i| {
                (1.0 - eta) * current.data()[i] + eta * out.data()[i]
            });
            let s = recombine_tensor(&current, &self.omega)?;
            s_all = Sinogram::new(
                s.rows(),
                s.cols(),
                s.data()
                    .iter()
                    .zip(lambda.data())
                    .map(|(&v, &l)| v - l / rho)
                    .collect(),
            )?;
            lambda = lambda_update(&lambda, &s, &target, self.admm.rho)?;
        }
        self.finish(&s_all, noisy.rows(), noisy.cols(), scale)
    }

    /// `(S', I')` with `I' = MLEM(S')` from a uniform start.
    pub fn full_pipeline(
        &self,
        g: &SystemMatrix<f32>,
        noisy: &Sinogram<f32>,
        seed: u64,
    ) -> Result<(Sinogram<f32>, Image<f32>)> {
        let s = self.admm_reconstruct(noisy, seed)?;
        let img = mlem(g, &s, self.mlem_iters, &uniform_init(g))?;
        Ok((s, img))
    }
}

/// MLEM on the measurement itself, for comparison.
pub fn baseline_mlem(g: &SystemMatrix<f32>, noisy: &Sinogram<f32>, iterations: usize) -> Result<Image<f32>> {
    mlem(g, noisy, iterations, &uniform_init(g))
}

/// Binary 16-bit PGM (P5, big-endian), min-max normalized with round-half-away-from-zero.
pub fn pgm16<T: Scalar>(img: &Image<T>) -> Vec<u8> {
    let (lo, hi) = (img.min().as_f64(), img.max().as_f64());
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", img.cols(), img.rows()).into_bytes();
    for &v in img.data() {
        let q = if span > 0.0 {
            ((v.as_f64() - lo) / span * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    drt1::write_atomic(path, &pgm16(img))
}

#[cfg(test)]
mod tests;
