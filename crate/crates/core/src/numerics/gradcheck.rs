//! Central finite-difference checks of reverse-mode gradients.
//!
//! The check only ever evaluates forward values; it shares nothing with the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` pairs, one per probe.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares directional derivatives along `probes` random unit directions over all inputs
/// jointly. Half the probes are dense Gaussian directions, the rest single coordinates.
pub fn check<F>(inputs: &[Tensor<f64>], probes: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        probes,
        max_rel_err: 0.0,
        pairs: Vec::with_capacity(probes),
    };
    for probe in 0..probes {
        let mut dir: Vec<f64> = if probe % 2 == 0 {
            (0..total).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            let mut d = vec![0.0; total];
            d[rng.gen_range(0..total)] = 1.0;
            d
        };
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);

        let shifted = |step: f64| -> Vec<Tensor<f64>> {
            let mut off = 0;
            inputs
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    for (x, d) in t.data_mut().iter_mut().zip(&dir[off..]) {
                        *x += step * d;
                    }
                    off += t.len();
                    t
                })
                .collect()
        };
        let central = |h: f64| -> Result<f64> { Ok((eval(&shifted(h))? - eval(&shifted(-h))?) / (2.0 * h)) };
        // Richardson extrapolation cancels the O(h^2) truncation term.
        let numeric = (4.0 * central(FD_STEP / 2.0)? - central(FD_STEP)?) / 3.0;
        let mut exact = 0.0;
        let mut off = 0;
        for a in &analytic {
            exact += a
                .data()
                .iter()
                .zip(&dir[off..])
                .map(|(g, d)| g * d)
                .sum::<f64>();
            off += a.len();
        }
        report.max_rel_err = report.max_rel_err.max(rel_err(exact, numeric));
        report.pairs.push((exact, numeric));
    }
    Ok(report)
}

/// Reduces a tensor output to a scalar through a fixed random weighting so every output
/// element contributes to the checked gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = g.dims(out).to_vec();
    let w = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Gaussian test tensor.
pub fn randn(dims: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| scale * rng.sample::<f64, _>(StandardNormal))
}
