//! Dataset level protocol shared by the command line and the acceptance suite: train on the
//! training split, reconstruct a split with the model and with plain MLEM, and score both.

use std::path::Path;

use crate::config::Config;
use crate::data::{Case, Dataset, Split};
use crate::error::Result;
use crate::grid::{Image, Sinogram};
use crate::metrics::{evaluate, MetricReport};
use crate::numerics::ParamStore;
use crate::projection::SystemMatrix;
use crate::reconstruction::{baseline_mlem, Reconstructor};
use crate::rng;
use crate::training::{data_scale, prepare_samples, train, Stages, TrainOutput};

/// Trains on the training split; the data scale comes from the same cases.
pub fn train_dataset(
    cfg: &Config,
    ds: &Dataset,
    seed: u64,
    stages: Stages,
    init: Option<ParamStore<f32>>,
    out: Option<&Path>,
) -> Result<TrainOutput> {
    let cases: Vec<&Case> = ds.split(Split::Train).collect();
    let scale = match &init {
        Some(w) => crate::model::norm_scale(w)?,
        None => data_scale(cases.iter().copied())?,
    };
    let samples = prepare_samples(cases.iter().copied(), scale)?;
    train(&cfg.train, &samples, scale, seed, stages, init, out)
}

/// Per-case seed keyed by the case id, so results do not depend on case order or job count.
pub fn case_seed(seed: u64, case_id: &str) -> u64 {
    rng::substream_seed(seed, &format!("case:{case_id}"), 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    pub sinogram: Sinogram<f32>,
    pub image: Image<f32>,
}

pub enum Method<'a> {
    Model(&'a Reconstructor),
    Mlem(usize),
}

pub fn reconstruct_case(method: &Method, g: &SystemMatrix<f32>, case: &Case, seed: u64) -> Result<CaseResult> {
    let noisy = case.noisy();
    let (sinogram, image) = match method {
        Method::Model(r) => r.full_pipeline(g, &noisy, case_seed(seed, &case.id))?,
        Method::Mlem(iters) => {
            let img = baseline_mlem(g, &noisy, *iters)?;
            (noisy, img)
        }
    };
    Ok(CaseResult {
        case_id: case.id.clone(),
        sinogram,
        image,
    })
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn par_map<I: Sync, O: Send>(
    items: &[I],
    jobs: usize,
    f: impl Fn(&I) -> Result<O> + Sync,
) -> Result<Vec<O>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

pub fn reconstruct_split(
    method: &Method,
    g: &SystemMatrix<f32>,
    ds: &Dataset,
    split: Split,
    seed: u64,
    jobs: usize,
) -> Result<Vec<CaseResult>> {
    let cases: Vec<&Case> = ds.split(split).collect();
    par_map(&cases, jobs, |c| reconstruct_case(method, g, c, seed))
}

/// Scores reconstructed images against the phantoms of the same cases.
pub fn score(results: &[CaseResult], ds: &Dataset) -> Result<MetricReport> {
    let mut cases = Vec::with_capacity(results.len());
    for r in results {
        let reference = ds
            .cases
            .iter()
            .find(|c| c.id == r.case_id)
            .ok_or_else(|| crate::Error::Data(format!("no reference for case `{}`", r.case_id)))?;
        cases.push(evaluate(&r.case_id, &r.image, &reference.phantom)?);
    }
    Ok(MetricReport { cases })
}

/// Model and MLEM reports on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub model: MetricReport,
    pub mlem: MetricReport,
}

impl Comparison {
    pub fn psnr_gain(&self) -> f64 {
        self.model.mean().psnr - self.mlem.mean().psnr
    }
}

pub fn compare(
    cfg: &Config,
    weights: ParamStore<f32>,
    g: &SystemMatrix<f32>,
    ds: &Dataset,
    split: Split,
    seed: u64,
    jobs: usize,
) -> Result<Comparison> {
    let rec = cfg.reconstructor(weights)?;
    let model = reconstruct_split(&Method::Model(&rec), g, ds, split, seed, jobs)?;
    let mlem = reconstruct_split(&Method::Mlem(cfg.recon.mlem_iters), g, ds, split, seed, jobs)?;
    Ok(Comparison {
        model: score(&model, ds)?,
        mlem: score(&mlem, ds)?,
    })
}
