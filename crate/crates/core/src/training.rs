//! Two-stage optimization: stage 1 fits the prior extractor and transformer jointly, stage 2 fits
//! the condition encoder and denoiser with stage-1 weights frozen.
//!
//! Every iteration derives its sample, masks, crop and noise from `(seed, stage, iteration)`, so a
//! run resumed from a checkpoint continues bit-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::Rng as _;

use crate::data::Case;
use crate::error::{Error, Result};
use crate::grid::Sinogram;
use crate::masks::{
    build_block, build_unmasked_block, crop_offset, crop_size_at, pad_sinogram,
    HierarchicalSchedule, SinogramBlock,
};
use crate::model::{
    cp_extract_full, cp_extract_lq, diffuse_forward, rollout, transformer_forward,
    DiffusionSchedule, MlpDenoiser, ModelConfig, NoisePredictor, NORM_SCALE,
};
use crate::numerics::{drt1, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng;

pub const LOSS_CSV_HEADER: &str = "iteration,stage,crop_size,loss";

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        OptimizerState {
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.m.save(&dir.join("adam_m"))?;
        self.v.save(&dir.join("adam_v"))?;
        let text = format!(
            "step\t{}\nlr\t{:e}\nbeta1\t{:e}\nbeta2\t{:e}\neps\t{:e}\n",
            self.step, self.lr, self.beta1, self.beta2, self.eps
        );
        drt1::write_atomic(&dir.join("adam.tsv"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("adam.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('\t') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            fields.get(k).ok_or_else(|| Error::Format {
                path: path.clone(),
                detail: format!("missing `{k}`"),
            })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Format {
                path: path.clone(),
                detail: format!("bad `{k}`"),
            })
        };
        Ok(OptimizerState {
            step: get("step")?.parse().map_err(|_| Error::Format {
                path: path.clone(),
                detail: "bad `step`".into(),
            })?,
            lr: num("lr")?,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
            m: ParamStore::load(&dir.join("adam_m"))?,
            v: ParamStore::load(&dir.join("adam_v"))?,
        })
    }
}

/// One Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    st: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if !p.same_dims(g) {
            return Err(Error::dim(
                "adam_step",
                format!("{name}: param {:?} vs grad {:?}", p.dims(), g.dims()),
            ));
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let (b1, b2) = (st.beta1, st.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let dims = g.dims().to_vec();
        if st.m.get(name).is_none() {
            st.m.insert(name.clone(), Tensor::zeros(&dims));
            st.v.insert(name.clone(), Tensor::zeros(&dims));
        }
        let m = st.m.get_mut(name).unwrap().data_mut();
        let v = st.v.get_mut(name).unwrap().data_mut();
        let p = params.get_mut(name).unwrap().data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let update = st.lr * (mi / c1) / ((vi / c2).sqrt() + st.eps);
            p[i] -= T::lit(update);
        }
    }
    Ok(())
}

/// What the network is asked to reproduce in the masked channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// Every channel targets the full clean sinogram.
    Full,
    /// Masked channels target the clean sinogram under the same mask.
    Masked,
}

/// Training ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// No masks and a constant full-size crop.
    NoMasks,
    /// Growing crops, no masks.
    HierOnly,
    /// Growing crops and masked channels.
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no-masks" => Ok(Variant::NoMasks),
            "hier-only" => Ok(Variant::HierOnly),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected no-masks, hier-only or full)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoMasks => "no-masks",
            Variant::HierOnly => "hier-only",
            Variant::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub block_size: usize,
    pub coverage: f64,
    pub masks: bool,
    pub hierarchical: bool,
    pub crop_sizes: Vec<usize>,
    pub target: TargetMode,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub lr1: f64,
    pub lr2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub diffusion_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            block_size: 16,
            coverage: 0.10,
            masks: true,
            hierarchical: true,
            crop_sizes: vec![16, 32, 48, 64],
            target: TargetMode::Full,
            stage1_iters: 2000,
            stage2_iters: 400,
            lr1: 1e-3,
            lr2: 2e-3,
            beta1: 0.9,
            beta2: 0.99,
            diffusion_steps: 4,
            beta_lo: 0.1,
            beta_hi: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.masks = v == Variant::Full;
        self.hierarchical = v != Variant::NoMasks;
        self
    }

    pub fn schedule(&self) -> Result<HierarchicalSchedule> {
        let last = *self
            .crop_sizes
            .last()
            .ok_or_else(|| Error::Config("empty crop size list".into()))?;
        if self.hierarchical {
            HierarchicalSchedule::proportional(self.stage1_iters, self.crop_sizes.clone())
        } else {
            Ok(HierarchicalSchedule::constant(last))
        }
    }

    pub fn diffusion(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_lo, self.beta_hi)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        self.diffusion()?;
        if self.masks && !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::Config(format!("coverage {} outside (0, 1)", self.coverage)));
        }
        for (k, v) in [("lr1", self.lr1), ("lr2", self.lr2)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Noisy block for a (padded, normalized) sinogram under this configuration's mask policy.
    pub fn noisy_block<T: Scalar>(&self, s: &Sinogram<T>, seed: u64) -> Result<SinogramBlock<T>> {
        let n = self.model.block_channels;
        if self.masks {
            build_block(s, n, self.block_size, self.coverage, seed)
        } else {
            build_unmasked_block(s, n)
        }
    }

    /// Training target matching `noisy`'s masks.
    pub fn clean_block<T: Scalar>(
        &self,
        clean: &Sinogram<T>,
        noisy: &SinogramBlock<T>,
    ) -> Result<SinogramBlock<T>> {
        match self.target {
            TargetMode::Full => {
                let full = build_unmasked_block(clean, self.model.block_channels)?;
                SinogramBlock::from_tensor(full.tensor().clone(), noisy.masks().to_vec())
            }
            TargetMode::Masked => SinogramBlock::from_masks(clean, noisy.masks().to_vec()),
        }
    }
}

/// Extents rounded up to the multiple of 8 the network and crop schedule work on.
pub fn canvas(rows: usize, cols: usize) -> (usize, usize) {
    (rows.div_ceil(8) * 8, cols.div_ceil(8) * 8)
}

/// Clean/noisy pair on the padded canvas, in network units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub clean: Sinogram<f32>,
    pub noisy: Sinogram<f32>,
}

/// Mean calibrated noisy value over the given cases; the network works in units of it.
pub fn data_scale<'a>(cases: impl IntoIterator<Item = &'a Case>) -> Result<f32> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for c in cases {
        let noisy = c.noisy();
        sum += noisy.data().iter().map(|&v| v as f64).sum::<f64>();
        n += noisy.len();
    }
    if n == 0 || !(sum > 0.0) {
        return Err(Error::Data("cannot derive a data scale from an empty training set".into()));
    }
    Ok((sum / n as f64) as f32)
}

pub fn prepare_samples<'a>(
    cases: impl IntoIterator<Item = &'a Case>,
    scale: f32,
) -> Result<Vec<TrainSample>> {
    let inv = 1.0 / scale;
    cases
        .into_iter()
        .map(|c| {
            let (h, w) = canvas(c.clean.rows(), c.clean.cols());
            Ok(TrainSample {
                clean: pad_sinogram(&c.clean.map(|v| v * inv), h, w)?,
                noisy: pad_sinogram(&c.noisy().map(|v| v * inv), h, w)?,
            })
        })
        .collect()
}

fn l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean absolute error of the transformer output guided by the full-information prior.
pub fn stage1_loss<T: Scalar>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    cfg: &ModelConfig,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
) -> Result<Var> {
    g.freeze_prefix("cp_lq.");
    g.freeze_prefix("denoiser.");
    let c = g.constant(clean.clone());
    let n = g.constant(noisy.clone());
    let phi = cp_extract_full(g, w, cfg, c, n)?;
    let out = transformer_forward(g, w, cfg, n, phi)?;
    l1(g, out, c)
}

fn finite_loss(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite loss {v} at {}", what())))
    }
}

/// Loss before the update; the update touches the prior extractor and transformer only.
pub fn stage1_step<T: Scalar>(
    w: &mut ParamStore<T>,
    cfg: &ModelConfig,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    opt: &mut OptimizerState<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = stage1_loss(&mut g, w, cfg, clean, noisy)?;
    let value = finite_loss(g.value(loss).data()[0].as_f64(), || "stage 1".into())?;
    let grads = g.backward(loss)?.named();
    adam_step(w, &grads, opt)?;
    Ok(value)
}

/// Mean absolute error between the reverse rollout from the forward-diffused target prior and the
/// target prior itself.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    w: &ParamStore<T>,
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    predictor: &P,
    seed: u64,
) -> Result<Var> {
    g.freeze_prefix("cp_full.");
    g.freeze_prefix("transformer.");
    let c = g.constant(clean.clone());
    let n = g.constant(noisy.clone());
    let phi = cp_extract_full(g, w, cfg, c, n)?;
    let target = g.value(phi).clone();
    let (phi_t, _) = diffuse_forward(&target, sched.steps(), sched, seed)?;
    let start = g.constant(phi_t);
    let cond = cp_extract_lq(g, w, cfg, n)?;
    let out = rollout(g, predictor, start, cond, sched)?;
    let target = g.constant(target);
    l1(g, out, target)
}

/// Loss before the update; the update touches the condition encoder and denoiser only.
pub fn stage2_step<T: Scalar>(
    w: &mut ParamStore<T>,
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    opt: &mut OptimizerState<T>,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = {
        let d = MlpDenoiser {
            weights: &*w,
            cfg,
            schedule: sched,
        };
        stage2_loss(&mut g, w, cfg, sched, clean, noisy, &d, seed)?
    };
    let value = finite_loss(g.value(loss).data()[0].as_f64(), || "stage 2".into())?;
    let grads = g.backward(loss)?.named();
    adam_step(w, &grads, opt)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub stage: u8,
    pub crop_size: usize,
    pub loss: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{:?}", r.iteration, r.stage, r.crop_size, r.loss);
    }
    out
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(losses.len());
    for (i, &l) in losses.iter().enumerate() {
        acc += l;
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    One,
    Two,
    Both,
}

impl Stages {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stages::One),
            "2" => Ok(Stages::Two),
            "both" => Ok(Stages::Both),
            _ => Err(Error::Config(format!("--stage must be 1, 2 or both, got `{s}`"))),
        }
    }
}

/// Resumable training state: weights plus the optimizer of the stage in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: ParamStore<f32>,
    pub opt: OptimizerState<f32>,
    pub stage: u8,
    /// Completed iterations of `stage`.
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, scale: f32, seed: u64) -> Result<Self> {
        let mut weights = crate::model::init_weights::<f32>(&cfg.model, rng::substream_seed(seed, "init", 0))?;
        weights.insert(NORM_SCALE, Tensor::full(&[1], scale));
        Ok(TrainState {
            weights,
            opt: OptimizerState::new(cfg.lr1, cfg.beta1, cfg.beta2),
            stage: 1,
            iteration: 0,
        })
    }

    /// Stage-2 start from stage-1 weights.
    pub fn stage_two(cfg: &TrainConfig, weights: ParamStore<f32>) -> Self {
        TrainState {
            weights,
            opt: OptimizerState::new(cfg.lr2, cfg.beta1, cfg.beta2),
            stage: 2,
            iteration: 0,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.weights.save(&dir.join("weights"))?;
        self.opt.save(&dir.join("optimizer"))?;
        let text = format!("stage\t{}\niteration\t{}\n", self.stage, self.iteration);
        drt1::write_atomic(&dir.join("state.tsv"), text.as_bytes())
    }

    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let path = dir.join("state.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let field = |k: &str| -> Result<u64> {
            text.lines()
                .find_map(|l| l.strip_prefix(&format!("{k}\t")))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.clone(),
                    detail: format!("missing or bad `{k}`"),
                })
        };
        let template = cfg.model.shape_template::<f32>();
        Ok(TrainState {
            weights: ParamStore::load_checked(&dir.join("weights"), &template)?,
            opt: OptimizerState::load(&dir.join("optimizer"))?,
            stage: field("stage")? as u8,
            iteration: field("iteration")?,
        })
    }
}

/// Crop size used by `stage` at 1-based `iteration`.
pub fn crop_for(cfg: &TrainConfig, stage: u8, iteration: u64) -> Result<usize> {
    let sched = cfg.schedule()?;
    Ok(if stage == 1 {
        crop_size_at(iteration, &sched)
    } else {
        sched.final_size()
    })
}

/// Paired `(clean, noisy)` crops for one iteration.
pub fn iteration_batch(
    cfg: &TrainConfig,
    data: &[TrainSample],
    seed: u64,
    stage: u8,
    iteration: u64,
) -> Result<(Tensor<f32>, Tensor<f32>, usize)> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let purpose = |p: &str| format!("{p}-stage{stage}");
    let pick = rng::substream(seed, &purpose("pick"), iteration).gen_range(0..data.len());
    let s = &data[pick];
    let noisy = cfg.noisy_block(&s.noisy, rng::substream_seed(seed, &purpose("masks"), iteration))?;
    let clean = cfg.clean_block(&s.clean, &noisy)?;
    let size = crop_for(cfg, stage, iteration)?;
    let (r, c) = crop_offset(
        noisy.height(),
        noisy.width(),
        size,
        rng::substream_seed(seed, &purpose("crop"), iteration),
    )?;
    let clean = clean.crop_at(r, c, size)?;
    let noisy = noisy.crop_at(r, c, size)?;
    Ok((clean.tensor().clone(), noisy.tensor().clone(), size))
}

fn stage_iters(cfg: &TrainConfig, stage: u8) -> u64 {
    if stage == 1 {
        cfg.stage1_iters
    } else {
        cfg.stage2_iters
    }
}

/// Iterations after which a checkpoint is written: every schedule milestone and the stage end.
fn checkpoint_points(cfg: &TrainConfig, stage: u8) -> Result<Vec<u64>> {
    let mut pts: Vec<u64> = if stage == 1 {
        cfg.schedule()?.milestones().to_vec()
    } else {
        Vec::new()
    };
    pts.push(stage_iters(cfg, stage));
    Ok(pts)
}

pub fn checkpoint_dir(out: &Path, stage: u8, iteration: u64) -> PathBuf {
    out.join("checkpoints")
        .join(format!("stage{stage}-{iteration:08}"))
}

fn stage1_checksum(w: &ParamStore<f32>) -> u64 {
    let mut frozen = w.filter_prefix("cp_full.");
    for (k, v) in w.filter_prefix("transformer.").iter() {
        frozen.insert(k.clone(), v.clone());
    }
    frozen.checksum()
}

/// Runs the remaining iterations of `state.stage`, appending to `history`.
pub fn run_stage(
    cfg: &TrainConfig,
    data: &[TrainSample],
    seed: u64,
    state: &mut TrainState,
    history: &mut Vec<LossRecord>,
    out: Option<&Path>,
) -> Result<()> {
    let stage = state.stage;
    let total = stage_iters(cfg, stage);
    let sched = cfg.diffusion()?;
    let points = checkpoint_points(cfg, stage)?;
    let frozen = stage1_checksum(&state.weights);
    while state.iteration < total {
        let it = state.iteration + 1;
        let (clean, noisy, size) = iteration_batch(cfg, data, seed, stage, it)?;
        let loss = if stage == 1 {
            stage1_step(&mut state.weights, &cfg.model, &clean, &noisy, &mut state.opt)
        } else {
            let noise = rng::substream_seed(seed, "stage2-noise", it);
            stage2_step(
                &mut state.weights,
                &cfg.model,
                &sched,
                &clean,
                &noisy,
                &mut state.opt,
                noise,
            )
        }
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m}, iteration {it}, crop {size}")),
            other => other,
        })?;
        history.push(LossRecord {
            iteration: it,
            stage,
            crop_size: size,
            loss,
        });
        state.iteration = it;
        if it.is_multiple_of(100) {
            debug!("stage {stage} iteration {it}/{total} crop {size} loss {loss:.5}");
        }
        if let Some(out) = out {
            if points.contains(&it) {
                state.save(&checkpoint_dir(out, stage, it))?;
            }
        }
    }
    if stage == 2 && stage1_checksum(&state.weights) != frozen {
        return Err(Error::Contract(
            "stage 2 modified stage-1 weights".into(),
        ));
    }
    info!(
        "stage {stage} finished after {total} iterations, final loss {:.5}",
        history.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub weights: ParamStore<f32>,
    pub history: Vec<LossRecord>,
}

/// Runs the selected stages. Stage 2 alone needs `init` weights from a stage-1 run.
pub fn train(
    cfg: &TrainConfig,
    data: &[TrainSample],
    scale: f32,
    seed: u64,
    stages: Stages,
    init: Option<ParamStore<f32>>,
    out: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut history = Vec::new();
    let mut weights = match (stages, init) {
        (Stages::Two, None) => {
            return Err(Error::Data("stage 2 needs stage-1 weights".into()));
        }
        (Stages::Two, Some(w)) => w,
        (_, _) => {
            let mut st = TrainState::fresh(cfg, scale, seed)?;
            run_stage(cfg, data, seed, &mut st, &mut history, out)?;
            st.weights
        }
    };
    if stages != Stages::One {
        let mut st = TrainState::stage_two(cfg, weights);
        run_stage(cfg, data, seed, &mut st, &mut history, out)?;
        weights = st.weights;
    }
    if let Some(out) = out {
        weights.save(&out.join("weights"))?;
        drt1::write_atomic(&out.join("loss.csv"), loss_csv(&history).as_bytes())?;
    }
    Ok(TrainOutput { weights, history })
}

/// Continues a run from a checkpoint directory to the end of the configured stages.
pub fn resume(
    cfg: &TrainConfig,
    data: &[TrainSample],
    seed: u64,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut st = TrainState::load(checkpoint, cfg)?;
    let mut history = Vec::new();
    run_stage(cfg, data, seed, &mut st, &mut history, out)?;
    if st.stage == 1 && cfg.stage2_iters > 0 {
        let mut two = TrainState::stage_two(cfg, st.weights);
        run_stage(cfg, data, seed, &mut two, &mut history, out)?;
        st = two;
    }
    Ok(TrainOutput {
        weights: st.weights,
        history,
    })
}
