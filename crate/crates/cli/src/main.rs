use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dream_core::config::Config;
use dream_core::data::{self, Case, Dataset, Split};
use dream_core::metrics::{evaluate, profile_line, Axis, MetricReport};
use dream_core::numerics::drt1;
use dream_core::pipeline::{self, CaseResult, Method};
use dream_core::projection::build_system_matrix;
use dream_core::reconstruction::write_pgm;
use dream_core::training::{resume, Stages, Variant};
use dream_core::{Error, Image, ParamStore, Result, Sinogram};

#[derive(Parser)]
#[command(name = "dream", version, about = "Masked sinogram diffusion transformer PET reconstruction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key = value configuration file; unset keys use their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-case work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Default)]
struct Overrides {
    /// Mask policy: no-masks, hier-only or full.
    #[arg(long)]
    variant: Option<String>,
    /// Masked fraction per channel.
    #[arg(long)]
    mask_level: Option<f64>,
    /// Channels N of the sinogram block.
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms, clean and noisy sinograms into a dataset directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prior extractor and transformer (stage 1) and the prior diffusion (stage 2).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1, 2 or both.
        #[arg(long, default_value = "both")]
        stage: String,
        /// Stage-1 weights directory, required for `--stage 2`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long, conflicts_with_all = ["weights"])]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Restore noisy sinograms and reconstruct images.
    Reconstruct {
        /// Trained weights directory (not needed with `--baseline mlem`).
        #[arg(long, required_unless_present = "baseline")]
        weights: Option<PathBuf>,
        /// Dataset directory, or a single calibrated sinogram `.drt` file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to reconstruct when `--input` is a dataset.
        #[arg(long, default_value = "test")]
        split: String,
        /// Skip the model and run MLEM on the noisy sinogram.
        #[arg(long, value_parser = ["mlem"])]
        baseline: Option<String>,
        /// Also write 16-bit PGM images.
        #[arg(long)]
        pgm: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score reconstructed images against reference images.
    Evaluate {
        /// Directory of `<id>.image.drt` files.
        #[arg(long)]
        recon: PathBuf,
        /// Dataset directory (`<id>.phantom.drt`) or another reconstruction directory.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score mask policy, mask level and channel count variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma separated variants, or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Comma separated mask levels; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        mask_level: Vec<f64>,
        /// Comma separated channel counts; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
    },
    /// Export one row or column of an image as CSV.
    Profile {
        #[arg(long)]
        image: PathBuf,
        /// row or column.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn load_config(g: &Global) -> Result<Config> {
    match &g.config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn apply(cfg: &mut Config, o: &Overrides) -> Result<()> {
    if let Some(v) = &o.variant {
        cfg.train = cfg.train.clone().with_variant(Variant::parse(v)?);
    }
    if let Some(m) = o.mask_level {
        cfg.train.coverage = m;
    }
    if let Some(n) = o.channels {
        cfg.train.model.block_channels = n;
        if cfg.recon.omega.as_ref().is_some_and(|w| w.len() != n) {
            cfg.recon.omega = None;
        }
    }
    cfg.train.validate()
}

fn load_weights(cfg: &Config, dir: &Path) -> Result<ParamStore<f32>> {
    ParamStore::load_checked(dir, &cfg.train.model.shape_template())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    drt1::write_atomic(path, text.as_bytes())
}

fn simulate(g: &Global, out: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let sm = build_system_matrix::<f32>(&cfg.sim.geometry)?;
    let ds = data::simulate(&cfg.sim, &sm, g.seed)?;
    data::save(&ds, out)?;
    info!("wrote {} cases to {}", ds.cases.len(), out.display());
    Ok(())
}

fn train(
    g: &Global,
    data_dir: &Path,
    out: &Path,
    stage: &str,
    weights: Option<&Path>,
    resume_from: Option<&Path>,
    o: &Overrides,
) -> Result<()> {
    let mut cfg = load_config(g)?;
    apply(&mut cfg, o)?;
    let stages = Stages::parse(stage)?;
    let ds = data::load(data_dir)?;
    let result = if let Some(ck) = resume_from {
        let w = load_weights(&cfg, &ck.join("weights"))?;
        let scale = dream_core::model::norm_scale(&w)?;
        let samples = dream_core::training::prepare_samples(ds.split(Split::Train), scale)?;
        let r = resume(&cfg.train, &samples, g.seed, ck, Some(out))?;
        r.weights.save(&out.join("weights"))?;
        r
    } else {
        let init = weights.map(|w| load_weights(&cfg, w)).transpose()?;
        pipeline::train_dataset(&cfg, &ds, g.seed, stages, init, Some(out))?
    };
    info!(
        "trained {} iterations, weights in {}",
        result.history.len(),
        out.join("weights").display()
    );
    Ok(())
}

/// Cases to reconstruct: a dataset split, or one calibrated sinogram file named by its stem.
fn input_cases(input: &Path, split: &str) -> Result<Dataset> {
    if input.is_dir() {
        let split = Split::parse(split).map_err(|e| Error::Config(e.to_string()))?;
        let ds = data::load(input)?;
        Ok(Dataset {
            cases: ds.split(split).cloned().collect(),
        })
    } else {
        let sino = data::read_grid(input)?;
        let id = input
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches(".noisy").to_string())
            .unwrap_or_else(|| "input".into());
        Ok(Dataset {
            cases: vec![Case {
                id,
                split: Split::Test,
                phantom: Image::zeros(1, 1),
                clean: Sinogram::zeros(sino.rows(), sino.cols()),
                counts: sino,
                count_scale: 1.0,
            }],
        })
    }
}

fn write_results(results: &[CaseResult], out: &Path, pgm: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for r in results {
        data::write_grid(&out.join(format!("{}.sino.drt", r.case_id)), &r.sinogram)?;
        data::write_grid(&out.join(format!("{}.image.drt", r.case_id)), &r.image)?;
        if pgm {
            write_pgm(&out.join(format!("{}.pgm", r.case_id)), &r.image)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    g: &Global,
    weights: Option<&Path>,
    input: &Path,
    out: &Path,
    split: &str,
    baseline: bool,
    pgm: bool,
    o: &Overrides,
) -> Result<()> {
    let mut cfg = load_config(g)?;
    apply(&mut cfg, o)?;
    let sm = build_system_matrix::<f32>(&cfg.sim.geometry)?;
    let cases = input_cases(input, split)?;
    if cases.cases.is_empty() {
        return Err(Error::Data(format!("no `{split}` cases in {}", input.display())));
    }
    let results = if baseline {
        pipeline::reconstruct_split(&Method::Mlem(cfg.recon.mlem_iters), &sm, &cases, Split::Test, g.seed, g.jobs)?
    } else {
        let dir = weights.ok_or_else(|| Error::Config("--weights is required".into()))?;
        let rec = cfg.reconstructor(load_weights(&cfg, dir)?)?;
        pipeline::reconstruct_split(&Method::Model(&rec), &sm, &cases, Split::Test, g.seed, g.jobs)?
    };
    write_results(&results, out, pgm || cfg.recon.pgm)?;
    info!("reconstructed {} cases into {}", results.len(), out.display());
    Ok(())
}

fn image_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".image.drt"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

fn evaluate_dirs(recon: &Path, reference: &Path, out: &Path) -> Result<()> {
    let ids = image_ids(recon)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("no reconstructed images in {}", recon.display())));
    }
    let reference_path = |id: &str| {
        ["phantom", "image"]
            .iter()
            .map(|k| reference.join(format!("{id}.{k}.drt")))
            .find(|p| p.exists())
    };
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| reference_path(id).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no reference image for cases: {}",
            missing.join(", ")
        )));
    }
    let mut cases = Vec::with_capacity(ids.len());
    for id in &ids {
        let x = data::read_grid(&recon.join(format!("{id}.image.drt")))?;
        let y = data::read_grid(&reference_path(id).expect("checked above"))?;
        cases.push(evaluate(id, &x, &y)?);
    }
    let report = MetricReport { cases };
    write_text(out, &report.to_csv())?;
    let mean = report.mean();
    info!("{} cases, mean psnr {:.3} dB, ssim {:.4}", ids.len(), mean.psnr, mean.ssim);
    Ok(())
}

const ABLATION_HEADER: &str = "method,variant,mask_level,channels,psnr_db,psnr_std,ssim,ssim_std,mse,mse_std";

fn ablation_row(out: &mut String, method: &str, variant: &str, level: f64, n: usize, r: &MetricReport) {
    let (m, s) = r.aggregate();
    let _ = writeln!(
        out,
        "{method},{variant},{level},{n},{:.6},{:.6},{:.9},{:.9},{:.9e},{:.9e}",
        m.psnr, s.psnr, m.ssim, s.ssim, m.mse, s.mse
    );
}

fn ablate(g: &Global, data_dir: &Path, out: &Path, variants: &str, levels: &[f64], channels: &[usize]) -> Result<()> {
    let base = load_config(g)?;
    let variants: Vec<Variant> = if variants == "all" {
        vec![Variant::NoMasks, Variant::HierOnly, Variant::Full]
    } else {
        variants.split(',').map(|v| Variant::parse(v.trim())).collect::<Result<_>>()?
    };
    let levels = if levels.is_empty() { vec![base.train.coverage] } else { levels.to_vec() };
    let channels = if channels.is_empty() { vec![base.train.model.block_channels] } else { channels.to_vec() };
    let ds = data::load(data_dir)?;
    if ds.count(Split::Test) == 0 {
        return Err(Error::Data("dataset has no test cases".into()));
    }
    let sm = build_system_matrix::<f32>(&base.sim.geometry)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mlem = pipeline::reconstruct_split(&Method::Mlem(base.recon.mlem_iters), &sm, &ds, Split::Test, g.seed, g.jobs)?;
    ablation_row(&mut csv, "mlem", "-", 0.0, 0, &pipeline::score(&mlem, &ds)?);
    for &v in &variants {
        for &level in &levels {
            for &n in &channels {
                let mut cfg = base.clone();
                apply(
                    &mut cfg,
                    &Overrides {
                        variant: Some(v.name().into()),
                        mask_level: Some(level),
                        channels: Some(n),
                    },
                )?;
                info!("ablation: {} mask level {level} channels {n}", v.name());
                let trained = pipeline::train_dataset(&cfg, &ds, g.seed, Stages::Both, None, None)?;
                let rec = cfg.reconstructor(trained.weights)?;
                let res = pipeline::reconstruct_split(&Method::Model(&rec), &sm, &ds, Split::Test, g.seed, g.jobs)?;
                ablation_row(&mut csv, "dream", v.name(), level, n, &pipeline::score(&res, &ds)?);
            }
        }
    }
    write_text(out, &csv)
}

fn profile(image: &Path, axis: &str, index: usize, out: &Path) -> Result<()> {
    let img = data::read_grid(image)?;
    let axis = Axis::parse(axis).map_err(|e| Error::Config(e.to_string()))?;
    let p = profile_line(&img, axis, index).map_err(|e| Error::Config(e.to_string()))?;
    write_text(out, &p.to_csv())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { out } => simulate(g, out),
        Command::Train {
            data,
            out,
            stage,
            weights,
            resume,
            overrides,
        } => train(g, data, out, stage, weights.as_deref(), resume.as_deref(), overrides),
        Command::Reconstruct {
            weights,
            input,
            out,
            split,
            baseline,
            pgm,
            overrides,
        } => reconstruct(g, weights.as_deref(), input, out, split, baseline.is_some(), *pgm, overrides),
        Command::Evaluate { recon, reference, out } => evaluate_dirs(recon, reference, out),
        Command::Ablate {
            data,
            out,
            variant,
            mask_level,
            channels,
        } => ablate(g, data, out, variant, mask_level, channels),
        Command::Profile { image, axis, index, out } => profile(image, axis, *index, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DREAM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
