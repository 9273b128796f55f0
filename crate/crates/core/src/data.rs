//! Simulated datasets: phantoms, their clean sinograms and calibrated noisy sinograms, split into
//! train/val/test and persisted as DRT1 files with a CSV manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Image, Sinogram};
use crate::numerics::{drt1, Scalar};
use crate::phantom::random_phantom;
use crate::projection::{add_noise, count_scale, Geometry, SystemMatrix};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "case_id,split,count_scale";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub total_counts: f64,
    pub randoms_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            geometry: Geometry::default(),
            total_counts: 1e5,
            randoms_fraction: 0.2,
            n_train: 64,
            n_val: 8,
            n_test: 8,
        }
    }
}

/// One simulated acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub phantom: Image<f32>,
    pub clean: Sinogram<f32>,
    /// Raw Poisson counts including randoms.
    pub counts: Sinogram<f32>,
    /// Counts per unit of clean sinogram; `counts / count_scale` is in phantom units.
    pub count_scale: f64,
}

impl Case {
    /// Noisy sinogram in the clean sinogram's units.
    pub fn noisy(&self) -> Sinogram<f32> {
        let inv = (1.0 / self.count_scale) as f32;
        self.counts.map(|v| v * inv)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Simulates every case; case `k` draws its phantom and noise from substreams indexed by `k`, so
/// cases are independent of each other and of the split sizes before them.
pub fn simulate(cfg: &SimConfig, g: &SystemMatrix<f32>, seed: u64) -> Result<Dataset> {
    if g.geometry() != &cfg.geometry {
        return Err(Error::Contract(
            "system matrix does not match the simulation geometry".into(),
        ));
    }
    let mut cases = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
    let plan = [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ];
    let mut k = 0u64;
    for (split, n) in plan {
        for i in 0..n {
            let phantom = random_phantom::<f32>(
                rng::substream_seed(seed, "phantom", k),
                cfg.geometry.image_size,
            );
            let clean = g.forward_project(&phantom)?;
            let counts = add_noise(
                &clean,
                cfg.total_counts,
                cfg.randoms_fraction,
                rng::substream_seed(seed, "noise", k),
            )?;
            let scale = count_scale(&clean, cfg.total_counts, cfg.randoms_fraction);
            if !(scale > 0.0) {
                return Err(Error::Data(format!("case {k} has an empty sinogram")));
            }
            cases.push(Case {
                id: format!("{}-{i:03}", split.name()),
                split,
                phantom,
                clean,
                counts,
                count_scale: scale,
            });
            k += 1;
        }
    }
    Ok(Dataset { cases })
}

fn case_path(dir: &Path, case: &str, kind: &str) -> PathBuf {
    dir.join(format!("{case}.{kind}.drt"))
}

pub fn write_grid<T: Scalar>(path: &Path, g: &crate::grid::Grid<T>) -> Result<()> {
    drt1::write(path, &g.cast::<f32>().to_tensor())
}

pub fn read_grid(path: &Path) -> Result<crate::grid::Grid<f32>> {
    let t = drt1::read(path)?;
    if t.rank() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected a 2-D tensor, found {:?}", t.dims()),
        });
    }
    crate::grid::Grid::from_tensor(&t)
}

/// Writes `<id>.{phantom,clean,counts}.drt` per case plus the manifest.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for c in &ds.cases {
        write_grid(&case_path(dir, &c.id, "phantom"), &c.phantom)?;
        write_grid(&case_path(dir, &c.id, "clean"), &c.clean)?;
        write_grid(&case_path(dir, &c.id, "counts"), &c.counts)?;
        // 17 significant digits round-trip an f64 exactly
        let _ = writeln!(manifest, "{},{},{:.17e}", c.id, c.split.name(), c.count_scale);
    }
    drt1::write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!(
            "no dataset at {} (missing {MANIFEST_FILE})",
            dir.display()
        )),
        _ => Error::io(&mpath, e),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format {
            path: mpath,
            detail: format!("header must be `{MANIFEST_HEADER}`"),
        });
    }
    let mut cases = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |detail: String| Error::Format {
            path: mpath.clone(),
            detail: format!("line {}: {detail}", n + 2),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        let scale: f64 = f[2].parse().map_err(|_| bad(format!("bad scale `{}`", f[2])))?;
        cases.push(Case {
            id: f[0].to_string(),
            split: Split::parse(f[1])?,
            phantom: read_grid(&case_path(dir, f[0], "phantom"))?,
            clean: read_grid(&case_path(dir, f[0], "clean"))?,
            counts: read_grid(&case_path(dir, f[0], "counts"))?,
            count_scale: scale,
        });
    }
    Ok(Dataset { cases })
}
