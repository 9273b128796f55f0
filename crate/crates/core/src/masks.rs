//! Random block masks, masked sinogram data blocks and the hierarchical crop schedule.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Sinogram};
use crate::numerics::{drt1, Scalar, Tensor};
use crate::rng;

pub const DEFAULT_BLOCK_SIZE: usize = 16;
pub const DEFAULT_COVERAGE: f64 = 0.10;

/// Binary mask; `false` marks a masked (zeroed) pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    block_size: usize,
    /// Grid cells `(grid_row, grid_col)` that were blanked, in placement order.
    placements: Vec<(usize, usize)>,
}

impl Mask {
    /// Mask that keeps everything.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
            block_size: 0,
            placements: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn placements(&self) -> &[(usize, usize)] {
        &self.placements
    }

    pub fn zero_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_count() as f64 / self.keep.len() as f64
    }

    /// Masked area implied by the placement record, with edge cells clipped to the array.
    pub fn placed_area(&self) -> usize {
        self.placements
            .iter()
            .map(|&(gr, gc)| {
                let h = (self.rows - gr * self.block_size).min(self.block_size);
                let w = (self.cols - gc * self.block_size).min(self.block_size);
                h * w
            })
            .sum()
    }

    pub fn to_grid<T: Scalar>(&self) -> Grid<T> {
        Grid::from_fn(self.rows, self.cols, |r, c| {
            if self.keeps(r, c) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Blanks `ceil(coverage h w / block_size^2)` distinct cells of the block-aligned grid, chosen
/// uniformly without replacement.
pub fn random_block_mask(
    h: usize,
    w: usize,
    block_size: usize,
    coverage: f64,
    seed: u64,
) -> Result<Mask> {
    if block_size == 0 || block_size > h.min(w) {
        return Err(Error::Contract(format!(
            "block size {block_size} does not fit a {h}x{w} sinogram"
        )));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::Contract(format!(
            "coverage must lie in (0, 1), got {coverage}"
        )));
    }
    let k = (coverage * (h * w) as f64 / (block_size * block_size) as f64).ceil() as usize;
    let (gh, gw) = (h.div_ceil(block_size), w.div_ceil(block_size));
    if k > gh * gw {
        return Err(Error::Contract(format!(
            "coverage {coverage} needs {k} blocks but the grid has {} cells",
            gh * gw
        )));
    }
    let mut rng = rng::substream(seed, "block-mask", 0);
    let cells = index::sample(&mut rng, gh * gw, k);
    let mut mask = Mask::ones(h, w);
    mask.block_size = block_size;
    for cell in cells.iter() {
        let (gr, gc) = (cell / gw, cell % gw);
        mask.placements.push((gr, gc));
        for r in gr * block_size..((gr + 1) * block_size).min(h) {
            for c in gc * block_size..((gc + 1) * block_size).min(w) {
                mask.keep[r * w + c] = false;
            }
        }
    }
    Ok(mask)
}

/// `S * M` elementwise.
pub fn apply_mask<T: Scalar>(s: &Sinogram<T>, m: &Mask) -> Result<Sinogram<T>> {
    if s.shape() != m.shape() {
        return Err(Error::dim(
            "apply_mask",
            format!("sinogram {:?} vs mask {:?}", s.shape(), m.shape()),
        ));
    }
    let data = s
        .data()
        .iter()
        .zip(&m.keep)
        .map(|(&v, &k)| if k { v } else { T::zero() })
        .collect();
    Sinogram::new(s.rows(), s.cols(), data)
}

/// `N`-channel stack: channels `0..N-1` are masked copies, channel `N-1` is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramBlock<T> {
    data: Tensor<T>,
    masks: Vec<Mask>,
}

impl<T: Scalar> SinogramBlock<T> {
    /// Stacks `source` masked by each of `masks`, then `source` itself.
    pub fn from_masks(source: &Sinogram<T>, masks: Vec<Mask>) -> Result<Self> {
        let (h, w) = source.shape();
        let mut data = Vec::with_capacity((masks.len() + 1) * h * w);
        for m in &masks {
            data.extend_from_slice(apply_mask(source, m)?.data());
        }
        data.extend_from_slice(source.data());
        Ok(SinogramBlock {
            data: Tensor::new(vec![masks.len() + 1, h, w], data)?,
            masks,
        })
    }

    pub fn from_tensor(data: Tensor<T>, masks: Vec<Mask>) -> Result<Self> {
        if data.rank() != 3 || data.dims()[0] != masks.len() + 1 {
            return Err(Error::dim(
                "sinogram block",
                format!("{:?} with {} masks", data.dims(), masks.len()),
            ));
        }
        Ok(SinogramBlock { data, masks })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn channel(&self, i: usize) -> Sinogram<T> {
        let plane = self.height() * self.width();
        Sinogram::new(
            self.height(),
            self.width(),
            self.data.data()[i * plane..(i + 1) * plane].to_vec(),
        )
        .expect("block plane")
    }

    pub fn unmasked(&self) -> Sinogram<T> {
        self.channel(self.channels() - 1)
    }

    /// Same masks, new channel values.
    pub fn with_tensor(&self, data: Tensor<T>) -> Result<Self> {
        if data.dims() != self.data.dims() {
            return Err(Error::dim(
                "sinogram block",
                format!("{:?} vs {:?}", data.dims(), self.data.dims()),
            ));
        }
        Ok(SinogramBlock {
            data,
            masks: self.masks.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> SinogramBlock<U> {
        SinogramBlock {
            data: self.data.cast(),
            masks: self.masks.clone(),
        }
    }

    /// `size x size` window at `(row, col)` of every channel and mask.
    pub fn crop_at(&self, row: usize, col: usize, size: usize) -> Result<Self> {
        let (n, h, w) = (self.channels(), self.height(), self.width());
        if row + size > h || col + size > w || size == 0 {
            return Err(Error::Contract(format!(
                "crop {size} at ({row}, {col}) exceeds {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(n * size * size);
        for ch in 0..n {
            for r in row..row + size {
                let s = (ch * h + r) * w + col;
                data.extend_from_slice(&self.data.data()[s..s + size]);
            }
        }
        let masks = self
            .masks
            .iter()
            .map(|m| {
                let mut keep = Vec::with_capacity(size * size);
                for r in row..row + size {
                    keep.extend_from_slice(&m.keep[r * w + col..r * w + col + size]);
                }
                Mask {
                    rows: size,
                    cols: size,
                    keep,
                    block_size: 0,
                    placements: Vec::new(),
                }
            })
            .collect();
        Ok(SinogramBlock {
            data: Tensor::new(vec![n, size, size], data)?,
            masks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        drt1::write(path, &self.data.cast())
    }
}

/// Builds an `n`-channel block with `n - 1` independent random masks; mask `i` draws from the
/// substream `(seed, i)` so channels can be generated in any order.
pub fn build_block<T: Scalar>(
    s: &Sinogram<T>,
    n: usize,
    block_size: usize,
    coverage: f64,
    seed: u64,
) -> Result<SinogramBlock<T>> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "a data block needs at least 2 channels, got {n}"
        )));
    }
    let masks = (0..n - 1)
        .map(|i| {
            random_block_mask(
                s.rows(),
                s.cols(),
                block_size,
                coverage,
                rng::substream_seed(seed, "block-channel", i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    SinogramBlock::from_masks(s, masks)
}

/// Block whose `n - 1` leading channels are unmasked copies of `s`.
pub fn build_unmasked_block<T: Scalar>(s: &Sinogram<T>, n: usize) -> Result<SinogramBlock<T>> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "a data block needs at least 2 channels, got {n}"
        )));
    }
    SinogramBlock::from_masks(s, vec![Mask::ones(s.rows(), s.cols()); n - 1])
}

/// CSV `channel,grid_row,grid_col` of every placed block.
pub fn placements_csv(masks: &[Mask]) -> String {
    let mut out = String::from("channel,grid_row,grid_col\n");
    for (ch, m) in masks.iter().enumerate() {
        for &(r, c) in m.placements() {
            let _ = writeln!(out, "{ch},{r},{c}");
        }
    }
    out
}

/// Zero-pads a sinogram at the bottom and right to `rows x cols`.
pub fn pad_sinogram<T: Scalar>(s: &Sinogram<T>, rows: usize, cols: usize) -> Result<Sinogram<T>> {
    if rows < s.rows() || cols < s.cols() {
        return Err(Error::dim(
            "pad_sinogram",
            format!("{:?} into {rows}x{cols}", s.shape()),
        ));
    }
    Ok(Sinogram::from_fn(rows, cols, |r, c| {
        if r < s.rows() && c < s.cols() {
            s.get(r, c)
        } else {
            T::zero()
        }
    }))
}

/// Top-left `rows x cols` window.
pub fn crop_sinogram<T: Scalar>(s: &Sinogram<T>, rows: usize, cols: usize) -> Result<Sinogram<T>> {
    if rows > s.rows() || cols > s.cols() {
        return Err(Error::dim(
            "crop_sinogram",
            format!("{:?} to {rows}x{cols}", s.shape()),
        ));
    }
    Ok(Sinogram::from_fn(rows, cols, |r, c| s.get(r, c)))
}

/// Piecewise-constant crop size over training iterations: size `i` applies while
/// `milestones[i-1] < iteration <= milestones[i]`, the last size beyond the last milestone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchicalSchedule {
    milestones: Vec<u64>,
    sizes: Vec<usize>,
}

impl HierarchicalSchedule {
    pub fn new(milestones: Vec<u64>, sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || milestones.len() + 1 != sizes.len() {
            return Err(Error::Contract(format!(
                "{} milestones need {} sizes, got {}",
                milestones.len(),
                milestones.len() + 1,
                sizes.len()
            )));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
            return Err(Error::Contract(format!(
                "crop sizes must be positive and strictly increasing: {sizes:?}"
            )));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "milestones must be strictly increasing: {milestones:?}"
            )));
        }
        Ok(HierarchicalSchedule { milestones, sizes })
    }

    /// 64, 128, 192, 256 with milestones every 100 000 iterations.
    pub fn full_scale() -> Self {
        Self::new(vec![100_000, 200_000, 300_000], vec![64, 128, 192, 256]).expect("valid")
    }

    /// The same four stages spread evenly over a run of `iterations`.
    pub fn proportional(iterations: u64, sizes: Vec<usize>) -> Result<Self> {
        let stages = sizes.len() as u64;
        if stages == 0 {
            return Err(Error::Contract("empty crop size list".into()));
        }
        let milestones: Vec<u64> = (1..stages).map(|i| iterations * i / stages).collect();
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            // too few iterations to separate stages: jump straight to the final size
            return Self::new(Vec::new(), vec![*sizes.last().unwrap()]);
        }
        Self::new(milestones, sizes)
    }

    /// Constant schedule at `size`.
    pub fn constant(size: usize) -> Self {
        Self::new(Vec::new(), vec![size]).expect("single size")
    }

    pub fn milestones(&self) -> &[u64] {
        &self.milestones
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn final_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

pub fn crop_size_at(iteration: u64, schedule: &HierarchicalSchedule) -> usize {
    let stage = schedule
        .milestones
        .iter()
        .take_while(|&&m| iteration > m)
        .count();
    schedule.sizes[stage]
}

/// Uniform offset for a `size x size` crop of an `h x w` array.
pub fn crop_offset(h: usize, w: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    if size == 0 || size > h.min(w) {
        return Err(Error::Contract(format!(
            "crop size {size} exceeds {h}x{w}"
        )));
    }
    let mut rng = rng::substream(seed, "crop", 0);
    Ok((rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
}

/// Random `size x size` crop applied identically to every channel.
pub fn sample_crop<T: Scalar>(
    block: &SinogramBlock<T>,
    size: usize,
    seed: u64,
) -> Result<SinogramBlock<T>> {
    let (r, c) = crop_offset(block.height(), block.width(), size, seed)?;
    block.crop_at(r, c, size)
}
