//! Parallel-beam system matrix, forward/back projection and count-level noise.
//!
//! The image is a `size x size` grid of unit pixels centred on the origin. Ray `m` belongs to
//! angle `theta_k = k pi / K` and radial offset `s_j = j - (B - 1) / 2`; it is the line
//! `{p : p . (cos theta, sin theta) = s}`. Row `m = k B + j` of the system matrix holds the exact
//! length of that line inside every pixel.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{Image, Sinogram};
use crate::numerics::{drt1, Scalar, Tensor};
use crate::rng;

/// Acquisition geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub num_angles: usize,
    pub num_radial_bins: usize,
    pub image_size: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            num_angles: 60,
            num_radial_bins: 95,
            image_size: 64,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.num_angles < 2 || self.num_radial_bins == 0 || self.image_size == 0 {
            return Err(Error::Contract(format!("invalid geometry {self:?}")));
        }
        let diagonal = self.image_size as f64 * std::f64::consts::SQRT_2;
        if (self.num_radial_bins as f64) < diagonal {
            log::warn!(
                "{} radial bins do not cover the {:.1} pixel image diagonal",
                self.num_radial_bins,
                diagonal
            );
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.num_angles * self.num_radial_bins
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * std::f64::consts::PI / self.num_angles as f64
    }

    pub fn radial_offset(&self, j: usize) -> f64 {
        j as f64 - (self.num_radial_bins as f64 - 1.0) / 2.0
    }
}

/// Unit vector `(cos theta, sin theta)` with components below 1e-12 snapped to zero so that
/// axis-aligned rays are recognised exactly.
fn normal(theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    (snap(c), snap(s))
}

/// Exact pixel intersection lengths of one ray, as `(pixel index, length)` in increasing
/// traversal order. A ray running exactly along a pixel edge shares its length equally between
/// the two pixels on either side (one side only on the outer boundary).
pub fn trace_ray(theta: f64, offset: f64, size: usize) -> Vec<(usize, f64)> {
    let h = size as f64 / 2.0;
    let (nx, ny) = normal(theta);
    let p0 = (offset * nx, offset * ny);
    let d = (-ny, nx);

    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for (p, dv) in [(p0.0, d.0), (p0.1, d.1)] {
        if dv == 0.0 {
            if p < -h || p > h {
                return Vec::new();
            }
        } else {
            let (a, b) = ((-h - p) / dv, (h - p) / dv);
            t_min = t_min.max(a.min(b));
            t_max = t_max.min(a.max(b));
        }
    }
    if t_max - t_min <= 1e-12 {
        return Vec::new();
    }

    let mut ts = vec![t_min, t_max];
    for (p, dv) in [(p0.0, d.0), (p0.1, d.1)] {
        if dv == 0.0 {
            continue;
        }
        for k in 1..size {
            let t = (-h + k as f64 - p) / dv;
            if t > t_min && t < t_max {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);

    // Edge-aligned rays: which coordinate is constant and sits on a grid line?
    let on_grid_line = |p: f64| {
        let u = p + h;
        (u - u.round()).abs() < 1e-9
    };
    let split_x = d.0 == 0.0 && on_grid_line(p0.0);
    let split_y = d.1 == 0.0 && on_grid_line(p0.1);

    let mut out: Vec<(usize, f64)> = Vec::with_capacity(ts.len() * 2);
    let cell = |u: f64| -> Option<usize> {
        let f = u.floor();
        (f >= 0.0 && f < size as f64).then_some(f as usize)
    };
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= 1e-12 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let (mx, my) = (p0.0 + tm * d.0, p0.1 + tm * d.1);
        let cols: Vec<usize> = if split_x {
            let u = (mx + h).round();
            [u - 1.0, u].iter().filter_map(|&v| cell(v + 0.5)).collect()
        } else {
            cell(mx + h).into_iter().collect()
        };
        let rows: Vec<usize> = if split_y {
            let u = (h - my).round();
            [u - 1.0, u].iter().filter_map(|&v| cell(v + 0.5)).collect()
        } else {
            cell(h - my).into_iter().collect()
        };
        let share = len
            / if split_x || split_y { 2.0 } else { 1.0 };
        for &r in &rows {
            for &c in &cols {
                out.push((r * size + c, share));
            }
        }
    }
    out
}

/// Sparse nonnegative map from image pixels to sinogram bins, stored row-compressed.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix<T> {
    geometry: Geometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<T>,
}

pub fn build_system_matrix<T: Scalar>(geom: &Geometry) -> Result<SystemMatrix<T>> {
    geom.validate()?;
    let mut row_ptr = Vec::with_capacity(geom.num_bins() + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for k in 0..geom.num_angles {
        let theta = geom.angle(k);
        for j in 0..geom.num_radial_bins {
            for (n, w) in trace_ray(theta, geom.radial_offset(j), geom.image_size) {
                cols.push(n as u32);
                vals.push(T::lit(w));
            }
            row_ptr.push(cols.len());
        }
    }
    if cols.is_empty() {
        return Err(Error::Contract(format!("geometry {geom:?} misses the image")));
    }
    Ok(SystemMatrix {
        geometry: *geom,
        row_ptr,
        cols,
        vals,
    })
}

impl<T: Scalar> SystemMatrix<T> {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn num_cols(&self) -> usize {
        self.geometry.num_pixels()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(pixel, weight)` entries of row `m`.
    pub fn row(&self, m: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.row_ptr[m], self.row_ptr[m + 1]);
        self.cols[a..b]
            .iter()
            .zip(&self.vals[a..b])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `G x` on flat vectors.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.num_rows())
            .map(|m| self.row(m).map(|(n, w)| w * x[n]).sum())
            .collect()
    }

    /// `G^T y` on flat vectors.
    pub fn apply_transpose(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_cols()];
        for (m, &ym) in y.iter().enumerate() {
            if ym == T::zero() {
                continue;
            }
            for (n, w) in self.row(m) {
                out[n] += w * ym;
            }
        }
        out
    }

    pub fn forward_project(&self, img: &Image<T>) -> Result<Sinogram<T>> {
        let g = &self.geometry;
        if img.shape() != (g.image_size, g.image_size) {
            return Err(Error::dim(
                "forward_project",
                format!("image {:?} vs geometry size {}", img.shape(), g.image_size),
            ));
        }
        Sinogram::new(g.num_angles, g.num_radial_bins, self.apply(img.data()))
    }

    pub fn back_project(&self, sino: &Sinogram<T>) -> Result<Image<T>> {
        let g = &self.geometry;
        if sino.shape() != (g.num_angles, g.num_radial_bins) {
            return Err(Error::dim(
                "back_project",
                format!(
                    "sinogram {:?} vs geometry {}x{}",
                    sino.shape(),
                    g.num_angles,
                    g.num_radial_bins
                ),
            ));
        }
        Image::new(g.image_size, g.image_size, self.apply_transpose(sino.data()))
    }

    /// Column sums `sum_m G_mn`.
    pub fn sensitivity(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_cols()];
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            out[c as usize] += v;
        }
        out
    }

    /// Coordinate triplets as three aligned DRT1 files `<stem>.rows.drt`, `<stem>.cols.drt`,
    /// `<stem>.weights.drt`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut rows = Vec::with_capacity(self.nnz());
        for m in 0..self.num_rows() {
            rows.extend(std::iter::repeat_n(m as f32, self.row_ptr[m + 1] - self.row_ptr[m]));
        }
        let n = self.nnz();
        let cols = self.cols.iter().map(|&c| c as f32).collect();
        let vals = self.vals.iter().map(|v| v.as_f64() as f32).collect();
        drt1::write(&dir.join(format!("{stem}.rows.drt")), &Tensor::new(vec![n], rows)?)?;
        drt1::write(&dir.join(format!("{stem}.cols.drt")), &Tensor::new(vec![n], cols)?)?;
        drt1::write(&dir.join(format!("{stem}.weights.drt")), &Tensor::new(vec![n], vals)?)
    }
}

/// Expected true-count scale: noisy counts are `scale * S` plus randoms on average.
pub fn count_scale<T: Scalar>(s: &Sinogram<T>, total_counts: f64, randoms_fraction: f64) -> f64 {
    let total = s.sum().as_f64();
    if total > 0.0 {
        total_counts * (1.0 - randoms_fraction) / total
    } else {
        0.0
    }
}

/// Expected randoms per bin for a sinogram with `bins` entries.
pub fn randoms_per_bin(bins: usize, total_counts: f64, randoms_fraction: f64) -> f64 {
    total_counts * randoms_fraction / bins as f64
}

/// Poisson draw: inversion below mean 30, rounded normal approximation above.
pub fn sample_poisson(rng: &mut impl Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < 30.0 {
        let u: f64 = rng.gen();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u32;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (mean + mean.sqrt() * z).round().max(0.0)
    }
}

/// Scales `s` to `total_counts * (1 - randoms_fraction)` expected trues, adds uniform expected
/// randoms totalling `total_counts * randoms_fraction`, then draws Poisson counts per bin.
pub fn add_noise<T: Scalar>(
    s: &Sinogram<T>,
    total_counts: f64,
    randoms_fraction: f64,
    seed: u64,
) -> Result<Sinogram<T>> {
    if !(total_counts > 0.0) {
        return Err(Error::Contract(format!(
            "total_counts must be positive, got {total_counts}"
        )));
    }
    if !(0.0..1.0).contains(&randoms_fraction) {
        return Err(Error::Contract(format!(
            "randoms_fraction must lie in [0, 1), got {randoms_fraction}"
        )));
    }
    if s.data().iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::Contract(
            "sinogram must be finite and nonnegative".into(),
        ));
    }
    let scale = count_scale(s, total_counts, randoms_fraction);
    let randoms = randoms_per_bin(s.len(), total_counts, randoms_fraction);
    let mut rng = rng::substream(seed, "poisson", 0);
    let counts = s
        .data()
        .iter()
        .map(|v| T::lit(sample_poisson(&mut rng, v.as_f64() * scale + randoms)))
        .collect();
    Sinogram::new(s.rows(), s.cols(), counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::randn;

    #[test]
    fn single_pixel_center_ray() {
        let g = Geometry {
            num_angles: 2,
            num_radial_bins: 1,
            image_size: 1,
        };
        let sm: SystemMatrix<f64> = build_system_matrix(&g).unwrap();
        let row: Vec<_> = sm.row(0).collect();
        assert_eq!(row, vec![(0, 1.0)]);
    }

    /// Chord of the line `p . n = s` through the square `[-h, h]^2`, from the intersections of
    /// the line with the four edge segments.
    fn chord_oracle(theta: f64, s: f64, h: f64) -> f64 {
        let (nx, ny) = (theta.cos(), theta.sin());
        let mut pts: Vec<(f64, f64)> = Vec::new();
        // x = +-h edges: ny y = s - nx x
        if ny.abs() > 1e-12 {
            for x in [-h, h] {
                let y = (s - nx * x) / ny;
                if y.abs() <= h + 1e-12 {
                    pts.push((x, y));
                }
            }
        }
        if nx.abs() > 1e-12 {
            for y in [-h, h] {
                let x = (s - ny * y) / nx;
                if x.abs() <= h + 1e-12 {
                    pts.push((x, y));
                }
            }
        }
        let mut best: f64 = 0.0;
        for a in &pts {
            for b in &pts {
                best = best.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
        }
        best
    }

    #[test]
    fn row_sums_match_chord_lengths() {
        let g = Geometry {
            num_angles: 24,
            num_radial_bins: 31,
            image_size: 16,
        };
        let sm: SystemMatrix<f64> = build_system_matrix(&g).unwrap();
        let h = 8.0;
        for k in 0..g.num_angles {
            for j in 0..g.num_radial_bins {
                let (theta, s) = (g.angle(k), g.radial_offset(j));
                let (nx, ny) = normal(theta);
                // rays grazing the outer boundary only get half their length by convention
                let grazing = (nx == 0.0 || ny == 0.0) && (s.abs() - h).abs() < 1e-9;
                if grazing {
                    continue;
                }
                let total: f64 = sm.row(k * g.num_radial_bins + j).map(|(_, w)| w).sum();
                let expect = chord_oracle(theta, s, h);
                assert!((total - expect).abs() <= 1e-6, "k={k} j={j}: {total} vs {expect}");
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let g = Geometry::default();
        let sm: SystemMatrix<f64> = build_system_matrix(&g).unwrap();
        for seed in 0..5 {
            let x = randn(&[g.num_pixels()], 1.0, seed);
            let y = randn(&[g.num_bins()], 1.0, seed + 100);
            let gx = sm.apply(x.data());
            let gty = sm.apply_transpose(y.data());
            let lhs: f64 = gx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&gty).map(|(a, b)| a * b).sum();
            let norm_gx = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_y = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() <= 1e-6 * norm_gx * norm_y);
        }
    }

    #[test]
    fn weights_nonnegative_and_pixel_coverage() {
        let g = Geometry::default();
        let sm: SystemMatrix<f32> = build_system_matrix(&g).unwrap();
        assert!(sm.vals.iter().all(|&v| v >= 0.0));
        assert!(sm.sensitivity().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn forward_projection_is_linear() {
        let g = Geometry {
            num_angles: 12,
            num_radial_bins: 25,
            image_size: 16,
        };
        let sm: SystemMatrix<f64> = build_system_matrix(&g).unwrap();
        let zero = Image::zeros(16, 16);
        assert!(sm.forward_project(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Image::new(16, 16, randn(&[256], 1.0, 1).into_data()).unwrap();
        let y = Image::new(16, 16, randn(&[256], 1.0, 2).into_data()).unwrap();
        let (a, b) = (1.7, -0.4);
        let combo = Image::new(
            16,
            16,
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        let lhs = sm.forward_project(&combo).unwrap();
        let (gx, gy) = (sm.forward_project(&x).unwrap(), sm.forward_project(&y).unwrap());
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - (a * gx.data()[i] + b * gy.data()[i])).abs() <= 1e-5);
        }
        assert!(sm.forward_project(&Image::zeros(8, 8)).is_err());
    }

    /// A centred disk is invariant under the symmetries of the square grid, so the profile at
    /// `theta + pi/2` equals the one at `theta`, and the profile at `pi - theta` is its mirror.
    #[test]
    fn centred_disk_profiles_share_grid_symmetry() {
        use crate::phantom::{generate_phantom, Ellipse};
        let g = Geometry::default();
        let disk = Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: 0.6,
            b: 0.6,
            angle: 0.0,
            intensity: 1.0,
        };
        let img: Image<f64> = generate_phantom(&[disk], g.image_size);
        let sm: SystemMatrix<f64> = build_system_matrix(&g).unwrap();
        let s = sm.forward_project(&img).unwrap();
        let (k_n, b) = (g.num_angles, g.num_radial_bins);
        for k in 0..k_n / 2 {
            for j in 0..b {
                assert!((s.get(k, j) - s.get(k + k_n / 2, j)).abs() <= 1e-4, "k={k} j={j}");
            }
        }
        for k in 1..k_n {
            for j in 0..b {
                assert!((s.get(k, j) - s.get(k_n - k, b - 1 - j)).abs() <= 1e-4);
            }
        }
        // and the total through each angle stays close to the disk mass
        let mass = img.sum();
        for k in 0..k_n {
            let t: f64 = s.row(k).iter().sum();
            assert!((t - mass).abs() / mass < 0.05);
        }
    }

    #[test]
    fn noise_contracts() {
        let zero = Sinogram::<f64>::zeros(4, 5);
        let out = add_noise(&zero, 1e5, 0.0, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(add_noise(&zero, 0.0, 0.0, 1).is_err());
        assert!(add_noise(&zero, 1.0, 1.0, 1).is_err());
        let neg = Sinogram::filled(2, 2, -1.0);
        assert!(add_noise(&neg, 1.0, 0.1, 1).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let s = Sinogram::from_fn(6, 9, |r, c| (r + c) as f32);
        let a = add_noise(&s, 1e4, 0.2, 5).unwrap();
        let b = add_noise(&s, 1e4, 0.2, 5).unwrap();
        let c = add_noise(&s, 1e4, 0.2, 6).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn total_counts_within_four_sigma() {
        let s = Sinogram::from_fn(20, 30, |r, c| ((r * 7 + c * 3) % 11) as f64);
        let total = 1e5;
        for seed in 0..100 {
            let n = add_noise(&s, total, 0.2, seed).unwrap().sum();
            // sum of independent Poisson bins is Poisson(total)
            assert!((n - total).abs() <= 4.0 * total.sqrt(), "seed {seed}: {n}");
        }
    }

    #[test]
    fn per_bin_mean_converges() {
        let s = Sinogram::from_fn(3, 4, |r, c| (1 + r + 2 * c) as f64);
        let (total, rf) = (600.0, 0.2);
        let scale = count_scale(&s, total, rf);
        let rnd = randoms_per_bin(s.len(), total, rf);
        let reps = 2000;
        let mut acc = vec![0.0; s.len()];
        for seed in 0..reps {
            let n = add_noise(&s, total, rf, seed).unwrap();
            for (a, v) in acc.iter_mut().zip(n.data()) {
                *a += v;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let mean = s.data()[i] * scale + rnd;
            let sample = a / reps as f64;
            assert!((sample - mean).abs() <= 4.0 * (mean / reps as f64).sqrt(), "bin {i}");
        }
    }
}
