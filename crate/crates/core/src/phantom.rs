//! Ellipse phantoms standing in for clinical brain slices.

use rand::Rng;

use crate::grid::Image;
use crate::numerics::Scalar;
use crate::rng;

/// Ellipse in normalized coordinates: the image spans `[-1, 1]^2`, `y` pointing up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Counter-clockwise rotation of the `a` axis, radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Normalized coordinates of the center of pixel `(row, col)` on a `size x size` grid.
pub fn pixel_center(row: usize, col: usize, size: usize) -> (f64, f64) {
    let n = size as f64;
    (
        (col as f64 + 0.5) / n * 2.0 - 1.0,
        1.0 - (row as f64 + 0.5) / n * 2.0,
    )
}

/// Renders `ellipses` by summing intensities at pixel centers, clipped below at zero.
pub fn generate_phantom<T: Scalar>(ellipses: &[Ellipse], size: usize) -> Image<T> {
    Image::from_fn(size, size, |r, c| {
        let (x, y) = pixel_center(r, c, size);
        let v: f64 = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        T::lit(v.max(0.0))
    })
}

pub const PHANTOM_PEAK_LIMIT: f64 = 2.0;

/// Ellipse list for a head-like phantom: a low-uptake outer ellipse with 3 to 8 interior
/// structures. Specs whose rendering would peak above [`PHANTOM_PEAK_LIMIT`] are redrawn from
/// the same stream.
pub fn random_phantom_spec(seed: u64, size: usize) -> Vec<Ellipse> {
    let mut rng = rng::substream(seed, "phantom", 0);
    loop {
        let a = rng.gen_range(0.68..0.82);
        let b = rng.gen_range(0.80..0.92);
        let outer = Ellipse {
            cx: rng.gen_range(-0.04..0.04),
            cy: rng.gen_range(-0.04..0.04),
            a,
            b,
            angle: rng.gen_range(-0.15..0.15),
            intensity: rng.gen_range(0.2..0.5),
        };
        let mut spec = vec![outer];
        let count = rng.gen_range(3..=8);
        for _ in 0..count {
            let r = rng.gen_range(0.0..0.6f64).sqrt();
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            spec.push(Ellipse {
                cx: outer.cx + r * a * 0.8 * t.cos(),
                cy: outer.cy + r * b * 0.8 * t.sin(),
                a: rng.gen_range(0.05..0.3),
                b: rng.gen_range(0.05..0.3),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                intensity: rng.gen_range(-0.3..0.8),
            });
        }
        let img: Image<f64> = generate_phantom(&spec, size);
        if img.max() <= PHANTOM_PEAK_LIMIT {
            return spec;
        }
    }
}

pub fn random_phantom<T: Scalar>(seed: u64, size: usize) -> Image<T> {
    generate_phantom(&random_phantom_spec(seed, size), size)
}
