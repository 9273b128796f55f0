//! Image quality metrics and line profiles.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::numerics::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Scalar>(x: &Image<T>, y: &Image<T>, op: &'static str) -> Result<()> {
    x.ensure_same_shape(y, op)
}

/// Mean squared difference over all pixels.
pub fn mse<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<f64> {
    check_pair(x, y, "mse")?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// `20 log10(max(y) / rmse(x, y))`; `+inf` when the images are equal.
pub fn psnr<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<f64> {
    let m = mse(x, y)?;
    let peak = y.max().as_f64();
    if !(peak > 0.0) {
        return Err(Error::Contract(format!(
            "psnr needs a positive reference peak, got {peak}"
        )));
    }
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / m.sqrt()).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over every fully contained 11x11 Gaussian window, with dynamic
/// range `L = max(y)`.
pub fn ssim<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<f64> {
    check_pair(x, y, "ssim")?;
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let l = y.max().as_f64();
    if !(l > 0.0) {
        return Err(Error::Contract(format!(
            "ssim needs a positive reference peak, got {l}"
        )));
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let g = gaussian_window();
    let xs: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let ys: Vec<f64> = y.data().iter().map(|v| v.as_f64()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let k = (r0 + i) * w + c0 + j;
                    let wt = gi * gj;
                    let (a, b) = (xs[k], ys[k]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(Axis::Row),
            "column" | "col" => Ok(Axis::Column),
            _ => Err(Error::Config(format!("axis must be row or column, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Profile<T> {
    pub axis: Axis,
    pub index: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Profile<T> {
    /// `position,value`; values use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v:?}");
        }
        out
    }
}

pub fn profile_line<T: Scalar>(img: &Image<T>, axis: Axis, index: usize) -> Result<Profile<T>> {
    let (h, w) = img.shape();
    let values = match axis {
        Axis::Row if index < h => img.row(index).to_vec(),
        Axis::Column if index < w => (0..h).map(|r| img.get(r, index)).collect(),
        _ => {
            return Err(Error::Contract(format!(
                "{axis:?} {index} outside a {h}x{w} image"
            )))
        }
    };
    Ok(Profile {
        axis,
        index,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn evaluate<T: Scalar>(case_id: &str, recon: &Image<T>, reference: &Image<T>) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        psnr: psnr(recon, reference)?,
        ssim: ssim(recon, reference)?,
        mse: mse(recon, reference)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    if mean.is_infinite() {
        return (mean, f64::NAN);
    }
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn mean(&self) -> CaseMetrics {
        self.aggregate().0
    }

    /// `(mean, population std)` rows.
    pub fn aggregate(&self) -> (CaseMetrics, CaseMetrics) {
        let (pm, ps) = mean_std(self.cases.iter().map(|c| c.psnr));
        let (sm, ss) = mean_std(self.cases.iter().map(|c| c.ssim));
        let (mm, ms) = mean_std(self.cases.iter().map(|c| c.mse));
        (
            CaseMetrics {
                case_id: "mean".into(),
                psnr: pm,
                ssim: sm,
                mse: mm,
            },
            CaseMetrics {
                case_id: "std".into(),
                psnr: ps,
                ssim: ss,
                mse: ms,
            },
        )
    }

    /// `case_id,psnr_db,ssim,mse`, one row per case followed by `std` and `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,psnr_db,ssim,mse\n");
        let row = |out: &mut String, c: &CaseMetrics| {
            let _ = writeln!(out, "{},{:.6},{:.9},{:.9e}", c.case_id, c.psnr, c.ssim, c.mse);
        };
        for c in &self.cases {
            row(&mut out, c);
        }
        if !self.cases.is_empty() {
            let (mean, std) = self.aggregate();
            row(&mut out, &std);
            row(&mut out, &mean);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Image<f64> {
        Image::from_fn(n, n, |r, c| ((r * n + c) % 17) as f64 / 16.0)
    }

    #[test]
    fn mse_examples() {
        let y = ramp(16);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let x = y.map(|v| v + 0.1);
        assert!((mse(&x, &y).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
        assert!(mse(&x, &ramp(15)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let y = ramp(16);
        assert_eq!(y.max(), 1.0);
        let x = y.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-6);
        let far = y.map(|v| v + 1.0);
        assert!((psnr(&x, &y).unwrap() - psnr(&far, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&y, &y).unwrap(), f64::INFINITY);
        assert!(psnr(&y, &Image::zeros(16, 16)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = ramp(24);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let bin = Image::from_fn(24, 24, |r, c| if (r / 3 + c / 4) % 2 == 0 { 1.0 } else { 0.0 });
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        let noisy = x.map(|v| v * 0.9 + 0.05);
        let s = ssim(&noisy, &x).unwrap();
        assert!(s < 1.0 && s > 0.5);
        assert!(ssim(&ramp(10), &ramp(10)).is_err());
    }

    #[test]
    fn profiles() {
        let img = Image::from_fn(5, 5, |r, c| (r.min(c) * 10 + r.max(c)) as f64);
        for i in 0..5 {
            assert_eq!(
                profile_line(&img, Axis::Row, i).unwrap().values,
                profile_line(&img, Axis::Column, i).unwrap().values
            );
        }
        let p = profile_line(&img, Axis::Column, 2).unwrap();
        for (r, v) in p.values.iter().enumerate() {
            assert_eq!(v.to_bits(), img.get(r, 2).to_bits());
        }
        let flat = Image::filled(4, 6, 0.25f64);
        assert!(profile_line(&flat, Axis::Row, 3).unwrap().values.iter().all(|&v| v == 0.25));
        assert!(profile_line(&flat, Axis::Row, 4).is_err());
        assert!(profile_line(&flat, Axis::Column, 6).is_err());
        let csv = p.to_csv();
        let parsed: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(parsed, p.values);
    }

    #[test]
    fn report_aggregates() {
        let y = ramp(16);
        let r = MetricReport {
            cases: vec![
                evaluate("a", &y.map(|v| v + 0.1), &y).unwrap(),
                evaluate("b", &y.map(|v| v + 0.01), &y).unwrap(),
            ],
        };
        let mean = r.mean();
        assert!((mean.psnr - 30.0).abs() < 1e-6);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case_id,psnr_db,ssim,mse");
        assert!(lines[4].starts_with("mean,30.000000"));
        let same = MetricReport {
            cases: vec![evaluate("c", &y, &y).unwrap()],
        };
        assert!(same.to_csv().lines().nth(1).unwrap().starts_with("c,inf,1.000000000,0.0"));
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(a in 0.001f64..0.5, b in 0.001f64..0.5) {
            prop_assume!((a - b).abs() > 1e-6);
            let y = ramp(12);
            let pa = psnr(&y.map(|v| v + a), &y).unwrap();
            let pb = psnr(&y.map(|v| v + b), &y).unwrap();
            prop_assert_eq!(a < b, pa > pb);
        }

        #[test]
        fn mse_zero_iff_equal(seed in 0u64..1000) {
            let y = ramp(8);
            let mut x = y.clone();
            let k = (seed % 64) as usize;
            x.data_mut()[k] += 1e-3;
            prop_assert!(mse(&x, &y).unwrap() > 0.0);
            prop_assert_eq!(mse(&y, &y).unwrap(), 0.0);
        }
    }
}
