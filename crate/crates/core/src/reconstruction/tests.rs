use proptest::prelude::*;

use super::*;
use crate::masks::build_block;
use crate::model::init_weights;
use crate::numerics::gradcheck::randn;
use crate::projection::{build_system_matrix, Geometry};

fn small_g() -> SystemMatrix<f64> {
    build_system_matrix(&Geometry {
        num_angles: 16,
        num_radial_bins: 23,
        image_size: 16,
    })
    .unwrap()
}

fn disk(n: usize) -> Image<f64> {
    Image::from_fn(n, n, |r, c| {
        let (y, x) = (r as f64 - 7.5, c as f64 - 7.5);
        if x * x + y * y < 30.0 { 1.0 + 0.5 * (x > 0.0) as u8 as f64 } else { 0.0 }
    })
}

fn trained_like(cfg: &TrainConfig, seed: u64) -> ParamStore<f32> {
    let mut w = init_weights::<f32>(&cfg.model, seed).unwrap();
    let out = w.get("transformer.out").unwrap().dims().to_vec();
    w.insert("transformer.out", randn(&out, 0.05, seed).cast());
    w
}

#[test]
fn weights_validate() {
    assert!(RecombineWeights::new(vec![0.5, 0.5]).is_ok());
    assert!(RecombineWeights::new(vec![0.5, 0.6]).is_err());
    assert!(RecombineWeights::new(vec![1.5, -0.5]).is_err());
    assert!(RecombineWeights::new(vec![]).is_err());
    assert_eq!(RecombineWeights::uniform(4).as_slice(), &[0.25; 4]);
}

#[test]
fn one_hot_recombination_is_exact() {
    let s = Sinogram::from_fn(12, 20, |r, c| (r * 20 + c) as f32 * 0.37 + 0.1);
    let block = build_block(&s, 3, 4, 0.2, 1).unwrap();
    for i in 0..3 {
        let r = recombine(&block, &RecombineWeights::one_hot(3, i)).unwrap();
        assert_eq!(r, block.channel(i));
    }
    assert!(recombine(&block, &RecombineWeights::uniform(2)).is_err());
}

#[test]
fn uniform_recombination_of_unmasked_stack_is_identity() {
    let s = Sinogram::from_fn(8, 8, |r, c| (r + 2 * c) as f64 * 0.5);
    let block = crate::masks::build_unmasked_block(&s, 4).unwrap();
    let r = recombine(&block, &RecombineWeights::uniform(4)).unwrap();
    for (a, b) in r.data().iter().zip(s.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mlem_fixed_point_and_monotone_likelihood() {
    let g = small_g();
    let truth = disk(16).map(|v| v + 0.05);
    let s = g.forward_project(&truth).unwrap();
    // exact data: the truth is a fixed point wherever rays reach
    let again = mlem(&g, &s, 1, &truth).unwrap();
    for (a, b) in again.data().iter().zip(truth.data()) {
        assert!((a - b).abs() < 1e-9 * b.max(1.0), "{a} vs {b}");
    }
    let out = mlem_traced(&g, &s, 40, &uniform_init(&g)).unwrap();
    assert_eq!(out.log_likelihood.len(), 41);
    for w in out.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{w:?}");
    }
    // total activity matches the data after one update when every pixel is seen
    assert!(out.untouched.is_empty());
    let one = mlem(&g, &s, 1, &uniform_init(&g)).unwrap();
    let (gs, ss) = (g.forward_project(&one).unwrap().sum(), s.sum());
    assert!((gs - ss).abs() / ss < 0.2, "{gs} vs {ss}");
}

#[test]
fn mlem_contract_errors() {
    let g = small_g();
    let s = Sinogram::<f64>::filled(16, 23, 1.0);
    let mut init = uniform_init(&g);
    init.set(0, 0, 0.0);
    assert!(matches!(mlem(&g, &s, 1, &init), Err(Error::Contract(_))));
    let mut neg = s.clone();
    neg.set(1, 1, -1.0);
    assert!(matches!(mlem(&g, &neg, 1, &uniform_init(&g)), Err(Error::Contract(_))));
    assert!(matches!(
        mlem(&g, &Sinogram::filled(3, 3, 1.0), 1, &uniform_init(&g)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn mlem_zero_data_and_untouched_pixels() {
    let g = small_g();
    let zero = Sinogram::<f64>::zeros(16, 23);
    let img = mlem(&g, &zero, 3, &uniform_init(&g)).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0));

    // two narrow orthogonal bands leave the corners unseen
    let narrow = build_system_matrix::<f64>(&Geometry {
        num_angles: 2,
        num_radial_bins: 3,
        image_size: 16,
    })
    .unwrap();
    let s = Sinogram::filled(2, 3, 1.0);
    let out = mlem_traced(&narrow, &s, 5, &uniform_init(&narrow)).unwrap();
    assert!(!out.untouched.is_empty());
    for &p in &out.untouched {
        assert_eq!(out.image.data()[p], 1.0);
    }
}

#[test]
fn lambda_update_hand_computed() {
    let l = Sinogram::new(1, 3, vec![0.0, 1.0, -2.0]).unwrap();
    let s = Sinogram::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let t = Sinogram::new(1, 3, vec![0.5, 2.0, 4.0]).unwrap();
    let u = lambda_update(&l, &s, &t, 2.0).unwrap();
    assert_eq!(u.data(), &[1.0, 1.0, -4.0]);
    assert_eq!(lambda_update(&l, &s, &s, 3.0).unwrap(), l);
}

#[test]
fn admm_params_validate() {
    assert!(AdmmParams::default().validate().is_ok());
    for bad in [
        AdmmParams { iterations: 0, ..Default::default() },
        AdmmParams { rho: 0.0, ..Default::default() },
        AdmmParams { mu: -1.0, ..Default::default() },
        AdmmParams { eta: 0.0, ..Default::default() },
        AdmmParams { eta: 1.5, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn untrained_or_incomplete_weights_are_rejected() {
    let cfg = TrainConfig::default();
    let fresh = init_weights::<f32>(&cfg.model, 0).unwrap();
    assert!(matches!(Reconstructor::new(&cfg, fresh), Err(Error::Contract(_))));
    let mut partial = trained_like(&cfg, 0);
    partial = partial.filter_prefix("transformer.");
    assert!(matches!(Reconstructor::new(&cfg, partial), Err(Error::Contract(_))));
    assert!(Reconstructor::new(&cfg, trained_like(&cfg, 0)).is_ok());
}

#[test]
fn single_pass_admm_matches_feedforward() {
    let cfg = TrainConfig::default();
    let r = Reconstructor::new(&cfg, trained_like(&cfg, 4)).unwrap();
    let noisy = Sinogram::from_fn(30, 45, |a, b| ((a * 7 + b * 3) % 11) as f32 * 0.3);
    let a = r.admm_reconstruct(&noisy, 9).unwrap();
    let b = r.feedforward(&noisy, 9).unwrap();
    assert_eq!(a.shape(), (30, 45));
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| v >= 0.0));
    assert_eq!(a, r.admm_reconstruct(&noisy, 9).unwrap());

    let mut multi = r.clone();
    multi.admm = AdmmParams { iterations: 3, eta: 0.5, ..Default::default() };
    let c = multi.admm_reconstruct(&noisy, 9).unwrap();
    assert_eq!(c.shape(), (30, 45));
    assert_ne!(c, a);
}

#[test]
fn non_finite_input_is_rejected() {
    let cfg = TrainConfig::default();
    let r = Reconstructor::new(&cfg, trained_like(&cfg, 4)).unwrap();
    let mut noisy = Sinogram::filled(16, 16, 1.0f32);
    noisy.set(2, 2, f32::NAN);
    assert!(matches!(r.admm_reconstruct(&noisy, 0), Err(Error::Numeric(_))));
}

#[test]
fn data_fidelity_prefers_consistent_sinograms() {
    let g = small_g();
    let s = g.forward_project(&disk(16)).unwrap();
    let good = data_fidelity(&s, &s, &g, 30).unwrap();
    let shifted = s.map(|v| v * 1.5);
    let bad = data_fidelity(&shifted, &s, &g, 30).unwrap();
    assert!(good < bad, "{good} vs {bad}");
}

#[test]
fn pgm_header_and_quantization() {
    let img = Image::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
    let bytes = pgm16(&img);
    let header = b"P5\n3 2\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    let px: Vec<u16> = bytes[header.len()..]
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    assert_eq!(px, vec![0, 32768, 65535, 16384, 49151, 65535]);
    let flat = pgm16(&Image::filled(1, 2, 3.0f32));
    assert_eq!(&flat[flat.len() - 4..], &[0, 0, 0, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn recombination_is_convex(vals in prop::collection::vec(0.0f64..10.0, 3 * 16), w in prop::collection::vec(0.01f64..1.0, 3)) {
        let t = Tensor::new(vec![3, 4, 4], vals.clone()).unwrap();
        let s: f64 = w.iter().sum();
        let omega = RecombineWeights::new(w.iter().map(|v| v / s).collect()).unwrap();
        let r = recombine_tensor(&t, &omega).unwrap();
        for p in 0..16 {
            let col = [vals[p], vals[16 + p], vals[32 + p]];
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.data()[p] >= lo - 1e-9 && r.data()[p] <= hi + 1e-9);
        }
    }

    #[test]
    fn mlem_preserves_nonnegativity(seed in 0u64..1000) {
        let g = small_g();
        let noise = randn(&[16 * 23], 1.0, seed);
        let s = Sinogram::new(16, 23, noise.data().iter().map(|v| v.abs()).collect()).unwrap();
        let img = mlem(&g, &s, 5, &uniform_init(&g)).unwrap();
        prop_assert!(img.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
