use ndarray::{Array1, Array2};

use super::*;
use crate::fft::{band_mask, fft2};
use crate::nets::{DenoiserNet, NetArch};
use crate::par::Strategy;
use crate::rng::RngStream;
use crate::sampler::{denoise, ConstantPredictor, InversionConfig, LinearPredictor};
use crate::training::NoisePair;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
}

fn arch() -> NetArch {
    NetArch { image_shape: vec![1, 16, 16], time_dim: 8, num_classes: 4, hidden: 24, depth: 2, max_timestep: 100 }
}

fn dense_refiner(seed: u64) -> RefinerNet {
    let mut r = RefinerNet::init(arch(), &mut RngStream::new(seed, 0));
    let mut rng = RngStream::new(seed, 1);
    let p: Vec<f64> = r.params().iter().map(|_| 0.05 * rng.normal()).collect();
    r.set_params(p).unwrap();
    r
}

fn rows(n: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_vec((n, 256), RngStream::new(seed, 7).normal_vec(n * 256)).unwrap()
}

#[test]
fn equal_inputs_fill_first_bin() {
    let a = Tensor::randn(&[1, 16, 16], &mut RngStream::new(1, 0));
    let h = diff_histogram(&a, &a, 10, None).unwrap();
    let w = h.edges[1] - h.edges[0];
    assert_eq!(h.density[0] * w, 1.0);
    assert!(h.density[1..].iter().all(|&d| d == 0.0));
    assert_eq!(h.mean, 0.0);
}

#[test]
fn independent_gaussian_difference_mean() {
    let mut rng = RngStream::new(2, 0);
    let a = Tensor::randn(&[1_000_000], &mut rng);
    let b = Tensor::randn(&[1_000_000], &mut rng);
    let h = diff_histogram(&a, &b, 50, Some(6.0)).unwrap();
    // |N(0, 2)| has mean 2 / sqrt(pi) and std ~0.853; 1e6 draws give SE ~ 8.5e-4.
    assert!((h.mean - 2.0 / std::f64::consts::PI.sqrt()).abs() < 4e-3, "{}", h.mean);
    let area: f64 = h.density.iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
    assert!((area - 1.0).abs() < 1e-12);
}

#[test]
fn constant_diff_is_all_dc() {
    let r = band_energy(&Tensor::full(&[1, 16, 16], 0.4), &QUARTILE_EDGES).unwrap();
    assert!((r.fraction[0] - 1.0).abs() < 1e-12);
    assert!((r.total - 256.0 * 0.16).abs() < 1e-9);
}

#[test]
fn bands_partition_energy() {
    let mut rng = RngStream::new(3, 0);
    for _ in 0..20 {
        let x = Tensor::randn(&[1, 16, 16], &mut rng);
        let r = band_energy_many(std::slice::from_ref(&x), &[0.0, 0.1, 0.3, 0.7, 1.0], 10, 0).unwrap();
        assert!((r.energy.iter().sum::<f64>() - x.sum_sq()).abs() < 1e-9);
    }
}

#[test]
fn white_noise_matches_bin_fractions() {
    let r = band_energy(&Tensor::zeros(&[1, 16, 16]), &QUARTILE_EDGES).unwrap();
    let mut rng = RngStream::new(4, 0);
    let noise: Vec<Tensor> = (0..100).map(|_| Tensor::randn(&[1, 16, 16], &mut rng)).collect();
    let w = band_energy_many(&noise, &QUARTILE_EDGES, 0, 0).unwrap();
    for b in 0..4 {
        let se = r.baseline_std[b] / 10.0;
        assert!((w.fraction[b] - r.bin_fraction[b]).abs() <= 3.0 * se, "band {b}: {} vs {}", w.fraction[b], r.bin_fraction[b]);
    }
    let counts: Vec<usize> = QUARTILE_EDGES.windows(2).map(|e| band_bin_count(16, 16, e[0], e[1])).collect();
    assert_eq!(counts.iter().sum::<usize>(), 256);
    assert_eq!(counts[0], 21);
    for b in 0..4 {
        assert!((r.bin_fraction[b] - counts[b] as f64 / 256.0).abs() < 1e-12);
    }
}

#[test]
fn empty_band_is_an_error() {
    let r = band_energy(&Tensor::zeros(&[1, 16, 16]), &[0.0, 0.01, 0.05, 1.0]);
    assert!(matches!(r, Err(Error::EmptyBand { .. })));
}

#[test]
fn band_swap_boundaries() {
    let mut rng = RngStream::new(5, 0);
    let x = Tensor::randn(&[1, 16, 16], &mut rng);
    let y = Tensor::randn(&[1, 16, 16], &mut rng);
    assert!(band_swap_probe(&x, &y, 0.0, 1.0, SwapMode::ReplaceBand).unwrap().bitwise_eq(&y));
    assert!(band_swap_probe(&x, &y, 0.01, 0.05, SwapMode::ReplaceBand).unwrap().bitwise_eq(&x));
    assert!(band_swap_probe(&x, &y, 0.0, 1.0, SwapMode::KeepOnly).unwrap().bitwise_eq(&y));
    assert!(band_swap_probe(&x, &y, 0.3, 0.2, SwapMode::ReplaceBand).is_err());
}

#[test]
fn band_swap_takes_band_from_refined() {
    let mut rng = RngStream::new(6, 0);
    let x = Tensor::randn(&[1, 16, 16], &mut rng);
    let y = Tensor::randn(&[1, 16, 16], &mut rng);
    let fresh = Tensor::randn(&[1, 16, 16], &mut rng);
    let mask = band_mask(16, 16, 0.0, 0.25).unwrap();
    let check = |out: &Tensor, other: &Tensor| {
        let (so, sy, sx) = (fft2(out).unwrap(), fft2(&y).unwrap(), fft2(other).unwrap());
        for k in 0..256 {
            let src = if mask[k] { &sy } else { &sx };
            assert!((so.re.data()[k] - src.re.data()[k]).abs() < 1e-9);
            assert!((so.im.data()[k] - src.im.data()[k]).abs() < 1e-9);
        }
    };
    check(&band_swap_probe(&x, &y, 0.0, 0.25, SwapMode::ReplaceBand).unwrap(), &x);
    check(&band_swap_probe(&x, &y, 0.0, 0.25, SwapMode::KeepOnly).unwrap(), &Tensor::zeros(&[1, 16, 16]));
    check(&band_swap_probe(&x, &y, 0.0, 0.25, SwapMode::KeepAndReinit(&fresh)).unwrap(), &fresh);
}

#[test]
fn full_replace_then_denoise_is_bitwise() {
    let net = DenoiserNet::init_dense(arch(), &mut RngStream::new(7, 0));
    let mut rng = RngStream::new(7, 1);
    let x = Tensor::randn(&[1, 16, 16], &mut rng);
    let y = Tensor::randn(&[1, 16, 16], &mut rng);
    let s = schedule();
    let swapped = band_swap_probe(&x, &y, 0.0, 1.0, SwapMode::ReplaceBand).unwrap();
    let a = denoise(&swapped, Condition::Class(1), &net, &s, 10, None).unwrap();
    let b = denoise(&y, Condition::Class(1), &net, &s, 10, None).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn stub_jacobians_are_exact() {
    let x = RngStream::new(8, 0).normal_vec(256);
    let lin = LinearPredictor { eta: 0.3, offset: Array1::from(RngStream::new(8, 1).normal_vec(256)) };
    let j = jacobian(&lin, &x, 50, Condition::Class(0)).unwrap();
    for ((i, k), v) in j.indexed_iter() {
        assert_eq!(*v, if i == k { 0.3 } else { 0.0 });
    }
    let r = summarize_jacobian(&j, 50);
    assert!((r.mean_abs_diag - 0.3).abs() < 1e-14);
    assert_eq!((r.mean_abs_offdiag, r.ratio), (0.0, f64::INFINITY));
    let cst = ConstantPredictor { value: Array1::ones(256) };
    assert!(jacobian(&cst, &x, 50, Condition::Class(0)).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn net_jacobian_matches_finite_differences() {
    let net = DenoiserNet::init_dense(arch(), &mut RngStream::new(9, 0));
    let x = RngStream::new(9, 1).normal_vec(256);
    let c = Condition::Class(2);
    let j = jacobian(&net, &x, 40, c).unwrap();
    let f = |v: &[f64]| net.predict(&Array2::from_shape_vec((1, 256), v.to_vec()).unwrap(), 40, &[c]).unwrap();
    let mut worst: f64 = 0.0;
    for col in [0usize, 17, 128, 255] {
        let (mut up, mut down) = (x.clone(), x.clone());
        up[col] += 1e-5;
        down[col] -= 1e-5;
        let fd = (f(&up) - f(&down)) / 2e-5;
        for row in 0..256 {
            worst = worst.max((fd[[0, row]] - j[[row, col]]).abs());
        }
    }
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn gamma_curve_properties() {
    let equal = NoiseSchedule::from_alphas(vec![1.0, 0.8, 0.8]).unwrap();
    assert_eq!(gamma_curve(&equal).unwrap()[1].1, 0.0);
    let s = schedule();
    let g = gamma_curve(&s).unwrap();
    assert_eq!(g.len(), 100);
    for (t, v) in &g {
        let (a, p) = (s.alpha(*t), s.alpha(t - 1));
        let want = ((1.0 - a) / a).sqrt() - ((1.0 - p) / p).sqrt();
        assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    assert!(g.windows(2).all(|w| w[0].1 < w[1].1));
    let fine = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let gf = gamma_curve(&fine).unwrap();
    assert!(gf[0].1 < 0.011 && gf[0].1 < 0.1 * gf[999].1);
}

#[test]
fn slerp_examples() {
    let mut rng = RngStream::new(10, 0);
    let x1 = Tensor::randn(&[1, 16, 16], &mut rng);
    let x2 = Tensor::randn(&[1, 16, 16], &mut rng);
    assert!(slerp(&x1, &x2, 0.0).unwrap().bitwise_eq(&x1));
    assert!(slerp(&x1, &x2, 1.0).unwrap().bitwise_eq(&x2));
    for a in [0.1, 0.5, 0.9] {
        let s = slerp(&x1, &x1, a).unwrap();
        assert!(s.data().iter().zip(x1.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    }
    assert!(slerp(&x1, &x1.scale(-2.0), 0.5).is_err());
    assert!(slerp(&x1, &Tensor::zeros(&[1, 16, 16]), 0.5).is_err());
    let line = slerp(&x1, &x1.scale(3.0), 0.25).unwrap();
    assert!(line.data().iter().zip(x1.data()).all(|(p, q)| (p - 1.5 * q).abs() < 1e-12));
}

#[test]
fn slerp_keeps_gaussian_norm() {
    let mut rng = RngStream::new(11, 0);
    for _ in 0..100 {
        let x1 = Tensor::randn(&[256], &mut rng);
        let x2 = Tensor::randn(&[256], &mut rng);
        let n = slerp(&x1, &x2, 0.5).unwrap().norm();
        let mean = 0.5 * (x1.norm() + x2.norm());
        assert!((n / mean - 1.0).abs() < 0.05);
    }
}

#[test]
fn mmd_identical_sets() {
    let x = rows(20, 12);
    let r = mmd(&x, &x, None).unwrap();
    assert!(r.biased.abs() < 1e-12);
    assert!(r.unbiased <= 1e-12);
    assert!(r.reported >= 0.0);
}

#[test]
fn mmd_point_masses() {
    let p = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let q = Array2::from_shape_vec((2, 2), vec![3.0, 4.0, 3.0, 4.0]).unwrap();
    let sigma = 2.0;
    let want = 2.0 * (1.0 - (-25.0f64 / (2.0 * sigma * sigma)).exp());
    let r = mmd(&p, &q, Some(sigma)).unwrap();
    assert!((r.biased - want).abs() < 1e-14);
    assert!((r.unbiased - want).abs() < 1e-14);
    assert!(mmd(&p.slice(ndarray::s![0..1, ..]).to_owned(), &q, Some(1.0)).is_err());
}

#[test]
fn mmd_detects_shift_beyond_permutation_null() {
    let mut rng = RngStream::new(13, 0);
    let a = Array2::from_shape_vec((500, 1), rng.normal_vec(500)).unwrap();
    let b = Array2::from_shape_vec((500, 1), rng.normal_vec(500)).unwrap().mapv(|v| v + 1.0);
    let bw = 1.0;
    let observed = mmd(&a, &b, Some(bw)).unwrap().unbiased;
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let mut null = Vec::new();
    for _ in 0..100 {
        let mut idx: Vec<usize> = (0..1000).collect();
        for i in (1..1000).rev() {
            idx.swap(i, rng.below(i + 1));
        }
        let pa = Array2::from_shape_fn((500, 1), |(i, _)| pooled[idx[i]]);
        let pb = Array2::from_shape_fn((500, 1), |(i, _)| pooled[idx[500 + i]]);
        null.push(mmd(&pa, &pb, Some(bw)).unwrap().unbiased);
    }
    null.sort_by(f64::total_cmp);
    assert!(observed > 0.0 && observed > null[94]);
}

#[test]
fn constant_stub_prop2_is_exact() {
    let stub = ConstantPredictor { value: Array1::from(RngStream::new(14, 0).normal_vec(256)) };
    let r = dense_refiner(14);
    let pairs = fake_pairs(6, 14);
    let batches = prop2_batches(&pairs, 3).unwrap();
    let rep = verify_prop2(&r, &stub, &batches, &schedule(), 3, 2, 0, Strategy::Sequential).unwrap();
    for (c, k) in rep.cosines.iter().zip(&rep.k_hat) {
        assert!((c - 1.0).abs() < 1e-9 && (k - 1.0).abs() < 1e-9);
    }
    assert!(rep.k_pred.iter().all(|k| (k - 1.0).abs() < 1e-12));
}

#[test]
fn linear_stub_prop2_matches_closed_form() {
    let eta = 0.3;
    let stub = LinearPredictor { eta, offset: Array1::from(RngStream::new(15, 0).normal_vec(256)) };
    let r = dense_refiner(15);
    let s = schedule();
    let batches = prop2_batches(&fake_pairs(4, 15), 2).unwrap();
    let rep = verify_prop2(&r, &stub, &batches, &s, 3, 1, 0, Strategy::Sequential).unwrap();
    // Chain rule of the rollout: dx_0/dx_T = prod (a + b eta).
    let subs = s.substeps(3).unwrap();
    let k: f64 = subs.iter().map(|c| (c.a + c.b * eta) / c.a).product();
    for (kh, kp) in rep.k_hat.iter().zip(&rep.k_pred) {
        assert!((kh / k - 1.0).abs() < 1e-8, "{kh} vs {k}");
        assert!((kp / k - 1.0).abs() < 1e-8, "{kp} vs {k}");
    }
}

fn fake_pairs(n: usize, seed: u64) -> Vec<NoisePair> {
    let mut rng = RngStream::new(seed, 99);
    (0..n)
        .map(|i| NoisePair {
            x_t: Tensor::randn(&[1, 16, 16], &mut rng),
            class: i % 4,
            x0_guide: Tensor::randn(&[1, 16, 16], &mut rng),
            w_used: 0.0,
            s_used: 0.0,
            quality: 0.0,
        })
        .collect()
}

#[test]
fn constant_stub_prop1_has_zero_noise_distance() {
    let stub = ConstantPredictor { value: Array1::from(RngStream::new(16, 0).normal_vec(256)) };
    let s = schedule();
    let r = RefinerNet::init(arch(), &mut RngStream::new(16, 1));
    let mut pairs = fake_pairs(8, 16);
    for p in &mut pairs {
        p.x0_guide = denoise(&p.x_t, Condition::Class(p.class), &stub, &s, 20, None).unwrap();
    }
    let rep = verify_prop1(&r, &stub, &pairs, &s, 10, &InversionConfig::default(), Strategy::Sequential).unwrap();
    assert!(rep.noise_dist.iter().all(|&d| d < 1e-18), "{:?}", rep.noise_dist);
    assert!(rep.kappa_hat.is_finite());
}

#[test]
fn cross_condition_reduces_to_pipeline() {
    let net = DenoiserNet::init_dense(arch(), &mut RngStream::new(17, 0));
    let r = dense_refiner(17);
    let s = schedule();
    let x = rows(3, 17);
    let c = vec![Condition::Class(1); 3];
    let probe = cross_condition_probe(&r, &net, &x, &c, &c, &s, 10).unwrap();
    let direct = denoise_rows(&r.refine(&x, &c).unwrap(), &c, &net, &s, 10, None).unwrap();
    assert_eq!(probe, direct);

    let ident = RefinerNet::init(arch(), &mut RngStream::new(17, 2));
    let null = vec![Condition::Null; 3];
    let a = cross_condition_probe(&ident, &net, &x, &c, &null, &s, 10).unwrap();
    let b = cross_condition_probe(&ident, &net, &x, &[Condition::Class(3); 3], &null, &s, 10).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pearson_and_templates() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 0.9986).abs() < 1e-3);
    assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
    let t = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 1.0, 1.0, -1.0, 2.0]).unwrap();
    assert_eq!(nearest_template(ndarray::ArrayView1::from(&[0.9, 1.2]), &t), 1);
}
