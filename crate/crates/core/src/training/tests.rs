use ndarray::{Array1, Array2};

use super::*;
use crate::nets::tape::Tape;
use crate::nets::{Condition, DenoiserNet, NetArch, RefinerNet};
use crate::rng::RngStream;
use crate::sampler::{denoise_rows, ConstantPredictor, GuidanceSpec};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

fn arch() -> NetArch {
    NetArch { image_shape: vec![1, 16, 16], time_dim: 8, num_classes: 4, hidden: 32, depth: 2, max_timestep: 20 }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(20, 5e-3, 0.4).unwrap()
}

fn dense_net(seed: u64) -> DenoiserNet {
    let mut n = DenoiserNet::init_dense(arch(), &mut RngStream::new(seed, 0));
    for p in n.params_mut() {
        *p *= 0.5;
    }
    n
}

fn dense_refiner(seed: u64) -> RefinerNet {
    let mut r = RefinerNet::init(arch(), &mut RngStream::new(seed, 0));
    let mut rng = RngStream::new(seed, 1);
    let p: Vec<f64> = r.params().iter().map(|_| 0.05 * rng.normal()).collect();
    r.set_params(p).unwrap();
    r
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        steps: 10,
        batch_size: 8,
        sampler_steps: 3,
        guided_steps: 4,
        grad_chunk: 3,
        s_range: (0.0, 0.0),
        ..TrainConfig::default()
    }
}

fn pair(q: f64) -> NoisePair {
    NoisePair {
        x_t: Tensor::zeros(&[1]),
        class: 0,
        x0_guide: Tensor::full(&[1], q),
        w_used: 0.0,
        s_used: 0.0,
        quality: q,
    }
}

#[test]
fn filter_examples() {
    let ps: Vec<_> = [0.1, 0.5, 0.9].iter().map(|&q| pair(q)).collect();
    assert_eq!(filter_pairs(&ps, 100.0).unwrap(), ps);
    let kept = filter_pairs(&ps, 34.0).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].quality, 0.9);
    assert!(filter_pairs(&[], 50.0).is_err());
    assert!(filter_pairs(&ps, 0.0).is_err());
    assert!(filter_pairs(&ps, 100.5).is_err());
}

#[test]
fn filter_quartile_cut() {
    let mut rng = RngStream::new(1, 0);
    let ps: Vec<_> = (0..1000)
        .map(|i| NoisePair { x_t: Tensor::full(&[1], i as f64), ..pair(rng.below(50) as f64 / 7.0) })
        .collect();
    let kept = filter_pairs(&ps, 25.0).unwrap();
    assert_eq!(kept.len(), 250);
    let idx: Vec<usize> = kept.iter().map(|p| p.x_t.data()[0] as usize).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    let min_kept = kept.iter().map(|p| p.quality).fold(f64::INFINITY, f64::min);
    let max_dropped = (0..1000).filter(|i| !idx.contains(i)).map(|i| ps[i].quality).fold(f64::NEG_INFINITY, f64::max);
    assert!(min_kept >= max_dropped);
}

#[test]
fn cosine_lr_endpoints() {
    let cfg = TrainConfig { steps: 101, lr: 1e-3, lr_floor: 0.1, ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-18);
    assert!((cfg.lr_at(50) - 1e-3 * 0.55).abs() < 1e-15);
    let flat = TrainConfig { cosine_decay: false, ..cfg };
    assert_eq!(flat.lr_at(77), 1e-3);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { filter_q: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { w_range: (3.0, 1.0), ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn zero_output_net_starts_at_unit_loss() {
    let data = ShapesDataset::generate(64, 0, Strategy::Sequential).unwrap();
    let net = DenoiserNet::init(arch(), &mut RngStream::new(2, 0));
    let cfg = TrainConfig { batch_size: 64, ..TrainConfig::default() };
    let loss = base_loss(&net, &data, &schedule(), &cfg, 0).unwrap();
    // 16384 draws of eps^2: std of the mean is sqrt(2 / 16384) ~ 0.011.
    assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
}

#[test]
fn base_training_reproducible_across_strategies() {
    let data = ShapesDataset::generate(32, 0, Strategy::Sequential).unwrap();
    let cfg = small_cfg();
    let a = train_base(arch(), &data, &schedule(), &cfg, Strategy::Sequential).unwrap();
    let b = train_base(arch(), &data, &schedule(), &cfg, Strategy::Parallel).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.degraded_step, 1);
    assert_ne!(a.degraded, a.net);
    assert_eq!(a.log.len(), 10);
    let bits = |l: &[LogRow]| l.iter().map(|r| (r.loss.to_bits(), r.grad_norm.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.log), bits(&b.log));
}

#[test]
fn chunked_gradient_matches_single_chunk() {
    let net = dense_net(3);
    let r = dense_refiner(4);
    let s = schedule();
    let mut rng = RngStream::new(5, 0);
    let x = Array2::from_shape_vec((7, 256), rng.normal_vec(7 * 256)).unwrap();
    let y = Array2::from_shape_vec((7, 256), rng.normal_vec(7 * 256)).unwrap();
    let c: Vec<_> = (0..7).map(|i| Condition::Class(i % 4)).collect();
    let (l1, g1) = refiner_gradient(&r, &net, &x, &c, &y, &s, 3, RefinerMode::Msd, 100, Strategy::Sequential).unwrap();
    let (l2, g2) = refiner_gradient(&r, &net, &x, &c, &y, &s, 3, RefinerMode::Msd, 2, Strategy::Parallel).unwrap();
    assert!((l1 - l2).abs() < 1e-12 * l1);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}

#[test]
fn degenerate_scales_give_unguided_targets() {
    let net = dense_net(6);
    let s = schedule();
    let cfg = TrainConfig { w_range: (0.0, 0.0), s_range: (0.0, 0.0), ..small_cfg() };
    let pairs = gen_pairs(&net, None, &s, &cfg, 5, 9, Strategy::Sequential).unwrap();
    for p in &pairs {
        let x = Array2::from_shape_vec((1, 256), p.x_t.data().to_vec()).unwrap();
        let plain = denoise_rows(&x, &[Condition::Class(p.class)], &net, &s, cfg.guided_steps, None).unwrap();
        assert!(plain.iter().zip(p.x0_guide.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!((p.w_used, p.s_used), (0.0, 0.0));
    }
}

#[test]
fn pair_generation_is_deterministic() {
    let net = dense_net(7);
    let deg = dense_net(8);
    let s = schedule();
    let cfg = TrainConfig { s_range: (2.0, 3.0), ..small_cfg() };
    let a = gen_pairs(&net, Some(&deg), &s, &cfg, 70, 4, Strategy::Sequential).unwrap();
    let b = gen_pairs(&net, Some(&deg), &s, &cfg, 70, 4, Strategy::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[5].class, 1);
    assert!(a.iter().all(|p| (3.0..=5.0).contains(&p.w_used) && (2.0..=3.0).contains(&p.s_used)));
    assert!(gen_pairs(&net, None, &s, &cfg, 3, 4, Strategy::Sequential).is_err());
}

#[test]
fn guided_pair_matches_manual_guided_sample() {
    let net = dense_net(10);
    let s = schedule();
    let cfg = small_cfg();
    let p = &gen_pairs(&net, None, &s, &cfg, 1, 2, Strategy::Sequential).unwrap()[0];
    let out = crate::sampler::denoise(&p.x_t, Condition::Class(0), &net, &s, 4, Some(&GuidanceSpec::cfg(p.w_used))).unwrap();
    assert!(out.bitwise_eq(&p.x0_guide));
}

#[test]
fn quality_score_is_deterministic_and_finite() {
    let net = dense_net(11);
    let s = schedule();
    let x = Tensor::randn(&[1, 16, 16], &mut RngStream::new(1, 1));
    let a = quality_score(&x, 2, &net, &s, 8, &mut RngStream::new(3, 3)).unwrap();
    let b = quality_score(&x, 2, &net, &s, 8, &mut RngStream::new(3, 3)).unwrap();
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a < 0.0);
}

#[test]
fn quality_variance_scales_with_draws() {
    let net = dense_net(12);
    let s = schedule();
    let x = Tensor::randn(&[1, 16, 16], &mut RngStream::new(2, 1));
    let var_of = |m: usize| {
        let v: Vec<f64> =
            (0..400).map(|k| quality_score(&x, 1, &net, &s, m, &mut RngStream::derive(m as u64, "qv", k)).unwrap()).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let ratio = var_of(8) / var_of(64);
    assert!((6.0..10.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn pair_archive_round_trip() {
    let net = dense_net(13);
    let pairs = gen_pairs(&net, None, &schedule(), &small_cfg(), 6, 1, Strategy::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_pair_archive(dir.path(), &pairs).unwrap();
    assert_eq!(read_pair_archive(dir.path()).unwrap(), pairs);
    let xt = Tensor::read_nft(std::fs::File::open(dir.path().join("xT.nft")).unwrap()).unwrap();
    assert_eq!(xt.shape(), &[6, 1, 16, 16]);
}

#[test]
fn identity_refiner_rollout_is_unguided_sample() {
    let net = dense_net(14);
    let r = RefinerNet::init(arch(), &mut RngStream::new(14, 1));
    let s = schedule();
    let x = Array2::from_shape_vec((16, 256), RngStream::new(14, 2).normal_vec(16 * 256)).unwrap();
    let c: Vec<_> = (0..16).map(|i| Condition::Class(i % 4)).collect();
    let plain = denoise_rows(&x, &c, &net, &s, 5, None).unwrap();
    let msd = msd_rollout(&r, &net, &x, &c, &s, 5).unwrap();
    assert_eq!(plain, msd);
}

#[test]
fn msd_and_full_rollouts_share_values_and_isolate_denoiser() {
    let net = dense_net(15);
    let r = dense_refiner(16);
    let s = schedule();
    let x = Array2::from_shape_vec((4, 256), RngStream::new(15, 2).normal_vec(4 * 256)).unwrap();
    let c: Vec<_> = (0..4).map(|i| Condition::Class(i % 4)).collect();
    let msd = msd_rollout(&r, &net, &x, &c, &s, 5).unwrap();
    let full = full_grad_rollout(&r, &net, &x, &c, &s, 5).unwrap();
    assert!(msd.iter().zip(&full).all(|(a, b)| a.to_bits() == b.to_bits()));
    let refined = r.refine(&x, &c).unwrap();
    let plain = denoise_rows(&refined, &c, &net, &s, 5, None).unwrap();
    assert!(msd.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (_, x0) = rollout_record(&mut tape, &r, &net, xv, &c, &s, 5, RefinerMode::Msd).unwrap();
    let g = tape.backward(x0, Array2::ones(x.dim())).unwrap();
    assert!(g.params(net.params()).unwrap().iter().all(|&v| v == 0.0));
    assert!(g.params(r.params()).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn constant_denoiser_gradients_coincide() {
    let stub = ConstantPredictor { value: Array1::from(RngStream::new(17, 0).normal_vec(256)) };
    let r = dense_refiner(17);
    let s = schedule();
    let mut rng = RngStream::new(17, 1);
    let x = Array2::from_shape_vec((3, 256), rng.normal_vec(768)).unwrap();
    let y = Array2::from_shape_vec((3, 256), rng.normal_vec(768)).unwrap();
    let c = vec![Condition::Class(2); 3];
    let (la, ga) = refiner_gradient(&r, &stub, &x, &c, &y, &s, 4, RefinerMode::Msd, 8, Strategy::Sequential).unwrap();
    let (lb, gb) = refiner_gradient(&r, &stub, &x, &c, &y, &s, 4, RefinerMode::FullGrad, 8, Strategy::Sequential).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn refiner_with_unguided_targets_stays_at_zero_loss() {
    let net = dense_net(18);
    let s = schedule();
    let cfg = TrainConfig { w_range: (0.0, 0.0), s_range: (0.0, 0.0), guided_steps: 3, ..small_cfg() };
    let pairs = gen_pairs(&net, None, &s, &cfg, 12, 3, Strategy::Sequential).unwrap();
    let r0 = RefinerNet::init(arch(), &mut RngStream::new(18, 1));
    let (r, log) = train_refiner(r0.clone(), &net, PairSource::Offline(&pairs), &s, &cfg, RefinerMode::Msd, Strategy::default())
        .unwrap();
    assert!(log.iter().all(|row| row.loss == 0.0));
    assert_eq!(r, r0);
}

#[test]
fn refiner_loss_decreases_on_fixed_pairs() {
    let net = dense_net(19);
    let s = schedule();
    let cfg = TrainConfig { steps: 60, lr: 3e-3, cosine_decay: false, ..small_cfg() };
    let pairs = gen_pairs(&net, None, &s, &cfg, 16, 5, Strategy::Sequential).unwrap();
    let r0 = RefinerNet::init(arch(), &mut RngStream::new(19, 1));
    let (_, log) =
        train_refiner(r0, &net, PairSource::Offline(&pairs), &s, &cfg, RefinerMode::Msd, Strategy::default()).unwrap();
    let head: f64 = log[..10].iter().map(|r| r.loss).sum();
    let tail: f64 = log[50..].iter().map(|r| r.loss).sum();
    assert!(tail < head, "head {head} tail {tail}");
}

#[test]
fn online_source_trains() {
    let net = dense_net(20);
    let s = schedule();
    let cfg = TrainConfig { steps: 2, filter_q: 50.0, ..small_cfg() };
    let r0 = RefinerNet::init(arch(), &mut RngStream::new(20, 1));
    let (_, log) =
        train_refiner(r0, &net, PairSource::Online { degraded: None }, &s, &cfg, RefinerMode::Msd, Strategy::default())
            .unwrap();
    assert_eq!(log.len(), 2);
    assert!(log[0].loss > 0.0);
}

#[test]
fn log_csv_layout() {
    let rows = vec![LogRow { step: 0, loss: 1.5, grad_norm: 2.0, wall_ms: 3.0 }];
    let mut buf = Vec::new();
    write_log_csv(&rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,grad_norm,wall_ms\n0,1.5,2.0,3.0\n");
}

#[test]
fn full_gradient_matches_finite_differences() {
    let net = dense_net(23);
    let r = dense_refiner(23);
    let s = schedule();
    let mut rng = RngStream::new(23, 1);
    let x = Array2::from_shape_vec((2, 256), rng.normal_vec(512)).unwrap();
    let y = Array2::from_shape_vec((2, 256), rng.normal_vec(512)).unwrap();
    let c = vec![Condition::Class(1), Condition::Class(3)];
    let loss_at = |p: &[f64]| {
        let mut q = r.clone();
        q.set_params(p.to_vec()).unwrap();
        refiner_gradient(&q, &net, &x, &c, &y, &s, 3, RefinerMode::FullGrad, 8, Strategy::Sequential).unwrap().0
    };
    let (_, g) = refiner_gradient(&r, &net, &x, &c, &y, &s, 3, RefinerMode::FullGrad, 8, Strategy::Sequential).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.below(g.len());
        let mut p = r.params().to_vec();
        p[i] += h;
        let up = loss_at(&p);
        p[i] -= 2.0 * h;
        let fd = (up - loss_at(&p)) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8));
    }
    assert!(worst < 1e-5, "max rel err {worst}");
}
