use ndarray::Array2;

use super::tape::Tape;
use super::*;

fn mini_arch() -> NetArch {
    NetArch { image_shape: vec![1, 4, 4], time_dim: 4, num_classes: 2, hidden: 8, depth: 3, max_timestep: 10 }
}

fn randn_rows(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), rng.normal_vec(rows * cols)).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central finite difference of `f` along parameter `i`.
fn central_diff(params: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let up = f(&p);
    p[i] = params[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

#[test]
fn zero_denoiser_outputs_zero() {
    let net = DenoiserNet::zeros(NetArch::toy(4, 100));
    let x = randn_rows(3, 256, &mut RngStream::new(1, 0));
    let y = net.predict(&x, 50, &[Condition::Class(0), Condition::Null, Condition::Class(3)]).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn denoiser_is_deterministic() {
    let arch = mini_arch();
    let net = DenoiserNet::init_dense(arch, &mut RngStream::new(2, 0));
    let x = randn_rows(2, 16, &mut RngStream::new(2, 1));
    let c = [Condition::Class(1), Condition::Null];
    let a = net.predict(&x, 7, &c).unwrap();
    let b = net.predict(&x, 7, &c).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn rejects_bad_timestep_and_class() {
    let net = DenoiserNet::zeros(mini_arch());
    let x = Array2::zeros((1, 16));
    assert!(matches!(net.predict(&x, 0, &[Condition::Null]), Err(Error::InvalidTimestep { .. })));
    assert!(matches!(net.predict(&x, 11, &[Condition::Null]), Err(Error::InvalidTimestep { .. })));
    assert!(matches!(net.predict(&x, 3, &[Condition::Class(2)]), Err(Error::InvalidClass { .. })));
    assert!(net.predict(&Array2::zeros((1, 15)), 3, &[Condition::Null]).is_err());
}

#[test]
fn tape_matches_plain_forward_bitwise() {
    let net = DenoiserNet::init_dense(mini_arch(), &mut RngStream::new(3, 0));
    let x = randn_rows(4, 16, &mut RngStream::new(3, 1));
    let conds = [Condition::Class(0), Condition::Class(1), Condition::Null, Condition::Class(0)];
    let plain = net.predict(&x, 4, &conds).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = net.record(&mut tape, xv, 4, &conds).unwrap();
    assert!(plain.iter().zip(tape.value(y).iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn denoiser_gradient_matches_finite_differences() {
    let arch = mini_arch();
    let mut rng = RngStream::new(4, 0);
    let net = DenoiserNet::init_dense(arch.clone(), &mut rng);
    let x = randn_rows(3, 16, &mut rng);
    let ts = [2usize, 5, 9];
    let conds = [Condition::Class(0), Condition::Null, Condition::Class(1)];

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = net.record_rows(&mut tape, xv, &ts, &conds).unwrap();
    let grads = tape.backward(y, Array2::ones(tape.value(y).dim())).unwrap();
    let g = grads.params(net.params()).unwrap();

    let f = |p: &[f64]| {
        let mut n = DenoiserNet::zeros(arch.clone());
        n.set_params(p.to_vec()).unwrap();
        n.predict_rows(&x, &ts, &conds).unwrap().sum()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.below(net.params().len());
        worst = worst.max(rel_err(g[i], central_diff(net.params(), i, 1e-5, f)));
    }
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn refiner_gradient_matches_finite_differences() {
    let arch = mini_arch();
    let mut rng = RngStream::new(5, 0);
    let mut refiner = RefinerNet::init(arch.clone(), &mut rng);
    // Move off the zero output layer so every block carries gradient.
    let dense = Mlp::init(16 + 4 + 3, 8, 3, 16, false, &mut rng);
    refiner.set_params(dense.params().to_vec()).unwrap();
    let x = randn_rows(2, 16, &mut rng);
    let conds = [Condition::Class(1), Condition::Class(0)];

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = refiner.record(&mut tape, xv, &conds).unwrap();
    let grads = tape.backward(y, Array2::ones(tape.value(y).dim())).unwrap();
    let g = grads.params(refiner.params()).unwrap();

    let f = |p: &[f64]| {
        let mut r = refiner.clone();
        r.set_params(p.to_vec()).unwrap();
        r.refine(&x, &conds).unwrap().sum()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.below(refiner.params().len());
        worst = worst.max(rel_err(g[i], central_diff(refiner.params(), i, 1e-5, f)));
    }
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let arch = mini_arch();
    let mut rng = RngStream::new(6, 0);
    let net = DenoiserNet::init_dense(arch, &mut rng);
    let x = randn_rows(1, 16, &mut rng);
    let c = [Condition::Class(0)];
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = net.record(&mut tape, xv, 3, &c).unwrap();
    let grads = tape.backward(y, Array2::ones((1, 16))).unwrap();
    let gx = grads.wrt(xv).unwrap();
    for i in 0..16 {
        let f = |d: f64| {
            let mut xp = x.clone();
            xp[[0, i]] += d;
            net.predict(&xp, 3, &c).unwrap().sum()
        };
        let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
        assert!(rel_err(gx[[0, i]], fd) < 1e-6);
    }
}

#[test]
fn refiner_is_identity_at_init() {
    let r = RefinerNet::init(NetArch::toy(4, 100), &mut RngStream::new(7, 0));
    let x = randn_rows(5, 256, &mut RngStream::new(7, 1));
    let conds = vec![Condition::Class(2); 5];
    let y = r.refine(&x, &conds).unwrap();
    assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn output_layer_perturbation_is_linear() {
    let arch = mini_arch();
    let mut rng = RngStream::new(8, 0);
    let r = RefinerNet::init(arch, &mut rng);
    let x = randn_rows(1, 16, &mut rng);
    let conds = [Condition::Class(1)];
    let h = r.last_hidden(&x, &conds).unwrap();
    let base = r.refine(&x, &conds).unwrap();
    let out = *r.mlp().layers().last().unwrap();
    let (j, k) = (3, 5);
    for delta in [1e-3, 0.5, -2.0] {
        let mut p = r.params().to_vec();
        p[out.offset + j * out.fan_out + k] += delta;
        let mut r2 = r.clone();
        r2.set_params(p).unwrap();
        let moved = r2.refine(&x, &conds).unwrap();
        for col in 0..16 {
            let want = if col == k { delta * h[[0, j]] } else { 0.0 };
            assert!((moved[[0, col]] - base[[0, col]] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn detach_blocks_gradient() {
    let net = DenoiserNet::init_dense(mini_arch(), &mut RngStream::new(9, 0));
    let x = randn_rows(2, 16, &mut RngStream::new(9, 1));
    let c = [Condition::Class(0), Condition::Class(1)];

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = net.record(&mut tape, xv, 5, &c).unwrap();
    let d = tape.detach(y);
    assert_eq!(tape.value(d), tape.value(y));
    let grads = tape.backward(d, Array2::ones((2, 16))).unwrap();
    assert!(grads.params(net.params()).unwrap().iter().all(|&g| g == 0.0));
    assert!(grads.wrt(xv).is_none());
}

#[test]
fn detached_summand_drops_out_of_gradient() {
    let net = DenoiserNet::init_dense(mini_arch(), &mut RngStream::new(10, 0));
    let x = randn_rows(2, 16, &mut RngStream::new(10, 1));
    let c = [Condition::Class(0), Condition::Null];

    let mut t1 = Tape::new();
    let x1 = t1.constant(x.clone());
    let f = net.record(&mut t1, x1, 3, &c).unwrap();
    let g = net.record(&mut t1, x1, 8, &c).unwrap();
    let gd = t1.detach(g);
    let s = t1.lincomb(f, 1.0, gd, 1.0).unwrap();
    let with = t1.backward(s, Array2::ones((2, 16))).unwrap();

    let mut t2 = Tape::new();
    let x2 = t2.constant(x.clone());
    let f2 = net.record(&mut t2, x2, 3, &c).unwrap();
    let alone = t2.backward(f2, Array2::ones((2, 16))).unwrap();

    assert_eq!(with.params(net.params()).unwrap(), alone.params(net.params()).unwrap());
}

#[test]
fn gradients_add_across_batch_rows() {
    let net = DenoiserNet::init_dense(mini_arch(), &mut RngStream::new(11, 0));
    let x = randn_rows(2, 16, &mut RngStream::new(11, 1));
    let c = [Condition::Class(0), Condition::Class(1)];
    let grad_of = |rows: Array2<f64>, conds: &[Condition]| {
        let mut t = Tape::new();
        let xv = t.constant(rows);
        let y = net.record(&mut t, xv, 4, conds).unwrap();
        let n = t.value(y).nrows();
        t.backward(y, Array2::ones((n, 16))).unwrap().params(net.params()).unwrap().to_vec()
    };
    let both = grad_of(x.clone(), &c);
    let a = grad_of(x.slice(ndarray::s![0..1, ..]).to_owned(), &c[..1]);
    let b = grad_of(x.slice(ndarray::s![1..2, ..]).to_owned(), &c[1..]);
    for ((g, p), q) in both.iter().zip(&a).zip(&b) {
        assert!((g - (p + q)).abs() <= 1e-12 * (1.0 + g.abs()));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = DenoiserNet::init_dense(mini_arch(), &mut RngStream::new(12, 0));
    let ck = Checkpoint::of_denoiser(&net, 1234, 99);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.header, ck.header);
    assert!(back.params.iter().zip(&ck.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    let restored = back.into_denoiser().unwrap();
    assert_eq!(restored, net);

    let r = RefinerNet::init(mini_arch(), &mut RngStream::new(12, 1));
    let rc = Checkpoint::from_bytes(&Checkpoint::of_refiner(&r, 5, 1).to_bytes().unwrap()).unwrap();
    assert!(rc.clone().into_denoiser().is_err());
    assert_eq!(rc.into_refiner().unwrap(), r);
}
