//! Empirical checks of the noise-space/image-space distance relation and of
//! the proportionality between distillation and full-backprop gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::tape::{Tape, Var};
use crate::nets::{Condition, RefinerNet};
use crate::par::{self, Strategy};
use crate::rng::RngStream;
use crate::sampler::{denoise_rows_traced, invert_rows, InversionConfig, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::training::{refiner_gradient, NoisePair, RefinerMode};
use crate::tensor::stack_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    /// Mean squared distance between the refined noise and the inverted target.
    pub noise_dist: Vec<f64>,
    /// Mean squared distance between the refined sample and the target.
    pub image_dist: Vec<f64>,
    pub ratios: Vec<f64>,
    pub kappa_hat: f64,
    pub pearson_r: f64,
    /// `(t, L_t)` along the sampling subsequence.
    pub lipschitz: Vec<(usize, f64)>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn row_mse(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    (a - b).rows().into_iter().map(|r| r.mapv(|v| v * v).mean().unwrap_or(0.0)).collect()
}

/// Pairs per worker task.
const PROP_CHUNK: usize = 50;

/// For each pair: refine `x_T`, sample without guidance, invert the guided
/// target, and compare the two distances.
pub fn verify_prop1(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    pairs: &[NoisePair],
    schedule: &NoiseSchedule,
    steps: usize,
    inversion: &InversionConfig,
    strategy: Strategy,
) -> Result<Prop1Report> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("prop1 pairs".into()));
    }
    let ranges = par::chunk_ranges(pairs.len(), PROP_CHUNK);
    let parts = par::try_map_indexed(ranges.len(), strategy, |ci| {
        let chunk = &pairs[ranges[ci].clone()];
        let x_t = stack_rows(&chunk.iter().map(|p| p.x_t.clone()).collect::<Vec<_>>())?;
        let target = stack_rows(&chunk.iter().map(|p| p.x0_guide.clone()).collect::<Vec<_>>())?;
        let conds: Vec<Condition> = chunk.iter().map(|p| Condition::Class(p.class)).collect();
        let x_hat = refiner.refine(&x_t, &conds)?;
        let mut trace_a = Vec::new();
        let x0_hat = denoise_rows_traced(&x_hat, &conds, net, schedule, steps, None, Some(&mut trace_a))?;
        let inv = invert_rows(&target, &conds, net, schedule, inversion)?;
        let mut trace_b = Vec::new();
        denoise_rows_traced(&inv, &conds, net, schedule, steps, None, Some(&mut trace_b))?;
        // Per-step Lipschitz ratios between the two trajectories.
        let mut lips = Vec::new();
        for ((t, xa), (_, xb)) in trace_a.iter().zip(&trace_b).take(trace_a.len() - 1) {
            let ea = net.predict(xa, *t, &conds)?;
            let eb = net.predict(xb, *t, &conds)?;
            let num = row_mse(&ea, &eb);
            let den = row_mse(xa, xb);
            let l = num.iter().zip(&den).filter(|(_, d)| **d > 0.0).map(|(n, d)| (n / d).sqrt()).fold(0.0, f64::max);
            lips.push((*t, l));
        }
        Ok::<_, Error>((row_mse(&x_hat, &inv), row_mse(&x0_hat, &target), lips))
    })?;
    let mut noise_dist = Vec::new();
    let mut image_dist = Vec::new();
    let mut lipschitz: Vec<(usize, f64)> = Vec::new();
    for (n, i, l) in parts {
        noise_dist.extend(n);
        image_dist.extend(i);
        if lipschitz.is_empty() {
            lipschitz = l;
        } else {
            for (acc, (_, v)) in lipschitz.iter_mut().zip(l) {
                acc.1 = acc.1.max(v);
            }
        }
    }
    let ratios: Vec<f64> = noise_dist
        .iter()
        .zip(&image_dist)
        .map(|(n, i)| if *n == 0.0 { 0.0 } else { n / i })
        .collect();
    let kappa_hat = ratios.iter().copied().fold(0.0, f64::max);
    let pearson_r = pearson(&noise_dist, &image_dist);
    Ok(Prop1Report { noise_dist, image_dist, ratios, kappa_hat, pearson_r, lipschitz })
}

/// One batch for the gradient comparison.
pub struct Prop2Batch {
    pub x_t: Array2<f64>,
    pub conds: Vec<Condition>,
    pub target: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub cosines: Vec<f64>,
    /// Signed ratio `|g_full| / |g_msd|` per batch.
    pub k_hat: Vec<f64>,
    /// Proportionality predicted from the estimated `eta_t`.
    pub k_pred: Vec<f64>,
    /// Estimated `(t, eta_t)` per batch.
    pub eta: Vec<Vec<(usize, f64)>>,
    pub mean_cosine: f64,
}

/// `1 - sqrt(alpha_T) sum_t gamma_t eta_t / sqrt(alpha_{t_prev})` over the
/// `steps`-step subsequence; `etas[i]` belongs to the `i`-th step from `T`.
pub fn prop2_proportionality(schedule: &NoiseSchedule, steps: usize, etas: &[f64]) -> Result<f64> {
    let subs = schedule.substeps(steps)?;
    if etas.len() != subs.len() {
        return Err(Error::ShapeMismatch { expected: vec![subs.len()], got: vec![etas.len()] });
    }
    let sum: f64 = subs.iter().zip(etas).map(|(c, e)| c.gamma * e / c.alpha_prev.sqrt()).sum();
    Ok(1.0 - schedule.alpha(subs[0].t).sqrt() * sum)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Hutchinson estimate of `tr(d eps_t / d x_hat) / D` at every step of the
/// full rollout started from the refined noise `x_hat`.
pub fn estimate_etas(
    net: &dyn NoisePredictor,
    x_hat: &Array2<f64>,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
    probes: usize,
    rng: &mut RngStream,
) -> Result<Vec<(usize, f64)>> {
    let mut tape = Tape::new();
    let leaf = tape.input(x_hat.clone());
    let mut x = leaf;
    let mut eps_vars: Vec<(usize, Var)> = Vec::new();
    for c in schedule.substeps(steps)? {
        let e = net.record(&mut tape, x, c.t, conds)?;
        eps_vars.push((c.t, e));
        x = tape.lincomb(x, c.a, e, c.b)?;
    }
    let mut out = Vec::with_capacity(eps_vars.len());
    for (t, e) in eps_vars {
        let mut acc = 0.0;
        for _ in 0..probes.max(1) {
            let v = Array2::from_shape_vec(x_hat.dim(), rng.normal_vec(x_hat.len())).expect("probe shape");
            let grads = tape.backward(e, v.clone())?;
            let vjp = grads.wrt(leaf).cloned().unwrap_or_else(|| Array2::zeros(x_hat.dim()));
            acc += (&vjp * &v).sum() / v.mapv(|z| z * z).sum();
        }
        out.push((t, acc / probes.max(1) as f64));
    }
    Ok(out)
}

/// Compares distillation and full-backprop refiner gradients on identical
/// batches.
#[allow(clippy::too_many_arguments)]
pub fn verify_prop2(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    batches: &[Prop2Batch],
    schedule: &NoiseSchedule,
    steps: usize,
    eta_probes: usize,
    seed: u64,
    strategy: Strategy,
) -> Result<Prop2Report> {
    if batches.is_empty() {
        return Err(Error::EmptyInput("prop2 batches".into()));
    }
    let rows = par::try_map_indexed(batches.len(), strategy, |i| {
        let b = &batches[i];
        let grad = |mode| {
            refiner_gradient(refiner, net, &b.x_t, &b.conds, &b.target, schedule, steps, mode, usize::MAX, Strategy::Sequential)
        };
        let (_, g_msd) = grad(RefinerMode::Msd)?;
        let (_, g_full) = grad(RefinerMode::FullGrad)?;
        let d = dot(&g_full, &g_msd);
        let (nf, nm) = (dot(&g_full, &g_full).sqrt(), dot(&g_msd, &g_msd).sqrt());
        if nm == 0.0 {
            return Err(Error::NonFiniteGradient("distillation gradient vanished".into()));
        }
        let k_hat = d.signum() * nf / nm;
        let x_hat = refiner.refine(&b.x_t, &b.conds)?;
        let mut rng = RngStream::derive(seed, "prop2-eta", i as u64);
        let eta = estimate_etas(net, &x_hat, &b.conds, schedule, steps, eta_probes, &mut rng)?;
        let etas: Vec<f64> = eta.iter().map(|e| e.1).collect();
        let k_pred = prop2_proportionality(schedule, steps, &etas)?;
        Ok((cosine(&g_full, &g_msd), k_hat, k_pred, eta))
    })?;
    let mut report = Prop2Report { cosines: vec![], k_hat: vec![], k_pred: vec![], eta: vec![], mean_cosine: 0.0 };
    for (c, k, p, e) in rows {
        report.cosines.push(c);
        report.k_hat.push(k);
        report.k_pred.push(p);
        report.eta.push(e);
    }
    report.mean_cosine = report.cosines.iter().sum::<f64>() / report.cosines.len() as f64;
    Ok(report)
}

/// Builds [`Prop2Batch`]es from consecutive slices of `pairs`.
pub fn prop2_batches(pairs: &[NoisePair], batch: usize) -> Result<Vec<Prop2Batch>> {
    pairs
        .chunks(batch.max(1))
        .map(|c| {
            Ok(Prop2Batch {
                x_t: stack_rows(&c.iter().map(|p| p.x_t.clone()).collect::<Vec<_>>())?,
                conds: c.iter().map(|p| Condition::Class(p.class)).collect(),
                target: stack_rows(&c.iter().map(|p| p.x0_guide.clone()).collect::<Vec<_>>())?,
            })
        })
        .collect()
}
