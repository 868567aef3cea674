//! The end-to-end acceptance suite.
//!
//! Eleven numbered criteria gate the suite. A few supplementary checks run
//! alongside them and are reported without gating. Trained artifacts (base
//! model, pair pools, refiners) can be cached in a directory keyed by the
//! config hash so that repeated runs skip training.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use serde::Serialize;

use crate::analysis::{
    band_energy_many, band_swap_probe, cross_condition_probe, jacobian_probe, mmd, median_bandwidth, nearest_template,
    prop2_batches, slerp, verify_prop1, verify_prop2, SwapMode,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nets::tape::Tape;
use crate::nets::{load_checkpoint, save_checkpoint, Checkpoint, Condition, DenoiserNet, NetArch, RefinerNet};
use crate::par::{self, Strategy};
use crate::rng::RngStream;
use crate::sampler::{
    denoise_rows, invert_rows, ConstantPredictor, CountingPredictor, GuidanceSpec, InversionConfig, LinearPredictor,
    NoisePredictor, RowGuidance,
};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::{
    base_loss, filter_pairs, gen_pairs, quality_score, read_pair_archive, rollout_record,
    save_log_csv, train_base, train_refiner, write_pair_archive, LogRow, NoisePair, PairSource, RefinerMode,
    ShapesDataset, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionResult {
    /// 1..=11 for gating criteria, 0 for supplementary checks.
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        if self.id == 0 {
            format!("[{tag}] supplementary {}: {}", self.name, self.detail)
        } else {
            format!("[{tag}] criterion {:>2} {}: {} ({:.1}s)", self.id, self.name, self.detail, self.seconds)
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AcceptanceReport {
    pub criteria: Vec<CriterionResult>,
    pub supplementary: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

fn result(id: u8, name: &str, passed: bool, detail: String, started: Instant) -> CriterionResult {
    CriterionResult { id, name: name.into(), passed, detail, seconds: started.elapsed().as_secs_f64() }
}

/// Failing with an error is reported as a failed criterion.
fn guarded(id: u8, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionResult {
    let t = Instant::now();
    match f() {
        Ok((ok, detail)) => result(id, name, ok, detail, t),
        Err(e) => result(id, name, false, format!("error: {e}"), t),
    }
}

fn mini_arch() -> NetArch {
    NetArch { image_shape: vec![1, 4, 4], time_dim: 4, num_classes: 2, hidden: 8, depth: 3, max_timestep: 10 }
}

fn rows(n: usize, d: usize, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_vec((n, d), rng.normal_vec(n * d)).expect("row shape")
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn central_diff(params: &[f64], i: usize, h: f64, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let up = f(&p);
    p[i] = params[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Criterion 1: reverse-mode gradients of miniature nets against central
/// differences.
pub fn criterion_gradients() -> CriterionResult {
    guarded(1, "gradient correctness", || {
        let arch = mini_arch();
        let mut rng = RngStream::derive(1, "accept-gradients", 0);
        let net = DenoiserNet::init_dense(arch.clone(), &mut rng);
        let x = rows(3, 16, &mut rng);
        let ts = [2usize, 5, 9];
        let conds = [Condition::Class(0), Condition::Null, Condition::Class(1)];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = net.record_rows(&mut tape, xv, &ts, &conds)?;
        let gd = tape.backward(y, Array2::ones(tape.value(y).dim()))?;
        let gd = gd.params(net.params()).expect("recorded").to_vec();
        let fd_net = |p: &[f64]| {
            let mut n = DenoiserNet::zeros(arch.clone());
            n.set_params(p.to_vec()).expect("length");
            n.predict_rows(&x, &ts, &conds).expect("valid inputs").sum()
        };
        let mut worst_d: f64 = 0.0;
        for _ in 0..20 {
            let i = rng.below(gd.len());
            worst_d = worst_d.max(rel_err(gd[i], central_diff(net.params(), i, 1e-5, &fd_net)));
        }

        let mut refiner = RefinerNet::init(arch.clone(), &mut rng);
        let p: Vec<f64> = refiner.params().iter().map(|_| 0.3 * rng.normal()).collect();
        refiner.set_params(p)?;
        let rc = [Condition::Class(1), Condition::Class(0)];
        let xr = rows(2, 16, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(xr.clone());
        let y = refiner.record(&mut tape, xv, &rc)?;
        let gr = tape.backward(y, Array2::ones(tape.value(y).dim()))?;
        let gr = gr.params(refiner.params()).expect("recorded").to_vec();
        let fd_ref = |p: &[f64]| {
            let mut r = refiner.clone();
            r.set_params(p.to_vec()).expect("length");
            r.refine(&xr, &rc).expect("valid inputs").sum()
        };
        let mut worst_r: f64 = 0.0;
        for _ in 0..20 {
            let i = rng.below(gr.len());
            worst_r = worst_r.max(rel_err(gr[i], central_diff(refiner.params(), i, 1e-5, &fd_ref)));
        }
        let ok = worst_d < 1e-6 && worst_r < 1e-6;
        Ok((ok, format!("max rel err denoiser {worst_d:.2e}, refiner {worst_r:.2e} (< 1e-6)")))
    })
}

/// Criterion 2: distillation rollout is value-identical to plain sampling and
/// carries no gradient into the frozen denoiser.
pub fn criterion_msd_equivalence(schedule: &NoiseSchedule, steps: usize) -> CriterionResult {
    guarded(2, "MSD forward equivalence", || {
        let arch = NetArch { max_timestep: schedule.steps(), hidden: 32, depth: 2, time_dim: 8, ..NetArch::toy(4, 1) };
        let mut rng = RngStream::derive(2, "accept-msd", 0);
        let net = DenoiserNet::init_dense(arch.clone(), &mut rng);
        let mut refiner = RefinerNet::init(arch.clone(), &mut rng);
        let p: Vec<f64> = refiner.params().iter().map(|_| 0.05 * rng.normal()).collect();
        refiner.set_params(p)?;
        let x = rows(16, arch.image_dim(), &mut rng);
        let conds: Vec<Condition> = (0..16).map(|i| Condition::Class(i % 4)).collect();
        let plain = denoise_rows(&refiner.refine(&x, &conds)?, &conds, &net, schedule, steps, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (_, x0) = rollout_record(&mut tape, &refiner, &net, xv, &conds, schedule, steps, RefinerMode::Msd)?;
        let identical = tape.value(x0).iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
        let g = tape.backward(x0, Array2::ones(x.dim()))?;
        let theta_zero = g.params(net.params()).map(|v| v.iter().all(|&x| x == 0.0)).unwrap_or(true);
        let phi_live = g.params(refiner.params()).map(|v| v.iter().any(|&x| x != 0.0)).unwrap_or(false);
        Ok((
            identical && theta_zero && phi_live,
            format!("16 inputs bit-identical: {identical}; d/dtheta exactly zero: {theta_zero}"),
        ))
    })
}

fn stub_refiner(seed: u64, t_max: usize) -> Result<RefinerNet> {
    let arch = NetArch { max_timestep: t_max, hidden: 24, depth: 2, time_dim: 8, ..NetArch::toy(4, 1) };
    let mut rng = RngStream::derive(seed, "accept-stub-refiner", 0);
    let mut r = RefinerNet::init(arch, &mut rng);
    let p: Vec<f64> = r.params().iter().map(|_| 0.05 * rng.normal()).collect();
    r.set_params(p)?;
    Ok(r)
}

fn random_pairs(n: usize, seed: u64) -> Vec<NoisePair> {
    let mut rng = RngStream::derive(seed, "accept-random-pairs", 0);
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

/// Criterion 3: exact-regime gradient proportionality with stub denoisers.
pub fn criterion_prop2_exact(schedule: &NoiseSchedule) -> CriterionResult {
    guarded(3, "MSD gradient alignment, exact regime", || {
        let r = stub_refiner(3, schedule.steps())?;
        let batches = prop2_batches(&random_pairs(8, 3), 4)?;
        let offset = Array1::from(RngStream::derive(3, "accept-stub", 0).normal_vec(256));
        let cst = ConstantPredictor { value: offset.clone() };
        let rep = verify_prop2(&r, &cst, &batches, schedule, 3, 1, 0, Strategy::Sequential)?;
        let const_ok = rep.cosines.iter().all(|c| (c - 1.0).abs() < 1e-9) && rep.k_hat.iter().all(|k| (k - 1.0).abs() < 1e-9);

        let eta = 0.3;
        let lin = LinearPredictor { eta, offset };
        let rep_l = verify_prop2(&r, &lin, &batches, schedule, 3, 1, 0, Strategy::Sequential)?;
        // Independent oracle: the rollout Jacobian is prod_t (a_t + b_t eta) I
        // and the distilled one prod_t a_t I.
        let k: f64 = schedule.substeps(3)?.iter().map(|c| (c.a + c.b * eta) / c.a).product();
        let worst = rep_l.k_hat.iter().map(|kh| (kh / k - 1.0).abs()).fold(0.0, f64::max);
        let worst_pred = rep_l.k_pred.iter().map(|kp| (kp / k - 1.0).abs()).fold(0.0, f64::max);
        Ok((
            const_ok && worst < 1e-8 && worst_pred < 1e-8,
            format!(
                "constant stub cos/k_hat = 1 within 1e-9: {const_ok}; linear stub k = {k:.6e}, k_hat rel err {worst:.1e}, closed form rel err {worst_pred:.1e}"
            ),
        ))
    })
}

/// Criterion 11: identity-at-init and the exact boundary examples.
pub fn criterion_identity_and_boundaries(schedule: &NoiseSchedule, steps: usize) -> CriterionResult {
    guarded(11, "identity at init and boundary cases", || {
        let mut fails: Vec<&str> = Vec::new();
        let arch = NetArch { max_timestep: schedule.steps(), hidden: 32, depth: 2, time_dim: 8, ..NetArch::toy(4, 1) };
        let mut rng = RngStream::derive(11, "accept-identity", 0);
        let net = DenoiserNet::init_dense(arch.clone(), &mut rng);
        let refiner = RefinerNet::init(arch.clone(), &mut rng);
        let x = rows(8, 256, &mut rng);
        let c: Vec<Condition> = (0..8).map(|i| Condition::Class(i % 4)).collect();
        let a = denoise_rows(&x, &c, &net, schedule, steps, None)?;
        let b = denoise_rows(&refiner.refine(&x, &c)?, &c, &net, schedule, steps, None)?;
        if !a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()) {
            fails.push("identity refiner");
        }

        let mk = |q: f64| NoisePair {
            x_t: Tensor::zeros(&[1]),
            class: 0,
            x0_guide: Tensor::zeros(&[1]),
            w_used: 0.0,
            s_used: 0.0,
            quality: q,
        };
        let ps: Vec<_> = [0.1, 0.5, 0.9].into_iter().map(mk).collect();
        if filter_pairs(&ps, 100.0)? != ps {
            fails.push("filter q=100");
        }
        let kept = filter_pairs(&ps, 34.0)?;
        if kept.len() != 1 || kept[0].quality != 0.9 {
            fails.push("filter q=34");
        }
        let mut rng = RngStream::derive(11, "accept-quartile", 0);
        let many: Vec<_> = (0..1000).map(|_| mk(rng.normal())).collect();
        let kept = filter_pairs(&many, 25.0)?;
        let min_kept = kept.iter().map(|p| p.quality).fold(f64::INFINITY, f64::min);
        let dropped_above = many.iter().filter(|p| p.quality > min_kept).count();
        if kept.len() != 250 || dropped_above != 249 {
            fails.push("filter q=25");
        }

        let x1 = Tensor::randn(&[1, 16, 16], &mut rng);
        let x2 = Tensor::randn(&[1, 16, 16], &mut rng);
        if !slerp(&x1, &x2, 0.0)?.bitwise_eq(&x1) || !slerp(&x1, &x2, 1.0)?.bitwise_eq(&x2) {
            fails.push("slerp endpoints");
        }
        if [0.25, 0.5, 0.75].iter().any(|&t| {
            slerp(&x1, &x1, t).map(|s| s.data().iter().zip(x1.data()).any(|(p, q)| (p - q).abs() > 1e-12)).unwrap_or(true)
        }) {
            fails.push("slerp x2 = x1");
        }

        let full = band_swap_probe(&x1, &x2, 0.0, 1.0, SwapMode::ReplaceBand)?;
        let empty = band_swap_probe(&x1, &x2, 0.01, 0.05, SwapMode::ReplaceBand)?;
        let keep = band_swap_probe(&x1, &x2, 0.0, 1.0, SwapMode::KeepOnly)?;
        if full.data().iter().zip(x2.data()).any(|(p, q)| (p - q).abs() > 1e-9)
            || empty.data().iter().zip(x1.data()).any(|(p, q)| (p - q).abs() > 1e-9)
            || keep.data().iter().zip(x2.data()).any(|(p, q)| (p - q).abs() > 1e-9)
        {
            fails.push("band swap");
        }
        let detail = if fails.is_empty() {
            "identity refiner bit-identical; filter, slerp and band-swap boundary cases exact".to_string()
        } else {
            format!("failed: {}", fails.join(", "))
        };
        Ok((fails.is_empty(), detail))
    })
}

/// Trained models and pair pools shared by the trained-regime criteria.
pub struct Artifacts {
    pub schedule: NoiseSchedule,
    pub data: ShapesDataset,
    pub net: DenoiserNet,
    pub degraded: DenoiserNet,
    pub base_log: Vec<LogRow>,
    pub seeds: Vec<SeedArtifacts>,
}

pub struct SeedArtifacts {
    pub seed: u64,
    pub pool: Vec<NoisePair>,
    pub filtered: RefinerNet,
    pub filtered_log: Vec<LogRow>,
    pub unfiltered: RefinerNet,
    pub unfiltered_log: Vec<LogRow>,
}

fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn cached_denoiser(path: &Path) -> Result<Option<DenoiserNet>> {
    if path.exists() {
        Ok(Some(load_checkpoint(path)?.into_denoiser()?))
    } else {
        Ok(None)
    }
}

/// Equal-size random subset of `pool`, in pool order.
fn random_subset(pool: &[NoisePair], n: usize, seed: u64) -> Vec<NoisePair> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut rng = RngStream::derive(seed, "unfiltered-subset", 0);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    let mut keep = idx[..n.min(pool.len())].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| pool[i].clone()).collect()
}

/// Trains (or loads from `cache`) everything the trained-regime criteria need.
pub fn build_artifacts(
    cfg: &RunConfig,
    cache: Option<&Path>,
    strategy: Strategy,
    progress: &mut dyn FnMut(&str),
) -> Result<Artifacts> {
    let schedule = cfg.schedule()?;
    let arch = cfg.arch()?;
    let base_cfg = cfg.base_train()?;
    let data = ShapesDataset::generate(cfg.get("data.size")?, base_cfg.seed, strategy)?;
    let dir = cache.map(|c| c.join(cfg.hash()));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let path = |name: &str| dir.as_ref().map(|d| d.join(name));

    let t = Instant::now();
    let (net, degraded, base_log) = match (
        path("base.ckpt").map(|p| cached_denoiser(&p)).transpose()?.flatten(),
        path("degraded.ckpt").map(|p| cached_denoiser(&p)).transpose()?.flatten(),
        path("base_log.csv").filter(|p| p.exists()),
    ) {
        (Some(n), Some(d), Some(l)) => {
            progress("base model loaded from cache");
            (n, d, read_log(&l)?)
        }
        _ => {
            progress(&format!("training base model ({} steps)", base_cfg.steps));
            let out = train_base(arch, &data, &schedule, &base_cfg, strategy)?;
            if let Some(d) = &dir {
                save_checkpoint(&d.join("base.ckpt"), &Checkpoint::of_denoiser(&out.net, base_cfg.steps as u64, base_cfg.seed))?;
                save_checkpoint(
                    &d.join("degraded.ckpt"),
                    &Checkpoint::of_denoiser(&out.degraded, out.degraded_step as u64, base_cfg.seed),
                )?;
                save_log_csv(&out.log, &d.join("base_log.csv"))?;
            }
            progress(&format!("base model trained in {:.0}s", t.elapsed().as_secs_f64()));
            (out.net, out.degraded, out.log)
        }
    };

    let mut seeds = Vec::new();
    for seed in cfg.seeds()? {
        seeds.push(seed_artifacts(cfg, seed, &net, &degraded, &schedule, dir.as_deref(), strategy, progress)?);
    }
    Ok(Artifacts { schedule, data, net, degraded, base_log, seeds })
}

#[allow(clippy::too_many_arguments)]
fn seed_artifacts(
    cfg: &RunConfig,
    seed: u64,
    net: &DenoiserNet,
    degraded: &DenoiserNet,
    schedule: &NoiseSchedule,
    dir: Option<&Path>,
    strategy: Strategy,
    progress: &mut dyn FnMut(&str),
) -> Result<SeedArtifacts> {
    let sdir: Option<PathBuf> = dir.map(|d| d.join(format!("seed{seed}")));
    let rcfg = TrainConfig { seed, ..cfg.refiner_train()? };
    let mode = cfg.refiner_mode()?;
    let t = Instant::now();
    let pool = match sdir.as_ref().map(|d| d.join("pairs")).filter(|p| p.join("index.json").exists()) {
        Some(p) => read_pair_archive(&p)?,
        None => {
            let pool = gen_pairs(net, Some(degraded), schedule, &rcfg, cfg.get("pairs.count")?, seed, strategy)?;
            if let Some(d) = &sdir {
                write_pair_archive(&d.join("pairs"), &pool)?;
            }
            progress(&format!("seed {seed}: {} pairs generated in {:.0}s", pool.len(), t.elapsed().as_secs_f64()));
            pool
        }
    };
    let filtered_pairs = filter_pairs(&pool, rcfg.filter_q)?;
    let unfiltered_pairs = random_subset(&pool, filtered_pairs.len(), seed);
    let arch = net.arch().clone();
    let mut train = |name: &str, pairs: &[NoisePair]| -> Result<(RefinerNet, Vec<LogRow>)> {
        let ck = sdir.as_ref().map(|d| d.join(format!("refiner_{name}.ckpt")));
        let lg = sdir.as_ref().map(|d| d.join(format!("refiner_{name}_log.csv")));
        if let (Some(c), Some(l)) = (&ck, &lg) {
            if c.exists() && l.exists() {
                return Ok((load_checkpoint(c)?.into_refiner()?, read_log(l)?));
            }
        }
        let t = Instant::now();
        let init = RefinerNet::init(arch.clone(), &mut RngStream::derive(seed, "refiner-init", 0));
        let (r, log) = train_refiner(init, net, PairSource::Offline(pairs), schedule, &rcfg, mode, strategy)?;
        if let (Some(c), Some(l)) = (&ck, &lg) {
            save_checkpoint(c, &Checkpoint::of_refiner(&r, rcfg.steps as u64, seed))?;
            save_log_csv(&log, l)?;
        }
        progress(&format!(
            "seed {seed}: {name} refiner trained in {:.0}s (loss {:.4} -> {:.4})",
            t.elapsed().as_secs_f64(),
            log.first().map(|r| r.loss).unwrap_or(f64::NAN),
            log.last().map(|r| r.loss).unwrap_or(f64::NAN)
        ));
        Ok((r, log))
    };
    let (filtered, filtered_log) = train("filtered", &filtered_pairs)?;
    let (unfiltered, unfiltered_log) = train("unfiltered", &unfiltered_pairs)?;
    Ok(SeedArtifacts { seed, pool, filtered, filtered_log, unfiltered, unfiltered_log })
}

/// Per-class sample sets of one seed.
pub struct ClassEval {
    pub real: Array2<f64>,
    pub x_t: Array2<f64>,
    pub unguided: Array2<f64>,
    pub guided: Array2<f64>,
    pub refined: Array2<f64>,
    pub refined_unfiltered: Array2<f64>,
    pub refined_noise: Array2<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClassMmd {
    pub seed: u64,
    pub class: usize,
    pub bandwidth: f64,
    pub unguided: f64,
    pub guided: f64,
    pub refined: f64,
    pub refined_unfiltered: f64,
}

impl ClassMmd {
    pub fn gap_closure(&self) -> f64 {
        (self.unguided - self.refined) / (self.unguided - self.guided)
    }
}

/// Generated images are compared in the data's pixel range, as they would be
/// written out.
fn to_pixel_range(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Held-out real images of one class.
fn real_class_rows(cfg: &RunConfig, class: usize, n: usize, strategy: Strategy) -> Result<Array2<f64>> {
    let real = ShapesDataset::generate(4 * n, cfg.seed()? ^ 0x5eed_0f_4ea1, strategy)?;
    Ok(real.class_rows(class))
}

pub fn evaluate_seed(
    cfg: &RunConfig,
    art: &Artifacts,
    sa: &SeedArtifacts,
    strategy: Strategy,
) -> Result<(Vec<ClassEval>, Vec<ClassMmd>)> {
    let n: usize = cfg.get("eval.per_class")?;
    let steps: usize = cfg.get("sampler.N")?;
    let guided_steps: usize = cfg.get("sampler.N_guided")?;
    let rcfg = cfg.refiner_train()?;
    let d = art.net.arch().image_dim();
    let mut evals = Vec::new();
    let mut mmds = Vec::new();
    for class in 0..art.net.arch().num_classes {
        let mut rng = RngStream::derive(sa.seed, "eval-noise", class as u64);
        let x_t = rows(n, d, &mut rng);
        let conds = vec![Condition::Class(class); n];
        let mut srng = RngStream::derive(sa.seed, "eval-scales", class as u64);
        let (w, s): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|_| (srng.uniform(rcfg.w_range.0, rcfg.w_range.1), srng.uniform(rcfg.s_range.0, rcfg.s_range.1)))
            .unzip();
        let chunked = |f: &(dyn Fn(std::ops::Range<usize>) -> Result<Array2<f64>> + Sync)| -> Result<Array2<f64>> {
            let ranges = par::chunk_ranges(n, 64);
            let parts = par::try_map_indexed(ranges.len(), strategy, |i| f(ranges[i].clone()))?;
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
            Ok(all.mapv(to_pixel_range))
        };
        let unguided = chunked(&|r| denoise_rows(&x_t.slice(s![r.clone(), ..]).to_owned(), &conds[r], &art.net, &art.schedule, steps, None))?;
        let guided = chunked(&|r| {
            let g = RowGuidance { w: w[r.clone()].to_vec(), s: s[r.clone()].to_vec(), degraded: Some(&art.degraded) };
            denoise_rows(&x_t.slice(s![r.clone(), ..]).to_owned(), &conds[r], &art.net, &art.schedule, guided_steps, Some(&g))
        })?;
        let refined_noise = sa.filtered.refine(&x_t, &conds)?;
        let refined = chunked(&|r| {
            denoise_rows(&refined_noise.slice(s![r.clone(), ..]).to_owned(), &conds[r], &art.net, &art.schedule, steps, None)
        })?;
        let unf_noise = sa.unfiltered.refine(&x_t, &conds)?;
        let refined_unfiltered = chunked(&|r| {
            denoise_rows(&unf_noise.slice(s![r.clone(), ..]).to_owned(), &conds[r], &art.net, &art.schedule, steps, None)
        })?;
        let real = real_class_rows(cfg, class, n, strategy)?;
        let bw = median_bandwidth(&real)?;
        let m = |x: &Array2<f64>| mmd(x, &real, Some(bw)).map(|r| r.unbiased);
        mmds.push(ClassMmd {
            seed: sa.seed,
            class,
            bandwidth: bw,
            unguided: m(&unguided)?,
            guided: m(&guided)?,
            refined: m(&refined)?,
            refined_unfiltered: m(&refined_unfiltered)?,
        });
        evals.push(ClassEval { real, x_t, unguided, guided, refined, refined_unfiltered, refined_noise });
    }
    Ok((evals, mmds))
}

/// Criterion 7 from per-class MMDs of every seed.
pub fn criterion_gap_closure(mmds: &[ClassMmd]) -> CriterionResult {
    let t = Instant::now();
    let all_below = mmds.iter().all(|m| m.refined < m.unguided);
    let mut seeds: Vec<u64> = mmds.iter().map(|m| m.seed).collect();
    seeds.dedup();
    let per_seed: Vec<f64> = seeds
        .iter()
        .map(|s| {
            let v: Vec<f64> = mmds.iter().filter(|m| m.seed == *s).map(|m| m.gap_closure()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
    let ok = all_below && mean >= 0.5 && mean.is_finite();
    let fmt: Vec<String> = per_seed.iter().map(|v| format!("{v:.3}")).collect();
    result(
        7,
        "end-to-end gap closure",
        ok,
        format!("refined < unguided in every class/seed: {all_below}; gap closure per seed [{}], mean {mean:.3} (>= 0.5)", fmt.join(", ")),
        t,
    )
}

/// Criterion 10 from the same evaluation.
pub fn criterion_filtering(mmds: &[ClassMmd]) -> CriterionResult {
    let t = Instant::now();
    let mut seeds: Vec<u64> = mmds.iter().map(|m| m.seed).collect();
    seeds.dedup();
    let mut wins = 0;
    let mut parts = Vec::new();
    for s in &seeds {
        let ms: Vec<&ClassMmd> = mmds.iter().filter(|m| m.seed == *s).collect();
        let f = ms.iter().map(|m| m.refined).sum::<f64>() / ms.len() as f64;
        let u = ms.iter().map(|m| m.refined_unfiltered).sum::<f64>() / ms.len() as f64;
        if f <= u {
            wins += 1;
        }
        parts.push(format!("seed {s}: filtered {f:.4} vs unfiltered {u:.4}"));
    }
    let need = seeds.len() / 2 + 1;
    result(10, "filtering ablation", wins >= need, format!("{}; {wins}/{} seeds (need {need})", parts.join("; "), seeds.len()), t)
}

/// Criterion 9: spectral and amplitude structure of the refinement.
pub fn criterion_frequency(evals: &[ClassEval]) -> CriterionResult {
    guarded(9, "frequency structure", || {
        let mut diffs = Vec::new();
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for e in evals {
            for (a, b) in e.refined_noise.rows().into_iter().zip(e.x_t.rows()) {
                let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
                abs_sum += d.iter().map(|v| v.abs()).sum::<f64>();
                count += d.len();
                diffs.push(Tensor::new(vec![1, 16, 16], d)?);
            }
        }
        let rep = band_energy_many(&diffs, &crate::analysis::QUARTILE_EDGES, 1000, 9)?;
        let ratio = rep.ratio_to_baseline(0);
        let mean_abs = abs_sum / count as f64;
        let mut rng = RngStream::derive(9, "accept-gaussian-pairs", 0);
        let n = 1_000_000;
        let baseline = (0..n).map(|_| (rng.normal() - rng.normal()).abs()).sum::<f64>() / n as f64;
        let ok = ratio >= 1.5 && mean_abs < baseline;
        Ok((
            ok,
            format!(
                "low-band fraction {:.4} vs white noise {:.4} (ratio {ratio:.2}, >= 1.5); mean |x_hat - x_T| {mean_abs:.4} < random {baseline:.4}",
                rep.fraction[0], rep.baseline_mean[0]
            ),
        ))
    })
}

/// Times `f` as the best of `reps` runs.
fn best_time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Criterion 8: network evaluations and wall-clock of each pipeline.
pub fn criterion_cost(art: &Artifacts, refiner: &RefinerNet, steps: usize) -> CriterionResult {
    guarded(8, "cost accounting", || {
        let n = 64;
        let x = rows(n, 256, &mut RngStream::derive(8, "accept-cost", 0));
        let conds: Vec<Condition> = (0..n).map(|i| Condition::Class(i % 4)).collect();
        let sch = &art.schedule;
        let count = |g: Option<(f64, f64)>, refine: bool| -> Result<usize> {
            let net = CountingPredictor::new(&art.net);
            let deg = CountingPredictor::new(&art.degraded);
            let mut refiner_calls = 0;
            let start = if refine {
                refiner_calls += 1;
                refiner.refine(&x, &conds)?
            } else {
                x.clone()
            };
            let rg = g.map(|(w, s)| {
                if s > 0.0 {
                    GuidanceSpec::with_degraded(w, s, &deg as &dyn NoisePredictor).rows(n)
                } else {
                    GuidanceSpec::cfg(w).rows(n)
                }
            });
            denoise_rows(&start, &conds, &net, sch, steps, rg.as_ref())?;
            Ok(net.calls() + deg.calls() + refiner_calls)
        };
        let nfe = [count(None, false)?, count(Some((4.0, 0.0)), false)?, count(Some((4.0, 2.5)), false)?, count(None, true)?];
        let nfe_ok = nfe == [steps, 2 * steps, 3 * steps, steps + 1];
        let deg_spec = GuidanceSpec::with_degraded(4.0, 2.5, &art.degraded).rows(n);
        let t_guided = best_time(5, || denoise_rows(&x, &conds, &art.net, sch, steps, Some(&deg_spec)).map(|_| ()))?;
        let t_refined = best_time(5, || {
            let r = refiner.refine(&x, &conds)?;
            denoise_rows(&r, &conds, &art.net, sch, steps, None).map(|_| ())
        })?;
        let ratio = t_refined / t_guided;
        Ok((
            nfe_ok && ratio <= 0.55,
            format!(
                "NFE unguided/CFG/CFG+degraded/refined = {:?} (expected [{}, {}, {}, {}]); wall-clock refined / CFG+degraded = {ratio:.3} (<= 0.55)",
                nfe,
                steps,
                2 * steps,
                3 * steps,
                steps + 1
            ),
        ))
    })
}

fn held_out_pairs(cfg: &RunConfig, art: &Artifacts, tag: &str, count: usize, strategy: Strategy) -> Result<Vec<NoisePair>> {
    let rcfg = cfg.refiner_train()?;
    let seed = crate::rng::substream_id(tag, cfg.seed()?);
    gen_pairs(&art.net, Some(&art.degraded), &art.schedule, &rcfg, count, seed, strategy)
}

/// Criterion 5: fixed-point iterations never make the round trip worse.
pub fn criterion_inversion(cfg: &RunConfig, art: &Artifacts, strategy: Strategy) -> CriterionResult {
    guarded(5, "inversion contraction", || {
        let n: usize = cfg.get("accept.inversion_samples")?;
        let steps: usize = cfg.get("sampler.N")?;
        let pairs = held_out_pairs(cfg, art, "inversion-holdout", n, strategy)?;
        let ks = [0usize, 1, 2, 5];
        // Per-image MSE for each k; a diverged inversion counts as infinite.
        let mse: Vec<Vec<f64>> = par::try_map_indexed(pairs.len(), strategy, |i| {
            let p = &pairs[i];
            let x0 = Array2::from_shape_vec((1, 256), p.x0_guide.data().to_vec()).expect("row");
            let c = [Condition::Class(p.class)];
            ks.iter()
                .map(|&k| match invert_rows(&x0, &c, &art.net, &art.schedule, &InversionConfig { steps, fixed_point_iters: k }) {
                    Ok(inv) => {
                        let back = denoise_rows(&inv, &c, &art.net, &art.schedule, steps, None)?;
                        Ok((&back - &x0).mapv(|v| v * v).mean().unwrap_or(f64::INFINITY))
                    }
                    Err(Error::InversionDiverged { .. }) => Ok(f64::INFINITY),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        let frac_k5 = mse.iter().filter(|m| m[3] <= m[0]).count() as f64 / n as f64;
        let means: Vec<f64> = (0..ks.len()).map(|j| mse.iter().map(|m| m[j]).sum::<f64>() / n as f64).collect();
        let monotone = means.windows(2).all(|w| w[1] <= w[0]);
        let violators: Vec<f64> =
            (0..ks.len() - 1).map(|j| mse.iter().filter(|m| m[j + 1] > m[j]).count() as f64 / n as f64).collect();
        let ok = frac_k5 >= 0.95 && monotone && violators.iter().all(|&v| v <= 0.05);
        Ok((
            ok,
            format!(
                "k=5 <= k=0 for {:.0}% (>= 95%); mean MSE over k=0,1,2,5: [{}]; violators per increment [{}]",
                100.0 * frac_k5,
                means.iter().map(|m| format!("{m:.4e}")).collect::<Vec<_>>().join(", "),
                violators.iter().map(|v| format!("{:.0}%", 100.0 * v)).collect::<Vec<_>>().join(", ")
            ),
        ))
    })
}

/// Criterion 6: noise-space and image-space distances correlate; the
/// constant stub inverts exactly.
pub fn criterion_prop1(cfg: &RunConfig, art: &Artifacts, refiner: &RefinerNet, strategy: Strategy) -> CriterionResult {
    guarded(6, "noise distance vs sample distance", || {
        let n: usize = cfg.get("accept.prop1_pairs")?;
        let steps: usize = cfg.get("sampler.N")?;
        let pairs = held_out_pairs(cfg, art, "prop1-holdout", n, strategy)?;
        let rep = verify_prop1(refiner, &art.net, &pairs, &art.schedule, steps, &cfg.inversion()?, strategy)?;
        let finite = rep.ratios.iter().all(|r| r.is_finite()) && rep.kappa_hat.is_finite();

        let stub = ConstantPredictor { value: Array1::from(RngStream::derive(6, "accept-stub", 0).normal_vec(256)) };
        let ident = RefinerNet::init(art.net.arch().clone(), &mut RngStream::derive(6, "accept-ident", 0));
        let mut sp = random_pairs(16, 6);
        for p in &mut sp {
            let x = Array2::from_shape_vec((1, 256), p.x_t.data().to_vec()).expect("row");
            let g = GuidanceSpec::cfg(4.0).rows(1);
            let out = denoise_rows(&x, &[Condition::Class(p.class)], &stub, &art.schedule, cfg.get("sampler.N_guided")?, Some(&g))?;
            p.x0_guide = Tensor::from_row(out.row(0), &[1, 16, 16]);
        }
        let srep = verify_prop1(&ident, &stub, &sp, &art.schedule, steps, &cfg.inversion()?, Strategy::Sequential)?;
        let stub_max = srep.noise_dist.iter().copied().fold(0.0, f64::max);
        let ok = rep.pearson_r > 0.3 && finite && stub_max < 1e-18;
        Ok((
            ok,
            format!(
                "Pearson r = {:.3} (> 0.3) over {n} pairs, kappa_hat = {:.3e} (finite: {finite}); constant stub max noise distance {stub_max:.1e}",
                rep.pearson_r, rep.kappa_hat
            ),
        ))
    })
}

/// Criterion 4: gradient cosine between full backprop and distillation with
/// the trained denoiser.
pub fn criterion_prop2_trained(
    cfg: &RunConfig,
    art: &Artifacts,
    refiner: &RefinerNet,
    strategy: Strategy,
) -> CriterionResult {
    guarded(4, "MSD gradient alignment, trained regime", || {
        let nb: usize = cfg.get("accept.prop2_batches")?;
        let bs: usize = cfg.get("accept.prop2_batch")?;
        let steps: usize = cfg.get("accept.prop2_steps")?;
        let pairs = held_out_pairs(cfg, art, "prop2-holdout", nb * bs, strategy)?;
        let batches = prop2_batches(&pairs, bs)?;
        let rep = verify_prop2(refiner, &art.net, &batches, &art.schedule, steps, 2, cfg.seed()?, strategy)?;
        let (kmin, kmax) = rep.k_hat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &k| (a.min(k), b.max(k)));
        let kp = rep.k_pred.iter().sum::<f64>() / rep.k_pred.len() as f64;
        Ok((
            rep.mean_cosine >= 0.8,
            format!(
                "mean cosine {:.3} over {} batches (>= 0.8); k_hat in [{kmin:.3e}, {kmax:.3e}], predicted k mean {kp:.3e}",
                rep.mean_cosine,
                rep.cosines.len()
            ),
        ))
    })
}

fn supplementary(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionResult {
    guarded(0, name, f)
}

/// Trained-model checks that are reported but do not gate the suite.
pub fn supplementary_checks(
    cfg: &RunConfig,
    art: &Artifacts,
    evals: &[ClassEval],
    mmds: &[ClassMmd],
    strategy: Strategy,
) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    out.push(supplementary("guided beats unguided", || {
        let s0: Vec<&ClassMmd> = mmds.iter().filter(|m| m.seed == art.seeds[0].seed).collect();
        let g = s0.iter().map(|m| m.guided).sum::<f64>() / s0.len() as f64;
        let u = s0.iter().map(|m| m.unguided).sum::<f64>() / s0.len() as f64;
        Ok((g < u, format!("class-mean MMD^2 guided {g:.4} < unguided {u:.4}")))
    }));
    out.push(supplementary("initial base loss", || {
        let init = DenoiserNet::init(art.net.arch().clone(), &mut RngStream::derive(0, "supp-init", 0));
        let l = base_loss(&init, &art.data, &art.schedule, &cfg.base_train()?, 0)?;
        Ok(((l - 1.0).abs() < 0.05, format!("zero-output net loss {l:.4} (~1.0)")))
    }));
    out.push(supplementary("quality separation", || {
        let trials = art.data.rows().nrows().min(100) as u64;
        let mut wins = 0;
        for i in 0..trials {
            let img = art.data.image(i as usize);
            let class = art.data.classes()[i as usize];
            let noise = Tensor::randn(&[1, 16, 16], &mut RngStream::derive(i, "supp-noise", 0));
            let mut r1 = RngStream::derive(i, "supp-quality", 0);
            let mut r2 = RngStream::derive(i, "supp-quality", 0);
            let qa = quality_score(&img, class, &art.net, &art.schedule, 8, &mut r1)?;
            let qb = quality_score(&noise, class, &art.net, &art.schedule, 8, &mut r2)?;
            if qa > qb {
                wins += 1;
            }
        }
        Ok((wins as f64 >= 0.95 * trials as f64, format!("real image beats Gaussian noise in {wins}/{trials} trials (>= 95%)")))
    }));
    out.push(supplementary("pair quality spread", || {
        let q: Vec<f64> = art.seeds[0].pool.iter().take(1000).map(|p| p.quality).collect();
        let m = q.iter().sum::<f64>() / q.len() as f64;
        let sd = (q.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (q.len() - 1) as f64).sqrt();
        Ok((sd > 0.0, format!("std of 1000 quality scores {sd:.4}")))
    }));
    out.push(supplementary("refiner loss decreases", || {
        let log = &art.seeds[0].filtered_log;
        let n = log.len();
        let w = (n / 10).max(1);
        let head = log[..w].iter().map(|r| r.loss).sum::<f64>() / w as f64;
        let tail = log[n - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64;
        Ok((tail < head, format!("mean loss first {w} steps {head:.4}, last {w} steps {tail:.4}")))
    }));
    out.push(supplementary("trained refiner moves less than random", || {
        let e = &evals[0];
        let d = (&e.refined_noise - &e.x_t).mapv(f64::abs).mean().unwrap_or(f64::NAN);
        Ok((d < 2.0 / std::f64::consts::PI.sqrt(), format!("mean |x_hat - x_T| {d:.4} < 1.128")))
    }));
    out.push(supplementary("cross-condition probe", || {
        let trials: usize = cfg.get("accept.cross_trials")?;
        let steps: usize = cfg.get("sampler.N")?;
        let templates = ndarray::stack(
            Axis(0),
            &evals.iter().map(|e| e.real.mean_axis(Axis(0)).expect("non-empty")).collect::<Vec<_>>().iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut rng = RngStream::derive(cfg.seed()?, "supp-cross", 0);
        let x = rows(trials, 256, &mut rng);
        let cr: Vec<Condition> = (0..trials).map(|i| Condition::Class(i % 4)).collect();
        let out = cross_condition_probe(&art.seeds[0].filtered, &art.net, &x, &cr, &vec![Condition::Null; trials], &art.schedule, steps)?;
        let hits = (0..trials).filter(|&i| nearest_template(out.row(i), &templates) == i % 4).count();
        let frac = hits as f64 / trials as f64;
        Ok((frac >= 0.6, format!("null-condition output nearest to the refining class in {:.0}% (>= 60%)", 100.0 * frac)))
    }));
    out.push(supplementary("Jacobian at t=T", || {
        let x = RngStream::derive(0, "supp-jacobian", 0).normal_vec(256);
        let r = jacobian_probe(&art.net, &x, art.schedule.steps(), Condition::Class(0))?;
        Ok((true, format!("mean|diag| {:.4}, mean|offdiag| {:.4}, ratio {:.1} (reported only)", r.mean_abs_diag, r.mean_abs_offdiag, r.ratio)))
    }));
    let _ = strategy;
    out
}

/// Runs every criterion. `cache` enables reuse of trained artifacts.
pub fn run_acceptance(
    cfg: &RunConfig,
    cache: Option<&Path>,
    strategy: Strategy,
    progress: &mut dyn FnMut(&str),
) -> Result<AcceptanceReport> {
    let schedule = cfg.schedule()?;
    let steps: usize = cfg.get("sampler.N")?;
    let mut report = AcceptanceReport::default();
    let push = |r: CriterionResult, report: &mut AcceptanceReport, progress: &mut dyn FnMut(&str)| {
        progress(&r.line());
        report.criteria.push(r);
    };
    push(criterion_gradients(), &mut report, progress);
    push(criterion_msd_equivalence(&schedule, steps), &mut report, progress);
    push(criterion_prop2_exact(&schedule), &mut report, progress);

    let art = build_artifacts(cfg, cache, strategy, progress)?;
    let refiner = &art.seeds[0].filtered;
    push(criterion_prop2_trained(cfg, &art, refiner, strategy), &mut report, progress);
    push(criterion_inversion(cfg, &art, strategy), &mut report, progress);
    push(criterion_prop1(cfg, &art, refiner, strategy), &mut report, progress);

    let mut evals0 = Vec::new();
    let mut mmds = Vec::new();
    for (i, sa) in art.seeds.iter().enumerate() {
        let (e, m) = evaluate_seed(cfg, &art, sa, strategy)?;
        if i == 0 {
            evals0 = e;
        }
        mmds.extend(m);
    }
    push(criterion_gap_closure(&mmds), &mut report, progress);
    push(criterion_cost(&art, refiner, steps), &mut report, progress);
    push(criterion_frequency(&evals0), &mut report, progress);
    push(criterion_filtering(&mmds), &mut report, progress);
    push(criterion_identity_and_boundaries(&schedule, steps), &mut report, progress);
    report.criteria.sort_by_key(|c| c.id);

    for r in supplementary_checks(cfg, &art, &evals0, &mmds, strategy) {
        progress(&r.line());
        report.supplementary.push(r);
    }
    Ok(report)
}

/// Per-class MMD rows for reporting.
pub fn mmd_table(cfg: &RunConfig, art: &Artifacts, strategy: Strategy) -> Result<Vec<ClassMmd>> {
    let mut out = Vec::new();
    for sa in &art.seeds {
        out.extend(evaluate_seed(cfg, art, sa, strategy)?.1);
    }
    Ok(out)
}
