use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::Serialize;

use nrlab::acceptance::{build_artifacts, evaluate_seed, run_acceptance};
use nrlab::analysis::{
    artifact_name, band_energy_many, band_swap_probe, cross_condition_probe, diff_histogram, gamma_curve,
    jacobian_probe, nearest_template, prop2_batches, slerp, verify_prop1, verify_prop2, write_csv, write_json, SwapMode,
    QUARTILE_EDGES,
};
use nrlab::config::RunConfig;
use nrlab::nets::{load_checkpoint, save_checkpoint, Checkpoint, Condition, DenoiserNet, RefinerNet};
use nrlab::par::Strategy;
use nrlab::rng::RngStream;
use nrlab::sampler::{denoise_rows, invert_rows, GuidanceSpec, NoisePredictor};
use nrlab::tensor::{stack_rows, unstack_rows, write_pgm, write_pgm_grid, Tensor};
use nrlab::training::{
    filter_pairs, gen_pairs, read_pair_archive, save_log_csv, train_base, train_refiner, write_pair_archive, PairSource,
    ShapesDataset,
};

#[derive(Parser)]
#[command(name = "nrlab", version, about = "Guidance-free noise refinement on a toy shapes dataset")]
struct Cli {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the base denoiser and its early degraded snapshot
    TrainBase,
    /// Generate the scored (x_T, guided x0) pair pool
    GenPairs,
    /// Train the noise refiner
    TrainRefiner,
    /// Sample images into samples/
    Sample,
    /// Invert samples/x0.nft back to noise
    Invert,
    /// Analysis probes
    Analyze {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Run the acceptance suite
    Accept,
}

#[derive(Subcommand, Clone, Copy)]
enum Probe {
    Hist,
    Bands,
    BandSwap,
    Jacobian,
    Gamma,
    Prop1,
    Prop2,
    Slerp,
    CrossCond,
    Mmd,
}

impl Probe {
    fn name(self) -> &'static str {
        match self {
            Probe::Hist => "hist",
            Probe::Bands => "bands",
            Probe::BandSwap => "band-swap",
            Probe::Jacobian => "jacobian",
            Probe::Gamma => "gamma",
            Probe::Prop1 => "prop1",
            Probe::Prop2 => "prop2",
            Probe::Slerp => "slerp",
            Probe::CrossCond => "cross-cond",
            Probe::Mmd => "mmd",
        }
    }
}

/// Failures with a dedicated exit code.
#[derive(Debug)]
enum Failure {
    MissingCheckpoint(PathBuf),
    Config(String),
    Acceptance(usize),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::MissingCheckpoint(_) => 2,
            Failure::Config(_) => 3,
            Failure::Acceptance(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::MissingCheckpoint(_) => "missing_checkpoint",
            Failure::Config(_) => "malformed_config",
            Failure::Acceptance(_) => "acceptance_failure",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::MissingCheckpoint(p) => write!(f, "checkpoint not found: {}", p.display()),
            Failure::Config(m) => write!(f, "{m}"),
            Failure::Acceptance(n) => write!(f, "{n} acceptance criteria failed"),
        }
    }
}

impl std::error::Error for Failure {}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<Failure>() {
                Some(f) => (f.kind(), f.code()),
                None => ("runtime", 1),
            };
            let report = ErrorReport { error: kind, message: format!("{e:#}"), exit_code: code };
            eprintln!("{}", serde_json::to_string(&report).expect("plain strings serialize"));
            ExitCode::from(code)
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    strategy: Strategy,
}

impl Ctx {
    fn path(&self, sub: &str) -> Result<PathBuf> {
        let p = self.dir.join(sub);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn checkpoint(&self, name: &str) -> Result<Checkpoint> {
        let p = self.dir.join("checkpoints").join(name);
        if !p.exists() {
            return Err(Failure::MissingCheckpoint(p).into());
        }
        load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn base(&self) -> Result<DenoiserNet> {
        Ok(self.checkpoint("base.ckpt")?.into_denoiser()?)
    }

    fn degraded(&self) -> Result<DenoiserNet> {
        Ok(self.checkpoint("degraded.ckpt")?.into_denoiser()?)
    }

    fn refiner(&self) -> Result<RefinerNet> {
        Ok(self.checkpoint("refiner.ckpt")?.into_refiner()?)
    }

    fn artifact(&self, probe: &str, ext: &str) -> Result<PathBuf> {
        Ok(artifact_name(&self.path("analysis")?, probe, self.cfg.seed()?, &self.cfg.hash(), ext))
    }

    fn pairs(&self) -> Result<Vec<nrlab::training::NoisePair>> {
        let p = self.dir.join("pairs");
        if !p.join("index.json").exists() {
            anyhow::bail!("no pair archive in {} (run gen-pairs first)", p.display());
        }
        Ok(read_pair_archive(&p)?)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut sets = cli.set.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(d) = &cli.run_dir {
        sets.push(format!("run_dir={}", d.display()));
    }
    if let Some(t) = cli.threads {
        sets.push(format!("threads={t}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &sets).map_err(|e| Failure::Config(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let threads: usize = cfg.get("threads")?;
    let strategy = if threads == 1 { Strategy::Sequential } else { Strategy::default() };
    if threads > 1 {
        // Read once when the global pool starts, which has not happened yet.
        std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    }
    let dir = cfg.run_dir()?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved.cfg"), cfg.resolved())?;
    let ctx = Ctx { cfg, dir, strategy };
    match cli.cmd {
        Cmd::TrainBase => cmd_train_base(&ctx),
        Cmd::GenPairs => cmd_gen_pairs(&ctx),
        Cmd::TrainRefiner => cmd_train_refiner(&ctx),
        Cmd::Sample => cmd_sample(&ctx),
        Cmd::Invert => cmd_invert(&ctx),
        Cmd::Analyze { probe } => cmd_analyze(&ctx, probe),
        Cmd::Accept => cmd_accept(&ctx),
    }
}

fn cmd_train_base(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg.base_train()?;
    let data = ShapesDataset::generate(ctx.cfg.get("data.size")?, cfg.seed, ctx.strategy)?;
    let out = train_base(ctx.cfg.arch()?, &data, &ctx.cfg.schedule()?, &cfg, ctx.strategy)?;
    let ck = ctx.path("checkpoints")?;
    save_checkpoint(&ck.join("base.ckpt"), &Checkpoint::of_denoiser(&out.net, cfg.steps as u64, cfg.seed))?;
    save_checkpoint(&ck.join("degraded.ckpt"), &Checkpoint::of_denoiser(&out.degraded, out.degraded_step as u64, cfg.seed))?;
    save_log_csv(&out.log, &ctx.path("logs")?.join("base.csv"))?;
    let last = out.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("trained base for {} steps, final loss {last:.4}; degraded snapshot at step {}", cfg.steps, out.degraded_step);
    Ok(())
}

fn cmd_gen_pairs(ctx: &Ctx) -> Result<()> {
    let (net, degraded) = (ctx.base()?, ctx.degraded()?);
    let count: usize = ctx.cfg.get("pairs.count")?;
    let pairs =
        gen_pairs(&net, Some(&degraded), &ctx.cfg.schedule()?, &ctx.cfg.refiner_train()?, count, ctx.cfg.seed()?, ctx.strategy)?;
    write_pair_archive(&ctx.dir.join("pairs"), &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), ctx.dir.join("pairs").display());
    Ok(())
}

fn cmd_train_refiner(ctx: &Ctx) -> Result<()> {
    let net = ctx.base()?;
    let schedule = ctx.cfg.schedule()?;
    let rcfg = ctx.cfg.refiner_train()?;
    let init = RefinerNet::init(net.arch().clone(), &mut RngStream::derive(rcfg.seed, "refiner-init", 0));
    let mode = ctx.cfg.refiner_mode()?;
    let (refiner, log) = if ctx.cfg.online_pairs()? {
        let degraded = ctx.degraded()?;
        train_refiner(init, &net, PairSource::Online { degraded: Some(&degraded) }, &schedule, &rcfg, mode, ctx.strategy)?
    } else {
        let kept = filter_pairs(&ctx.pairs()?, rcfg.filter_q)?;
        train_refiner(init, &net, PairSource::Offline(&kept), &schedule, &rcfg, mode, ctx.strategy)?
    };
    save_checkpoint(&ctx.path("checkpoints")?.join("refiner.ckpt"), &Checkpoint::of_refiner(&refiner, rcfg.steps as u64, rcfg.seed))?;
    save_log_csv(&log, &ctx.path("logs")?.join("refiner.csv"))?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("trained refiner for {} steps, final loss {last:.4}", rcfg.steps);
    Ok(())
}

/// Sampling noise and conditions shared by `sample` and the probes.
fn sample_inputs(ctx: &Ctx, tag: &str) -> Result<(Array2<f64>, Vec<Condition>)> {
    let n: usize = ctx.cfg.get("sample.count")?;
    let d = ctx.cfg.arch()?.image_dim();
    let mut rng = RngStream::derive(ctx.cfg.seed()?, tag, 0);
    let x = Array2::from_shape_vec((n, d), rng.normal_vec(n * d))?;
    Ok((x, vec![ctx.cfg.sample_class()?; n]))
}

fn save_nft(rows: &Array2<f64>, shape: &[usize], path: &Path) -> Result<()> {
    let mut full = vec![rows.nrows()];
    full.extend_from_slice(shape);
    let t = Tensor::new(full, rows.iter().copied().collect())?;
    t.write_nft(fs::File::create(path)?)?;
    Ok(())
}

fn load_nft(path: &Path) -> Result<Array2<f64>> {
    let t = Tensor::read_nft(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
    let n = t.shape()[0];
    let d = t.len() / n.max(1);
    Ok(Array2::from_shape_vec((n, d), t.into_data())?)
}

fn write_images(rows: &Array2<f64>, shape: &[usize], dir: &Path, prefix: &str) -> Result<()> {
    let imgs = unstack_rows(rows, shape);
    for (i, img) in imgs.iter().enumerate() {
        write_pgm(img, fs::File::create(dir.join(format!("{prefix}_{i:03}.pgm")))?)?;
    }
    write_pgm_grid(&imgs, 8, fs::File::create(dir.join(format!("{prefix}_grid.pgm")))?)?;
    Ok(())
}

fn cmd_sample(ctx: &Ctx) -> Result<()> {
    let net = ctx.base()?;
    let arch = net.arch().clone();
    let schedule = ctx.cfg.schedule()?;
    let steps = ctx.cfg.sampler()?.steps;
    let (mut x, conds) = sample_inputs(ctx, "sample-noise")?;
    let w: f64 = ctx.cfg.get("guidance.w")?;
    let s: f64 = ctx.cfg.get("guidance.s")?;
    if ctx.cfg.get::<bool>("sample.refined")? {
        x = ctx.refiner()?.refine(&x, &conds)?;
    }
    let degraded = if s != 0.0 { Some(ctx.degraded()?) } else { None };
    let guidance = match &degraded {
        Some(d) => Some(GuidanceSpec::with_degraded(w, s, d as &dyn NoisePredictor).rows(x.nrows())),
        None if w != 0.0 => Some(GuidanceSpec::cfg(w).rows(x.nrows())),
        None => None,
    };
    let out = denoise_rows(&x, &conds, &net, &schedule, steps, guidance.as_ref())?;
    let dir = ctx.path("samples")?;
    write_images(&out, &arch.image_shape, &dir, "sample")?;
    save_nft(&out, &arch.image_shape, &dir.join("x0.nft"))?;
    save_nft(&x, &arch.image_shape, &dir.join("noise.nft"))?;
    println!("wrote {} samples to {}", out.nrows(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct InvertRow {
    index: usize,
    reconstruction_mse: f64,
    noise_mse: f64,
}

fn cmd_invert(ctx: &Ctx) -> Result<()> {
    let net = ctx.base()?;
    let schedule = ctx.cfg.schedule()?;
    let steps = ctx.cfg.sampler()?.steps;
    let dir = ctx.path("samples")?;
    let x0 = load_nft(&dir.join("x0.nft"))?;
    let noise = load_nft(&dir.join("noise.nft"))?;
    let conds = vec![ctx.cfg.sample_class()?; x0.nrows()];
    let inv = invert_rows(&x0, &conds, &net, &schedule, &ctx.cfg.inversion()?)?;
    let back = denoise_rows(&inv, &conds, &net, &schedule, steps, None)?;
    let rows: Vec<InvertRow> = (0..x0.nrows())
        .map(|i| InvertRow {
            index: i,
            reconstruction_mse: (&back.row(i) - &x0.row(i)).mapv(|v| v * v).mean().unwrap_or(f64::NAN),
            noise_mse: (&inv.row(i) - &noise.row(i)).mapv(|v| v * v).mean().unwrap_or(f64::NAN),
        })
        .collect();
    save_nft(&inv, &net.arch().image_shape, &dir.join("inverted.nft"))?;
    write_csv(&rows, &ctx.artifact("invert", "csv")?)?;
    let mean = rows.iter().map(|r| r.reconstruction_mse).sum::<f64>() / rows.len() as f64;
    println!("inverted {} samples, mean reconstruction MSE {mean:.3e}", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct HistRow {
    lo: f64,
    hi: f64,
    density: f64,
}

#[derive(Serialize)]
struct BandRow {
    band: usize,
    lo: f64,
    hi: f64,
    fraction: f64,
    baseline_mean: f64,
    baseline_std: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct BandSwapRow {
    lo: f64,
    hi: f64,
    mode: &'static str,
    mse_to_refined: f64,
    mse_to_plain: f64,
}

#[derive(Serialize)]
struct JacobianRow {
    t: usize,
    mean_abs_diag: f64,
    mean_abs_offdiag: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct GammaRow {
    t: usize,
    gamma_over_sqrt_alpha_prev: f64,
}

#[derive(Serialize)]
struct Prop1Row {
    noise_dist: f64,
    image_dist: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct Prop2Row {
    batch: usize,
    cosine: f64,
    k_hat: f64,
    k_pred: f64,
}

#[derive(Serialize)]
struct CrossRow {
    index: usize,
    refine_class: usize,
    nearest_template: usize,
}

fn rows_to_tensors(rows: &Array2<f64>, shape: &[usize]) -> Vec<Tensor> {
    unstack_rows(rows, shape)
}

fn class_templates(ctx: &Ctx, n: usize) -> Result<Array2<f64>> {
    let data = ShapesDataset::generate(4 * n, ctx.cfg.seed()? ^ 0x7e3a, ctx.strategy)?;
    let means: Vec<_> = (0..data.num_classes()).map(|c| data.class_rows(c).mean_axis(Axis(0)).expect("non-empty")).collect();
    let views: Vec<_> = means.iter().map(|m| m.view()).collect();
    Ok(ndarray::stack(Axis(0), &views)?)
}

fn cmd_analyze(ctx: &Ctx, probe: Probe) -> Result<()> {
    let schedule = ctx.cfg.schedule()?;
    let steps = ctx.cfg.sampler()?.steps;
    let name = probe.name();
    match probe {
        Probe::Gamma => {
            let rows: Vec<GammaRow> =
                gamma_curve(&schedule)?.into_iter().map(|(t, g)| GammaRow { t, gamma_over_sqrt_alpha_prev: g }).collect();
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
        }
        Probe::Hist | Probe::Bands => {
            let refiner = ctx.refiner()?;
            let (x, conds) = sample_inputs(ctx, "analysis-noise")?;
            let x_hat = refiner.refine(&x, &conds)?;
            let shape = &refiner.arch().image_shape;
            if let Probe::Hist = probe {
                let a = Tensor::new(vec![x.len()], x_hat.iter().copied().collect())?;
                let b = Tensor::new(vec![x.len()], x.iter().copied().collect())?;
                let h = diff_histogram(&a, &b, 50, Some(4.0))?;
                let rows: Vec<HistRow> =
                    h.density.iter().enumerate().map(|(i, &d)| HistRow { lo: h.edges[i], hi: h.edges[i + 1], density: d }).collect();
                write_csv(&rows, &ctx.artifact(name, "csv")?)?;
                println!("mean |x_hat - x_T| = {:.4}", h.mean);
            } else {
                let diffs = rows_to_tensors(&(&x_hat - &x), shape);
                let r = band_energy_many(&diffs, &QUARTILE_EDGES, 1000, ctx.cfg.seed()?)?;
                let rows: Vec<BandRow> = (0..r.fraction.len())
                    .map(|b| BandRow {
                        band: b,
                        lo: r.edges[b],
                        hi: r.edges[b + 1],
                        fraction: r.fraction[b],
                        baseline_mean: r.baseline_mean[b],
                        baseline_std: r.baseline_std[b],
                        ratio: r.ratio_to_baseline(b),
                    })
                    .collect();
                write_csv(&rows, &ctx.artifact(name, "csv")?)?;
            }
        }
        Probe::BandSwap => {
            let (net, refiner) = (ctx.base()?, ctx.refiner()?);
            let shape = net.arch().image_shape.clone();
            let (x, conds) = sample_inputs(ctx, "analysis-noise")?;
            let x_hat = refiner.refine(&x, &conds)?;
            let refined = denoise_rows(&x_hat, &conds, &net, &schedule, steps, None)?;
            let plain = denoise_rows(&x, &conds, &net, &schedule, steps, None)?;
            let (xt, xh) = (rows_to_tensors(&x, &shape), rows_to_tensors(&x_hat, &shape));
            let mut rows = Vec::new();
            let mut grid = Vec::new();
            for w in QUARTILE_EDGES.windows(2) {
                for (mode_name, keep_only) in [("replace", false), ("keep_only", true)] {
                    let swapped = xt
                        .iter()
                        .zip(&xh)
                        .map(|(a, b)| {
                            let mode = if keep_only { SwapMode::KeepOnly } else { SwapMode::ReplaceBand };
                            band_swap_probe(a, b, w[0], w[1], mode)
                        })
                        .collect::<nrlab::Result<Vec<_>>>()?;
                    let out = denoise_rows(&stack_rows(&swapped)?, &conds, &net, &schedule, steps, None)?;
                    let mse = |o: &Array2<f64>| (&out - o).mapv(|v| v * v).mean().unwrap_or(f64::NAN);
                    rows.push(BandSwapRow { lo: w[0], hi: w[1], mode: mode_name, mse_to_refined: mse(&refined), mse_to_plain: mse(&plain) });
                    grid.push(Tensor::from_row(out.row(0), &shape));
                }
            }
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
            write_pgm_grid(&grid, 2, fs::File::create(ctx.artifact(name, "pgm")?)?)?;
        }
        Probe::Jacobian => {
            let net = ctx.base()?;
            let x = RngStream::derive(ctx.cfg.seed()?, "analysis-jacobian", 0).normal_vec(net.arch().image_dim());
            let t_max = schedule.steps();
            let c = ctx.cfg.sample_class()?;
            let rows = [t_max, t_max / 2, t_max / 10, 1]
                .into_iter()
                .map(|t| {
                    let r = jacobian_probe(&net, &x, t, c)?;
                    Ok(JacobianRow { t, mean_abs_diag: r.mean_abs_diag, mean_abs_offdiag: r.mean_abs_offdiag, ratio: r.ratio })
                })
                .collect::<Result<Vec<_>>>()?;
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
        }
        Probe::Prop1 => {
            let (net, refiner) = (ctx.base()?, ctx.refiner()?);
            let n: usize = ctx.cfg.get("accept.prop1_pairs")?;
            let pairs = ctx.pairs()?;
            let pairs = &pairs[..n.min(pairs.len())];
            let r = verify_prop1(&refiner, &net, pairs, &schedule, steps, &ctx.cfg.inversion()?, ctx.strategy)?;
            let rows: Vec<Prop1Row> = (0..r.ratios.len())
                .map(|i| Prop1Row { noise_dist: r.noise_dist[i], image_dist: r.image_dist[i], ratio: r.ratios[i] })
                .collect();
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
            write_json(&r, &ctx.artifact(name, "json")?)?;
            println!("Pearson r = {:.3}, kappa_hat = {:.3e}", r.pearson_r, r.kappa_hat);
        }
        Probe::Prop2 => {
            let (net, refiner) = (ctx.base()?, ctx.refiner()?);
            let nb: usize = ctx.cfg.get("accept.prop2_batches")?;
            let bs: usize = ctx.cfg.get("accept.prop2_batch")?;
            let pairs = ctx.pairs()?;
            let batches = prop2_batches(&pairs[..(nb * bs).min(pairs.len())], bs)?;
            let r = verify_prop2(&refiner, &net, &batches, &schedule, ctx.cfg.get("accept.prop2_steps")?, 2, ctx.cfg.seed()?, ctx.strategy)?;
            let rows: Vec<Prop2Row> = (0..r.cosines.len())
                .map(|i| Prop2Row { batch: i, cosine: r.cosines[i], k_hat: r.k_hat[i], k_pred: r.k_pred[i] })
                .collect();
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
            println!("mean cosine {:.3}", r.mean_cosine);
        }
        Probe::Slerp => {
            let (net, refiner) = (ctx.base()?, ctx.refiner()?);
            let shape = net.arch().image_shape.clone();
            let mut rng = RngStream::derive(ctx.cfg.seed()?, "analysis-slerp", 0);
            let (x1, x2) = (Tensor::randn(&shape, &mut rng), Tensor::randn(&shape, &mut rng));
            let path = (0..=8).map(|i| slerp(&x1, &x2, i as f64 / 8.0)).collect::<nrlab::Result<Vec<_>>>()?;
            let x = stack_rows(&path)?;
            let conds = vec![ctx.cfg.sample_class()?; x.nrows()];
            let plain = denoise_rows(&x, &conds, &net, &schedule, steps, None)?;
            let refined = denoise_rows(&refiner.refine(&x, &conds)?, &conds, &net, &schedule, steps, None)?;
            let mut grid = rows_to_tensors(&plain, &shape);
            grid.extend(rows_to_tensors(&refined, &shape));
            write_pgm_grid(&grid, 9, fs::File::create(ctx.artifact(name, "pgm")?)?)?;
        }
        Probe::CrossCond => {
            let (net, refiner) = (ctx.base()?, ctx.refiner()?);
            let trials: usize = ctx.cfg.get("accept.cross_trials")?;
            let classes = net.arch().num_classes;
            let d = net.arch().image_dim();
            let mut rng = RngStream::derive(ctx.cfg.seed()?, "analysis-cross", 0);
            let x = Array2::from_shape_vec((trials, d), rng.normal_vec(trials * d))?;
            let cr: Vec<Condition> = (0..trials).map(|i| Condition::Class(i % classes)).collect();
            let out = cross_condition_probe(&refiner, &net, &x, &cr, &vec![Condition::Null; trials], &schedule, steps)?;
            let templates = class_templates(ctx, 200)?;
            let rows: Vec<CrossRow> = (0..trials)
                .map(|i| CrossRow { index: i, refine_class: i % classes, nearest_template: nearest_template(out.row(i), &templates) })
                .collect();
            let hits = rows.iter().filter(|r| r.refine_class == r.nearest_template).count();
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
            let shown = rows_to_tensors(&out, &net.arch().image_shape).into_iter().take(16).collect::<Vec<_>>();
            write_pgm_grid(&shown, 8, fs::File::create(ctx.artifact(name, "pgm")?)?)?;
            println!("refining class recovered in {hits}/{trials}");
        }
        Probe::Mmd => {
            let cache = ctx.path("accept-cache")?;
            let art = build_artifacts(&ctx.cfg, Some(&cache), ctx.strategy, &mut |m| eprintln!("{m}"))?;
            let mut rows = Vec::new();
            for sa in &art.seeds {
                rows.extend(evaluate_seed(&ctx.cfg, &art, sa, ctx.strategy)?.1);
            }
            write_csv(&rows, &ctx.artifact(name, "csv")?)?;
        }
    }
    println!("{name} written to {}", ctx.dir.join("analysis").display());
    Ok(())
}

fn cmd_accept(ctx: &Ctx) -> Result<()> {
    let cache = ctx.path("accept-cache")?;
    let report = run_acceptance(&ctx.cfg, Some(&cache), ctx.strategy, &mut |m| eprintln!("{m}"))?;
    for c in report.criteria.iter().chain(&report.supplementary) {
        println!("{}", c.line());
    }
    write_json(&report, &ctx.artifact("accept", "json")?)?;
    let failed = report.criteria.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Acceptance(failed).into());
    }
    Ok(())
}
