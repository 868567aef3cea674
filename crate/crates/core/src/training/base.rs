use ndarray::{s, Array2};

use super::{accumulate_chunks, LogRow, ShapesDataset, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nets::tape::Tape;
use crate::nets::{Condition, DenoiserNet, NetArch};
use crate::par::Strategy;
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

pub struct BaseTrainOutput {
    pub net: DenoiserNet,
    /// Early checkpoint used as the degraded predictor.
    pub degraded: DenoiserNet,
    pub degraded_step: usize,
    pub log: Vec<LogRow>,
}

struct Batch {
    x0: Array2<f64>,
    eps: Array2<f64>,
    ts: Vec<usize>,
    conds: Vec<Condition>,
}

fn draw_batch(data: &ShapesDataset, schedule: &NoiseSchedule, cfg: &TrainConfig, step: usize) -> Batch {
    let mut rng = RngStream::derive(cfg.seed, "base-batch", step as u64);
    let b = cfg.batch_size;
    let d = data.rows().ncols();
    let mut x0 = Array2::zeros((b, d));
    let mut ts = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    for i in 0..b {
        let k = rng.below(data.len());
        x0.row_mut(i).assign(&data.rows().row(k));
        ts.push(1 + rng.below(schedule.steps()));
        conds.push(if rng.bernoulli(cfg.cond_dropout) { Condition::Null } else { Condition::Class(data.classes()[k]) });
    }
    let eps = Array2::from_shape_vec((b, d), rng.normal_vec(b * d)).expect("batch shape");
    Batch { x0, eps, ts, conds }
}

/// Sum of squared noise-prediction errors and its parameter gradient,
/// scaled so that summing over chunks gives the gradient of the batch mean.
fn chunk_grad(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    batch: &Batch,
    rows: std::ops::Range<usize>,
    total: f64,
) -> Result<(f64, Vec<f64>)> {
    let x0 = batch.x0.slice(s![rows.clone(), ..]);
    let eps = batch.eps.slice(s![rows.clone(), ..]);
    let ts = &batch.ts[rows.clone()];
    let mut xt = Array2::zeros(x0.dim());
    for (i, &t) in ts.iter().enumerate() {
        let a = schedule.alpha(t);
        let mut row = xt.row_mut(i);
        row.assign(&(&x0.row(i) * a.sqrt()));
        row.scaled_add((1.0 - a).sqrt(), &eps.row(i));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(xt);
    let y = net.record_rows(&mut tape, xv, ts, &batch.conds[rows])?;
    let diff = tape.value(y) - &eps;
    let sq = diff.iter().map(|d| d * d).sum::<f64>();
    let grads = tape.backward(y, diff * (2.0 / total))?;
    let g = grads.params(net.params()).expect("denoiser recorded").to_vec();
    Ok((sq / total, g))
}

/// Mean per-dimension noise-prediction loss of `net` on one batch.
pub fn base_loss(net: &DenoiserNet, data: &ShapesDataset, schedule: &NoiseSchedule, cfg: &TrainConfig, step: usize) -> Result<f64> {
    let batch = draw_batch(data, schedule, cfg, step);
    let total = batch.eps.len() as f64;
    let (loss, _) = accumulate_chunks(cfg.batch_size, cfg.grad_chunk, Strategy::Sequential, |r| {
        chunk_grad(net, schedule, &batch, r, total)
    })?;
    Ok(loss)
}

/// Trains a fresh denoiser on `data` with the noise-prediction loss, saving
/// a copy after `degraded_at * steps` steps.
pub fn train_base(
    arch: NetArch,
    data: &ShapesDataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<BaseTrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data".into()));
    }
    if arch.max_timestep != schedule.steps() || arch.image_dim() != data.rows().ncols() {
        return Err(Error::Format("architecture does not match data or schedule".into()));
    }
    let mut net = DenoiserNet::init(arch, &mut RngStream::derive(cfg.seed, "base-init", 0));
    let degraded_step = ((cfg.degraded_at * cfg.steps as f64).round() as usize).clamp(1, cfg.steps.max(1));
    let mut degraded = net.clone();
    let mut trainer = Trainer::new(net.params().len(), net.mlp().blocks());
    for step in 0..cfg.steps {
        let batch = draw_batch(data, schedule, cfg, step);
        let total = batch.eps.len() as f64;
        let (loss, grad) = accumulate_chunks(cfg.batch_size, cfg.grad_chunk, strategy, |r| {
            chunk_grad(&net, schedule, &batch, r, total)
        })?;
        trainer.apply(net.params_mut(), step, loss, &grad, cfg.lr_at(step))?;
        if step + 1 == degraded_step {
            degraded = net.clone();
        }
    }
    Ok(BaseTrainOutput { net, degraded, degraded_step, log: trainer.log })
}
