use ndarray::{s, Array2};

use super::{accumulate_chunks, filter_pairs, gen_pairs, LogRow, NoisePair, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nets::tape::{Tape, Var};
use crate::nets::{Condition, DenoiserNet, RefinerNet};
use crate::par::Strategy;
use crate::rng::{substream_id, RngStream};
use crate::sampler::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::tensor::stack_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinerMode {
    /// Denoiser outputs detached at every step.
    Msd,
    /// Backpropagate through the denoiser as well.
    FullGrad,
}

pub enum PairSource<'a> {
    /// Batches drawn with replacement from a fixed pair set.
    Offline(&'a [NoisePair]),
    /// Fresh pairs every step, filtered down to the batch size.
    Online { degraded: Option<&'a dyn NoisePredictor> },
}

/// Records `x_0 = rollout(refiner(x_T))` on `tape`. Returns `(refined x_T, x_0)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_record<'p>(
    tape: &mut Tape<'p>,
    refiner: &'p RefinerNet,
    net: &'p dyn NoisePredictor,
    x_t: Var,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
    mode: RefinerMode,
) -> Result<(Var, Var)> {
    let refined = refiner.record(tape, x_t, conds)?;
    let mut x = refined;
    for c in schedule.substeps(steps)? {
        let mut eps = net.record(tape, x, c.t, conds)?;
        if mode == RefinerMode::Msd {
            eps = tape.detach(eps);
        }
        x = tape.lincomb(x, c.a, eps, c.b)?;
    }
    Ok((refined, x))
}

fn rollout_value(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    x_t: &Array2<f64>,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
    mode: RefinerMode,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x_t.clone());
    let (_, x0) = rollout_record(&mut tape, refiner, net, xv, conds, schedule, steps, mode)?;
    Ok(tape.value(x0).clone())
}

/// Value of the distillation rollout; identical to sampling from the refined
/// noise without guidance.
pub fn msd_rollout(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    x_t: &Array2<f64>,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Array2<f64>> {
    rollout_value(refiner, net, x_t, conds, schedule, steps, RefinerMode::Msd)
}

pub fn full_grad_rollout(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    x_t: &Array2<f64>,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Array2<f64>> {
    rollout_value(refiner, net, x_t, conds, schedule, steps, RefinerMode::FullGrad)
}

/// Mean squared image-space distance of the rollout to `target` and its
/// gradient with respect to the refiner parameters.
#[allow(clippy::too_many_arguments)]
pub fn refiner_gradient(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    x_t: &Array2<f64>,
    conds: &[Condition],
    target: &Array2<f64>,
    schedule: &NoiseSchedule,
    steps: usize,
    mode: RefinerMode,
    chunk: usize,
    strategy: Strategy,
) -> Result<(f64, Vec<f64>)> {
    if target.dim() != x_t.dim() || conds.len() != x_t.nrows() {
        return Err(Error::ShapeMismatch {
            expected: vec![x_t.nrows(), x_t.ncols()],
            got: vec![target.nrows(), target.ncols(), conds.len()],
        });
    }
    let total = x_t.len() as f64;
    accumulate_chunks(x_t.nrows(), chunk, strategy, |rows| {
        let mut tape = Tape::new();
        let xv = tape.constant(x_t.slice(s![rows.clone(), ..]).to_owned());
        let (_, x0) = rollout_record(&mut tape, refiner, net, xv, &conds[rows.clone()], schedule, steps, mode)?;
        let diff = tape.value(x0) - &target.slice(s![rows, ..]);
        let sq = diff.iter().map(|d| d * d).sum::<f64>();
        let grads = tape.backward(x0, diff * (2.0 / total))?;
        let g = grads.params(refiner.params()).expect("refiner recorded").to_vec();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("refiner".into()));
        }
        Ok((sq / total, g))
    })
}

fn batch_from(pairs: &[&NoisePair]) -> Result<(Array2<f64>, Vec<Condition>, Array2<f64>)> {
    let xs: Vec<_> = pairs.iter().map(|p| p.x_t.clone()).collect();
    let gs: Vec<_> = pairs.iter().map(|p| p.x0_guide.clone()).collect();
    let conds = pairs.iter().map(|p| Condition::Class(p.class)).collect();
    Ok((stack_rows(&xs)?, conds, stack_rows(&gs)?))
}

/// Fits the refiner so that guidance-free sampling from its output matches
/// the guided targets.
#[allow(clippy::too_many_arguments)]
pub fn train_refiner(
    mut refiner: RefinerNet,
    net: &DenoiserNet,
    source: PairSource,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mode: RefinerMode,
    strategy: Strategy,
) -> Result<(RefinerNet, Vec<LogRow>)> {
    cfg.validate()?;
    if let PairSource::Offline(p) = source {
        if p.is_empty() {
            return Err(Error::EmptyInput("refiner training pairs".into()));
        }
    }
    let mut trainer = Trainer::new(refiner.params().len(), refiner.mlp().blocks());
    for step in 0..cfg.steps {
        let online;
        let batch: Vec<&NoisePair> = match &source {
            PairSource::Offline(pairs) => {
                let mut rng = RngStream::derive(cfg.seed, "refiner-batch", step as u64);
                (0..cfg.batch_size).map(|_| &pairs[rng.below(pairs.len())]).collect()
            }
            PairSource::Online { degraded } => {
                let want = (cfg.batch_size as f64 * 100.0 / cfg.filter_q).ceil() as usize;
                let seed = cfg.seed ^ substream_id("refiner-online", step as u64);
                let fresh = gen_pairs(net, *degraded, schedule, cfg, want, seed, strategy)?;
                online = filter_pairs(&fresh, cfg.filter_q)?;
                online.iter().take(cfg.batch_size).collect()
            }
        };
        let (x_t, conds, target) = batch_from(&batch)?;
        let (loss, grad) = refiner_gradient(
            &refiner,
            net,
            &x_t,
            &conds,
            &target,
            schedule,
            cfg.sampler_steps,
            mode,
            cfg.grad_chunk,
            strategy,
        )?;
        trainer.apply(refiner.params_mut(), step, loss, &grad, cfg.lr_at(step))?;
    }
    Ok((refiner, trainer.log))
}
