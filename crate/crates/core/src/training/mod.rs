//! Base-model training, guided pair generation and filtering, and refiner
//! training with multistep score distillation (or full backpropagation as a
//! reference).

mod base;
mod data;
mod pairs;
mod refiner;

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{adam_step, AdamConfig, AdamState, ParamBlock};
use crate::par::{self, Strategy};

pub use base::{base_loss, train_base, BaseTrainOutput};
pub use data::{render, ShapesDataset, CLASS_NAMES, SIDE};
pub use pairs::{
    filter_pairs, gen_pairs, quality_score, quality_scores_rows, read_pair_archive, write_pair_archive, NoisePair,
};
pub use refiner::{
    full_grad_rollout, msd_rollout, refiner_gradient, rollout_record, train_refiner, PairSource, RefinerMode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate down to `lr_floor * lr`.
    pub cosine_decay: bool,
    pub lr_floor: f64,
    /// Guidance-free rollout steps `N`.
    pub sampler_steps: usize,
    /// Guided steps `N'` used to build targets.
    pub guided_steps: usize,
    /// Percentage of pairs kept by quality filtering, in `(0, 100]`.
    pub filter_q: f64,
    pub w_range: (f64, f64),
    pub s_range: (f64, f64),
    /// Probability of replacing the class with the null condition.
    pub cond_dropout: f64,
    /// Fraction of base training after which the degraded predictor is saved.
    pub degraded_at: f64,
    /// `(t, eps)` draws per quality score.
    pub quality_draws: usize,
    /// Rows per gradient chunk; fixed so results do not depend on threads.
    pub grad_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-3,
            cosine_decay: true,
            lr_floor: 0.05,
            sampler_steps: 10,
            guided_steps: 20,
            filter_q: 25.0,
            w_range: (3.0, 5.0),
            s_range: (2.0, 3.0),
            cond_dropout: 0.1,
            degraded_at: 0.05,
            quality_draws: 8,
            grad_chunk: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRange(m));
        if !(self.filter_q > 0.0 && self.filter_q <= 100.0) {
            return bad(format!("filter quantile must be in (0, 100], got {}", self.filter_q));
        }
        if self.batch_size == 0 || self.grad_chunk == 0 || self.sampler_steps == 0 || self.guided_steps == 0 {
            return bad("batch size, chunk and step counts must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        for (lo, hi) in [self.w_range, self.s_range] {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("scale range [{lo}, {hi}] must satisfy 0 <= lo <= hi"));
            }
        }
        if !(0.0..1.0).contains(&self.cond_dropout) || !(0.0..=1.0).contains(&self.degraded_at) {
            return bad("dropout must be in [0, 1) and degraded_at in [0, 1]".into());
        }
        if self.quality_draws == 0 {
            return bad("quality_draws must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_decay || self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    write_log_csv(rows, std::fs::File::create(path)?)
}

/// Sums `(loss, gradient)` contributions of fixed row chunks in chunk order.
pub(crate) fn accumulate_chunks<F>(rows: usize, chunk: usize, strategy: Strategy, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(Range<usize>) -> Result<(f64, Vec<f64>)> + Sync + Send,
{
    let ranges = par::chunk_ranges(rows, chunk);
    let parts = par::try_map_indexed(ranges.len(), strategy, |i| f(ranges[i].clone()))?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().ok_or_else(|| Error::EmptyInput("gradient batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Shared optimizer loop: `grad_fn(step)` returns the batch loss and its
/// gradient for the current parameters.
pub(crate) struct Trainer {
    pub adam: AdamState,
    pub blocks: Vec<ParamBlock>,
    pub log: Vec<LogRow>,
    started: Instant,
}

impl Trainer {
    pub fn new(len: usize, blocks: Vec<ParamBlock>) -> Self {
        Self { adam: AdamState::new(len), blocks, log: Vec::new(), started: Instant::now() }
    }

    pub fn apply(&mut self, params: &mut [f64], step: usize, loss: f64, grad: &[f64], lr: f64) -> Result<()> {
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                detail: format!("loss {loss}, gradient norm {grad_norm}, lr {lr}"),
            });
        }
        adam_step(params, grad, &mut self.adam, &AdamConfig::with_lr(lr), &self.blocks).map_err(|e| {
            Error::TrainingDiverged { step, detail: e.to_string() }
        })?;
        self.log.push(LogRow { step, loss, grad_norm, wall_ms: self.started.elapsed().as_secs_f64() * 1e3 });
        Ok(())
    }
}

#[cfg(test)]
mod tests;
