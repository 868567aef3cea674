//! Cumulative noise schedule and the DDIM coefficients derived from it.
//!
//! `alpha[t]` is the cumulative signal factor (alpha-bar), with `alpha[0] = 1`.
//! For a sampling substep `t -> t_prev` the deterministic update is
//! `x_prev = a * x_t + b * eps`, where
//!
//! ```text
//! a     = sqrt(alpha[t_prev] / alpha[t])
//! b     = sqrt(1 - alpha[t_prev]) - a * sqrt(1 - alpha[t])
//! gamma = -b
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
}

/// Coefficients of one substep `t -> t_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs {
    pub t: usize,
    pub t_prev: usize,
    pub alpha_t: f64,
    pub alpha_prev: f64,
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    /// Ancestral (DDPM, eta = 1) standard deviation for this substep.
    pub sigma: f64,
}

impl NoiseSchedule {
    /// Linear-beta schedule: `alpha[t] = prod_{i<=t} (1 - beta_i)` with
    /// `beta` spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidRange(format!("T must be >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - beta;
            alpha.push(acc);
        }
        Ok(Self { alpha })
    }

    /// Manual construction; consecutive equal values are allowed.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 || alpha[0] != 1.0 {
            return Err(Error::InvalidRange("alpha must start at 1 and have T >= 1".into()));
        }
        for w in alpha.windows(2) {
            if !(w[1] > 0.0 && w[1] <= w[0]) {
                return Err(Error::InvalidRange(format!("alpha must be non-increasing in (0, 1], got {alpha:?}")));
            }
        }
        Ok(Self { alpha })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidTimestep { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn coeffs(&self, t: usize, t_prev: usize) -> Result<StepCoeffs> {
        self.check_timestep(t)?;
        if t_prev >= t {
            return Err(Error::NonMonotoneTimesteps { t, t_prev });
        }
        let alpha_t = self.alpha[t];
        let alpha_prev = self.alpha[t_prev];
        let a = (alpha_prev / alpha_t).sqrt();
        let b = (1.0 - alpha_prev).sqrt() - a * (1.0 - alpha_t).sqrt();
        let sigma = if alpha_t < 1.0 && alpha_prev > alpha_t {
            ((1.0 - alpha_prev) / (1.0 - alpha_t) * (1.0 - alpha_t / alpha_prev)).sqrt()
        } else {
            0.0
        };
        Ok(StepCoeffs { t, t_prev, alpha_t, alpha_prev, a, b, gamma: -b, sigma })
    }

    /// `n` evenly spaced timesteps in `[1, T]`, strictly decreasing and
    /// starting at `T`.
    pub fn timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if n == 0 || n > big_t {
            return Err(Error::InvalidRange(format!("step count must be in 1..={big_t}, got {n}")));
        }
        Ok((1..=n).rev().map(|i| i * big_t / n).collect())
    }

    /// Substep pairs `(t, t_prev)` of an `n`-step rollout, ending at `t_prev = 0`.
    pub fn substeps(&self, n: usize) -> Result<Vec<StepCoeffs>> {
        let ts = self.timesteps(n)?;
        ts.iter()
            .enumerate()
            .map(|(i, &t)| self.coeffs(t, ts.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }
}

/// `sqrt(alpha[t]) * x0 + sqrt(1 - alpha[t]) * eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    let at = schedule.alpha(t);
    x0.lincomb(at.sqrt(), eps, (1.0 - at).sqrt())
}
