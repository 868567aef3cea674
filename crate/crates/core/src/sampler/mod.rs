//! Deterministic DDIM sampling (guided or not), ancestral DDPM steps, and
//! fixed-point DDIM inversion.
//!
//! Everything works on row batches (`[batch, C*H*W]`); the `Tensor`-level
//! functions are single-image conveniences over the batch versions.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::nets::tape::{Tape, Var};
use crate::nets::{Condition, DenoiserNet};
use crate::schedule::{NoiseSchedule, StepCoeffs};
use crate::tensor::Tensor;

/// Anything that predicts noise: the trained network, test stubs, or a
/// counting wrapper.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Array2<f64>, t: usize, conds: &[Condition]) -> Result<Array2<f64>>;

    /// Differentiable version of [`NoisePredictor::predict`].
    fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, t: usize, conds: &[Condition]) -> Result<Var>;
}

impl NoisePredictor for DenoiserNet {
    fn predict(&self, x: &Array2<f64>, t: usize, conds: &[Condition]) -> Result<Array2<f64>> {
        DenoiserNet::predict(self, x, t, conds)
    }

    fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, t: usize, conds: &[Condition]) -> Result<Var> {
        DenoiserNet::record(self, tape, x, t, conds)
    }
}

/// `eps(x) = c`, independent of input, timestep and condition.
#[derive(Clone, Debug)]
pub struct ConstantPredictor {
    pub value: Array1<f64>,
}

impl NoisePredictor for ConstantPredictor {
    fn predict(&self, x: &Array2<f64>, _t: usize, _conds: &[Condition]) -> Result<Array2<f64>> {
        Ok(broadcast_rows(&self.value, x.nrows()))
    }

    fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, _t: usize, _conds: &[Condition]) -> Result<Var> {
        let n = tape.value(x).nrows();
        Ok(tape.constant(broadcast_rows(&self.value, n)))
    }
}

/// `eps(x) = eta * x + c`: Jacobian exactly `eta * I`.
#[derive(Clone, Debug)]
pub struct LinearPredictor {
    pub eta: f64,
    pub offset: Array1<f64>,
}

impl NoisePredictor for LinearPredictor {
    fn predict(&self, x: &Array2<f64>, _t: usize, _conds: &[Condition]) -> Result<Array2<f64>> {
        let mut out = x * self.eta;
        out.scaled_add(1.0, &broadcast_rows(&self.offset, x.nrows()));
        Ok(out)
    }

    fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, _t: usize, _conds: &[Condition]) -> Result<Var> {
        let n = tape.value(x).nrows();
        let c = tape.constant(broadcast_rows(&self.offset, n));
        tape.lincomb(x, self.eta, c, 1.0)
    }
}

fn broadcast_rows(v: &Array1<f64>, n: usize) -> Array2<f64> {
    v.broadcast((n, v.len())).expect("row broadcast").to_owned()
}

/// Counts batched evaluations (NFE) of the wrapped predictor.
pub struct CountingPredictor<'a> {
    inner: &'a dyn NoisePredictor,
    calls: AtomicUsize,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl NoisePredictor for CountingPredictor<'_> {
    fn predict(&self, x: &Array2<f64>, t: usize, conds: &[Condition]) -> Result<Array2<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x, t, conds)
    }

    fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, t: usize, conds: &[Condition]) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.record(tape, x, t, conds)
    }
}

/// Classifier-free scale `w` plus the degraded-predictor scale `s`, applied as
/// `eps_c + w (eps_c - eps_null) + s (eps_c - eps_degraded)`.
#[derive(Clone, Copy)]
pub struct GuidanceSpec<'a> {
    pub cfg_scale: f64,
    pub degraded_scale: f64,
    pub degraded: Option<&'a dyn NoisePredictor>,
}

impl<'a> GuidanceSpec<'a> {
    pub fn cfg(w: f64) -> Self {
        Self { cfg_scale: w, degraded_scale: 0.0, degraded: None }
    }

    pub fn with_degraded(w: f64, s: f64, degraded: &'a dyn NoisePredictor) -> Self {
        Self { cfg_scale: w, degraded_scale: s, degraded: Some(degraded) }
    }

    pub fn rows(&self, n: usize) -> RowGuidance<'a> {
        RowGuidance { w: vec![self.cfg_scale; n], s: vec![self.degraded_scale; n], degraded: self.degraded }
    }
}

/// Guidance with its own scales per batch row.
#[derive(Clone)]
pub struct RowGuidance<'a> {
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub degraded: Option<&'a dyn NoisePredictor>,
}

impl RowGuidance<'_> {
    fn validate(&self, n: usize) -> Result<()> {
        if self.w.len() != n || self.s.len() != n {
            return Err(Error::ShapeMismatch { expected: vec![n], got: vec![self.w.len(), self.s.len()] });
        }
        for &v in self.w.iter().chain(&self.s) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidRange(format!("guidance scales must be finite and >= 0, got {v}")));
            }
        }
        if self.degraded.is_none() {
            if let Some(&s) = self.s.iter().find(|&&s| s > 0.0) {
                return Err(Error::MissingDegradedPredictor(s));
            }
        }
        Ok(())
    }
}

/// Guided noise prediction. Terms whose scale is zero on every row are not
/// evaluated, so the cost is 1, 2 or 3 network calls.
pub fn guided_score_rows(
    net: &dyn NoisePredictor,
    x: &Array2<f64>,
    t: usize,
    conds: &[Condition],
    g: &RowGuidance,
) -> Result<Array2<f64>> {
    g.validate(x.nrows())?;
    let eps_c = net.predict(x, t, conds)?;
    let eps_null = if g.w.iter().any(|&w| w != 0.0) {
        Some(net.predict(x, t, &vec![Condition::Null; x.nrows()])?)
    } else {
        None
    };
    let eps_deg = match g.degraded {
        Some(d) if g.s.iter().any(|&s| s != 0.0) => Some(d.predict(x, t, conds)?),
        _ => None,
    };
    let mut out = eps_c.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let c = eps_c.row(i);
        if let (Some(en), true) = (&eps_null, g.w[i] != 0.0) {
            row.zip_mut_with(&(&c - &en.row(i)), |o, d| *o += g.w[i] * d);
        }
        if let (Some(ed), true) = (&eps_deg, g.s[i] != 0.0) {
            row.zip_mut_with(&(&c - &ed.row(i)), |o, d| *o += g.s[i] * d);
        }
    }
    Ok(out)
}

pub fn guided_score(net: &dyn NoisePredictor, x: &Tensor, t: usize, c: Condition, g: &GuidanceSpec) -> Result<Tensor> {
    let rows = as_row(x);
    let out = guided_score_rows(net, &rows, t, &[c], &g.rows(1))?;
    Tensor::new(x.shape().to_vec(), out.into_raw_vec_and_offset().0)
}

fn as_row(x: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.data().to_vec()).expect("row shape")
}

fn from_row(m: Array2<f64>, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), m.into_raw_vec_and_offset().0)
}

/// An image-shaped state at a diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

/// `a * x + b * eps`, in the same operation order the tape uses.
pub fn ddim_update(x: &Array2<f64>, eps: &Array2<f64>, c: &StepCoeffs) -> Array2<f64> {
    let mut out = x * c.a;
    out.scaled_add(c.b, eps);
    out
}

pub fn ddim_step(state: &LatentState, eps_pred: &Tensor, schedule: &NoiseSchedule, t_prev: usize) -> Result<LatentState> {
    state.x.check_same_shape(eps_pred)?;
    let c = schedule.coeffs(state.t, t_prev)?;
    let out = ddim_update(&as_row(&state.x), &as_row(eps_pred), &c);
    Ok(LatentState { x: from_row(out, state.x.shape())?, t: t_prev })
}

/// Generalized DDIM step with stochasticity `eta` (0 = DDIM, 1 = ancestral
/// DDPM): `x_prev = a x + (sqrt(1 - alpha_prev - sigma^2) - a sqrt(1 - alpha_t)) eps + sigma z`
/// with `sigma = eta * sigma_ancestral`.
pub fn ddpm_update(x: &Array2<f64>, eps: &Array2<f64>, z: &Array2<f64>, c: &StepCoeffs, eta: f64) -> Array2<f64> {
    let sigma = eta * c.sigma;
    let b = (1.0 - c.alpha_prev - sigma * sigma).max(0.0).sqrt() - c.a * (1.0 - c.alpha_t).sqrt();
    let mut out = x * c.a;
    out.scaled_add(b, eps);
    if sigma != 0.0 {
        out.scaled_add(sigma, z);
    }
    out
}

pub fn ddpm_step(
    state: &LatentState,
    eps_pred: &Tensor,
    schedule: &NoiseSchedule,
    t_prev: usize,
    z: &Tensor,
    eta: f64,
) -> Result<LatentState> {
    state.x.check_same_shape(eps_pred)?;
    state.x.check_same_shape(z)?;
    let c = schedule.coeffs(state.t, t_prev)?;
    let out = ddpm_update(&as_row(&state.x), &as_row(eps_pred), &as_row(z), &c, eta);
    Ok(LatentState { x: from_row(out, state.x.shape())?, t: t_prev })
}

/// Step counts and subsequence choice for sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Guidance-free denoising steps.
    pub steps: usize,
    /// Guided denoising steps used when building targets.
    pub guided_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 10, guided_steps: 20 }
    }
}

/// `steps`-step DDIM rollout from `x_T` to `x_0`. Without guidance each step
/// costs exactly one predictor call.
pub fn denoise_rows(
    x_t: &Array2<f64>,
    conds: &[Condition],
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: Option<&RowGuidance>,
) -> Result<Array2<f64>> {
    denoise_rows_traced(x_t, conds, net, schedule, steps, guidance, None)
}

/// As [`denoise_rows`], additionally pushing `(t, x_t)` for every visited
/// state (including the start and the final `t = 0`) into `trace`.
pub fn denoise_rows_traced(
    x_t: &Array2<f64>,
    conds: &[Condition],
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: Option<&RowGuidance>,
    mut trace: Option<&mut Vec<(usize, Array2<f64>)>>,
) -> Result<Array2<f64>> {
    if conds.len() != x_t.nrows() {
        return Err(Error::ShapeMismatch { expected: vec![x_t.nrows()], got: vec![conds.len()] });
    }
    let mut x = x_t.clone();
    let subs = schedule.substeps(steps)?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push((subs[0].t, x.clone()));
    }
    for c in &subs {
        let eps = match guidance {
            None => net.predict(&x, c.t, conds)?,
            Some(g) => guided_score_rows(net, &x, c.t, conds, g)?,
        };
        x = ddim_update(&x, &eps, c);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((c.t_prev, x.clone()));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denoised sample".into()));
    }
    Ok(x)
}

pub fn denoise(
    x_t: &Tensor,
    c: Condition,
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: Option<&GuidanceSpec>,
) -> Result<Tensor> {
    let g = guidance.map(|g| g.rows(1));
    let out = denoise_rows(&as_row(x_t), &[c], net, schedule, steps, g.as_ref())?;
    from_row(out, x_t.shape())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InversionConfig {
    /// Same subsequence length as sampling, so round trips are well defined.
    pub steps: usize,
    /// Fixed-point refinements per step; 0 is plain DDIM inversion.
    pub fixed_point_iters: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 10, fixed_point_iters: 5 }
    }
}

/// Consecutive residual increases tolerated before declaring divergence.
const DIVERGENCE_STREAK: usize = 3;

/// Unguided DDIM inversion from `x_0` to `x_T`. Each step `t_prev -> t` solves
/// `x_t = (x_prev - b eps(x_t, t)) / a`, seeded with `eps(x_prev, t)` and
/// refined by `fixed_point_iters` substitutions.
pub fn invert_rows(
    x0: &Array2<f64>,
    conds: &[Condition],
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cfg: &InversionConfig,
) -> Result<Array2<f64>> {
    if conds.len() != x0.nrows() {
        return Err(Error::ShapeMismatch { expected: vec![x0.nrows()], got: vec![conds.len()] });
    }
    let mut subs = schedule.substeps(cfg.steps)?;
    subs.reverse();
    let mut x_prev = x0.clone();
    for c in &subs {
        let solve = |eps: &Array2<f64>| {
            let mut out = x_prev.clone();
            out.scaled_add(-c.b, eps);
            out / c.a
        };
        let mut x = solve(&net.predict(&x_prev, c.t, conds)?);
        let rows = x.nrows();
        let mut last_res = vec![f64::INFINITY; rows];
        let mut streak = vec![0usize; rows];
        let mut history: Vec<Vec<f64>> = vec![Vec::new(); rows];
        for _ in 0..cfg.fixed_point_iters {
            let next = solve(&net.predict(&x, c.t, conds)?);
            for i in 0..rows {
                let res = (&next.row(i) - &x.row(i)).mapv(|d| d * d).sum().sqrt();
                let floor = 1e-12 * (1.0 + next.row(i).mapv(|v| v * v).sum().sqrt());
                history[i].push(res);
                if res > last_res[i] && res > floor {
                    streak[i] += 1;
                    if streak[i] >= DIVERGENCE_STREAK {
                        return Err(Error::InversionDiverged { t: c.t, residuals: history[i].clone() });
                    }
                } else {
                    streak[i] = 0;
                }
                last_res[i] = res;
            }
            x = next;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("inversion at t={}", c.t)));
        }
        x_prev = x;
    }
    Ok(x_prev)
}

pub fn invert(x0: &Tensor, c: Condition, net: &dyn NoisePredictor, schedule: &NoiseSchedule, cfg: &InversionConfig) -> Result<Tensor> {
    let out = invert_rows(&as_row(x0), &[c], net, schedule, cfg)?;
    from_row(out, x0.shape())
}
