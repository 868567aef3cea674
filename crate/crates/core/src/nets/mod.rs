//! The noise-prediction network, the residual noise refiner, and the
//! machinery to train them.
//!
//! Both networks are plain MLPs over `[image | time embedding | condition
//! one-hot]`. The refiner adds its output to its input, and its output layer
//! starts at zero, so a fresh refiner is the identity map.

mod adam;
mod checkpoint;
pub mod tape;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use tape::{linear_forward, silu_forward, LinearLayout, Tape, Var};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, ArchSpec, Checkpoint, CheckpointHeader};

/// Class condition, or the null condition used for classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    fn slot(self, num_classes: usize) -> Result<usize> {
        match self {
            Condition::Class(k) if k < num_classes => Ok(k),
            Condition::Class(k) => Err(Error::InvalidClass { class: k, num_classes }),
            Condition::Null => Ok(num_classes),
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Condition::Class(k) => Some(k),
            Condition::Null => None,
        }
    }
}

/// Named contiguous range of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Fully connected stack: `depth` hidden SiLU layers of width `hidden`, then
/// a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayout>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(in_dim: usize, hidden: usize, depth: usize, out_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut offset = 0;
        let mut fan_in = in_dim;
        for i in 0..=depth {
            let fan_out = if i == depth { out_dim } else { hidden };
            let l = LinearLayout { offset, fan_in, fan_out };
            offset += l.len();
            layers.push(l);
            fan_in = fan_out;
        }
        Self { layers, params: vec![0.0; offset] }
    }

    /// LeCun-normal hidden weights, zero biases; the output layer is zero when
    /// `zero_output` is set.
    pub fn init(in_dim: usize, hidden: usize, depth: usize, out_dim: usize, zero_output: bool, rng: &mut RngStream) -> Self {
        let mut mlp = Self::zeros(in_dim, hidden, depth, out_dim);
        let n = mlp.layers.len();
        for (i, l) in mlp.layers.clone().iter().enumerate() {
            if i + 1 == n && zero_output {
                continue;
            }
            let scale = (1.0 / l.fan_in as f64).sqrt();
            for w in &mut mlp.params[l.offset..l.offset + l.weight_len()] {
                *w = scale * rng.normal();
            }
        }
        mlp
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.params.len()], got: vec![params.len()] });
        }
        self.params = params;
        Ok(())
    }

    pub fn layers(&self) -> &[LinearLayout] {
        &self.layers
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(ParamBlock { name: format!("layer{i}.weight"), offset: l.offset, len: l.weight_len() });
            out.push(ParamBlock { name: format!("layer{i}.bias"), offset: l.offset + l.weight_len(), len: l.fan_out });
        }
        out
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let mut h = linear_forward(&features, &self.params, &self.layers[0]);
        for l in &self.layers[1..] {
            h = silu_forward(&h);
            h = linear_forward(&h.view(), &self.params, l);
        }
        h
    }

    /// Last hidden activation (input to the output layer).
    pub fn last_hidden(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let mut h = linear_forward(&features, &self.params, &self.layers[0]);
        for l in &self.layers[1..self.layers.len() - 1] {
            h = silu_forward(&h);
            h = linear_forward(&h.view(), &self.params, l);
        }
        silu_forward(&h)
    }

    pub fn record<'p>(&'p self, tape: &mut Tape<'p>, features: Var) -> Var {
        let mut h = tape.linear(features, &self.params, self.layers[0]);
        for l in &self.layers[1..] {
            h = tape.silu(h);
            h = tape.linear(h, &self.params, *l);
        }
        h
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(t f_i), cos(t f_i)]`
/// with `f_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    /// `[C, H, W]`
    pub image_shape: Vec<usize>,
    pub time_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Largest valid timestep (the schedule's T).
    pub max_timestep: usize,
}

impl NetArch {
    pub fn toy(num_classes: usize, max_timestep: usize) -> Self {
        Self { image_shape: vec![1, 16, 16], time_dim: 32, num_classes, hidden: 512, depth: 3, max_timestep }
    }

    pub fn image_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    fn feature_dim(&self) -> usize {
        self.image_dim() + self.time_dim + self.num_classes + 1
    }

    /// `[time embedding | condition one-hot]` per row.
    fn context(&self, ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        if ts.len() != conds.len() {
            return Err(Error::ShapeMismatch { expected: vec![ts.len()], got: vec![conds.len()] });
        }
        let width = self.time_dim + self.num_classes + 1;
        let mut ctx = Array2::zeros((ts.len(), width));
        for (i, (&t, &c)) in ts.iter().zip(conds).enumerate() {
            if t == 0 || t > self.max_timestep {
                return Err(Error::InvalidTimestep { t, max: self.max_timestep });
            }
            let slot = c.slot(self.num_classes)?;
            let mut row = ctx.row_mut(i);
            for (j, v) in time_embedding(t, self.time_dim).into_iter().enumerate() {
                row[j] = v;
            }
            row[self.time_dim + slot] = 1.0;
        }
        Ok(ctx)
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.image_dim() {
            return Err(Error::ShapeMismatch { expected: vec![x.nrows(), self.image_dim()], got: vec![x.nrows(), x.ncols()] });
        }
        Ok(())
    }

    fn features(&self, x: &Array2<f64>, ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        self.check_input(x)?;
        if x.nrows() != ts.len() {
            return Err(Error::ShapeMismatch { expected: vec![x.nrows()], got: vec![ts.len()] });
        }
        let ctx = self.context(ts, conds)?;
        ndarray::concatenate(ndarray::Axis(1), &[x.view(), ctx.view()]).map_err(|e| Error::Format(e.to_string()))
    }
}

/// The noise predictor `eps(x_t, t, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    arch: NetArch,
    mlp: Mlp,
}

impl DenoiserNet {
    pub fn zeros(arch: NetArch) -> Self {
        let mlp = Mlp::zeros(arch.feature_dim(), arch.hidden, arch.depth, arch.image_dim());
        Self { arch, mlp }
    }

    /// Random hidden layers, zero output layer.
    pub fn init(arch: NetArch, rng: &mut RngStream) -> Self {
        let mlp = Mlp::init(arch.feature_dim(), arch.hidden, arch.depth, arch.image_dim(), true, rng);
        Self { arch, mlp }
    }

    /// Random weights everywhere, including the output layer.
    pub fn init_dense(arch: NetArch, rng: &mut RngStream) -> Self {
        let mlp = Mlp::init(arch.feature_dim(), arch.hidden, arch.depth, arch.image_dim(), false, rng);
        Self { arch, mlp }
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        self.mlp.set_params(params)
    }

    /// Noise prediction with a timestep per row.
    pub fn predict_rows(&self, x: &Array2<f64>, ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        let f = self.arch.features(x, ts, conds)?;
        Ok(self.mlp.forward(f.view()))
    }

    pub fn predict(&self, x: &Array2<f64>, t: usize, conds: &[Condition]) -> Result<Array2<f64>> {
        self.predict_rows(x, &vec![t; x.nrows()], conds)
    }

    pub fn record_rows<'p>(&'p self, tape: &mut Tape<'p>, x: Var, ts: &[usize], conds: &[Condition]) -> Result<Var> {
        let xv = tape.value(x);
        self.arch.check_input(xv)?;
        if xv.nrows() != ts.len() {
            return Err(Error::ShapeMismatch { expected: vec![xv.nrows()], got: vec![ts.len()] });
        }
        let ctx = tape.constant(self.arch.context(ts, conds)?);
        let f = tape.concat(&[x, ctx])?;
        Ok(self.mlp.record(tape, f))
    }

    pub fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, t: usize, conds: &[Condition]) -> Result<Var> {
        let n = tape.value(x).nrows();
        self.record_rows(tape, x, &vec![t; n], conds)
    }
}

/// `g(x_T, c) = x_T + f(x_T, T, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerNet {
    arch: NetArch,
    mlp: Mlp,
}

impl RefinerNet {
    /// Random hidden layers, zero output layer: the identity map.
    pub fn init(arch: NetArch, rng: &mut RngStream) -> Self {
        let mlp = Mlp::init(arch.feature_dim(), arch.hidden, arch.depth, arch.image_dim(), true, rng);
        Self { arch, mlp }
    }

    pub fn from_mlp(arch: NetArch, mlp: Mlp) -> Result<Self> {
        if mlp.in_dim() != arch.feature_dim() || mlp.out_dim() != arch.image_dim() {
            return Err(Error::Format("refiner backbone does not match architecture".into()));
        }
        Ok(Self { arch, mlp })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        self.mlp.set_params(params)
    }

    fn timesteps(&self, n: usize) -> Vec<usize> {
        vec![self.arch.max_timestep; n]
    }

    /// The residual branch `f`.
    pub fn residual(&self, x_t: &Array2<f64>, conds: &[Condition]) -> Result<Array2<f64>> {
        let f = self.arch.features(x_t, &self.timesteps(x_t.nrows()), conds)?;
        Ok(self.mlp.forward(f.view()))
    }

    pub fn refine(&self, x_t: &Array2<f64>, conds: &[Condition]) -> Result<Array2<f64>> {
        let mut out = x_t * 1.0;
        out.scaled_add(1.0, &self.residual(x_t, conds)?);
        Ok(out)
    }

    /// Last hidden activation of the residual branch.
    pub fn last_hidden(&self, x_t: &Array2<f64>, conds: &[Condition]) -> Result<Array2<f64>> {
        let f = self.arch.features(x_t, &self.timesteps(x_t.nrows()), conds)?;
        Ok(self.mlp.last_hidden(f.view()))
    }

    pub fn record<'p>(&'p self, tape: &mut Tape<'p>, x_t: Var, conds: &[Condition]) -> Result<Var> {
        let n = tape.value(x_t).nrows();
        self.arch.check_input(tape.value(x_t))?;
        let ctx = tape.constant(self.arch.context(&self.timesteps(n), conds)?);
        let f = tape.concat(&[x_t, ctx])?;
        let r = self.mlp.record(tape, f);
        tape.lincomb(x_t, 1.0, r, 1.0)
    }
}

#[cfg(test)]
mod tests;
