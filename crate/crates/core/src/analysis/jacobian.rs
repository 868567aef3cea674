use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::tape::Tape;
use crate::nets::Condition;
use crate::sampler::NoisePredictor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub t: usize,
    pub mean_abs_diag: f64,
    pub mean_abs_offdiag: f64,
    /// `mean_abs_diag / mean_abs_offdiag`; infinite for a diagonal Jacobian.
    pub ratio: f64,
}

/// Full `J[i][j] = d eps_i / d x_j` at a single input, from one batched
/// reverse pass over `D` copies of `x` seeded with the identity.
pub fn jacobian(net: &dyn NoisePredictor, x: &[f64], t: usize, c: Condition) -> Result<Array2<f64>> {
    let d = x.len();
    if d == 0 {
        return Err(Error::EmptyInput("Jacobian input".into()));
    }
    let rows = Array2::from_shape_fn((d, d), |(_, j)| x[j]);
    let mut tape = Tape::new();
    let xv = tape.input(rows);
    let y = net.record(&mut tape, xv, t, &vec![c; d])?;
    if tape.value(y).dim() != (d, d) {
        return Err(Error::ShapeMismatch { expected: vec![d, d], got: tape.value(y).shape().to_vec() });
    }
    let grads = tape.backward(y, Array2::eye(d))?;
    Ok(grads.wrt(xv).cloned().unwrap_or_else(|| Array2::zeros((d, d))))
}

pub fn summarize_jacobian(j: &Array2<f64>, t: usize) -> JacobianReport {
    let d = j.nrows();
    let diag: f64 = (0..d).map(|i| j[[i, i]].abs()).sum::<f64>() / d as f64;
    let total: f64 = j.iter().map(|v| v.abs()).sum();
    let off = if d > 1 { (total - diag * d as f64) / (d * d - d) as f64 } else { 0.0 };
    let ratio = if off > 0.0 { diag / off } else if diag > 0.0 { f64::INFINITY } else { 0.0 };
    JacobianReport { t, mean_abs_diag: diag, mean_abs_offdiag: off, ratio }
}

pub fn jacobian_probe(net: &dyn NoisePredictor, x: &[f64], t: usize, c: Condition) -> Result<JacobianReport> {
    Ok(summarize_jacobian(&jacobian(net, x, t, c)?, t))
}
