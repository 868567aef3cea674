//! Diagnostics over trained models: difference histograms, spectral band
//! energies and band swaps, denoiser Jacobians, the `gamma_t` curve, the two
//! propositions, slerp, cross-condition probes and MMD.

mod jacobian;
mod mmd;
mod props;
mod report;
mod spectral;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Condition, RefinerNet};
use crate::sampler::{denoise_rows, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub use jacobian::{jacobian, jacobian_probe, summarize_jacobian, JacobianReport};
pub use mmd::{median_bandwidth, mmd, MmdReport};
pub use props::{
    cosine, estimate_etas, pearson, prop2_batches, prop2_proportionality, verify_prop1, verify_prop2, Prop1Report,
    Prop2Batch, Prop2Report,
};
pub use report::{artifact_name, write_csv, write_json};
pub use spectral::{band_bin_count, band_energy, band_energy_many, band_swap_probe, BandReport, SwapMode, QUARTILE_EDGES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges starting at 0.
    pub edges: Vec<f64>,
    /// Probability density per bin (integrates to 1).
    pub density: Vec<f64>,
    pub mean: f64,
    pub count: usize,
}

/// Density histogram of `|a - b|` on `[0, upper]`; values above `upper` fall
/// in the last bin. `upper = None` uses the largest difference (or 1 if all
/// differences are zero).
pub fn diff_histogram(a: &Tensor, b: &Tensor, bins: usize, upper: Option<f64>) -> Result<Histogram> {
    a.check_same_shape(b)?;
    if bins == 0 || a.is_empty() {
        return Err(Error::EmptyInput("histogram".into()));
    }
    let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    let top = upper.unwrap_or_else(|| diffs.iter().copied().fold(0.0, f64::max));
    let top = if top > 0.0 { top } else { 1.0 };
    let width = top / bins as f64;
    let mut counts = vec![0usize; bins];
    for &d in &diffs {
        counts[((d / width) as usize).min(bins - 1)] += 1;
    }
    let n = diffs.len();
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (n as f64 * width)).collect(),
        mean: diffs.iter().sum::<f64>() / n as f64,
        count: n,
    })
}

/// `(t, gamma_t / sqrt(alpha_{t-1}))` for every consecutive step `t = 1..=T`;
/// equals `sqrt((1 - a_t) / a_t) - sqrt((1 - a_{t-1}) / a_{t-1})`.
pub fn gamma_curve(schedule: &NoiseSchedule) -> Result<Vec<(usize, f64)>> {
    (1..=schedule.steps())
        .map(|t| {
            let c = schedule.coeffs(t, t - 1)?;
            Ok((t, c.gamma / c.alpha_prev.sqrt()))
        })
        .collect()
}

/// Angles below this count as collinear (or antipodal).
const ANGLE_TOL: f64 = 1e-12;

/// Spherical interpolation of directions with linearly interpolated norm.
pub fn slerp(x1: &Tensor, x2: &Tensor, a: f64) -> Result<Tensor> {
    x1.check_same_shape(x2)?;
    let (n1, n2) = (x1.norm(), x2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateAngle("slerp of a zero vector".into()));
    }
    let cos = (x1.data().iter().zip(x2.data()).map(|(p, q)| p * q).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if std::f64::consts::PI - theta < ANGLE_TOL {
        return Err(Error::DegenerateAngle("slerp between antipodal vectors".into()));
    }
    if a == 0.0 {
        return Ok(x1.clone());
    }
    if a == 1.0 {
        return Ok(x2.clone());
    }
    let norm = (1.0 - a) * n1 + a * n2;
    if theta < ANGLE_TOL {
        return Ok(x1.scale(norm / n1));
    }
    let (c1, c2) = (((1.0 - a) * theta).sin() / theta.sin(), (a * theta).sin() / theta.sin());
    x1.lincomb(c1 * norm / n1, x2, c2 * norm / n2)
}

/// Refines with one condition and denoises (unguided) with another.
pub fn cross_condition_probe(
    refiner: &RefinerNet,
    net: &dyn NoisePredictor,
    x_t: &Array2<f64>,
    c_refine: &[Condition],
    c_denoise: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Array2<f64>> {
    let x_hat = refiner.refine(x_t, c_refine)?;
    denoise_rows(&x_hat, c_denoise, net, schedule, steps, None)
}

/// Index of the template nearest to `x` in Euclidean distance.
pub fn nearest_template(x: ArrayView1<f64>, templates: &Array2<f64>) -> usize {
    templates
        .rows()
        .into_iter()
        .map(|t| t.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests;
