//! Kernel two-sample distance with a Gaussian RBF kernel
//! `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    /// Unbiased MMD^2 estimate, may be slightly negative.
    pub unbiased: f64,
    /// `max(unbiased, 0)`.
    pub reported: f64,
    pub biased: f64,
    pub bandwidth: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance between distinct rows.
pub fn median_bandwidth(x: &Array2<f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::EmptyInput("median heuristic needs two samples".into()));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med <= 0.0 {
        return Err(Error::InvalidRange("median distance is zero".into()));
    }
    Ok(med)
}

struct KernelSums {
    xx_off: f64,
    yy_off: f64,
    xx_diag: f64,
    yy_diag: f64,
    xy: f64,
}

fn kernel_sums(x: &Array2<f64>, y: &Array2<f64>, sigma: f64) -> KernelSums {
    let k = |a: ArrayView1<f64>, b: ArrayView1<f64>| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let within = |z: &Array2<f64>| {
        let mut off = 0.0;
        for i in 0..z.nrows() {
            for j in i + 1..z.nrows() {
                off += 2.0 * k(z.row(i), z.row(j));
            }
        }
        (off, z.nrows() as f64)
    };
    let (xx_off, xx_diag) = within(x);
    let (yy_off, yy_diag) = within(y);
    let mut xy = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            xy += k(a, b);
        }
    }
    KernelSums { xx_off, yy_off, xx_diag, yy_diag, xy }
}

/// MMD^2 between the row sets `x` and `y`. `bandwidth = None` uses the
/// median heuristic on `y`.
pub fn mmd(x: &Array2<f64>, y: &Array2<f64>, bandwidth: Option<f64>) -> Result<MmdReport> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::EmptyInput("MMD sample set".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch { expected: vec![x.ncols()], got: vec![y.ncols()] });
    }
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::EmptyInput("unbiased MMD needs at least two samples per set".into()));
    }
    let sigma = match bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::InvalidRange(format!("bandwidth must be positive, got {s}"))),
        None => median_bandwidth(y)?,
    };
    let s = kernel_sums(x, y, sigma);
    let (n, m) = (x.nrows() as f64, y.nrows() as f64);
    let cross = s.xy / (n * m);
    let unbiased = s.xx_off / (n * (n - 1.0)) + s.yy_off / (m * (m - 1.0)) - 2.0 * cross;
    let biased = (s.xx_off + s.xx_diag) / (n * n) + (s.yy_off + s.yy_diag) / (m * m) - 2.0 * cross;
    Ok(MmdReport { unbiased, reported: unbiased.max(0.0), biased, bandwidth: sigma })
}
