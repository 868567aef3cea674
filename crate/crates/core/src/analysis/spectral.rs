//! Radial band energies and frequency-band surgery on noise tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{band_mask, fft2, ifft2_with_residue, radial_index};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Largest imaginary residue accepted after symmetrized band surgery.
const RESIDUE_TOL: f64 = 1e-9;

/// Quartile band edges over the normalized radius.
pub const QUARTILE_EDGES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub edges: Vec<f64>,
    pub energy: Vec<f64>,
    pub total: f64,
    pub fraction: Vec<f64>,
    /// Share of frequency bins in each band.
    pub bin_fraction: Vec<f64>,
    /// Mean and standard deviation of the band fractions of white noise.
    pub baseline_mean: Vec<f64>,
    pub baseline_std: Vec<f64>,
    pub baseline_trials: usize,
}

impl BandReport {
    /// Band fraction relative to the white-noise baseline.
    pub fn ratio_to_baseline(&self, band: usize) -> f64 {
        self.fraction[band] / self.baseline_mean[band]
    }
}

/// Band index of every `(ky, kx)` bin; `edges` must be increasing from 0 to 1.
fn band_of_bins(h: usize, w: usize, edges: &[f64]) -> Result<Vec<usize>> {
    if edges.len() < 2 || edges[0] != 0.0 || *edges.last().unwrap() != 1.0 {
        return Err(Error::InvalidRange(format!("band edges must run from 0 to 1, got {edges:?}")));
    }
    let masks: Vec<Vec<bool>> =
        edges.windows(2).map(|e| band_mask(h, w, e[0], e[1])).collect::<Result<_>>()?;
    for (b, m) in masks.iter().enumerate() {
        if !m.iter().any(|&v| v) {
            return Err(Error::EmptyBand { lo: edges[b], hi: edges[b + 1] });
        }
    }
    Ok((0..h * w).map(|k| masks.iter().position(|m| m[k]).expect("bands cover the spectrum")).collect())
}

fn energies(x: &Tensor, bands: &[usize], nb: usize) -> Result<Vec<f64>> {
    let s = fft2(x)?;
    let hw = s.height * s.width;
    let mut e = vec![0.0; nb];
    for (k, p) in s.power().iter().enumerate() {
        e[bands[k % hw]] += p / hw as f64;
    }
    Ok(e)
}

fn dims(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [h, w] | [_, h, w] => Ok((*h, *w)),
        s => Err(Error::Format(format!("expected an image, got shape {s:?}"))),
    }
}

/// Band energies summed over all `diffs`, with a white-noise baseline drawn
/// from `trials` Gaussian tensors of the same shape.
pub fn band_energy_many(diffs: &[Tensor], edges: &[f64], trials: usize, seed: u64) -> Result<BandReport> {
    let first = diffs.first().ok_or_else(|| Error::EmptyInput("band energy input".into()))?;
    let (h, w) = dims(first)?;
    let bands = band_of_bins(h, w, edges)?;
    let nb = edges.len() - 1;
    let mut energy = vec![0.0; nb];
    for d in diffs {
        first.check_same_shape(d)?;
        for (a, b) in energy.iter_mut().zip(energies(d, &bands, nb)?) {
            *a += b;
        }
    }
    let total: f64 = energy.iter().sum();
    let fraction = energy.iter().map(|e| if total > 0.0 { e / total } else { 0.0 }).collect();
    let mut bin_fraction = vec![0.0; nb];
    for &b in &bands {
        bin_fraction[b] += 1.0 / bands.len() as f64;
    }
    let mut sum = vec![0.0; nb];
    let mut sum_sq = vec![0.0; nb];
    let mut rng = RngStream::derive(seed, "white-noise-baseline", 0);
    for _ in 0..trials {
        let e = energies(&Tensor::randn(first.shape(), &mut rng), &bands, nb)?;
        let t: f64 = e.iter().sum();
        for b in 0..nb {
            sum[b] += e[b] / t;
            sum_sq[b] += (e[b] / t).powi(2);
        }
    }
    let n = trials.max(1) as f64;
    let baseline_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let baseline_std = sum_sq
        .iter()
        .zip(&baseline_mean)
        .map(|(s2, m)| if trials > 1 { ((s2 / n - m * m) * n / (n - 1.0)).max(0.0).sqrt() } else { 0.0 })
        .collect();
    Ok(BandReport {
        edges: edges.to_vec(),
        energy,
        total,
        fraction,
        bin_fraction,
        baseline_mean,
        baseline_std,
        baseline_trials: trials,
    })
}

/// Band energies of a single difference tensor with a 1000-trial baseline.
pub fn band_energy(diff: &Tensor, edges: &[f64]) -> Result<BandReport> {
    band_energy_many(std::slice::from_ref(diff), edges, 1000, 0)
}

/// Which spectrum the probe builds.
#[derive(Clone, Copy, Debug)]
pub enum SwapMode<'a> {
    /// `x_T` with the band taken from the refined noise.
    ReplaceBand,
    /// Only the refined noise's band; everything else zero.
    KeepOnly,
    /// The refined noise's band; everything else from `fresh`.
    KeepAndReinit(&'a Tensor),
}

/// Hybrid noise for the band `[r_lo, r_hi)` (`r_hi = 1` inclusive), returned in
/// the spatial domain.
pub fn band_swap_probe(x_t: &Tensor, x_hat: &Tensor, r_lo: f64, r_hi: f64, mode: SwapMode) -> Result<Tensor> {
    x_t.check_same_shape(x_hat)?;
    let (h, w) = dims(x_t)?;
    let mask = band_mask(h, w, r_lo, r_hi)?;
    let (all, none) = (mask.iter().all(|&m| m), !mask.iter().any(|&m| m));
    let base = match mode {
        SwapMode::ReplaceBand => x_t.clone(),
        SwapMode::KeepOnly => Tensor::zeros(x_t.shape()),
        SwapMode::KeepAndReinit(fresh) => {
            x_t.check_same_shape(fresh)?;
            fresh.clone()
        }
    };
    if all {
        return Ok(x_hat.clone());
    }
    if none {
        return Ok(base);
    }
    let spliced = fft2(&base)?.splice(&fft2(x_hat)?, &mask)?.symmetrize()?;
    let (out, residue) = ifft2_with_residue(&spliced)?;
    if residue > RESIDUE_TOL {
        return Err(Error::NonFinite(format!("band surgery left imaginary residue {residue}")));
    }
    out.reshape(x_t.shape())
}

/// Number of bins with normalized radius in `[lo, hi)`.
pub fn band_bin_count(h: usize, w: usize, lo: f64, hi: f64) -> usize {
    radial_index(h, w).iter().filter(|&&r| r >= lo && (r < hi || (hi >= 1.0 && r <= 1.0 + 1e-12))).count()
}
