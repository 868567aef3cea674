//! Per-channel 2D discrete Fourier transform on power-of-two images, with a
//! centered radial index for band selection.
//!
//! Forward is unnormalized, inverse carries the `1/(H*W)` factor. Radii are
//! measured on the centered full spectrum (signed frequencies in
//! `[-H/2, H/2)`) and normalized so the corner bin `(H/2, W/2)` sits at 1.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySpectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[C, H, W]`
    pub re: Tensor,
    /// `[C, H, W]`
    pub im: Tensor,
}

impl FrequencySpectrum {
    pub fn radial_index(&self) -> Vec<f64> {
        radial_index(self.height, self.width)
    }

    /// Squared magnitude of every bin, `[C * H * W]`.
    pub fn power(&self) -> Vec<f64> {
        self.re.data().iter().zip(self.im.data()).map(|(r, i)| r * r + i * i).collect()
    }

    /// Spectral energy `sum |X|^2 / (H W)`; equals the spatial `sum x^2`.
    pub fn energy(&self) -> f64 {
        self.power().iter().sum::<f64>() / (self.height * self.width) as f64
    }

    fn bins(&self) -> Vec<Complex64> {
        self.re.data().iter().zip(self.im.data()).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }

    fn from_bins(channels: usize, height: usize, width: usize, bins: &[Complex64]) -> Result<Self> {
        let shape = vec![channels, height, width];
        Ok(Self {
            channels,
            height,
            width,
            re: Tensor::new(shape.clone(), bins.iter().map(|c| c.re).collect())?,
            im: Tensor::new(shape, bins.iter().map(|c| c.im).collect())?,
        })
    }

    /// Takes bins inside `mask` from `other`, the rest from `self`.
    pub fn splice(&self, other: &FrequencySpectrum, mask: &[bool]) -> Result<FrequencySpectrum> {
        self.re.check_same_shape(&other.re)?;
        let hw = self.height * self.width;
        if mask.len() != hw {
            return Err(Error::ShapeMismatch { expected: vec![hw], got: vec![mask.len()] });
        }
        let (a, b) = (self.bins(), other.bins());
        let out: Vec<Complex64> =
            a.iter().zip(&b).enumerate().map(|(k, (x, y))| if mask[k % hw] { *y } else { *x }).collect();
        Self::from_bins(self.channels, self.height, self.width, &out)
    }

    /// Projects onto the Hermitian-symmetric subspace so the inverse is real:
    /// `X[k] <- (X[k] + conj(X[-k])) / 2`.
    pub fn symmetrize(&self) -> Result<FrequencySpectrum> {
        let (h, w) = (self.height, self.width);
        let x = self.bins();
        let mut out = x.clone();
        for c in 0..self.channels {
            for ky in 0..h {
                for kx in 0..w {
                    let i = c * h * w + ky * w + kx;
                    let j = c * h * w + ((h - ky) % h) * w + (w - kx) % w;
                    out[i] = (x[i] + x[j].conj()) * 0.5;
                }
            }
        }
        Self::from_bins(self.channels, h, w, &out)
    }
}

/// Normalized centered radius of every `(ky, kx)` bin, row-major `[H * W]`.
pub fn radial_index(height: usize, width: usize) -> Vec<f64> {
    let signed = |k: usize, n: usize| if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
    let rmax = ((height as f64 / 2.0).powi(2) + (width as f64 / 2.0).powi(2)).sqrt();
    let mut out = Vec::with_capacity(height * width);
    for ky in 0..height {
        for kx in 0..width {
            let (fy, fx) = (signed(ky, height), signed(kx, width));
            out.push((fy * fy + fx * fx).sqrt() / rmax);
        }
    }
    out
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match x.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Format(format!("expected [H, W] or [C, H, W], got {s:?}"))),
    };
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(h, w));
    }
    Ok((c, h, w))
}

fn transform_2d(bins: &mut [Complex64], channels: usize, h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..channels {
        let plane = &mut bins[c * h * w..(c + 1) * h * w];
        for row in plane.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for kx in 0..w {
            for ky in 0..h {
                col[ky] = plane[ky * w + kx];
            }
            col_fft.process(&mut col);
            for ky in 0..h {
                plane[ky * w + kx] = col[ky];
            }
        }
    }
}

pub fn fft2(x: &Tensor) -> Result<FrequencySpectrum> {
    let (c, h, w) = image_dims(x)?;
    let mut bins: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut bins, c, h, w, false);
    FrequencySpectrum::from_bins(c, h, w, &bins)
}

/// Inverse transform; returns the real part and the largest discarded
/// imaginary magnitude.
pub fn ifft2_with_residue(s: &FrequencySpectrum) -> Result<(Tensor, f64)> {
    let (c, h, w) = (s.channels, s.height, s.width);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(h, w));
    }
    let mut bins = s.bins();
    transform_2d(&mut bins, c, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let residue = bins.iter().map(|b| (b.im * norm).abs()).fold(0.0, f64::max);
    let real = Tensor::new(vec![c, h, w], bins.iter().map(|b| b.re * norm).collect())?;
    Ok((real, residue))
}

pub fn ifft2(s: &FrequencySpectrum) -> Result<Tensor> {
    ifft2_with_residue(s).map(|(t, _)| t)
}

/// Bins whose normalized radius lies in `[r_lo, r_hi)`; `r_hi = 1` also
/// admits the corner bin at radius exactly 1, so `[0, 1]` selects everything.
pub fn band_mask(height: usize, width: usize, r_lo: f64, r_hi: f64) -> Result<Vec<bool>> {
    if !(0.0 <= r_lo && r_lo < r_hi && r_hi <= 1.0) {
        return Err(Error::InvalidBand { lo: r_lo, hi: r_hi });
    }
    Ok(radial_index(height, width)
        .into_iter()
        .map(|r| r >= r_lo && (r < r_hi || (r_hi >= 1.0 && r <= 1.0 + 1e-12)))
        .collect())
}
