//! Dense row-major `f64` tensors plus the two on-disk image formats.
//!
//! Binary tensor framing (`NFTENSOR`):
//!
//! ```text
//! b"NFTENSOR" | rank: u32 LE | rank x dim: u32 LE | data: f64 LE ...
//! ```
//!
//! Images export as binary PGM (P5) with the tensor's `[min, max]` mapped
//! affinely onto `[0, 255]`.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const NFT_MAGIC: &[u8; 8] = b"NFTENSOR";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn randn(shape: &[usize], rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: rng.normal_vec(n) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.clone(), got: other.shape.clone() });
        }
        Ok(())
    }

    /// `ca * self + cb * other`.
    pub fn lincomb(&self, ca: f64, other: &Tensor, cb: f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| ca * a + cb * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.lincomb(1.0, other, -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| c * v).collect() }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn mean_sq_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.len() as f64)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: self.shape });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn from_row(row: ArrayView1<f64>, shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: row.iter().copied().collect() }
    }

    // ---- NFTENSOR framing ----

    pub fn write_nft<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NFT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_nft<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NFT_MAGIC {
            return Err(Error::Format("bad NFTENSOR magic".into()));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn to_nft_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_nft(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Stacks equally-shaped tensors as the rows of a matrix.
pub fn stack_rows(items: &[Tensor]) -> Result<Array2<f64>> {
    let first = items.first().ok_or_else(|| Error::EmptyInput("stack_rows".into()))?;
    let d = first.len();
    let mut out = Array2::zeros((items.len(), d));
    for (i, t) in items.iter().enumerate() {
        first.check_same_shape(t)?;
        out.row_mut(i).assign(&ArrayView1::from(t.data()));
    }
    Ok(out)
}

pub fn unstack_rows(m: &Array2<f64>, shape: &[usize]) -> Vec<Tensor> {
    m.rows().into_iter().map(|r| Tensor::from_row(r, shape)).collect()
}

/// Binary PGM of a single-channel image (`[H, W]` or `[1, H, W]`).
pub fn write_pgm<W: Write>(image: &Tensor, w: W) -> Result<()> {
    let (h, wd) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Format(format!("PGM needs a single-channel image, got shape {s:?}"))),
    };
    write_pgm_raw(image.data(), h, wd, w)
}

/// Tiles single-channel images into a `cols`-wide grid separated by a 1-pixel
/// gutter, then writes one PGM with a shared intensity mapping.
pub fn write_pgm_grid<W: Write>(images: &[Tensor], cols: usize, w: W) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::EmptyInput("PGM grid".into()))?;
    let (h, wd) = match first.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Format(format!("PGM needs a single-channel image, got shape {s:?}"))),
    };
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let gh = rows * (h + 1) - 1;
    let gw = cols * (wd + 1) - 1;
    let lo = images.iter().flat_map(|t| t.data().iter().copied()).fold(f64::INFINITY, f64::min);
    let mut canvas = vec![lo; gh * gw];
    for (k, img) in images.iter().enumerate() {
        first.check_same_shape(img)?;
        let (r0, c0) = ((k / cols) * (h + 1), (k % cols) * (wd + 1));
        for i in 0..h {
            for j in 0..wd {
                canvas[(r0 + i) * gw + c0 + j] = img.data()[i * wd + j];
            }
        }
    }
    write_pgm_raw(&canvas, gh, gw, w)
}

fn write_pgm_raw<W: Write>(data: &[f64], h: usize, w: usize, mut out: W) -> Result<()> {
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(data.len() + 32);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    bytes.extend(data.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn nft_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_nft_bytes();
        assert_eq!(&b[..8], b"NFTENSOR");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..28], &1.0f64.to_le_bytes());
        assert_eq!(&b[28..36], &(-2.5f64).to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut b = Tensor::zeros(&[2]).to_nft_bytes();
        b[0] = b'X';
        assert!(Tensor::read_nft(&b[..]).is_err());
    }

    #[test]
    fn pgm_maps_min_max() {
        let t = Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let mut out = Vec::new();
        write_pgm(&t, &mut out).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&out[..header.len()], header);
        assert_eq!(&out[header.len()..], &[0, 128, 255]);
    }

    #[test]
    fn pgm_grid_dimensions() {
        let imgs = vec![Tensor::zeros(&[1, 4, 4]); 5];
        let mut out = Vec::new();
        write_pgm_grid(&imgs, 3, &mut out).unwrap();
        // 2 rows x 3 cols of 4x4 with 1px gutters: 9 x 14.
        assert!(out.starts_with(b"P5\n14 9\n255\n"));
    }

    proptest! {
        #[test]
        fn nft_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let t = Tensor::randn(&dims, &mut RngStream::new(seed, 0));
            let back = Tensor::read_nft(&t.to_nft_bytes()[..]).unwrap();
            prop_assert!(t.bitwise_eq(&back));
        }
    }
}
