//! Procedural 16x16 shape images in `[-1, 1]`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::par::{self, Strategy};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "cross", "stripes"];

const FG: f64 = 1.0;
const BG: f64 = -1.0;

/// `n` images, image `i` has class `i % 4` and is drawn from its own stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    seed: u64,
    images: Array2<f64>,
    classes: Vec<usize>,
}

impl ShapesDataset {
    pub fn generate(n: usize, seed: u64, strategy: Strategy) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("shapes dataset".into()));
        }
        let rows = par::map_indexed(n, strategy, |i| {
            let class = i % CLASS_NAMES.len();
            render(class, &mut RngStream::derive(seed, "shapes", i as u64))
        });
        let mut images = Array2::zeros((n, SIDE * SIDE));
        for (i, r) in rows.iter().enumerate() {
            images.row_mut(i).assign(&ndarray::ArrayView1::from(r.data()));
        }
        Ok(Self { seed, images, classes: (0..n).map(|i| i % CLASS_NAMES.len()).collect() })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        CLASS_NAMES.len()
    }

    /// `[n, 256]`
    pub fn rows(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_row(self.images.row(i), &[1, SIDE, SIDE])
    }

    /// Rows of class `class`, in dataset order.
    pub fn class_rows(&self, class: usize) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.classes[i] == class).collect();
        self.images.select(ndarray::Axis(0), &idx)
    }
}

/// One image of `class` with random placement and size.
pub fn render(class: usize, rng: &mut RngStream) -> Tensor {
    let cx = rng.uniform(5.0, 11.0);
    let cy = rng.uniform(5.0, 11.0);
    let inside: Box<dyn Fn(f64, f64) -> bool> = match class {
        0 => {
            let r = rng.uniform(2.5, 5.0);
            Box::new(move |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        }
        1 => {
            let h = rng.uniform(2.0, 4.5);
            Box::new(move |x, y| (x - cx).abs() <= h && (y - cy).abs() <= h)
        }
        2 => {
            let arm = rng.uniform(3.0, 6.0);
            let half = rng.uniform(0.8, 1.6);
            Box::new(move |x, y| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= half && dy <= arm) || (dy <= half && dx <= arm)
            })
        }
        _ => {
            let hw = rng.uniform(4.0, 6.5);
            let hh = rng.uniform(4.0, 6.5);
            let phase = rng.below(4) as f64;
            Box::new(move |x, y| {
                (x - cx).abs() <= hw && (y - cy).abs() <= hh && ((x - 0.5 + phase) / 2.0).floor() as i64 % 2 == 0
            })
        }
    };
    let mut data = vec![BG; SIDE * SIDE];
    for row in 0..SIDE {
        for col in 0..SIDE {
            if inside(col as f64 + 0.5, row as f64 + 0.5) {
                data[row * SIDE + col] = FG;
            }
        }
    }
    Tensor::new(vec![1, SIDE, SIDE], data).expect("fixed image shape")
}
