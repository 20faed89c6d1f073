//! `H x W x C` grids: images, latents, noise draws and error maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A real-valued `H x W x C` grid stored row-major with channels innermost.
///
/// The shape is fixed at construction and all values are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    shape: GridShape,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(shape_err!("grid dimensions must be positive, got {:?}", shape));
        }
        if values.len() != shape.len() {
            return Err(shape_err!(
                "{}x{}x{} grid needs {} values, got {}",
                shape.height,
                shape.width,
                shape.channels,
                shape.len(),
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(alloc::format!("grid value {} is {}", i, values[i])));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.shape.width + x) * self.shape.channels + c]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        Self {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_raw(shape: GridShape, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        Self { shape, values }
    }

    pub(crate) fn check_same(&self, other: &LatentGrid) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }
}

/// Packs grids of one shape into a `[C, N, H, W]` tensor.
pub fn grids_to_cnhw(grids: &[&LatentGrid]) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| shape_err!("cannot batch zero grids"))?
        .shape;
    let (h, w, c) = (first.height, first.width, first.channels);
    let n = grids.len();
    let mut out = vec![0.0; c * n * h * w];
    for (ni, g) in grids.iter().enumerate() {
        if g.shape != first {
            return Err(shape_err!("batch mixes {:?} and {:?}", first, g.shape));
        }
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * c;
                for ci in 0..c {
                    out[((ci * n + ni) * h + y) * w + x] = g.values[src + ci];
                }
            }
        }
    }
    Tensor::from_vec(&[c, n, h, w], out)
}

/// Unpacks a `[C, N, H, W]` tensor into `N` grids.
pub fn cnhw_to_grids(t: &Tensor) -> Vec<LatentGrid> {
    let (c, n, h, w) = t.dims4();
    let data = t.data();
    let shape = GridShape::new(h, w, c);
    (0..n)
        .map(|ni| {
            let mut values = vec![0.0; h * w * c];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        values[(y * w + x) * c + ci] = data[((ci * n + ni) * h + y) * w + x];
                    }
                }
            }
            LatentGrid::from_raw(shape, values)
        })
        .collect()
}
