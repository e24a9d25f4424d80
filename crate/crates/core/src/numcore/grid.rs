use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `(height, width, channels)` feature map in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![T::zero(); height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![value; height * width * channels],
        }
    }

    /// Wraps `values`, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Config(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite grid value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.values[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        let i = self.index(row, col, ch);
        self.values[i] = v;
    }

    /// Channel vector of one cell.
    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let s = (row * self.width + col) * self.channels;
        &self.values[s..s + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let s = (row * self.width + col) * self.channels;
        &mut self.values[s..s + self.channels]
    }

    /// Channel vector of the `i`-th cell in row-major order.
    #[inline]
    pub fn cell_flat(&self, i: usize) -> &[T] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn cell_flat_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Config(format!(
                "cannot add grid {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Stacks equal-width vectors as a `(n, 1, width)` grid, one row per vector.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Config("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), 1, width, values)
    }
}

/// 2x nearest-neighbour upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    let (h, w, c) = x.shape();
    let mut out = Grid::zeros(h * 2, w * 2, c);
    for r in 0..h * 2 {
        for col in 0..w * 2 {
            out.cell_mut(r, col).copy_from_slice(x.cell(r / 2, col / 2));
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`]: sums each 2x2 block.
pub fn upsample_nearest2_backward<T: Scalar>(dy: &Grid<T>) -> Result<Grid<T>> {
    let (h, w, c) = dy.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("upsample gradient has odd dims {h}x{w}")));
    }
    let mut dx = Grid::zeros(h / 2, w / 2, c);
    for r in 0..h {
        for col in 0..w {
            let src = dy.cell(r, col);
            let dst = dx.cell_mut(r / 2, col / 2);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }
    Ok(dx)
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Grid<T>) -> Result<Grid<T>> {
    let (h, w, c) = x.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("cannot 2x-pool a {h}x{w} grid")));
    }
    let quarter = T::lit(0.25);
    let mut out = Grid::zeros(h / 2, w / 2, c);
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for ch in 0..c {
                let s = x.get(2 * r, 2 * col, ch)
                    + x.get(2 * r, 2 * col + 1, ch)
                    + x.get(2 * r + 1, 2 * col, ch)
                    + x.get(2 * r + 1, 2 * col + 1, ch);
                out.set(r, col, ch, s * quarter);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool2`].
pub fn avg_pool2_backward<T: Scalar>(dy: &Grid<T>) -> Grid<T> {
    let (h, w, c) = dy.shape();
    let quarter = T::lit(0.25);
    let mut dx = Grid::zeros(h * 2, w * 2, c);
    for r in 0..h * 2 {
        for col in 0..w * 2 {
            let src = dy.cell(r / 2, col / 2);
            for (d, s) in dx.cell_mut(r, col).iter_mut().zip(src) {
                *d = *s * quarter;
            }
        }
    }
    dx
}
