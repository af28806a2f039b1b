//! Order-3 tensor algebra under the t-product.
//!
//! A [`Tensor3`] is a stack of `tubes` real matrices of shape `rows × cols`.
//! The first two axes are always the matrix-multiply axes; the third axis
//! (the "tube" axis) carries token position inside a word. Products between
//! tensors are block-circulant along the tube axis, which is the same thing
//! as a slice-wise matrix product after a DFT along the tubes. Both forms are
//! implemented: [`tprod_circulant`] is the literal definition and [`tprod`]
//! is the Fourier fast path.

mod fourier;
pub(crate) mod io;
mod pinv;
mod product;
pub mod selfcheck;

use nalgebra::DMatrix;

use crate::error::{FuseError, Result};

pub use fourier::Tensor3F;
pub use io::{TENSOR_MAGIC, TENSOR_VERSION};
pub use pinv::{tpinv, tpinv_report, PinvReport, DEFAULT_RANK_TOL};
pub use product::{circ, fold, tprod, tprod_circulant, tprod_general, ttranspose, unfold};

/// Dense real order-3 tensor, `rows × cols × tubes`.
///
/// Storage is tube-major, then row-major: entry `(r, c, t)` lives at
/// `t * rows * cols + r * cols + c`. This is also the on-disk order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    tubes: usize,
}

impl Tensor3 {
    pub fn new(rows: usize, cols: usize, tubes: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(tubes))
            .ok_or_else(|| FuseError::dim("tensor size overflows usize"))?;
        if data.len() != expected {
            return Err(FuseError::dim(format!(
                "{rows}x{cols}x{tubes} tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FuseError::NonFinite { index });
        }
        Ok(Tensor3 {
            data,
            rows,
            cols,
            tubes,
        })
    }

    pub fn zeros(rows: usize, cols: usize, tubes: usize) -> Self {
        Tensor3 {
            data: vec![0.0; rows * cols * tubes],
            rows,
            cols,
            tubes,
        }
    }

    /// Identity under the t-product: the identity matrix in tube 0, zeros elsewhere.
    pub fn identity(n: usize, tubes: usize) -> Self {
        let mut t = Tensor3::zeros(n, n, tubes.max(1));
        for i in 0..n {
            t.set(i, i, 0, 1.0);
        }
        t
    }

    /// Builds a tensor whose tube slice `t` is `slices[t]`.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| FuseError::dim("cannot build a tensor from zero slices"))?;
        let (rows, cols) = first.shape();
        let mut data = Vec::with_capacity(rows * cols * slices.len());
        for (t, s) in slices.iter().enumerate() {
            if s.shape() != (rows, cols) {
                return Err(FuseError::dim(format!(
                    "slice {t} is {}x{}, expected {rows}x{cols}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            for r in 0..rows {
                for c in 0..cols {
                    data.push(s[(r, c)]);
                }
            }
        }
        Tensor3::new(rows, cols, slices.len(), data)
    }

    /// Wraps a matrix as a single-tube tensor.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        Tensor3::from_slices(std::slice::from_ref(m))
    }

    /// Builds a tensor from a generator called as `f(row, col, tube)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        tubes: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols * tubes);
        for t in 0..tubes {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(r, c, t));
                }
            }
        }
        Tensor3::new(rows, cols, tubes, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn tubes(&self) -> usize {
        self.tubes
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.tubes)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, r: usize, c: usize, t: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols && t < self.tubes);
        t * self.rows * self.cols + r * self.cols + c
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, t: usize) -> f64 {
        self.data[self.offset(r, c, t)]
    }

    /// Crate-internal mutation; public values stay immutable after construction.
    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, t: usize, v: f64) {
        let o = self.offset(r, c, t);
        self.data[o] = v;
    }

    /// Tube slice `t` as a `rows × cols` matrix.
    pub fn slice(&self, t: usize) -> DMatrix<f64> {
        let start = t * self.rows * self.cols;
        DMatrix::from_row_slice(
            self.rows,
            self.cols,
            &self.data[start..start + self.rows * self.cols],
        )
    }

    pub fn slices(&self) -> Vec<DMatrix<f64>> {
        (0..self.tubes).map(|t| self.slice(t)).collect()
    }

    /// Zero-pads or truncates the tube axis to `tubes` slices.
    pub fn resize_tubes(&self, tubes: usize) -> Tensor3 {
        let per = self.rows * self.cols;
        let mut data = vec![0.0; per * tubes];
        let keep = tubes.min(self.tubes) * per;
        data[..keep].copy_from_slice(&self.data[..keep]);
        Tensor3 {
            data,
            rows: self.rows,
            cols: self.cols,
            tubes,
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor3 {
        self.with_data(self.data.iter().map(|v| v * alpha).collect())
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(FuseError::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        ))
    }

    fn with_data(&self, data: Vec<f64>) -> Tensor3 {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor3 {
            data,
            rows: self.rows,
            cols: self.cols,
            tubes: self.tubes,
        }
    }

    /// Largest absolute entrywise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(matches!(
            Tensor3::new(2, 2, 2, vec![0.0; 7]),
            Err(FuseError::Dimension(_))
        ));
        let mut v = vec![0.0; 8];
        v[5] = f64::NAN;
        assert!(matches!(
            Tensor3::new(2, 2, 2, v),
            Err(FuseError::NonFinite { index: 5 })
        ));
        assert!(Tensor3::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn layout_is_tube_major_then_row_major() {
        let t = Tensor3::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(0, 0, 0), 0.0);
        assert_eq!(t.get(0, 2, 0), 2.0);
        assert_eq!(t.get(1, 0, 0), 3.0);
        assert_eq!(t.get(0, 0, 1), 6.0);
        assert_eq!(t.slice(1)[(1, 2)], 11.0);
        assert_eq!(Tensor3::from_slices(&t.slices()).unwrap(), t);
    }

    #[test]
    fn resize_pads_and_truncates() {
        let t = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let padded = t.resize_tubes(3);
        assert_eq!(padded.data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!(t.resize_tubes(1).data(), &[1.0, 2.0]);
        assert_eq!(padded.resize_tubes(2), t);
    }
}
