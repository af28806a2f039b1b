use std::cell::RefCell;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::Tensor3;
use crate::error::{FuseError, Result};

/// A tensor transformed by a DFT along the tube axis: one complex
/// `rows × cols` matrix per frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3F {
    rows: usize,
    cols: usize,
    slices: Vec<DMatrix<Complex64>>,
}

/// Applies an in-place DFT of length `n` to every tube of a
/// `rows × cols × n` complex buffer laid out tube-major.
fn transform_tubes(buf: &mut [Complex64], per_slice: usize, n: usize, inverse: bool) {
    thread_local! {
        static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    }
    let fft = PLANNER.with_borrow_mut(|planner| {
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    });
    let mut tube = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for e in 0..per_slice {
        for (k, v) in tube.iter_mut().enumerate() {
            *v = buf[k * per_slice + e];
        }
        fft.process_with_scratch(&mut tube, &mut scratch);
        for (k, v) in tube.iter().enumerate() {
            buf[k * per_slice + e] = *v;
        }
    }
}

impl Tensor3F {
    pub fn forward(t: &Tensor3) -> Tensor3F {
        let (rows, cols, n) = t.shape();
        let per = rows * cols;
        let mut buf: Vec<Complex64> = t.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        if n > 1 {
            transform_tubes(&mut buf, per, n, false);
        }
        let slices = (0..n)
            .map(|k| DMatrix::from_row_slice(rows, cols, &buf[k * per..(k + 1) * per]))
            .collect();
        Tensor3F { rows, cols, slices }
    }

    pub fn from_slices(slices: Vec<DMatrix<Complex64>>) -> Result<Tensor3F> {
        let (rows, cols) = slices
            .first()
            .map(|s| s.shape())
            .ok_or_else(|| FuseError::dim("no frequency slices"))?;
        if slices.iter().any(|s| s.shape() != (rows, cols)) {
            return Err(FuseError::dim("frequency slices differ in shape"));
        }
        Ok(Tensor3F { rows, cols, slices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tubes(&self) -> usize {
        self.slices.len()
    }

    pub fn slices(&self) -> &[DMatrix<Complex64>] {
        &self.slices
    }

    /// Slice-wise product, the Fourier-domain form of the t-product.
    pub fn mul(&self, other: &Tensor3F) -> Result<Tensor3F> {
        if self.cols != other.rows || self.tubes() != other.tubes() {
            return Err(FuseError::dim(format!(
                "fourier product of {}x{}x{} and {}x{}x{}",
                self.rows,
                self.cols,
                self.tubes(),
                other.rows,
                other.cols,
                other.tubes()
            )));
        }
        let slices = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor3F {
            rows: self.rows,
            cols: other.cols,
            slices,
        })
    }

    /// Largest imaginary magnitude left after the inverse transform; near zero
    /// exactly when the slices are conjugate-symmetric.
    pub fn inverse_imag_residual(&self) -> f64 {
        self.inverse_raw()
            .iter()
            .fold(0.0, |m, z| m.max(z.im.abs()))
    }

    fn inverse_raw(&self) -> Vec<Complex64> {
        let n = self.tubes();
        let per = self.rows * self.cols;
        let mut buf = Vec::with_capacity(per * n);
        for s in &self.slices {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    buf.push(s[(r, c)]);
                }
            }
        }
        if n > 1 {
            transform_tubes(&mut buf, per, n, true);
            let scale = 1.0 / n as f64;
            buf.iter_mut().for_each(|z| *z *= scale);
        }
        buf
    }

    /// Inverse DFT back to a real tensor (imaginary residue is discarded).
    pub fn inverse(&self) -> Result<Tensor3> {
        let buf = self.inverse_raw();
        Tensor3::new(
            self.rows,
            self.cols,
            self.tubes(),
            buf.iter().map(|z| z.re).collect(),
        )
    }
}
