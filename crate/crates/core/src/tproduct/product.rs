use nalgebra::DMatrix;

use super::{Tensor3, Tensor3F};
use crate::error::{FuseError, Result};

/// Block-circulant expansion of `t`: a `(rows·tubes) × (cols·tubes)` matrix
/// whose block `(p, q)` is tube slice `(p − q) mod tubes`.
pub fn circ(t: &Tensor3) -> DMatrix<f64> {
    let (m, n, p) = t.shape();
    let mut out = DMatrix::zeros(m * p, n * p);
    for bp in 0..p {
        for bq in 0..p {
            let s = (bp + p - bq) % p;
            for r in 0..m {
                for c in 0..n {
                    out[(bp * m + r, bq * n + c)] = t.get(r, c, s);
                }
            }
        }
    }
    out
}

/// Stacks the tube slices vertically: `(rows·tubes) × cols`.
pub fn unfold(t: &Tensor3) -> DMatrix<f64> {
    // Tube-major storage is exactly a row-major (rows·tubes) × cols matrix.
    DMatrix::from_row_slice(t.rows() * t.tubes(), t.cols(), t.data())
}

/// Inverse of [`unfold`]: splits a `(rows·tubes) × cols` matrix into `tubes` slices.
pub fn fold(stacked: &DMatrix<f64>, tubes: usize) -> Result<Tensor3> {
    if tubes == 0 || !stacked.nrows().is_multiple_of(tubes) {
        return Err(FuseError::dim(format!(
            "cannot fold {} rows into {tubes} tubes",
            stacked.nrows()
        )));
    }
    let rows = stacked.nrows() / tubes;
    let cols = stacked.ncols();
    Tensor3::from_fn(rows, cols, tubes, |r, c, t| stacked[(t * rows + r, c)])
}

fn check_inner(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(FuseError::dim(format!(
            "t-product inner dims differ: {:?} * {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_equal_tubes(a: &Tensor3, b: &Tensor3) -> Result<()> {
    check_inner(a, b)?;
    if a.tubes() != b.tubes() {
        return Err(FuseError::dim(format!(
            "t-product needs equal tube counts: {:?} * {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// The t-product by its definition, `fold(circ(a) · unfold(b))`.
///
/// Quadratic in the tube count; kept as the reference against which the
/// Fourier path is checked.
pub fn tprod_circulant(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_equal_tubes(a, b)?;
    fold(&(circ(a) * unfold(b)), a.tubes())
}

/// The t-product `a * b`, computed slice-wise in the Fourier domain.
pub fn tprod(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_equal_tubes(a, b)?;
    if a.tubes() == 1 {
        return Tensor3::from_matrix(&(a.slice(0) * b.slice(0)));
    }
    let fa = Tensor3F::forward(a);
    let fb = Tensor3F::forward(b);
    fa.mul(&fb)?.inverse()
}

/// Generalized t-product for mismatched tube lengths.
///
/// The shorter operand's tube sequence slides across the longer one with
/// circular padding. This equals zero-extending the shorter operand to the
/// longer tube length and taking the ordinary t-product, so the result has
/// `max(a.tubes, b.tubes)` tubes and reduces to [`tprod`] when they agree.
pub fn tprod_general(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_inner(a, b)?;
    let n = a.tubes().max(b.tubes());
    match (a.tubes() == n, b.tubes() == n) {
        (true, true) => tprod(a, b),
        (true, false) => tprod(a, &b.resize_tubes(n)),
        (false, _) => tprod(&a.resize_tubes(n), b),
    }
}

/// t-transpose: transpose every slice and reverse the order of slices `1..tubes`.
pub fn ttranspose(t: &Tensor3) -> Tensor3 {
    let (m, n, p) = t.shape();
    Tensor3::from_fn(n, m, p, |r, c, k| t.get(c, r, (p - k) % p))
        .expect("transposition preserves finiteness")
}
