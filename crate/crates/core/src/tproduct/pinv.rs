use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{Tensor3, Tensor3F};

/// Default relative singular-value cutoff for [`tpinv`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Per-frequency rank information gathered while inverting.
#[derive(Clone, Debug, PartialEq)]
pub struct PinvReport {
    /// Numerical rank of each frequency slice (indexed by DFT frequency).
    pub ranks: Vec<usize>,
    /// `min(rows, cols)`: the rank a non-deficient slice would have.
    pub full_rank: usize,
    /// Absolute singular-value threshold that was applied.
    pub cutoff: f64,
}

impl PinvReport {
    pub fn is_rank_deficient(&self) -> bool {
        self.ranks.iter().any(|&r| r < self.full_rank)
    }
}

struct SliceSvd {
    u: DMatrix<Complex64>,
    v_t: DMatrix<Complex64>,
    sigma: Vec<f64>,
}

impl SliceSvd {
    fn new(m: &DMatrix<Complex64>) -> SliceSvd {
        if m.is_empty() {
            return SliceSvd {
                u: DMatrix::zeros(m.nrows(), 0),
                v_t: DMatrix::zeros(0, m.ncols()),
                sigma: Vec::new(),
            };
        }
        let svd = m.clone().svd(true, true);
        SliceSvd {
            u: svd.u.expect("u requested"),
            v_t: svd.v_t.expect("v_t requested"),
            sigma: svd.singular_values.iter().copied().collect(),
        }
    }

    fn max_sigma(&self) -> f64 {
        self.sigma.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// `V Σ⁺ Uᴴ` keeping singular values strictly above `cutoff`.
    fn pinv(&self, rows: usize, cols: usize, cutoff: f64) -> (DMatrix<Complex64>, usize) {
        let mut out = DMatrix::<Complex64>::zeros(cols, rows);
        let mut rank = 0;
        for (k, &sigma) in self.sigma.iter().enumerate() {
            if sigma <= cutoff || sigma == 0.0 {
                continue;
            }
            rank += 1;
            let v_col = self.v_t.row(k).adjoint();
            let u_row = self.u.column(k).adjoint();
            out += (v_col * u_row) * Complex64::new(1.0 / sigma, 0.0);
        }
        (out, rank)
    }
}

/// Moore-Penrose pseudoinverse under the t-product, with the rank report.
///
/// Each Fourier slice is inverted through its SVD; singular values at or
/// below `rank_tol × σ_max` (σ_max taken over all slices) are treated as zero.
/// Only frequencies `0..=tubes/2` are inverted explicitly, the rest are filled
/// in by conjugate symmetry so the inverse transform is exactly real.
pub fn tpinv_report(t: &Tensor3, rank_tol: f64) -> (Tensor3, PinvReport) {
    let (rows, cols, n) = t.shape();
    let f = Tensor3F::forward(t);
    let svds: Vec<SliceSvd> = f.slices()[..=n / 2].iter().map(SliceSvd::new).collect();
    let sigma_max = svds.iter().map(SliceSvd::max_sigma).fold(0.0, f64::max);
    let cutoff = rank_tol.max(0.0) * sigma_max;
    let mut slices: Vec<DMatrix<Complex64>> = vec![DMatrix::zeros(cols, rows); n];
    let mut ranks = vec![0; n];
    for (k, svd) in svds.iter().enumerate() {
        let (p, r) = svd.pinv(rows, cols, cutoff);
        ranks[k] = r;
        let mirror = (n - k) % n;
        if mirror != k {
            slices[mirror] = p.map(|z| z.conj());
            ranks[mirror] = r;
        }
        slices[k] = p;
    }
    let report = PinvReport {
        ranks,
        full_rank: rows.min(cols),
        cutoff,
    };
    if report.is_rank_deficient() && t.max_abs() > 0.0 {
        log::warn!(
            "pseudoinverse of {rows}x{cols}x{n} tensor: rank-deficient frequency slices {:?} (full rank {})",
            report.ranks,
            report.full_rank
        );
    }
    let out = Tensor3F::from_slices(slices)
        .and_then(|f| f.inverse())
        .expect("pseudoinverse of a finite tensor is finite");
    (out, report)
}

/// Moore-Penrose pseudoinverse under the t-product.
pub fn tpinv(t: &Tensor3, rank_tol: f64) -> Tensor3 {
    tpinv_report(t, rank_tol).0
}
