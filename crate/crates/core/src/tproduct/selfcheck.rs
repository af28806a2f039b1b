//! Randomized checks of the t-product identities, used by `fuse algebra`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    circ, fold, tpinv, tprod, tprod_circulant, tprod_general, ttranspose, unfold, Tensor3,
    DEFAULT_RANK_TOL,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, tubes: usize) -> Tensor3 {
    Tensor3::from_fn(rows, cols, tubes, |_, _, _| rng.random_range(-1.0..1.0))
        .expect("finite entries")
}

fn mat_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (a - b).amax()
}

/// Runs every identity once on tensors drawn from `seed`.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..5usize);
    let (m, k, l, n, p) = (
        dim(&mut rng),
        dim(&mut rng),
        dim(&mut rng),
        dim(&mut rng),
        dim(&mut rng) + 1,
    );
    let a = random(&mut rng, m, k, p);
    let b = random(&mut rng, k, l, p);
    let b2 = random(&mut rng, k, l, p);
    let c = random(&mut rng, l, n, p);
    let mut out = Vec::new();
    let mut push = |name, error, tolerance| {
        out.push(Check {
            name,
            seed,
            error,
            tolerance,
        })
    };

    let folded = fold(&unfold(&a), p).expect("fold of an unfold");
    push("fold_unfold_identity", folded.max_abs_diff(&a), 0.0);

    let ab = tprod(&a, &b).expect("conforming");
    push(
        "fourier_matches_circulant",
        ab.max_abs_diff(&tprod_circulant(&a, &b).expect("conforming")),
        1e-10,
    );
    let lhs = tprod(&ab, &c).expect("conforming");
    let rhs = tprod(&a, &tprod(&b, &c).expect("conforming")).expect("conforming");
    push("associativity", lhs.max_abs_diff(&rhs), 1e-10);
    let lhs = tprod(&a, &b.add(&b2).expect("same shape")).expect("conforming");
    let rhs = ab
        .add(&tprod(&a, &b2).expect("conforming"))
        .expect("same shape");
    push("distributivity", lhs.max_abs_diff(&rhs), 1e-10);

    let g =
        tprod_general(&random(&mut rng, m, k, 2), &random(&mut rng, k, n, 4)).expect("conforming");
    push(
        "general_shape_2_by_4",
        if g.shape() == (m, n, 4) {
            0.0
        } else {
            f64::INFINITY
        },
        0.0,
    );
    push(
        "general_reduces_on_equal_tubes",
        tprod_general(&a, &b).expect("conforming").max_abs_diff(&ab),
        1e-12,
    );

    push(
        "transpose_involution",
        ttranspose(&ttranspose(&a)).max_abs_diff(&a),
        0.0,
    );
    push(
        "transpose_matches_circulant",
        mat_diff(&circ(&ttranspose(&a)), &circ(&a).transpose()),
        1e-12,
    );

    let x = tpinv(&a, DEFAULT_RANK_TOL);
    let ax = tprod(&a, &x).expect("conforming");
    let xa = tprod(&x, &a).expect("conforming");
    push(
        "penrose_axa",
        tprod(&ax, &a).expect("conforming").max_abs_diff(&a),
        1e-8,
    );
    push(
        "penrose_xax",
        tprod(&xa, &x).expect("conforming").max_abs_diff(&x) / (1.0 + x.max_abs()),
        1e-8,
    );
    push(
        "penrose_ax_symmetric",
        ttranspose(&ax).max_abs_diff(&ax),
        1e-8,
    );
    push(
        "penrose_xa_symmetric",
        ttranspose(&xa).max_abs_diff(&xa),
        1e-8,
    );

    // A wide single-tube matrix: the pseudoinverse is Vᵀ(VVᵀ)⁻¹.
    let v = random(&mut rng, m, m + k + 2, 1).slice(0);
    let closed = (&v * v.transpose())
        .try_inverse()
        .map(|inv| v.transpose() * inv);
    let err = match closed {
        Some(closed) => mat_diff(
            &tpinv(&Tensor3::from_matrix(&v).expect("finite"), DEFAULT_RANK_TOL).slice(0),
            &closed,
        ),
        None => f64::INFINITY,
    };
    push("pinv_full_row_rank_closed_form", err, 1e-8);
    out
}

/// [`run`] over several seeds.
pub fn run_seeds(seeds: impl IntoIterator<Item = u64>) -> Vec<Check> {
    seeds.into_iter().flat_map(run).collect()
}
