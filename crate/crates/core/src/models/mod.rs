//! Synthetic models: an embedding table plus differentiable loss heads with
//! analytic gradients, and a finite-difference oracle to check them.

mod bundle;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{FuseError, Result};
use crate::tokenization::TokenizerSpec;
use crate::vocab::{gaussian, stream_rng, Embedder, VocabMatrix};

pub use bundle::MANIFEST_EXTENSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    TargetQuadratic,
    BilinearSimilarity,
    LmXent,
    ClassXent,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::TargetQuadratic,
        HeadKind::BilinearSimilarity,
        HeadKind::LmXent,
        HeadKind::ClassXent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::TargetQuadratic => "target_quadratic",
            HeadKind::BilinearSimilarity => "bilinear_similarity",
            HeadKind::LmXent => "lm_xent",
            HeadKind::ClassXent => "class_xent",
        }
    }

    pub fn parse(s: &str) -> Option<HeadKind> {
        HeadKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// A differentiable map from an `s × d` embedding matrix to a scalar.
#[derive(Clone, Debug, PartialEq)]
pub enum LossHead {
    /// `Σ_n ‖e_n − t_n‖²`, rows missing on either side counted as zero.
    TargetQuadratic { target: DMatrix<f64> },
    /// `−mean_n cos(e_n W, a)` with `W: d × k`, `a: k`.
    BilinearSimilarity {
        anchor: DVector<f64>,
        w: DMatrix<f64>,
    },
    /// Mean cross-entropy of token `n+1` under the logits `e_n W`, `W: d × |V|`.
    LmXent { logits: DMatrix<f64> },
    /// Cross-entropy of `target` under the logits `mean_n(e_n) W`, `W: d × C`.
    ClassXent { w: DMatrix<f64>, target: usize },
}

fn log_softmax(z: &RowDVector<f64>) -> RowDVector<f64> {
    let max = z.max();
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

impl LossHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            LossHead::TargetQuadratic { .. } => HeadKind::TargetQuadratic,
            LossHead::BilinearSimilarity { .. } => HeadKind::BilinearSimilarity,
            LossHead::LmXent { .. } => HeadKind::LmXent,
            LossHead::ClassXent { .. } => HeadKind::ClassXent,
        }
    }

    /// Embedding dimension the head expects.
    pub fn dim(&self) -> usize {
        match self {
            LossHead::TargetQuadratic { target } => target.ncols(),
            LossHead::BilinearSimilarity { w, .. } => w.nrows(),
            LossHead::LmXent { logits } => logits.nrows(),
            LossHead::ClassXent { w, .. } => w.nrows(),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        let ok = match self {
            LossHead::TargetQuadratic { target } => finite(target),
            LossHead::BilinearSimilarity { anchor, w } => {
                if anchor.len() != w.ncols() {
                    return Err(FuseError::dim(format!(
                        "anchor has {} entries, bilinear matrix has {} columns",
                        anchor.len(),
                        w.ncols()
                    )));
                }
                finite(w) && anchor.iter().all(|v| v.is_finite()) && anchor.norm() > 0.0
            }
            LossHead::LmXent { logits } => finite(logits),
            LossHead::ClassXent { w, target } => {
                if *target >= w.ncols() {
                    return Err(FuseError::InvalidArgument(format!(
                        "target class {target} but only {} classes",
                        w.ncols()
                    )));
                }
                finite(w)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(FuseError::InvalidArgument(format!(
                "{} head parameters must be finite (and the anchor nonzero)",
                self.kind().as_str()
            )))
        }
    }

    fn check_input(&self, e: &DMatrix<f64>, ids: &[usize]) -> Result<()> {
        if e.ncols() != self.dim() {
            return Err(FuseError::dim(format!(
                "{} head expects {} columns, got {}",
                self.kind().as_str(),
                self.dim(),
                e.ncols()
            )));
        }
        if let LossHead::LmXent { logits } = self {
            if ids.len() != e.nrows() {
                return Err(FuseError::dim(format!(
                    "{} ids for {} embedding rows",
                    ids.len(),
                    e.nrows()
                )));
            }
            if let Some(id) = ids.iter().find(|&&id| id >= logits.ncols()) {
                return Err(FuseError::InvalidArgument(format!(
                    "token id {id} outside the {} logits",
                    logits.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Loss of the embedding rows `e` of the tokens `ids`. Only the language
    /// model head reads `ids`.
    pub fn loss(&self, e: &DMatrix<f64>, ids: &[usize]) -> Result<f64> {
        self.check_input(e, ids)?;
        let s = e.nrows();
        Ok(match self {
            LossHead::TargetQuadratic { target } => {
                let overlap = s.min(target.nrows());
                let diff = e.rows(0, overlap) - target.rows(0, overlap);
                diff.norm_squared()
                    + e.rows(overlap, s - overlap).norm_squared()
                    + target
                        .rows(overlap, target.nrows() - overlap)
                        .norm_squared()
            }
            LossHead::BilinearSimilarity { anchor, w } => {
                if s == 0 {
                    return Ok(0.0);
                }
                let a_norm = anchor.norm();
                let u = e * w;
                let total: f64 = u
                    .row_iter()
                    .map(|u| {
                        let n = u.norm();
                        if n > 0.0 {
                            u.dot(&anchor.transpose()) / (n * a_norm)
                        } else {
                            0.0
                        }
                    })
                    .sum();
                -total / s as f64
            }
            LossHead::LmXent { logits } => {
                if s < 2 {
                    return Ok(0.0);
                }
                let z = e.rows(0, s - 1) * logits;
                let total: f64 = z
                    .row_iter()
                    .zip(&ids[1..])
                    .map(|(z, &next)| -log_softmax(&z.into_owned())[next])
                    .sum();
                total / (s - 1) as f64
            }
            LossHead::ClassXent { w, target } => {
                if s == 0 {
                    return Ok(0.0);
                }
                let pooled = e.row_mean();
                -log_softmax(&(pooled * w))[*target]
            }
        })
    }

    /// Exact gradient of [`LossHead::loss`] with respect to `e`.
    pub fn grad(&self, e: &DMatrix<f64>, ids: &[usize]) -> Result<DMatrix<f64>> {
        self.check_input(e, ids)?;
        let (s, d) = e.shape();
        let mut g = DMatrix::zeros(s, d);
        match self {
            LossHead::TargetQuadratic { target } => {
                for r in 0..s {
                    let mut row = e.row(r) * 2.0;
                    if r < target.nrows() {
                        row -= target.row(r) * 2.0;
                    }
                    g.set_row(r, &row);
                }
            }
            LossHead::BilinearSimilarity { anchor, w } => {
                let a_norm = anchor.norm();
                let a = anchor.transpose();
                for r in 0..s {
                    let u = e.row(r) * w;
                    let n = u.norm();
                    if n == 0.0 {
                        continue;
                    }
                    let c = u.dot(&a) / (n * a_norm);
                    let du = &a / (n * a_norm) - &u * (c / (n * n));
                    g.set_row(r, &(du * w.transpose() * (-1.0 / s as f64)));
                }
            }
            LossHead::LmXent { logits } => {
                if s < 2 {
                    return Ok(g);
                }
                for r in 0..s - 1 {
                    let z = e.row(r) * logits;
                    let mut p = log_softmax(&z).map(f64::exp);
                    p[ids[r + 1]] -= 1.0;
                    g.set_row(r, &(p * logits.transpose() / (s - 1) as f64));
                }
            }
            LossHead::ClassXent { w, target } => {
                if s == 0 {
                    return Ok(g);
                }
                let mut p = log_softmax(&(e.row_mean() * w)).map(f64::exp);
                p[*target] -= 1.0;
                let row = p * w.transpose() / s as f64;
                for r in 0..s {
                    g.set_row(r, &row);
                }
            }
        }
        Ok(g)
    }

    /// Next-token log-probabilities given the previous token's embedding row.
    /// `None` for heads that are not language models.
    pub fn next_token_logprobs(&self, prev: &RowDVector<f64>) -> Option<RowDVector<f64>> {
        match self {
            LossHead::LmXent { logits } => Some(log_softmax(&(prev * logits))),
            _ => None,
        }
    }
}

/// Seeded random heads of every kind for a model of dimension `d`.
pub struct HeadFactory {
    rng: ChaCha8Rng,
    d: usize,
}

impl HeadFactory {
    pub fn new(d: usize, seed: u64) -> Self {
        HeadFactory {
            rng: stream_rng(seed, 0x4845_4144),
            d,
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
        let mut draw = gaussian(&mut self.rng, std);
        let data: Vec<f64> = (0..rows * cols).map(|_| draw()).collect();
        DMatrix::from_row_slice(rows, cols, &data)
    }

    pub fn bilinear(&mut self, k: usize) -> LossHead {
        let w = self.matrix(self.d, k, 1.0 / (self.d as f64).sqrt());
        let anchor = DVector::from_column_slice(self.matrix(k, 1, 1.0).as_slice());
        LossHead::BilinearSimilarity { anchor, w }
    }

    /// Logits scaled so that typical rows give moderately peaked softmaxes.
    pub fn lm(&mut self, vocab_size: usize) -> LossHead {
        LossHead::LmXent {
            logits: self.matrix(self.d, vocab_size, 2.0),
        }
    }

    pub fn class(&mut self, classes: usize, target: usize) -> LossHead {
        LossHead::ClassXent {
            w: self.matrix(self.d, classes, 2.0),
            target,
        }
    }

    pub fn quadratic(&mut self, rows: usize) -> LossHead {
        LossHead::TargetQuadratic {
            target: self.matrix(rows, self.d, 1.0 / (self.d as f64).sqrt()),
        }
    }

    pub fn of_kind(&mut self, kind: HeadKind, vocab_size: usize) -> LossHead {
        match kind {
            HeadKind::TargetQuadratic => self.quadratic(4),
            HeadKind::BilinearSimilarity => self.bilinear(8),
            HeadKind::LmXent => self.lm(vocab_size),
            HeadKind::ClassXent => self.class(3, 1),
        }
    }
}

/// A tokenizer, its embedding table, and the losses defined on its embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel {
    pub tokenizer: TokenizerSpec,
    pub vocab: VocabMatrix,
    pub heads: Vec<LossHead>,
}

impl SyntheticModel {
    pub fn new(tokenizer: TokenizerSpec, vocab: VocabMatrix, heads: Vec<LossHead>) -> Result<Self> {
        Embedder::new(&tokenizer, &vocab)?;
        for h in &heads {
            h.validate()?;
            if h.dim() != vocab.dim() {
                return Err(FuseError::dim(format!(
                    "{} head expects dimension {}, model {:?} has {}",
                    h.kind().as_str(),
                    h.dim(),
                    vocab.model_id,
                    vocab.dim()
                )));
            }
            if let LossHead::LmXent { logits } = h {
                if logits.ncols() != tokenizer.vocab_size() {
                    return Err(FuseError::dim(format!(
                        "lm head has {} logits for a vocab of {}",
                        logits.ncols(),
                        tokenizer.vocab_size()
                    )));
                }
            }
        }
        Ok(SyntheticModel {
            tokenizer,
            vocab,
            heads,
        })
    }

    pub fn id(&self) -> &str {
        &self.vocab.model_id
    }

    pub fn dim(&self) -> usize {
        self.vocab.dim()
    }

    pub fn embedder(&self) -> Embedder<'_> {
        Embedder {
            tokenizer: &self.tokenizer,
            vocab: &self.vocab,
        }
    }

    /// The first language-model head, if any.
    pub fn lm_head(&self) -> Option<&LossHead> {
        self.heads.iter().find(|h| h.kind() == HeadKind::LmXent)
    }
}

/// Central differences `(f(e + h·δ) − f(e − h·δ)) / 2h` for every entry.
pub fn finite_diff_grad(
    f: impl Fn(&DMatrix<f64>) -> f64,
    e: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = e.clone();
    DMatrix::from_fn(e.nrows(), e.ncols(), |r, c| {
        let orig = x[(r, c)];
        x[(r, c)] = orig + h;
        let up = f(&x);
        x[(r, c)] = orig - h;
        let down = f(&x);
        x[(r, c)] = orig;
        (up - down) / (2.0 * h)
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_e(s: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 1);
        let mut draw = gaussian(&mut rng, 0.5);
        DMatrix::from_fn(s, d, |_, _| draw())
    }

    #[test]
    fn quadratic_minimum() {
        let e = random_e(3, 4, 0);
        let head = LossHead::TargetQuadratic { target: e.clone() };
        assert_eq!(head.loss(&e, &[]).unwrap(), 0.0);
        assert_eq!(head.grad(&e, &[]).unwrap().norm(), 0.0);
        // A shorter prompt pays for the target rows it lacks.
        let short = e.rows(0, 2).into_owned();
        assert!((head.loss(&short, &[]).unwrap() - e.row(2).norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn every_head_matches_finite_differences() {
        for seed in 0..10 {
            let (s, d, vocab) = (5, 6, 7);
            let mut f = HeadFactory::new(d, seed);
            let e = random_e(s, d, seed + 100);
            let ids: Vec<usize> = (0..s).map(|n| (n * 3 + seed as usize) % vocab).collect();
            for kind in HeadKind::ALL {
                let head = f.of_kind(kind, vocab);
                let analytic = head.grad(&e, &ids).unwrap();
                let numeric = finite_diff_grad(|x| head.loss(x, &ids).unwrap(), &e, 1e-5);
                let err = relative_error(&analytic, &numeric);
                assert!(err < 1e-6, "{} seed {seed}: {err}", kind.as_str());
            }
        }
    }

    #[test]
    fn bilinear_is_scale_invariant_in_the_anchor() {
        let mut f = HeadFactory::new(4, 3);
        let LossHead::BilinearSimilarity { anchor, w } = f.bilinear(5) else {
            unreachable!()
        };
        let e = random_e(3, 4, 9);
        let g = |a: DVector<f64>| {
            LossHead::BilinearSimilarity {
                anchor: a,
                w: w.clone(),
            }
            .grad(&e, &[])
            .unwrap()
        };
        let base = g(anchor.clone());
        assert!(relative_error(&g(&anchor * 2.5), &base) < 1e-12);
        assert!(relative_error(&g(&anchor * -2.5), &(-&base)) < 1e-12);
    }

    #[test]
    fn finite_differences_of_polynomials() {
        let e = random_e(2, 3, 5);
        let lin = finite_diff_grad(|x| 3.0 * x.sum(), &e, 1e-3);
        assert!(lin.iter().all(|v| (v - 3.0).abs() < 1e-9));
        let quad = finite_diff_grad(|x| x.norm_squared(), &e, 1e-4);
        assert!(relative_error(&quad, &(&e * 2.0)) < 1e-8);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let head = HeadFactory::new(4, 0).bilinear(3);
        assert!(head.loss(&random_e(2, 5, 0), &[]).is_err());
        let lm = HeadFactory::new(4, 0).lm(5);
        assert!(lm.loss(&random_e(2, 4, 0), &[0]).is_err());
        assert!(lm.loss(&random_e(2, 4, 0), &[0, 9]).is_err());
    }
}
