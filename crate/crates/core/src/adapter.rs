//! The adapter proper.
//!
//! The forward direction is exact: ids are rendered to text and retokenized by
//! the other model. Gradients travel backwards through a linear stand-in for
//! that round trip — the matrix `V_i⁺ V_j` when both models share a tokenizer,
//! or, word by word, the fitted tensor maps of an [`AdapterMap`].

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{FuseError, Result};
use crate::tokenization::{detokenize, tokenize, TokenSeq, WordSegmentation};
use crate::tproduct::{tpinv, Tensor3, DEFAULT_RANK_TOL};
use crate::vocab::{AdapterMap, Embedder, VocabMatrix};

/// Token embeddings `E = X V` of a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSeq {
    /// `s × d`
    pub e: DMatrix<f64>,
    pub tokens: TokenSeq,
    pub model_id: String,
}

impl EmbeddingSeq {
    pub fn from_tokens(model: &Embedder, tokens: TokenSeq) -> Result<Self> {
        Ok(EmbeddingSeq {
            e: model.vocab.embed(&tokens.ids)?,
            tokens,
            model_id: model.vocab.model_id.clone(),
        })
    }

    pub fn from_text(model: &Embedder, text: &str) -> Result<Self> {
        EmbeddingSeq::from_tokens(model, tokenize(model.tokenizer, text))
    }

    pub fn len(&self) -> usize {
        self.e.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.e.nrows() == 0
    }
}

/// Per-word tensors, item `m` shaped `1 × d × l_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTensorList {
    pub items: Vec<Tensor3>,
    pub dim: usize,
}

/// Regroups the rows of `e` into one tensor per word, tokens along the tube axis.
pub fn split(e: &DMatrix<f64>, seg: &WordSegmentation) -> Result<WordTensorList> {
    if seg.token_count() != e.nrows() {
        return Err(FuseError::dim(format!(
            "segmentation covers {} tokens but the matrix has {} rows",
            seg.token_count(),
            e.nrows()
        )));
    }
    let items = seg
        .spans
        .iter()
        .map(|&(start, len)| {
            Tensor3::from_fn(1, e.ncols(), len, |_, c, t| e[(start + t, c)])
                .expect("rows of a finite matrix")
        })
        .collect();
    Ok(WordTensorList {
        items,
        dim: e.ncols(),
    })
}

/// Inverse of [`split`]: concatenates the tube slices back into rows.
pub fn merge(w: &WordTensorList) -> DMatrix<f64> {
    let rows: usize = w.items.iter().map(Tensor3::tubes).sum();
    let mut out = DMatrix::zeros(rows, w.dim);
    let mut r = 0;
    for item in &w.items {
        for t in 0..item.tubes() {
            for c in 0..w.dim {
                out[(r, c)] = item.get(0, c, t);
            }
            r += 1;
        }
    }
    out
}

/// Moves an on-vocabulary sequence into another model: detokenize, retokenize,
/// embed. No approximation is involved.
pub fn forward(e: &EmbeddingSeq, src: &Embedder, dst: &Embedder) -> Result<EmbeddingSeq> {
    let text = detokenize(src.tokenizer, &e.tokens.ids)?;
    EmbeddingSeq::from_text(dst, &text)
}

/// The matrix `V_i⁺ V_j` relating two models that share a tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedMap {
    /// `d_i × d_j`
    pub m: DMatrix<f64>,
}

impl SharedMap {
    pub fn new(v_i: &VocabMatrix, v_j: &VocabMatrix) -> Result<Self> {
        if v_i.vocab_size() != v_j.vocab_size() {
            return Err(FuseError::dim(format!(
                "shared tokenizer expected, vocab sizes {} and {} differ",
                v_i.vocab_size(),
                v_j.vocab_size()
            )));
        }
        let pinv = tpinv(&v_i.to_tensor(), DEFAULT_RANK_TOL).slice(0);
        Ok(SharedMap { m: pinv * &v_j.v })
    }

    /// `E_i V_i⁺ V_j`, the linear stand-in for the forward round trip.
    pub fn apply(&self, e_i: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_cols(e_i, self.m.nrows(), "embedding")?;
        Ok(e_i * &self.m)
    }

    /// `∇_j (V_i⁺ V_j)ᵀ`
    pub fn backward(&self, grad_j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_cols(grad_j, self.m.ncols(), "gradient")?;
        Ok(grad_j * self.m.transpose())
    }
}

fn check_cols(m: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if m.ncols() != d {
        return Err(FuseError::dim(format!(
            "{what} has {} columns, expected {d}",
            m.ncols()
        )));
    }
    Ok(())
}

/// Pulls a model-j gradient back to model i when both share one tokenizer.
pub fn backward_shared(
    grad_j: &DMatrix<f64>,
    v_i: &VocabMatrix,
    v_j: &VocabMatrix,
) -> Result<DMatrix<f64>> {
    SharedMap::new(v_i, v_j)?.backward(grad_j)
}

/// Operand order of the per-word product in [`backward_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProductOrder {
    /// `split(∇) * (Ṽᵢ⁺ * Ṽⱼ)ᵀ`, the adjoint of the word-wise linear map.
    #[default]
    Transposed,
    /// `split(∇) * (Ṽᵢ⁺ * Ṽⱼ)` with no transpose; only defined when `d_i = d_j`
    /// and kept as a negative control.
    Literal,
}

fn check_segments(seg_i: &WordSegmentation, seg_j: &WordSegmentation) -> Result<()> {
    if seg_i.word_count() != seg_j.word_count() {
        return Err(FuseError::Segmentation(format!(
            "model i sees {} words, model j sees {}; the sequences spell different text",
            seg_i.word_count(),
            seg_j.word_count()
        )));
    }
    Ok(())
}

/// The word-wise linear map whose adjoint [`backward`] computes:
/// each model-i word tensor is padded or cut to the map's tube length,
/// multiplied by `Ṽᵢ⁺ * Ṽⱼ`, and cut to the word's model-j token count.
pub fn linearized_forward(
    e_i: &DMatrix<f64>,
    seg_i: &WordSegmentation,
    seg_j: &WordSegmentation,
    amap: &AdapterMap,
) -> Result<DMatrix<f64>> {
    check_segments(seg_i, seg_j)?;
    check_cols(e_i, amap.d_i, "embedding")?;
    let words = split(e_i, seg_i)?;
    let items = words
        .items
        .par_iter()
        .zip(seg_j.lens())
        .map(|(x, l)| Ok(amap.word_product(x, l, false)?.resize_tubes(l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge(&WordTensorList {
        items,
        dim: amap.d_j,
    }))
}

/// Pulls a model-j gradient back to model i word by word using the map of
/// each word's model-j token count.
pub fn backward(
    grad_j: &DMatrix<f64>,
    seg_j: &WordSegmentation,
    seg_i: &WordSegmentation,
    amap: &AdapterMap,
) -> Result<DMatrix<f64>> {
    backward_with(grad_j, seg_j, seg_i, amap, ProductOrder::default())
}

pub fn backward_with(
    grad_j: &DMatrix<f64>,
    seg_j: &WordSegmentation,
    seg_i: &WordSegmentation,
    amap: &AdapterMap,
    order: ProductOrder,
) -> Result<DMatrix<f64>> {
    check_segments(seg_i, seg_j)?;
    check_cols(grad_j, amap.d_j, "gradient")?;
    if order == ProductOrder::Literal && amap.d_i != amap.d_j {
        return Err(FuseError::dim(format!(
            "the untransposed product needs d_i = d_j, have {} and {}",
            amap.d_i, amap.d_j
        )));
    }
    let words = split(grad_j, seg_j)?;
    let items = words
        .items
        .par_iter()
        .zip(seg_i.lens())
        .map(|(g, k)| {
            let transpose = order == ProductOrder::Transposed;
            Ok(amap.word_product(g, g.tubes(), transpose)?.resize_tubes(k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge(&WordTensorList {
        items,
        dim: amap.d_i,
    }))
}

/// Maps each row to the vocabulary row of highest cosine similarity, lowest
/// id on ties. Zero rows map to id 0.
pub fn nearest_token_project(x: &DMatrix<f64>, model: &Embedder) -> Result<EmbeddingSeq> {
    check_cols(x, model.dim(), "embedding")?;
    let v = &model.vocab.v;
    let norms: Vec<f64> = v.row_iter().map(|r| r.norm()).collect();
    let ids = x
        .row_iter()
        .map(|row| {
            let mut best = (0, f64::NEG_INFINITY);
            for (id, vr) in v.row_iter().enumerate() {
                let denom = norms[id] * row.norm();
                let cos = if denom > 0.0 {
                    row.dot(&vr) / denom
                } else {
                    0.0
                };
                if cos > best.1 {
                    best = (id, cos);
                }
            }
            best.0
        })
        .collect();
    EmbeddingSeq::from_tokens(model, TokenSeq::from_ids(model.tokenizer, ids)?)
}
