//! Vocabulary matrices, the word-bucketed vocabulary tensors built from them,
//! and the fitted adapter maps `Ṽᵢ⁺ * Ṽⱼ`.
//!
//! A bucket collects the corpus words that cost exactly `l` tokens under the
//! target tokenizer. Row `m` of a bucket tensor is one word, tube `n` holds the
//! embedding of its `n`-th token, and slots past the word's length are zero.

mod adapter_map;

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FuseError, Result};
use crate::tokenization::TokenizerSpec;
use crate::tproduct::Tensor3;

pub use adapter_map::{fit_adapter, AdapterMap, FitConfig, ADAPTER_MAGIC, ADAPTER_VERSION};

/// Default number of words sampled per bucket.
pub const DEFAULT_SAMPLE_CAP: usize = 16384;
/// Default token-length cutoff.
pub const DEFAULT_L_MAX: usize = 4;

/// Deterministic RNG for an independent sub-stream of `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> impl FnMut() -> f64 + '_ {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    move || normal.sample(rng)
}

/// A model's token embedding table, one row per token id.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabMatrix {
    pub v: DMatrix<f64>,
    pub model_id: String,
}

impl VocabMatrix {
    pub fn new(model_id: impl Into<String>, v: DMatrix<f64>) -> Result<Self> {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(FuseError::NonFinite { index: i });
        }
        Ok(VocabMatrix {
            v,
            model_id: model_id.into(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.v.nrows()
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn row(&self, id: usize) -> nalgebra::RowDVector<f64> {
        self.v.row(id).into_owned()
    }

    /// `E = X V` for the one-hot rows of `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<DMatrix<f64>> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(FuseError::InvalidArgument(format!(
                "token id {id} outside vocab of {}",
                self.vocab_size()
            )));
        }
        Ok(DMatrix::from_fn(ids.len(), self.dim(), |r, c| {
            self.v[(ids[r], c)]
        }))
    }

    /// The table as a `|V| × d × 1` tensor, the on-disk form.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_matrix(&self.v).expect("vocab entries are finite")
    }

    pub fn from_tensor(model_id: impl Into<String>, t: &Tensor3) -> Result<Self> {
        if t.tubes() != 1 {
            return Err(FuseError::format(
                "vocab",
                format!("expected a single-tube tensor, found {} tubes", t.tubes()),
            ));
        }
        VocabMatrix::new(model_id, t.slice(0))
    }
}

/// Draws a `|V| × d` table with i.i.d. `N(0, 1/d)` entries.
pub fn build_vocab_matrix(
    spec: &TokenizerSpec,
    d: usize,
    seed: u64,
    model_id: impl Into<String>,
) -> Result<VocabMatrix> {
    if d == 0 {
        return Err(FuseError::InvalidArgument(
            "embedding dim must be ≥ 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = gaussian(&mut rng, 1.0 / (d as f64).sqrt());
    // Filled row by row so the table does not depend on nalgebra's layout.
    let rows: Vec<f64> = (0..spec.vocab_size() * d).map(|_| draw()).collect();
    let v = DMatrix::from_row_slice(spec.vocab_size(), d, &rows);
    VocabMatrix::new(model_id, v)
}

/// A tokenizer together with the embedding table it indexes.
#[derive(Clone, Copy, Debug)]
pub struct Embedder<'a> {
    pub tokenizer: &'a TokenizerSpec,
    pub vocab: &'a VocabMatrix,
}

impl<'a> Embedder<'a> {
    pub fn new(tokenizer: &'a TokenizerSpec, vocab: &'a VocabMatrix) -> Result<Self> {
        if tokenizer.vocab_size() != vocab.vocab_size() {
            return Err(FuseError::dim(format!(
                "tokenizer has {} tokens but the vocab matrix of {:?} has {} rows",
                tokenizer.vocab_size(),
                vocab.model_id,
                vocab.vocab_size()
            )));
        }
        Ok(Embedder { tokenizer, vocab })
    }

    pub fn dim(&self) -> usize {
        self.vocab.dim()
    }

    fn has_unknown(&self, word: &str) -> bool {
        self.tokenizer
            .word_ids(word, 0)
            .iter()
            .any(|&id| self.tokenizer.is_unknown(id))
    }
}

/// Positions at which each bucket word is embedded. With a space marker the
/// word-initial and later-word forms use different tokens, so both appear.
fn word_forms(model_i: &Embedder, model_j: &Embedder) -> &'static [usize] {
    if model_i.tokenizer.space_marker() || model_j.tokenizer.space_marker() {
        &[0, 1]
    } else {
        &[0]
    }
}

/// Words of one bucket and the longest model-i tokenization among them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketWords {
    pub words: Vec<String>,
    pub k_i: usize,
}

/// Unique corpus words costing exactly `l` model-j tokens, sorted, and
/// subsampled to `sample_cap` with a seeded uniform draw. Words either model
/// cannot spell without the unknown token are skipped.
pub fn collect_bucket_words(
    corpus: &str,
    model_i: &Embedder,
    model_j: &Embedder,
    l: usize,
    sample_cap: usize,
    seed: u64,
) -> Result<BucketWords> {
    if l == 0 {
        return Err(FuseError::InvalidArgument(
            "bucket length must be ≥ 1".into(),
        ));
    }
    let unique: BTreeSet<&str> = corpus.split_whitespace().collect();
    let mut words: Vec<&str> = unique
        .into_iter()
        .filter(|w| model_j.tokenizer.word_len(w) == l)
        .filter(|w| !model_i.has_unknown(w) && !model_j.has_unknown(w))
        .collect();
    if words.len() > sample_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, words.len(), sample_cap).into_vec();
        picked.sort_unstable();
        words = picked.into_iter().map(|i| words[i]).collect();
    }
    let k_i = words
        .iter()
        .map(|w| model_i.tokenizer.word_len(w))
        .max()
        .unwrap_or(0);
    Ok(BucketWords {
        words: words.into_iter().map(String::from).collect(),
        k_i,
    })
}

/// The pair `(Ṽᵢ, Ṽⱼ)` for one bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabTensorBucket {
    pub l_j: usize,
    pub k_i: usize,
    pub words: Vec<String>,
    /// Rows per word: 2 (initial and later-word form) with a space marker, else 1.
    pub forms: usize,
    /// `rows × d_i × k_i`
    pub v_i: Tensor3,
    /// `rows × d_j × l_j`
    pub v_j: Tensor3,
}

impl VocabTensorBucket {
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn fill_word(t: &mut Tensor3, row: usize, model: &Embedder, word: &str, position: usize) {
    for (n, id) in model
        .tokenizer
        .word_ids(word, position)
        .into_iter()
        .enumerate()
    {
        for c in 0..model.dim() {
            t.set(row, c, n, model.vocab.v[(id, c)]);
        }
    }
}

/// Stacks the token embeddings of every bucket word into `Ṽᵢ` and `Ṽⱼ`.
pub fn build_vocab_tensors(
    words: &[String],
    model_i: &Embedder,
    model_j: &Embedder,
    l_j: usize,
) -> Result<VocabTensorBucket> {
    if let Some(w) = words.iter().find(|w| model_j.tokenizer.word_len(w) != l_j) {
        return Err(FuseError::InvalidArgument(format!(
            "word {w:?} costs {} tokens in model j, not {l_j}",
            model_j.tokenizer.word_len(w)
        )));
    }
    let k_i = words
        .iter()
        .map(|w| model_i.tokenizer.word_len(w))
        .max()
        .unwrap_or(0);
    let forms = word_forms(model_i, model_j);
    let rows = words.len() * forms.len();
    let mut v_i = Tensor3::zeros(rows, model_i.dim(), k_i.max(1));
    let mut v_j = Tensor3::zeros(rows, model_j.dim(), l_j);
    for (m, word) in words.iter().enumerate() {
        for (f, &position) in forms.iter().enumerate() {
            let row = m * forms.len() + f;
            fill_word(&mut v_i, row, model_i, word, position);
            fill_word(&mut v_j, row, model_j, word, position);
        }
    }
    Ok(VocabTensorBucket {
        l_j,
        k_i,
        words: words.to_vec(),
        forms: forms.len(),
        v_i,
        v_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{pangram_tokenizers, PANGRAM};

    #[test]
    fn vocab_matrix_is_deterministic() {
        let spec = TokenizerSpec::char_level("abcdefghi".chars(), false).unwrap();
        assert_eq!(spec.vocab_size(), 10);
        let a = build_vocab_matrix(&spec, 4, 7, "m").unwrap();
        assert_eq!(a, build_vocab_matrix(&spec, 4, 7, "m").unwrap());
        assert_ne!(a, build_vocab_matrix(&spec, 4, 8, "m").unwrap());
        assert!(build_vocab_matrix(&spec, 1, 7, "m").is_ok());
        assert!(build_vocab_matrix(&spec, 0, 7, "m").is_err());
    }

    #[test]
    fn row_norms_concentrate_near_one() {
        let spec = TokenizerSpec::char_level("abcdefghijklmnopqrstuvwxyz".chars(), true).unwrap();
        let v = build_vocab_matrix(&spec, 64, 1, "m").unwrap();
        let mean: f64 = v.v.row_iter().map(|r| r.norm()).sum::<f64>() / v.vocab_size() as f64;
        assert!((mean - 1.0).abs() < 0.2, "mean row norm {mean}");
    }

    #[test]
    fn embed_is_one_hot_product() {
        let spec = TokenizerSpec::char_level("abc".chars(), false).unwrap();
        let v = build_vocab_matrix(&spec, 3, 2, "m").unwrap();
        let ts = crate::tokenization::tokenize(&spec, "cab");
        let x = crate::tokenization::one_hot(&ts, spec.vocab_size()).unwrap();
        assert_eq!(v.embed(&ts.ids).unwrap(), &x * &v.v);
        assert!(v.embed(&[9]).is_err());
    }

    fn pangram_models() -> (TokenizerSpec, TokenizerSpec, VocabMatrix, VocabMatrix) {
        let (ti, tj) = pangram_tokenizers();
        let vi = build_vocab_matrix(&ti, 4, 1, "i").unwrap();
        let vj = build_vocab_matrix(&tj, 5, 2, "j").unwrap();
        (ti, tj, vi, vj)
    }

    #[test]
    fn pangram_two_token_bucket() {
        let (ti, tj, vi, vj) = pangram_models();
        let (ei, ej) = (
            Embedder::new(&ti, &vi).unwrap(),
            Embedder::new(&tj, &vj).unwrap(),
        );
        let b = collect_bucket_words(PANGRAM, &ei, &ej, 2, 100, 0).unwrap();
        assert_eq!(b.words, ["dog", "jumps", "over", "quick"]);
        assert_eq!(b.k_i, 2);
        assert!(collect_bucket_words(PANGRAM, &ei, &ej, 7, 100, 0)
            .unwrap()
            .words
            .is_empty());
        let two = collect_bucket_words(PANGRAM, &ei, &ej, 2, 2, 9).unwrap();
        assert_eq!(two.words.len(), 2);
        assert_eq!(
            two,
            collect_bucket_words(PANGRAM, &ei, &ej, 2, 2, 9).unwrap()
        );
    }

    #[test]
    fn bucket_tensor_layout() {
        let (ti, tj, vi, vj) = pangram_models();
        let (ei, ej) = (
            Embedder::new(&ti, &vi).unwrap(),
            Embedder::new(&tj, &vj).unwrap(),
        );
        let words: Vec<String> = ["quick", "dog"].map(String::from).to_vec();
        let b = build_vocab_tensors(&words, &ei, &ej, 2).unwrap();
        assert_eq!(b.forms, 2);
        assert_eq!(b.v_j.shape(), (4, 5, 2));
        // "dog" is one token in model i: its second tube slot is empty.
        assert_eq!(b.v_i.shape(), (4, 4, 2));
        for row in [2, 3] {
            assert!((0..4).all(|c| b.v_i.get(row, c, 1) == 0.0));
        }
        // Row 1 is the later-word form of "quick": Ġq, uick in model j.
        let ids = tj.word_ids("quick", 1);
        for (n, &id) in ids.iter().enumerate() {
            for c in 0..5 {
                assert_eq!(b.v_j.get(1, c, n), vj.v[(id, c)]);
            }
        }
        assert!(build_vocab_tensors(&["fox".to_string()], &ei, &ej, 2).is_err());
    }
}
