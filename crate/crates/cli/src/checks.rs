//! Finite-difference checks of the backward maps.
//!
//! Two regimes. With a shared tokenizer and full-row-rank vocabularies the
//! matrix backward is the true chain-rule gradient, so it is compared to
//! central differences by relative error. Across tokenizers the tensor
//! backward is only a descent signal, so it is compared by the fraction of
//! coordinates whose sign agrees with the finite-difference gradient of the
//! word-wise linearized forward map.

use anyhow::{bail, ensure, Result};
use fuse_core::adapter::{backward_with, linearized_forward, ProductOrder, SharedMap};
use fuse_core::models::{finite_diff_grad, relative_error, HeadFactory, HeadKind, SyntheticModel};
use fuse_core::tokenization::{segment_words, tokenize, TokenizerSpec};
use fuse_core::vocab::{build_vocab_matrix, AdapterMap};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXACT_TOLERANCE: f64 = 1e-4;
pub const MIN_SIGN_AGREEMENT: f64 = 0.9;
pub const FD_STEP: f64 = 1e-5;

const TOY_ALPHABET: &str = "abcde";

/// One (prompt, head) comparison.
#[derive(Clone, Debug)]
pub struct PairCheck {
    pub prompt: String,
    pub head: usize,
    pub kind: HeadKind,
    /// Relative error (shared regime) or sign agreement (tensor regime).
    pub value: f64,
}

/// Fraction of coordinates where `est` and `fd` have the same sign, ignoring
/// coordinates where the finite difference is negligible.
pub fn sign_agreement(est: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let floor = 1e-8 * fd.amax();
    let (mut agree, mut total) = (0usize, 0usize);
    for (a, b) in est.iter().zip(fd.iter()) {
        if b.abs() <= floor {
            continue;
        }
        total += 1;
        if a.signum() == b.signum() {
            agree += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

/// Shared char tokenizer over five letters (11 tokens with marker variants
/// and the unknown token), so any `d ≥ 11` gives full row rank. Model j has
/// one head of every kind.
pub fn exact_toy(d_i: usize, d_j: usize, seed: u64) -> Result<(SyntheticModel, SyntheticModel)> {
    let tok = TokenizerSpec::char_level(TOY_ALPHABET.chars(), true)?;
    ensure!(
        d_i.min(d_j) >= tok.vocab_size(),
        "the exact regime needs d ≥ {} (the toy vocabulary size)",
        tok.vocab_size()
    );
    let vi = build_vocab_matrix(&tok, d_i, seed ^ 0x1, "toy-i")?;
    let vj = build_vocab_matrix(&tok, d_j, seed ^ 0x2, "toy-j")?;
    let mut fi = HeadFactory::new(d_i, seed ^ 0x3);
    let mut fj = HeadFactory::new(d_j, seed ^ 0x4);
    let mi = SyntheticModel::new(tok.clone(), vi, vec![fi.lm(tok.vocab_size())])?;
    let heads = HeadKind::ALL
        .into_iter()
        .map(|k| fj.of_kind(k, tok.vocab_size()))
        .collect();
    let mj = SyntheticModel::new(tok, vj, heads)?;
    Ok((mi, mj))
}

/// Random strings of one to four words of one to four toy letters.
pub fn toy_prompts(n: usize, seed: u64) -> Vec<String> {
    let letters: Vec<char> = TOY_ALPHABET.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words: Vec<String> = (0..rng.random_range(1..=4))
                .map(|_| {
                    (0..rng.random_range(1..=4))
                        .map(|_| letters[rng.random_range(0..letters.len())])
                        .collect()
                })
                .collect();
            words.join(" ")
        })
        .collect()
}

/// `n` runs of `words` consecutive corpus words from seeded offsets.
pub fn corpus_prompts(corpus: &str, n: usize, words: usize, seed: u64) -> Result<Vec<String>> {
    let all: Vec<&str> = corpus.split_whitespace().collect();
    ensure!(
        all.len() >= words && words > 0,
        "corpus has {} words, prompts need {words}",
        all.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let start = rng.random_range(0..=all.len() - words);
            all[start..start + words].join(" ")
        })
        .collect())
}

/// `max |V_i M − V_j|`: zero exactly when the matrix map reproduces model j's
/// embeddings, i.e. when the shared regime is exact.
pub fn shared_residual(mi: &SyntheticModel, mj: &SyntheticModel) -> Result<f64> {
    let map = SharedMap::new(&mi.vocab, &mj.vocab)?;
    Ok((map.apply(&mi.vocab.v)? - &mj.vocab.v).amax())
}

fn shared_backward(map: &SharedMap, g: &DMatrix<f64>, order: ProductOrder) -> Result<DMatrix<f64>> {
    Ok(match order {
        ProductOrder::Transposed => map.backward(g)?,
        ProductOrder::Literal => {
            ensure!(
                map.m.is_square(),
                "the untransposed product needs d_i = d_j, have {}×{}",
                map.m.nrows(),
                map.m.ncols()
            );
            g * &map.m
        }
    })
}

/// Relative error of the matrix backward against central differences of
/// `e ↦ L_j(e M)` at `E_i`, for every prompt and every head of model j.
pub fn shared_regime(
    mi: &SyntheticModel,
    mj: &SyntheticModel,
    prompts: &[String],
    order: ProductOrder,
) -> Result<Vec<PairCheck>> {
    ensure!(
        mi.tokenizer == mj.tokenizer,
        "the shared regime needs both models to use one tokenizer"
    );
    let map = SharedMap::new(&mi.vocab, &mj.vocab)?;
    let mut out = Vec::new();
    for prompt in prompts {
        let ids = tokenize(&mi.tokenizer, prompt).ids;
        let e_i = mi.vocab.embed(&ids)?;
        let e_j = mj.vocab.embed(&ids)?;
        for (h, head) in mj.heads.iter().enumerate() {
            let est = shared_backward(&map, &head.grad(&e_j, &ids)?, order)?;
            let fd = finite_diff_grad(
                |x| head.loss(&(x * &map.m), &ids).expect("shapes checked"),
                &e_i,
                FD_STEP,
            );
            out.push(PairCheck {
                prompt: prompt.clone(),
                head: h,
                kind: head.kind(),
                value: relative_error(&est, &fd),
            });
        }
    }
    Ok(out)
}

/// Sign agreement of the tensor backward of `∇L_j(E_j)` with central
/// differences of `e ↦ L_j(linearized_forward(e))` at `E_i`.
pub fn tensor_regime(
    mi: &SyntheticModel,
    mj: &SyntheticModel,
    amap: &AdapterMap,
    prompts: &[String],
    order: ProductOrder,
) -> Result<Vec<PairCheck>> {
    if (amap.d_i, amap.d_j) != (mi.dim(), mj.dim()) {
        bail!(
            "adapter maps {}×{} but the models are {}×{}",
            amap.d_i,
            amap.d_j,
            mi.dim(),
            mj.dim()
        );
    }
    let mut out = Vec::new();
    for prompt in prompts {
        let (ti, tj) = (
            tokenize(&mi.tokenizer, prompt),
            tokenize(&mj.tokenizer, prompt),
        );
        let (si, sj) = (
            segment_words(&mi.tokenizer, &ti)?,
            segment_words(&mj.tokenizer, &tj)?,
        );
        let e_i = mi.vocab.embed(&ti.ids)?;
        let e_j = mj.vocab.embed(&tj.ids)?;
        for (h, head) in mj.heads.iter().enumerate() {
            let est = backward_with(&head.grad(&e_j, &tj.ids)?, &sj, &si, amap, order)?;
            let fd = finite_diff_grad(
                |x| {
                    let y = linearized_forward(x, &si, &sj, amap).expect("segments checked");
                    head.loss(&y, &tj.ids).expect("shapes checked")
                },
                &e_i,
                FD_STEP,
            );
            out.push(PairCheck {
                prompt: prompt.clone(),
                head: h,
                kind: head.kind(),
                value: sign_agreement(&est, &fd),
            });
        }
    }
    Ok(out)
}

pub fn mean(checks: &[PairCheck]) -> f64 {
    checks.iter().map(|c| c.value).sum::<f64>() / checks.len().max(1) as f64
}

pub fn max(checks: &[PairCheck]) -> f64 {
    checks.iter().map(|c| c.value).fold(0.0, f64::max)
}
