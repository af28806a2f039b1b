use fuse_core::adapter::{
    backward, backward_shared, backward_with, forward, linearized_forward, merge,
    nearest_token_project, split, EmbeddingSeq, ProductOrder, SharedMap,
};
use fuse_core::models::{finite_diff_grad, relative_error, HeadFactory};
use fuse_core::tokenization::{segment_words, tokenize, TokenizerSpec, WordSegmentation};
use fuse_core::toy::{demo_setup, pangram_tokenizers};
use fuse_core::vocab::{build_vocab_matrix, fit_adapter, AdapterMap, Embedder, FitConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn fit(corpus: &str, i: &Embedder, j: &Embedder, l_max: usize) -> AdapterMap {
    let cfg = FitConfig {
        l_max,
        sample_cap: 16384,
        seed: 7,
    };
    fit_adapter(corpus, i, j, &cfg).unwrap()
}

fn segments() -> impl Strategy<Value = WordSegmentation> {
    prop::collection::vec(1usize..4, 0..6).prop_map(|lens| {
        let mut start = 0;
        let spans = lens
            .into_iter()
            .map(|l| {
                start += l;
                (start - l, l)
            })
            .collect();
        WordSegmentation { spans }
    })
}

proptest! {
    #[test]
    fn merge_inverts_split(seg in segments(), d in 1usize..5, seed in 0u64..1000) {
        let e = random_matrix(seg.token_count(), d, seed);
        let words = split(&e, &seg).unwrap();
        prop_assert_eq!(words.items.len(), seg.word_count());
        prop_assert_eq!(merge(&words), e);
    }
}

#[test]
fn pangram_forward_changes_segmentation() {
    let (ti, tj) = pangram_tokenizers();
    let vi = build_vocab_matrix(&ti, 4, 1, "i").unwrap();
    let vj = build_vocab_matrix(&tj, 5, 2, "j").unwrap();
    let (ei, ej) = (
        Embedder::new(&ti, &vi).unwrap(),
        Embedder::new(&tj, &vj).unwrap(),
    );
    let x = EmbeddingSeq::from_text(&ei, "the quick brown fox").unwrap();
    assert_eq!(x.len(), 6);
    let y = forward(&x, &ei, &ej).unwrap();
    assert_eq!(y.len(), 5);
    assert_eq!(segment_words(&tj, &y.tokens).unwrap().lens(), [1, 2, 1, 1]);
    assert_eq!(
        y.e,
        vj.embed(&tokenize(&tj, "the quick brown fox").ids).unwrap()
    );
    assert_eq!(forward(&y, &ej, &ei).unwrap(), x);
    assert_eq!(forward(&x, &ei, &ei).unwrap(), x);
}

/// Shared char tokenizer with |V| = 11 ≤ d_i, d_j: V_i has full row rank.
fn exact_pair() -> (
    TokenizerSpec,
    fuse_core::vocab::VocabMatrix,
    fuse_core::vocab::VocabMatrix,
) {
    let t = TokenizerSpec::char_level("abcde".chars(), true).unwrap();
    let vi = build_vocab_matrix(&t, 16, 1, "i").unwrap();
    let vj = build_vocab_matrix(&t, 24, 2, "j").unwrap();
    (t, vi, vj)
}

#[test]
fn same_model_shared_backward_is_identity_on_the_row_space() {
    let (_, v, _) = exact_pair();
    let coeffs = random_matrix(5, v.vocab_size(), 3);
    let g = coeffs * &v.v;
    let out = backward_shared(&g, &v, &v).unwrap();
    assert!(relative_error(&out, &g) < 1e-8);
}

#[test]
fn shared_backward_matches_finite_differences() {
    let (t, vi, vj) = exact_pair();
    let map = SharedMap::new(&vi, &vj).unwrap();
    let head = HeadFactory::new(24, 1).quadratic(4);
    let ids = tokenize(&t, "abc de").ids;
    let e_i = vi.embed(&ids).unwrap();
    let e_j = vj.embed(&ids).unwrap();
    assert!((map.apply(&e_i).unwrap() - &e_j).amax() < 1e-10);
    let g = backward_shared(&head.grad(&e_j, &ids).unwrap(), &vi, &vj).unwrap();
    let fd = finite_diff_grad(
        |x| head.loss(&map.apply(x).unwrap(), &ids).unwrap(),
        &e_i,
        1e-5,
    );
    assert!(relative_error(&g, &fd) < 1e-5);
}

#[test]
fn backward_paths_are_linear() {
    let (_, vi, vj) = exact_pair();
    let (g1, g2) = (random_matrix(4, 24, 1), random_matrix(4, 24, 2));
    let (a, b) = (0.7, -1.3);
    let mix = &g1 * a + &g2 * b;
    let lhs = backward_shared(&mix, &vi, &vj).unwrap();
    let rhs =
        backward_shared(&g1, &vi, &vj).unwrap() * a + backward_shared(&g2, &vi, &vj).unwrap() * b;
    assert!(relative_error(&lhs, &rhs) < 1e-10);
    assert_eq!(
        backward_shared(&DMatrix::zeros(4, 24), &vi, &vj).unwrap(),
        DMatrix::zeros(4, 16)
    );

    let demo = demo_setup(0).unwrap();
    let (ei, ej) = (demo.primary.embedder(), demo.similarity.embedder());
    let amap = fit(&demo.corpus, &ei, &ej, 4);
    let text = demo
        .corpus
        .split_whitespace()
        .take(6)
        .collect::<Vec<_>>()
        .join(" ");
    let (ti, tj) = (tokenize(ei.tokenizer, &text), tokenize(ej.tokenizer, &text));
    let (si, sj) = (
        segment_words(ei.tokenizer, &ti).unwrap(),
        segment_words(ej.tokenizer, &tj).unwrap(),
    );
    let (g1, g2) = (
        random_matrix(tj.len(), 48, 3),
        random_matrix(tj.len(), 48, 4),
    );
    let lhs = backward(&(&g1 * a + &g2 * b), &sj, &si, &amap).unwrap();
    let rhs =
        backward(&g1, &sj, &si, &amap).unwrap() * a + backward(&g2, &sj, &si, &amap).unwrap() * b;
    assert!(relative_error(&lhs, &rhs) < 1e-10);
    let zero = backward(&DMatrix::zeros(tj.len(), 48), &sj, &si, &amap).unwrap();
    assert_eq!(zero, DMatrix::zeros(ti.len(), 32));
}

#[test]
fn tensor_backward_is_the_adjoint_of_the_linearized_forward() {
    let demo = demo_setup(4).unwrap();
    let (ei, ej) = (demo.primary.embedder(), demo.similarity.embedder());
    let amap = fit(&demo.corpus, &ei, &ej, 3);
    let words: Vec<&str> = demo.corpus.split_whitespace().collect();
    for n in 0..10 {
        let text = words[n * 7..n * 7 + 5].join(" ");
        let (ti, tj) = (tokenize(ei.tokenizer, &text), tokenize(ej.tokenizer, &text));
        let (si, sj) = (
            segment_words(ei.tokenizer, &ti).unwrap(),
            segment_words(ej.tokenizer, &tj).unwrap(),
        );
        let x = random_matrix(ti.len(), 32, n as u64);
        let g = random_matrix(tj.len(), 48, 100 + n as u64);
        let lhs = linearized_forward(&x, &si, &sj, &amap).unwrap().dot(&g);
        let rhs = x.dot(&backward(&g, &sj, &si, &amap).unwrap());
        assert!(
            (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
            "{lhs} vs {rhs}"
        );
    }
}

#[test]
fn identical_models_reduce_to_the_shared_backward() {
    // |V| > d with well-populated buckets: every map is the identity tensor.
    let demo = demo_setup(0).unwrap();
    let t = &demo.primary.tokenizer;
    let v = build_vocab_matrix(t, 16, 5, "same").unwrap();
    let e = Embedder::new(t, &v).unwrap();
    let amap = fit(&demo.corpus, &e, &e, 4);
    let words: Vec<&str> = demo
        .corpus
        .split_whitespace()
        .filter(|w| t.word_len(w) <= 4)
        .collect();
    for n in 0..10 {
        let text = words[n * 5..n * 5 + 4].join(" ");
        let ts = tokenize(t, &text);
        let seg = segment_words(t, &ts).unwrap();
        let g = random_matrix(ts.len(), 16, n as u64);
        let tensor = backward(&g, &seg, &seg, &amap).unwrap();
        let shared = backward_shared(&g, &v, &v).unwrap();
        assert!((tensor - shared).amax() < 1e-6);
    }
}

#[test]
fn mismatched_word_tokenizations_are_reconciled() {
    let pairs = |list: &[(&str, &str)]| -> Vec<(String, String)> {
        list.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    };
    let alphabet = "Hapy".chars();
    let ti = TokenizerSpec::from_alphabet_and_merges(
        alphabet.clone(),
        pairs(&[("H", "a"), ("p", "p"), ("pp", "y")]),
        true,
    )
    .unwrap();
    let tj = TokenizerSpec::from_alphabet_and_merges(
        alphabet,
        pairs(&[("H", "a"), ("Ha", "p"), ("Hap", "p"), ("Happ", "y")]),
        true,
    )
    .unwrap();
    let vi = build_vocab_matrix(&ti, 3, 1, "i").unwrap();
    let vj = build_vocab_matrix(&tj, 5, 2, "j").unwrap();
    let (ei, ej) = (
        Embedder::new(&ti, &vi).unwrap(),
        Embedder::new(&tj, &vj).unwrap(),
    );
    let amap = fit("Happy Ha y", &ei, &ej, 2);
    let (xi, xj) = (tokenize(&ti, "Happy"), tokenize(&tj, "Happy"));
    assert_eq!((xi.len(), xj.len()), (2, 1));
    let (si, sj) = (
        segment_words(&ti, &xi).unwrap(),
        segment_words(&tj, &xj).unwrap(),
    );
    let g = random_matrix(1, 5, 0);
    let out = backward(&g, &sj, &si, &amap).unwrap();
    assert_eq!(out.shape(), (2, 3));
    assert!(out.amax() > 0.0);
    let other = segment_words(&ti, &tokenize(&ti, "Happy Ha")).unwrap();
    assert!(backward(&g, &sj, &other, &amap).is_err());
}

#[test]
fn untransposed_order_is_a_distinct_and_wrong_product() {
    let demo = demo_setup(0).unwrap();
    let t2 = demo.similarity.tokenizer.clone();
    let vi = build_vocab_matrix(&demo.primary.tokenizer, 8, 1, "i").unwrap();
    let vj = build_vocab_matrix(&t2, 8, 2, "j").unwrap();
    let (ei, ej) = (demo.primary.embedder(), demo.similarity.embedder());
    let rect = fit(&demo.corpus, &ei, &ej, 2);
    let text = "bamalgond gros";
    let (ti, tj) = (tokenize(ei.tokenizer, text), tokenize(ej.tokenizer, text));
    let (si, sj) = (
        segment_words(ei.tokenizer, &ti).unwrap(),
        segment_words(ej.tokenizer, &tj).unwrap(),
    );
    let g = random_matrix(tj.len(), 48, 1);
    assert!(backward_with(&g, &sj, &si, &rect, ProductOrder::Literal).is_err());

    let (ei, ej) = (
        Embedder::new(&demo.primary.tokenizer, &vi).unwrap(),
        Embedder::new(&t2, &vj).unwrap(),
    );
    let square = fit(&demo.corpus, &ei, &ej, 2);
    let g = random_matrix(tj.len(), 8, 1);
    let x = random_matrix(ti.len(), 8, 2);
    let literal = backward_with(&g, &sj, &si, &square, ProductOrder::Literal).unwrap();
    let adjoint = linearized_forward(&x, &si, &sj, &square).unwrap().dot(&g);
    assert!((x.dot(&literal) - adjoint).abs() > 1e-6);
}

#[test]
fn projection_snaps_to_nearest_tokens() {
    let (t, v, _) = exact_pair();
    let e = Embedder::new(&t, &v).unwrap();
    let x = EmbeddingSeq::from_text(&e, "ab cde").unwrap();
    assert_eq!(nearest_token_project(&x.e, &e).unwrap(), x);
    let scaled = v.embed(&[3]).unwrap() * 0.9;
    assert_eq!(nearest_token_project(&scaled, &e).unwrap().tokens.ids, [3]);

    let mut gap = f64::INFINITY;
    for a in 0..v.vocab_size() {
        for b in a + 1..v.vocab_size() {
            gap = gap.min((v.row(a) - v.row(b)).norm());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let id = rng.random_range(0..v.vocab_size());
        let dir = random_matrix(1, 16, rng.random());
        let noisy = v.embed(&[id]).unwrap() + dir.normalize() * (0.4 * gap);
        assert_eq!(nearest_token_project(&noisy, &e).unwrap().tokens.ids, [id]);
    }
}

#[test]
fn cached_word_product_matches_the_direct_product() {
    use fuse_core::tproduct::{tprod, ttranspose, Tensor3};
    let demo = demo_setup(2).unwrap();
    let amap = fit(
        &demo.corpus,
        &demo.primary.embedder(),
        &demo.similarity.embedder(),
        3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for l in 1..=6 {
        let n = amap.product_tubes(l);
        let t = amap.map_for(l).resize_tubes(n);
        let x = Tensor3::from_fn(1, 32, rng.random_range(1..5), |_, _, _| {
            rng.random_range(-1.0..1.0)
        })
        .unwrap();
        let direct = tprod(&x.resize_tubes(n), &t).unwrap();
        assert!(
            amap.word_product(&x, l, false)
                .unwrap()
                .max_abs_diff(&direct)
                < 1e-12
        );
        let g = Tensor3::from_fn(1, 48, l, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let direct = tprod(&g.resize_tubes(n), &ttranspose(&t)).unwrap();
        assert!(
            amap.word_product(&g, l, true)
                .unwrap()
                .max_abs_diff(&direct)
                < 1e-12
        );
    }
}
