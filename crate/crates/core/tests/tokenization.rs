use fuse_core::tokenization::{
    detokenize, one_hot, segment_words, tokenize, train_bpe, TokenizerSpec,
};
use fuse_core::toy::{pangram_tokenizers, synthetic_corpus, PANGRAM};
use fuse_core::vocab::build_vocab_matrix;
use proptest::prelude::*;

#[test]
fn pangram_prefix_word_lengths() {
    let (ti, tj) = pangram_tokenizers();
    let lens = |t: &TokenizerSpec| {
        segment_words(t, &tokenize(t, "the quick brown fox"))
            .unwrap()
            .lens()
    };
    assert_eq!(lens(&ti), [1, 2, 2, 1]);
    assert_eq!(lens(&tj), [1, 2, 1, 1]);
}

#[test]
fn pangram_token_texts() {
    let (ti, tj) = pangram_tokenizers();
    let texts = |t: &TokenizerSpec| -> Vec<String> {
        tokenize(t, PANGRAM)
            .ids
            .iter()
            .map(|&id| t.token(id).unwrap().to_string())
            .collect()
    };
    assert_eq!(
        texts(&ti),
        [
            "the", "Ġqui", "ck", "Ġbr", "own", "Ġfox", "Ġj", "umps", "Ġover", "Ġthe", "Ġl", "azy",
            "Ġdog"
        ]
    );
    assert_eq!(
        texts(&tj),
        [
            "the", "Ġq", "uick", "Ġbrown", "Ġfox", "Ġjump", "s", "Ġov", "er", "Ġthe", "Ġlazy",
            "Ġd", "og"
        ]
    );
}

#[test]
fn embedding_is_one_hot_times_vocab() {
    let (ti, _) = pangram_tokenizers();
    let v = build_vocab_matrix(&ti, 6, 11, "i").unwrap();
    let ts = tokenize(&ti, PANGRAM);
    let x = one_hot(&ts, ti.vocab_size()).unwrap();
    assert_eq!(x.nrows(), ts.len());
    assert!(x.row_iter().all(|r| r.sum() == 1.0));
    assert_eq!(&x * &v.v, v.embed(&ts.ids).unwrap());
}

#[test]
fn bpe_training_is_deterministic() {
    let corpus = synthetic_corpus(600, 2);
    let a = train_bpe(&corpus, 60).unwrap();
    let b = train_bpe(&corpus, 60).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn unknown_symbols_render_as_replacement() {
    let (ti, _) = pangram_tokenizers();
    let ts = tokenize(&ti, "the café");
    assert!(ts.ids.iter().any(|&id| ti.is_unknown(id)));
    assert_eq!(detokenize(&ti, &ts.ids).unwrap(), "the caf\u{FFFD}");
    assert!(!ts.is_lossless(&ti));
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,8}", 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip_through_both_tokenizers(s in sentence()) {
        let (ti, tj) = pangram_tokenizers();
        for t in [&ti, &tj] {
            let ts = tokenize(t, &s);
            prop_assert_eq!(detokenize(t, &ts.ids).unwrap(), s.clone());
            let seg = segment_words(t, &ts).unwrap();
            prop_assert_eq!(seg.word_count(), s.split(' ').count());
            prop_assert_eq!(seg.token_count(), ts.len());
        }
    }

    #[test]
    fn merges_never_cross_whitespace(words in prop::collection::vec("[a-z]{1,6}", 1..6)) {
        let corpus = synthetic_corpus(300, 5);
        let t = train_bpe(&corpus, 50).unwrap();
        let joined = words.join(" ");
        let together = tokenize(&t, &joined).ids;
        let separate: Vec<usize> = words
            .iter()
            .enumerate()
            .flat_map(|(n, w)| t.word_ids(w, n))
            .collect();
        prop_assert_eq!(together, separate);
    }

    #[test]
    fn whitespace_runs_normalize(s in sentence()) {
        let (ti, _) = pangram_tokenizers();
        let spaced = format!("  {}\t\n", s.replace(' ', "   "));
        prop_assert_eq!(tokenize(&ti, &spaced).ids, tokenize(&ti, &s).ids);
    }
}
