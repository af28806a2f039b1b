//! Small deterministic fixtures: a pair of tokenizers that split the pangram
//! differently, and a pseudo-word corpus generator for desk-scale fitting.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::Result;
use crate::models::{HeadFactory, SyntheticModel};
use crate::tokenization::{train_bpe, TokenizerSpec};
use crate::vocab::build_vocab_matrix;

pub const PANGRAM: &str = "the quick brown fox jumps over the lazy dog";

fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
    list.iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

fn printable_ascii() -> impl Iterator<Item = char> {
    (33u8..=126).map(char::from)
}

/// Two tokenizers over printable ASCII whose merges split the pangram as
///
/// ```text
/// first:  the | qui ck | br own | fox | j umps | over | the | l azy | dog
/// second: the | q uick | brown  | fox | jump s | ov er | the | lazy | d og
/// ```
pub fn pangram_tokenizers() -> (TokenizerSpec, TokenizerSpec) {
    let first = pairs(&[
        ("t", "h"),
        ("th", "e"),
        ("q", "u"),
        ("qu", "i"),
        ("c", "k"),
        ("b", "r"),
        ("o", "w"),
        ("ow", "n"),
        ("f", "o"),
        ("fo", "x"),
        ("u", "m"),
        ("um", "p"),
        ("ump", "s"),
        ("o", "v"),
        ("ov", "e"),
        ("ove", "r"),
        ("a", "z"),
        ("az", "y"),
        ("d", "o"),
        ("do", "g"),
    ]);
    let second = pairs(&[
        ("t", "h"),
        ("th", "e"),
        ("u", "i"),
        ("ui", "c"),
        ("uic", "k"),
        ("b", "r"),
        ("br", "o"),
        ("bro", "w"),
        ("brow", "n"),
        ("f", "o"),
        ("fo", "x"),
        ("j", "u"),
        ("ju", "m"),
        ("jum", "p"),
        ("o", "v"),
        ("e", "r"),
        ("l", "a"),
        ("la", "z"),
        ("laz", "y"),
        ("o", "g"),
    ]);
    let build = |m| {
        TokenizerSpec::from_alphabet_and_merges(printable_ascii(), m, true)
            .expect("fixture merges are consistent")
    };
    (build(first), build(second))
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "st", "tr", "pl", "gr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "nd"];

/// `size` distinct pseudo-words of one to four syllables.
pub fn synthetic_lexicon(size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(size);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let syllables = 1 + rng.random_range(0..4usize).min(rng.random_range(0..4usize));
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A corpus of `n_words` running words drawn with Zipfian frequencies from a
/// pseudo-word lexicon, eight to fifteen words per line.
pub fn synthetic_corpus(n_words: usize, seed: u64) -> String {
    let lexicon = synthetic_lexicon((n_words / 2).clamp(16, 4000), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let zipf = Zipf::new(lexicon.len() as f64, 1.05).expect("valid zipf parameters");
    let mut out = String::new();
    let mut on_line = 0;
    let mut line_len = rng.random_range(8..16);
    for i in 0..n_words {
        let rank = zipf.sample(&mut rng) as usize;
        if i > 0 {
            if on_line == line_len {
                out.push('\n');
                on_line = 0;
                line_len = rng.random_range(8..16);
            } else {
                out.push(' ');
            }
        }
        out.push_str(&lexicon[rank.clamp(1, lexicon.len()) - 1]);
        on_line += 1;
    }
    out.push('\n');
    out
}

/// Corpus size of the demo setup.
pub const DEMO_CORPUS_WORDS: usize = 2000;

/// Three synthetic models over one pseudo-word corpus, standing in for a
/// language model (primary), an image-text similarity model with a different
/// tokenizer, and a sentiment classifier sharing the primary tokenizer.
#[derive(Clone, Debug)]
pub struct DemoSetup {
    pub corpus: String,
    pub primary: SyntheticModel,
    pub similarity: SyntheticModel,
    pub sentiment: SyntheticModel,
}

/// Embedding dimensions of the demo models.
pub const DEMO_DIMS: (usize, usize, usize) = (32, 48, 24);

pub fn demo_setup(seed: u64) -> Result<DemoSetup> {
    let corpus = synthetic_corpus(DEMO_CORPUS_WORDS, seed);
    let tok_p = train_bpe(&corpus, 96)?;
    let tok_s = train_bpe(&corpus, 160)?;
    let (dp, ds, dc) = DEMO_DIMS;
    let primary = {
        let vocab = build_vocab_matrix(&tok_p, dp, seed ^ 0x10, "primary")?;
        let lm = HeadFactory::new(dp, seed ^ 0x11).lm(tok_p.vocab_size());
        SyntheticModel::new(tok_p.clone(), vocab, vec![lm])?
    };
    let similarity = {
        let vocab = build_vocab_matrix(&tok_s, ds, seed ^ 0x20, "similarity")?;
        let head = HeadFactory::new(ds, seed ^ 0x21).bilinear(16);
        SyntheticModel::new(tok_s, vocab, vec![head])?
    };
    let sentiment = {
        let vocab = build_vocab_matrix(&tok_p, dc, seed ^ 0x30, "sentiment")?;
        let head = HeadFactory::new(dc, seed ^ 0x31).class(2, 1);
        SyntheticModel::new(tok_p, vocab, vec![head])?
    };
    Ok(DemoSetup {
        corpus,
        primary,
        similarity,
        sentiment,
    })
}
