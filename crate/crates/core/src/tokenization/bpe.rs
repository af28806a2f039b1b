use std::collections::{BTreeMap, HashMap};

use super::{TokenizerSpec, SPACE_MARKER};
use crate::error::{FuseError, Result};

/// Applies ranked merges to one word. `None` marks an unknown symbol, which
/// never merges with its neighbours.
pub(crate) fn apply_merges(
    mut symbols: Vec<Option<String>>,
    ranks: &HashMap<(String, String), usize>,
) -> Vec<Option<String>> {
    if ranks.is_empty() {
        return symbols;
    }
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|w| match (&w[0], &w[1]) {
                (Some(a), Some(b)) => ranks.get(&(a.clone(), b.clone())).map(|&r| (r, a, b)),
                _ => None,
            })
            .min_by_key(|(r, _, _)| *r)
            .map(|(_, a, b)| (a.clone(), b.clone()));
        let Some((a, b)) = best else {
            return symbols;
        };
        symbols = merge_pair(symbols, &a, &b);
    }
}

/// Replaces every left-to-right occurrence of the adjacent pair `(a, b)`.
fn merge_pair(symbols: Vec<Option<String>>, a: &str, b: &str) -> Vec<Option<String>> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len()
            && symbols[i].as_deref() == Some(a)
            && symbols[i + 1].as_deref() == Some(b)
        {
            out.push(Some(format!("{a}{b}")));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Byte-pair training with the space marker enabled.
pub fn train_bpe(corpus: &str, target_vocab_size: usize) -> Result<TokenizerSpec> {
    train_bpe_with(corpus, target_vocab_size, true)
}

/// Trains merges on the whitespace-separated words of `corpus` until the
/// number of distinct base tokens (alphabet plus merge products, not counting
/// the unknown token or marker variants) reaches `target_vocab_size`, or no
/// pair is left. The most frequent adjacent pair wins; ties go to the
/// lexicographically smaller pair. Merges never cross word boundaries.
pub fn train_bpe_with(
    corpus: &str,
    target_vocab_size: usize,
    space_marker: bool,
) -> Result<TokenizerSpec> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus.split_whitespace() {
        *word_counts.entry(w).or_default() += 1;
    }
    if word_counts.is_empty() {
        return Err(FuseError::Tokenizer("training corpus has no words".into()));
    }
    let keep = |c: &char| !(space_marker && *c == SPACE_MARKER);
    let mut alphabet: Vec<char> = word_counts
        .keys()
        .flat_map(|w| w.chars())
        .filter(keep)
        .collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    if target_vocab_size < alphabet.len() {
        return Err(FuseError::Tokenizer(format!(
            "target vocab size {target_vocab_size} is smaller than the corpus alphabet ({})",
            alphabet.len()
        )));
    }

    let mut words: Vec<(Vec<Option<String>>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let syms = w.chars().map(|c| keep(&c).then(|| c.to_string())).collect();
            (syms, n)
        })
        .collect();
    let mut tokens: std::collections::HashSet<String> =
        alphabet.iter().map(|c| c.to_string()).collect();
    let mut merges: Vec<(String, String)> = Vec::new();

    while tokens.len() < target_vocab_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if let (Some(a), Some(b)) = (&w[0], &w[1]) {
                    *pairs.entry((a.as_str(), b.as_str())).or_default() += n;
                }
            }
        }
        // BTreeMap iterates pairs in ascending order, so keeping the first
        // maximum breaks ties toward the smaller pair.
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, n) in pairs {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((pair, n));
            }
        }
        let Some(((a, b), _)) = best else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in words.iter_mut() {
            *syms = merge_pair(std::mem::take(syms), &a, &b);
        }
        tokens.insert(format!("{a}{b}"));
        merges.push((a, b));
    }
    log::debug!(
        "trained {} merges over {} distinct words",
        merges.len(),
        word_counts.len()
    );
    TokenizerSpec::from_alphabet_and_merges(alphabet, merges, space_marker)
}
