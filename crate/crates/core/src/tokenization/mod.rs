//! Whitespace-respecting tokenizers.
//!
//! Tokens never contain whitespace, so every token belongs to exactly one
//! whitespace-delimited word. When a tokenizer has the space marker enabled
//! (the default for trained tokenizers), the first token of every
//! non-initial word is the marker variant `Ġtok` of the bare token `tok`. That
//! is what lets [`detokenize`] recover word boundaries from ids alone. Marker
//! variants change token identity but never token counts.

mod bpe;
mod format;

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{FuseError, Result};

pub use bpe::{train_bpe, train_bpe_with};
pub use format::HEADER as TOKENIZER_HEADER;

/// Prefix that marks a token as starting a non-initial word.
pub const SPACE_MARKER: char = 'Ġ';
/// Display string of the reserved unknown token.
pub const UNKNOWN_TOKEN: &str = "<unk>";
/// Text emitted when detokenizing the unknown token.
pub const UNKNOWN_TEXT: char = '\u{FFFD}';

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Char,
    Bpe,
}

impl TokenizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Char => "char",
            TokenizerKind::Bpe => "bpe",
        }
    }
}

/// Immutable tokenizer description: vocabulary, ordered merge rules and the
/// reserved unknown id.
#[derive(Clone, Debug)]
pub struct TokenizerSpec {
    kind: TokenizerKind,
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    unknown_id: usize,
    space_marker: bool,
    index: HashMap<String, usize>,
    merge_rank: HashMap<(String, String), usize>,
    /// bare id -> marker variant id
    marked: Vec<Option<usize>>,
    /// marker variant id -> bare id
    bare: Vec<Option<usize>>,
}

impl PartialEq for TokenizerSpec {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.vocab == other.vocab
            && self.merges == other.merges
            && self.unknown_id == other.unknown_id
            && self.space_marker == other.space_marker
    }
}

fn marked_string(tok: &str) -> String {
    let mut s = String::with_capacity(tok.len() + 2);
    s.push(SPACE_MARKER);
    s.push_str(tok);
    s
}

impl TokenizerSpec {
    /// Validates and indexes a tokenizer from its parts.
    pub fn from_parts(
        kind: TokenizerKind,
        vocab: Vec<String>,
        merges: Vec<(String, String)>,
        unknown_id: usize,
        space_marker: bool,
    ) -> Result<Self> {
        let bad = |msg: String| Err(FuseError::Tokenizer(msg));
        if unknown_id >= vocab.len() {
            return bad(format!(
                "unknown id {unknown_id} outside vocab of {}",
                vocab.len()
            ));
        }
        if kind == TokenizerKind::Char && !merges.is_empty() {
            return bad("char tokenizers have no merges".into());
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (id, tok) in vocab.iter().enumerate() {
            if tok.is_empty() {
                return bad(format!("token {id} is empty"));
            }
            if tok.chars().any(char::is_whitespace) {
                return bad(format!("token {id} ({tok:?}) contains whitespace"));
            }
            if index.insert(tok.clone(), id).is_some() {
                return bad(format!("duplicate token {tok:?}"));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            for part in [a, b] {
                if !index.contains_key(part) {
                    return bad(format!("merge {rank} uses unknown token {part:?}"));
                }
            }
            let joined = format!("{a}{b}");
            if !index.contains_key(&joined) {
                return bad(format!("merge {rank} produces {joined:?}, not in vocab"));
            }
            if space_marker && (a.starts_with(SPACE_MARKER) || b.starts_with(SPACE_MARKER)) {
                return bad(format!("merge {rank} involves a marker token"));
            }
            merge_rank.entry((a.clone(), b.clone())).or_insert(rank);
        }
        let mut marked = vec![None; vocab.len()];
        let mut bare = vec![None; vocab.len()];
        if space_marker {
            for (id, tok) in vocab.iter().enumerate() {
                if tok.starts_with(SPACE_MARKER) {
                    continue;
                }
                let m = index.get(&marked_string(tok)).copied().ok_or_else(|| {
                    FuseError::Tokenizer(format!("token {tok:?} has no marker variant"))
                })?;
                marked[id] = Some(m);
                bare[m] = Some(id);
            }
            if let Some(id) = (0..vocab.len()).find(|&i| marked[i].is_none() && bare[i].is_none()) {
                return bad(format!("marker token {:?} has no bare form", vocab[id]));
            }
        }
        if vocab[unknown_id].starts_with(SPACE_MARKER) && space_marker {
            return bad("unknown id must name the bare unknown token".into());
        }
        Ok(TokenizerSpec {
            kind,
            vocab,
            merges,
            unknown_id,
            space_marker,
            index,
            merge_rank,
            marked,
            bare,
        })
    }

    /// Assembles the vocabulary `[<unk>, alphabet…, merge products…]`, plus
    /// marker variants of all of them when `space_marker` is set.
    pub fn from_alphabet_and_merges(
        alphabet: impl IntoIterator<Item = char>,
        merges: Vec<(String, String)>,
        space_marker: bool,
    ) -> Result<Self> {
        let mut base = vec![UNKNOWN_TOKEN.to_string()];
        let mut chars: Vec<char> = alphabet
            .into_iter()
            .filter(|c| !c.is_whitespace() && !(space_marker && *c == SPACE_MARKER))
            .collect();
        chars.sort_unstable();
        chars.dedup();
        base.extend(chars.iter().map(|c| c.to_string()));
        for (a, b) in &merges {
            let joined = format!("{a}{b}");
            if !base.contains(&joined) {
                base.push(joined);
            }
        }
        let mut vocab = base.clone();
        if space_marker {
            vocab.extend(base.iter().map(|t| marked_string(t)));
        }
        let kind = if merges.is_empty() {
            TokenizerKind::Char
        } else {
            TokenizerKind::Bpe
        };
        TokenizerSpec::from_parts(kind, vocab, merges, 0, space_marker)
    }

    /// Character-level tokenizer over `alphabet`.
    pub fn char_level(
        alphabet: impl IntoIterator<Item = char>,
        space_marker: bool,
    ) -> Result<Self> {
        TokenizerSpec::from_alphabet_and_merges(alphabet, Vec::new(), space_marker)
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn unknown_id(&self) -> usize {
        self.unknown_id
    }

    pub fn space_marker(&self) -> bool {
        self.space_marker
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whether `id` is a marker variant (starts a non-initial word).
    pub fn is_marked(&self, id: usize) -> bool {
        self.bare.get(id).is_some_and(Option::is_some)
    }

    /// Bare form of `id` (itself when it is not a marker variant).
    pub fn bare_id(&self, id: usize) -> usize {
        self.bare.get(id).copied().flatten().unwrap_or(id)
    }

    /// Marker variant of `id`, when the tokenizer has markers.
    pub fn marked_id(&self, id: usize) -> Option<usize> {
        self.marked.get(id).copied().flatten()
    }

    /// Both ids standing for the unknown symbol.
    pub fn is_unknown(&self, id: usize) -> bool {
        self.bare_id(id) == self.unknown_id
    }

    /// Word text of a token, with the marker stripped and the unknown token
    /// rendered as the replacement character.
    fn token_text(&self, id: usize) -> String {
        let bare = self.bare_id(id);
        if bare == self.unknown_id {
            UNKNOWN_TEXT.to_string()
        } else {
            self.vocab[bare].clone()
        }
    }

    /// Tokenizes one whitespace-free word into bare ids.
    fn tokenize_word(&self, word: &str) -> Vec<usize> {
        let symbols: Vec<Option<String>> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                let known =
                    self.index.contains_key(&s) && !(self.space_marker && c == SPACE_MARKER);
                known.then_some(s)
            })
            .collect();
        let merged = bpe::apply_merges(symbols, &self.merge_rank);
        merged
            .into_iter()
            .map(|s| match s {
                Some(tok) => self.index[&tok],
                None => self.unknown_id,
            })
            .collect()
    }

    /// Token ids of `word` as it would appear at word position `position`.
    pub fn word_ids(&self, word: &str, position: usize) -> Vec<usize> {
        let mut ids = self.tokenize_word(word);
        if position > 0 && self.space_marker {
            if let Some(first) = ids.first_mut() {
                *first = self.marked[*first].expect("bare token has a marker variant");
            }
        }
        ids
    }

    /// Number of tokens `word` needs; independent of the word's position.
    pub fn word_len(&self, word: &str) -> usize {
        self.tokenize_word(word).len()
    }
}

/// Token ids together with the text they were produced from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub source: String,
}

impl TokenSeq {
    /// Builds a sequence from raw ids; the source is their detokenization.
    pub fn from_ids(spec: &TokenizerSpec, ids: Vec<usize>) -> Result<TokenSeq> {
        let source = detokenize(spec, &ids)?;
        Ok(TokenSeq { ids, source })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when detokenizing the ids reproduces `source` exactly.
    pub fn is_lossless(&self, spec: &TokenizerSpec) -> bool {
        detokenize(spec, &self.ids).is_ok_and(|s| s == self.source)
    }
}

/// Tokenizes `s` word by word. Whitespace runs act only as separators; text
/// with single spaces and no leading or trailing whitespace round-trips
/// exactly through [`detokenize`] when the space marker is enabled. Unknown
/// characters map to the unknown id and break the round trip.
pub fn tokenize(spec: &TokenizerSpec, s: &str) -> TokenSeq {
    let mut ids = Vec::new();
    for (pos, word) in s.split_whitespace().enumerate() {
        ids.extend(spec.word_ids(word, pos));
    }
    if ids.iter().any(|&id| spec.is_unknown(id)) {
        log::debug!(
            "tokenizing {s:?}: unknown symbols mapped to id {}",
            spec.unknown_id
        );
    }
    TokenSeq {
        ids,
        source: s.to_string(),
    }
}

/// Concatenates token texts; marker variants contribute a leading space.
pub fn detokenize(spec: &TokenizerSpec, ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        if id >= spec.vocab_size() {
            return Err(FuseError::Tokenizer(format!(
                "id {id} outside vocab of {}",
                spec.vocab_size()
            )));
        }
        if spec.is_marked(id) {
            out.push(' ');
        }
        out.push_str(&spec.token_text(id));
    }
    Ok(out)
}

/// Token spans of the whitespace-separated words of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSegmentation {
    /// `(start, len)` per word, contiguous and in order.
    pub spans: Vec<(usize, usize)>,
}

impl WordSegmentation {
    pub fn word_count(&self) -> usize {
        self.spans.len()
    }

    pub fn token_count(&self) -> usize {
        self.spans.last().map_or(0, |(s, l)| s + l)
    }

    /// Token count of every word.
    pub fn lens(&self) -> Vec<usize> {
        self.spans.iter().map(|&(_, l)| l).collect()
    }
}

/// Aligns the tokens of `ts` with the whitespace-delimited words of its
/// source. Fails when the ids do not spell out the source.
pub fn segment_words(spec: &TokenizerSpec, ts: &TokenSeq) -> Result<WordSegmentation> {
    let err = |msg: String| Err(FuseError::Segmentation(msg));
    if let Some(&id) = ts.ids.iter().find(|&&id| id >= spec.vocab_size()) {
        return err(format!("id {id} outside vocab"));
    }
    let mut spans = Vec::new();
    let mut cursor = 0;
    for (w, word) in ts.source.split_whitespace().enumerate() {
        let start = cursor;
        let mut built = String::new();
        while built.len() < word.len() {
            let Some(&id) = ts.ids.get(cursor) else {
                return err(format!("ran out of tokens inside word {w} ({word:?})"));
            };
            let at_start = cursor == start;
            if spec.space_marker() {
                if spec.is_marked(id) && !at_start {
                    return err(format!(
                        "marker token at {cursor} falls inside word {word:?}"
                    ));
                }
                if at_start && w > 0 && !spec.is_marked(id) {
                    return err(format!(
                        "word {w} ({word:?}) does not start with a marker token"
                    ));
                }
            }
            built.push_str(&spec.token_text(id));
            cursor += 1;
        }
        if built != word {
            return err(format!(
                "tokens spell {built:?} where the source has {word:?}"
            ));
        }
        spans.push((start, cursor - start));
    }
    if cursor != ts.ids.len() {
        return err(format!(
            "{} tokens left over after the last word",
            ts.ids.len() - cursor
        ));
    }
    Ok(WordSegmentation { spans })
}

/// One-hot encoding `X` with `E = X V`.
pub fn one_hot(ts: &TokenSeq, vocab_size: usize) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(ts.ids.len(), vocab_size);
    for (row, &id) in ts.ids.iter().enumerate() {
        if id >= vocab_size {
            return Err(FuseError::InvalidArgument(format!(
                "token id {id} at position {row} outside vocab of {vocab_size}"
            )));
        }
        x[(row, id)] = 1.0;
    }
    Ok(x)
}
