//! Plain-text tokenizer files.
//!
//! ```text
//! FUSETOK v1 bpe unk=0 marker=1
//! <unk>
//! a
//! …
//!
//! a b
//! ```
//!
//! Header, one escaped token per line, a blank line, then one merge pair per
//! line (the two escaped halves separated by a single space).

use std::fmt::Write as _;
use std::path::Path;

use super::{TokenizerKind, TokenizerSpec};
use crate::error::{FuseError, Result};

pub const HEADER: &str = "FUSETOK v1";

fn escape(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let bad = || FuseError::format("tokenizer", format!("bad escape in {s:?}"));
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('u') => {
                if chars.next() != Some('{') {
                    return Err(bad());
                }
                let hex: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let code = u32::from_str_radix(&hex, 16).map_err(|_| bad())?;
                out.push(char::from_u32(code).ok_or_else(bad)?);
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

impl TokenizerSpec {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER} {} unk={} marker={}\n",
            self.kind.as_str(),
            self.unknown_id,
            u8::from(self.space_marker)
        );
        for tok in &self.vocab {
            out.push_str(&escape(tok));
            out.push('\n');
        }
        out.push('\n');
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{} {}", escape(a), escape(b));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TokenizerSpec> {
        let bad = |detail: String| FuseError::format("tokenizer", detail);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| bad(format!("missing {HEADER:?} header")))?;
        let mut fields = rest.split_whitespace();
        let kind = match fields.next() {
            Some("char") => TokenizerKind::Char,
            Some("bpe") => TokenizerKind::Bpe,
            other => return Err(bad(format!("unknown tokenizer kind {other:?}"))),
        };
        let mut unknown_id = 0;
        let mut space_marker = false;
        for field in fields {
            match field.split_once('=') {
                Some(("unk", v)) => {
                    unknown_id = v.parse().map_err(|_| bad(format!("bad unk field {v:?}")))?
                }
                Some(("marker", "0")) => space_marker = false,
                Some(("marker", "1")) => space_marker = true,
                _ => return Err(bad(format!("unknown header field {field:?}"))),
            }
        }
        let mut vocab = Vec::new();
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            vocab.push(unescape(line)?);
        }
        let mut merges = Vec::new();
        for line in lines {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("merge line {line:?} lacks a separator")))?;
            merges.push((unescape(a)?, unescape(b)?));
        }
        TokenizerSpec::from_parts(kind, vocab, merges, unknown_id, space_marker)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<TokenizerSpec> {
        TokenizerSpec::from_text(&std::fs::read_to_string(path)?)
    }
}
