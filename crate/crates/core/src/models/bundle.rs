//! Model bundles: a plain-text manifest naming the tokenizer file, the vocab
//! tensor and each head's parameter tensors, all relative to the manifest.
//!
//! ```text
//! id = tiny
//! tokenizer = tiny.tok
//! vocab = tiny.vocab.fus3
//! head = class_xent w=tiny.h0.w.fus3 target=1
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use super::{HeadKind, LossHead, SyntheticModel};
use crate::error::{FuseError, Result};
use crate::tokenization::TokenizerSpec;
use crate::tproduct::Tensor3;
use crate::vocab::VocabMatrix;

pub const MANIFEST_EXTENSION: &str = "fusemodel";

fn bad(detail: impl Into<String>) -> FuseError {
    FuseError::format("model manifest", detail.into())
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, Tensor3::from_matrix(m)?.to_bytes())?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let t = Tensor3::from_bytes(&std::fs::read(path)?)?;
    if t.tubes() != 1 {
        return Err(bad(format!("{} is not a matrix", path.display())));
    }
    Ok(t.slice(0))
}

/// The named parameter tensors of a head, in a fixed order.
fn head_params(head: &LossHead) -> Vec<(&'static str, DMatrix<f64>)> {
    match head {
        LossHead::TargetQuadratic { target } => vec![("target", target.clone())],
        LossHead::BilinearSimilarity { anchor, w } => vec![
            (
                "anchor",
                DMatrix::from_column_slice(anchor.len(), 1, anchor.as_slice()),
            ),
            ("w", w.clone()),
        ],
        LossHead::LmXent { logits } => vec![("logits", logits.clone())],
        LossHead::ClassXent { w, .. } => vec![("w", w.clone())],
    }
}

impl SyntheticModel {
    /// Writes the bundle as `<dir>/<stem>.fusemodel` plus its data files and
    /// returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut manifest = format!("id = {}\n", self.id());
        let tok = format!("{stem}.tok");
        self.tokenizer.write_file(dir.join(&tok))?;
        let _ = writeln!(manifest, "tokenizer = {tok}");
        let vocab = format!("{stem}.vocab.fus3");
        std::fs::write(dir.join(&vocab), self.vocab.to_tensor().to_bytes())?;
        let _ = writeln!(manifest, "vocab = {vocab}");
        for (h, head) in self.heads.iter().enumerate() {
            let _ = write!(manifest, "head = {}", head.kind().as_str());
            for (name, m) in head_params(head) {
                let file = format!("{stem}.h{h}.{name}.fus3");
                write_matrix(&dir.join(&file), &m)?;
                let _ = write!(manifest, " {name}={file}");
            }
            if let LossHead::ClassXent { target, .. } = head {
                let _ = write!(manifest, " target={target}");
            }
            manifest.push('\n');
        }
        let path = dir.join(format!("{stem}.{MANIFEST_EXTENSION}"));
        std::fs::write(&path, manifest)?;
        Ok(path)
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<SyntheticModel> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(manifest)?;
        let (mut id, mut tokenizer, mut vocab) = (None, None, None);
        let mut heads = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", n + 1)))?;
            match key {
                "id" => id = Some(value.to_string()),
                "tokenizer" => tokenizer = Some(TokenizerSpec::read_file(dir.join(value))?),
                "vocab" => vocab = Some(read_matrix(&dir.join(value))?),
                "head" => heads.push(parse_head(dir, value)?),
                other => return Err(bad(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        let id = id.ok_or_else(|| bad("missing `id`"))?;
        let tokenizer = tokenizer.ok_or_else(|| bad("missing `tokenizer`"))?;
        let vocab = VocabMatrix::new(id, vocab.ok_or_else(|| bad("missing `vocab`"))?)?;
        SyntheticModel::new(tokenizer, vocab, heads)
    }
}

fn parse_head(dir: &Path, spec: &str) -> Result<LossHead> {
    let mut parts = spec.split_whitespace();
    let kind_name = parts.next().ok_or_else(|| bad("empty head line"))?;
    let kind =
        HeadKind::parse(kind_name).ok_or_else(|| bad(format!("unknown head {kind_name:?}")))?;
    let mut fields = BTreeMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("head field {part:?} lacks `=`")))?;
        fields.insert(k, v);
    }
    let mut take = |name: &str| {
        fields
            .remove(name)
            .ok_or_else(|| bad(format!("{kind_name} head needs `{name}=`")))
    };
    let head = match kind {
        HeadKind::TargetQuadratic => LossHead::TargetQuadratic {
            target: read_matrix(&dir.join(take("target")?))?,
        },
        HeadKind::BilinearSimilarity => {
            let a = read_matrix(&dir.join(take("anchor")?))?;
            LossHead::BilinearSimilarity {
                anchor: DVector::from_column_slice(a.as_slice()),
                w: read_matrix(&dir.join(take("w")?))?,
            }
        }
        HeadKind::LmXent => LossHead::LmXent {
            logits: read_matrix(&dir.join(take("logits")?))?,
        },
        HeadKind::ClassXent => {
            let w = read_matrix(&dir.join(take("w")?))?;
            let target = take("target")?;
            LossHead::ClassXent {
                w,
                target: target
                    .parse()
                    .map_err(|_| bad(format!("bad target class {target:?}")))?,
            }
        }
    };
    if let Some(extra) = fields.keys().next() {
        return Err(bad(format!("unknown {kind_name} field {extra:?}")));
    }
    Ok(head)
}
