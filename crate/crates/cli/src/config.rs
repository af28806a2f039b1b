//! The `fuse optimize` run file: flat `key = value` lines under section
//! headers. `[term]` may repeat; every other section appears at most once.
//!
//! ```text
//! [search]
//! top_k = 64
//! seed = 0
//!
//! [objective]
//! primary = primary.fusemodel
//! prefix = "a picture of"
//!
//! [term]
//! model = similarity.fusemodel
//! head = 0
//! weight = 1.0
//! adapter = similarity.fuseadpt   # or `shared`; omitted for the primary model
//!
//! [output]
//! trace = trace.tsv
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fuse_core::adapter::SharedMap;
use fuse_core::models::SyntheticModel;
use fuse_core::optimizer::{Objective, Route, SearchConfig, Term};
use fuse_core::vocab::AdapterMap;

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterSpec {
    /// The term is on the primary model.
    None,
    Shared,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermSpec {
    pub model: PathBuf,
    pub head: usize,
    pub weight: f64,
    pub adapter: AdapterSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub primary: PathBuf,
    pub prefix: String,
    pub terms: Vec<TermSpec>,
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Search,
    Objective,
    Term,
    Output,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("`{key}` expects a number, got {value:?}"))
}

fn unquote(value: &str) -> &str {
    value
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .unwrap_or(value)
}

/// Drops a trailing `# comment` unless the `#` sits inside quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

#[derive(Default)]
struct PartialTerm {
    model: Option<PathBuf>,
    head: Option<usize>,
    weight: Option<f64>,
    adapter: Option<AdapterSpec>,
}

impl PartialTerm {
    fn finish(self, n: usize) -> Result<TermSpec> {
        Ok(TermSpec {
            model: self
                .model
                .ok_or_else(|| anyhow!("term {n} has no `model`"))?,
            head: self.head.unwrap_or(0),
            weight: self.weight.unwrap_or(1.0),
            adapter: self.adapter.unwrap_or(AdapterSpec::None),
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut section = Section::None;
        let mut seen = Vec::new();
        let mut search = SearchConfig::default();
        let (mut primary, mut prefix, mut trace) = (None, String::new(), None);
        let mut terms = Vec::new();
        let mut current: Option<PartialTerm> = None;
        let mut keys: Vec<String> = Vec::new();

        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            let at = || format!("line {}", n + 1);
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim() {
                    "search" => Section::Search,
                    "objective" => Section::Objective,
                    "term" => Section::Term,
                    "output" => Section::Output,
                    other => bail!("{}: unknown section [{other}]", at()),
                };
                if section != Section::Term && seen.contains(&name.to_string()) {
                    bail!("{}: section [{name}] repeated", at());
                }
                seen.push(name.to_string());
                keys.clear();
                if let Some(t) = current.take() {
                    terms.push(t.finish(terms.len())?);
                }
                if section == Section::Term {
                    current = Some(PartialTerm::default());
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), unquote(v.trim())))
                .ok_or_else(|| anyhow!("{}: expected `key = value`", at()))?;
            if keys.iter().any(|k| k == key) {
                bail!("{}: `{key}` given twice", at());
            }
            keys.push(key.to_string());
            let path = |v: &str| base.join(v);
            match (section, key) {
                (Section::Search, "top_k") => search.top_k = parse_num(key, value)?,
                (Section::Search, "beam_width") => search.beam_width = parse_num(key, value)?,
                (Section::Search, "max_steps") => search.max_steps = parse_num(key, value)?,
                (Section::Search, "max_len") => search.max_len = parse_num(key, value)?,
                (Section::Search, "init_tokens") => search.init_tokens = parse_num(key, value)?,
                (Section::Search, "seed") => search.seed = parse_num(key, value)?,
                (Section::Objective, "primary") => primary = Some(path(value)),
                (Section::Objective, "prefix") => prefix = value.to_string(),
                (Section::Output, "trace") => trace = Some(path(value)),
                (Section::Term, _) => {
                    let t = current.as_mut().expect("inside a term section");
                    match key {
                        "model" => t.model = Some(path(value)),
                        "head" => t.head = Some(parse_num(key, value)?),
                        "weight" => t.weight = Some(parse_num(key, value)?),
                        "adapter" => {
                            t.adapter = Some(match value {
                                "shared" => AdapterSpec::Shared,
                                file => AdapterSpec::File(path(file)),
                            })
                        }
                        _ => bail!("{}: unknown key `{key}` in [term]", at()),
                    }
                }
                (Section::None, _) => bail!("{}: `{key}` outside any section", at()),
                _ => bail!("{}: unknown key `{key}`", at()),
            }
        }
        if let Some(t) = current.take() {
            terms.push(t.finish(terms.len())?);
        }
        let primary = primary.ok_or_else(|| anyhow!("[objective] needs `primary`"))?;
        if terms.is_empty() {
            bail!("the objective has no [term] sections");
        }
        search.validate()?;
        Ok(RunConfig {
            search,
            primary,
            prefix,
            terms,
            trace,
        })
    }

    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }

    /// Every setting after defaults and overrides, one `key = value` per line.
    pub fn resolved(&self) -> Vec<String> {
        let s = &self.search;
        let mut out = vec![
            format!("search.top_k = {}", s.top_k),
            format!("search.beam_width = {}", s.beam_width),
            format!("search.max_steps = {}", s.max_steps),
            format!("search.max_len = {}", s.max_len),
            format!("search.init_tokens = {}", s.init_tokens),
            format!("search.seed = {}", s.seed),
            format!("objective.primary = {}", self.primary.display()),
            format!("objective.prefix = {:?}", self.prefix),
        ];
        for (n, t) in self.terms.iter().enumerate() {
            out.push(format!("term.{n}.model = {}", t.model.display()));
            out.push(format!("term.{n}.head = {}", t.head));
            out.push(format!("term.{n}.weight = {}", t.weight));
            out.push(format!(
                "term.{n}.adapter = {}",
                match &t.adapter {
                    AdapterSpec::None => "none".to_string(),
                    AdapterSpec::Shared => "shared".to_string(),
                    AdapterSpec::File(p) => p.display().to_string(),
                }
            ));
        }
        if let Some(t) = &self.trace {
            out.push(format!("output.trace = {}", t.display()));
        }
        out
    }

    /// Loads every bundle and adapter and assembles the objective. The primary
    /// model is loaded once even if several terms use it.
    pub fn objective(&self) -> Result<Objective> {
        let load = |p: &Path| {
            SyntheticModel::load(p).with_context(|| format!("loading model {}", p.display()))
        };
        let mut paths = vec![self.primary.clone()];
        let mut models = vec![load(&self.primary)?];
        let mut terms = Vec::new();
        for (n, spec) in self.terms.iter().enumerate() {
            let index = match paths.iter().position(|p| *p == spec.model) {
                Some(i) => i,
                None => {
                    models.push(load(&spec.model)?);
                    paths.push(spec.model.clone());
                    paths.len() - 1
                }
            };
            let route = match (&spec.adapter, index) {
                (AdapterSpec::None, 0) => Route::Primary,
                (AdapterSpec::None, _) => bail!("term {n}: a non-primary model needs an `adapter`"),
                (_, 0) => bail!("term {n}: the primary model takes no adapter"),
                (AdapterSpec::Shared, _) => {
                    Route::Shared(SharedMap::new(&models[0].vocab, &models[index].vocab)?)
                }
                (AdapterSpec::File(p), _) => {
                    let amap = AdapterMap::read_file(p)
                        .with_context(|| format!("loading adapter {}", p.display()))?;
                    let (src, dst) = (models[0].id(), models[index].id());
                    if amap.source_id != src || amap.target_id != dst {
                        bail!(
                            "term {n}: adapter maps {:?} → {:?}, expected {src:?} → {dst:?}",
                            amap.source_id,
                            amap.target_id
                        );
                    }
                    Route::Tensor(amap)
                }
            };
            terms.push(Term {
                model: index,
                head: spec.head,
                weight: spec.weight,
                route,
            });
        }
        Ok(Objective::new(models, terms, self.prefix.clone())?)
    }
}
