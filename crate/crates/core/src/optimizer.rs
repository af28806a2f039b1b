//! Discrete prompt search over the primary model's tokens.
//!
//! Each step edits one position per beam: candidates are ranked by the
//! primary language model's log-probabilities plus a first-order estimate of
//! the loss change from the (adapted) gradient, the best `top_k` are scored by
//! their true loss, and the `beam_width` best sequences survive.

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use rayon::prelude::*;

use crate::adapter::{backward, SharedMap};
use crate::error::{FuseError, Result};
use crate::models::SyntheticModel;
use crate::tokenization::{detokenize, segment_words, tokenize, TokenSeq};
use crate::vocab::{stream_rng, AdapterMap};

/// Steps without improvement after which the search stops.
pub const PATIENCE: usize = 3;

/// How a term's gradient reaches the primary model.
#[derive(Clone, Debug)]
pub enum Route {
    /// The term is defined on the primary model itself.
    Primary,
    /// Same tokenizer: the matrix `V_i⁺ V_j`.
    Shared(SharedMap),
    /// Different tokenizers: the fitted word-wise tensor maps.
    Tensor(AdapterMap),
}

#[derive(Clone, Debug)]
pub struct Term {
    /// Index into [`Objective::models`].
    pub model: usize,
    /// Index into that model's heads.
    pub head: usize,
    pub weight: f64,
    pub route: Route,
}

/// `Σ α · L(model, head)` over terms, each evaluated on the text of the
/// primary token sequence. `models[0]` is the primary model.
#[derive(Clone, Debug)]
pub struct Objective {
    pub models: Vec<SyntheticModel>,
    pub terms: Vec<Term>,
    pub prefix: String,
}

/// Loss and gradient with respect to the primary embeddings.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: DMatrix<f64>,
}

impl Objective {
    pub fn new(
        models: Vec<SyntheticModel>,
        terms: Vec<Term>,
        prefix: impl Into<String>,
    ) -> Result<Self> {
        let primary = models.first().ok_or_else(|| {
            FuseError::InvalidArgument("an objective needs a primary model".into())
        })?;
        for (n, t) in terms.iter().enumerate() {
            let bad = |msg: String| Err(FuseError::InvalidArgument(format!("term {n}: {msg}")));
            let Some(model) = models.get(t.model) else {
                return bad(format!("no model {}", t.model));
            };
            if t.head >= model.heads.len() {
                return bad(format!("model {:?} has no head {}", model.id(), t.head));
            }
            if !t.weight.is_finite() {
                return bad(format!("weight {} is not finite", t.weight));
            }
            match (&t.route, t.model == 0) {
                (Route::Primary, true) => {}
                (Route::Primary, false) | (_, true) => {
                    return bad("only terms on the primary model use the primary route".into())
                }
                (Route::Shared(map), false) => {
                    if model.tokenizer != primary.tokenizer {
                        return bad("a shared map needs both models to use one tokenizer".into());
                    }
                    if map.m.shape() != (primary.dim(), model.dim()) {
                        return bad(format!("shared map is {:?}", map.m.shape()));
                    }
                }
                (Route::Tensor(amap), false) => {
                    if (amap.d_i, amap.d_j) != (primary.dim(), model.dim()) {
                        return bad(format!(
                            "adapter maps {}×{} but models are {}×{}",
                            amap.d_i,
                            amap.d_j,
                            primary.dim(),
                            model.dim()
                        ));
                    }
                }
            }
        }
        Ok(Objective {
            models,
            terms,
            prefix: prefix.into(),
        })
    }

    pub fn primary(&self) -> &SyntheticModel {
        &self.models[0]
    }

    /// Canonical primary ids of `text`.
    pub fn canonical(&self, text: &str) -> Vec<usize> {
        tokenize(&self.primary().tokenizer, text).ids
    }

    pub fn prefix_ids(&self) -> Vec<usize> {
        self.canonical(&self.prefix)
    }

    fn sequence(&self, ids: &[usize]) -> Result<TokenSeq> {
        TokenSeq::from_ids(&self.primary().tokenizer, ids.to_vec())
    }

    /// Weighted loss of the primary sequence `ids`; zero-weight terms are skipped.
    pub fn total_loss(&self, ids: &[usize]) -> Result<f64> {
        let ts = self.sequence(ids)?;
        let mut total = 0.0;
        for t in self.terms.iter().filter(|t| t.weight != 0.0) {
            let model = &self.models[t.model];
            let ids_t = match t.route {
                Route::Primary => ts.ids.clone(),
                _ => tokenize(&model.tokenizer, &ts.source).ids,
            };
            let e = model.vocab.embed(&ids_t)?;
            total += t.weight * model.heads[t.head].loss(&e, &ids_t)?;
        }
        Ok(total)
    }

    /// Loss together with the gradient over the primary embedding rows,
    /// each foreign term pulled back through its route.
    pub fn evaluate(&self, ids: &[usize]) -> Result<Evaluation> {
        let ts = self.sequence(ids)?;
        let primary = self.primary();
        let mut loss = 0.0;
        let mut grad = DMatrix::zeros(ids.len(), primary.dim());
        for t in self.terms.iter().filter(|t| t.weight != 0.0) {
            let model = &self.models[t.model];
            let head = &model.heads[t.head];
            let ts_t = match t.route {
                Route::Primary => ts.clone(),
                _ => tokenize(&model.tokenizer, &ts.source),
            };
            let e = model.vocab.embed(&ts_t.ids)?;
            loss += t.weight * head.loss(&e, &ts_t.ids)?;
            let g = head.grad(&e, &ts_t.ids)?;
            let g_i = match &t.route {
                Route::Primary => g,
                Route::Shared(map) => {
                    if ts_t.len() != ts.len() {
                        return Err(FuseError::dim(format!(
                            "shared tokenizer produced {} tokens for {} primary ids; ids are not canonical",
                            ts_t.len(),
                            ts.len()
                        )));
                    }
                    map.backward(&g)?
                }
                Route::Tensor(amap) => {
                    let seg_j = segment_words(&model.tokenizer, &ts_t)?;
                    let seg_i = segment_words(&primary.tokenizer, &ts)?;
                    backward(&g, &seg_j, &seg_i, amap)?
                }
            };
            grad += g_i * t.weight;
        }
        Ok(Evaluation { loss, grad })
    }

    /// Next-token log-probabilities at `position` from the primary language
    /// model head, conditioned on the previous token. Zero without such a head
    /// or at position 0.
    fn logprobs(&self, ids: &[usize], position: usize) -> RowDVector<f64> {
        let primary = self.primary();
        let vocab = primary.tokenizer.vocab_size();
        match (primary.lm_head(), position) {
            (Some(head), 1..) => head
                .next_token_logprobs(&primary.vocab.row(ids[position - 1]))
                .expect("lm head yields log-probabilities"),
            _ => RowDVector::zeros(vocab),
        }
    }
}

/// Free function form of [`Objective::total_loss`].
pub fn total_loss(obj: &Objective, ids: &[usize]) -> Result<f64> {
    obj.total_loss(ids)
}

/// Estimated improvement of putting each vocabulary token at `position`:
/// `log p(v) − ⟨V[v] − V[ids[position]], ∇E[position]⟩`.
pub fn score_candidates(obj: &Objective, ids: &[usize], position: usize) -> Result<Vec<f64>> {
    let eval = obj.evaluate(ids)?;
    score_with(obj, ids, position, &eval.grad)
}

fn score_with(
    obj: &Objective,
    ids: &[usize],
    position: usize,
    grad: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if position >= ids.len() {
        return Err(FuseError::InvalidArgument(format!(
            "position {position} outside a sequence of {}",
            ids.len()
        )));
    }
    let v = &obj.primary().vocab.v;
    let g = grad.row(position);
    let base = v.row(ids[position]).dot(&g);
    let logp = obj.logprobs(ids, position);
    Ok((0..v.nrows())
        .map(|id| logp[id] - (v.row(id).dot(&g) - base))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub top_k: usize,
    pub beam_width: usize,
    pub max_steps: usize,
    /// Longest prompt the search may grow, prefix excluded.
    pub max_len: usize,
    /// Random tokens the prompt starts with.
    pub init_tokens: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            top_k: 64,
            beam_width: 5,
            max_steps: 32,
            max_len: 16,
            init_tokens: 0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.top_k < self.beam_width {
            return Err(FuseError::InvalidArgument(format!(
                "need top_k ≥ beam_width ≥ 1, have top_k={} beam_width={}",
                self.top_k, self.beam_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    /// Canonical primary ids, prefix included.
    pub ids: Vec<usize>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    /// Sorted by loss, then ids.
    pub beams: Vec<Beam>,
    pub step: usize,
    pub stagnant: usize,
    pub trace: Vec<TraceEntry>,
}

impl SearchState {
    pub fn best(&self) -> &Beam {
        &self.beams[0]
    }

    pub fn converged(&self) -> bool {
        self.stagnant >= PATIENCE
    }
}

fn rank(pool: &mut Vec<Beam>, width: usize) {
    pool.sort_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.ids.cmp(&b.ids)));
    pool.dedup_by(|a, b| a.ids == b.ids);
    pool.truncate(width);
}

fn trace_entry(obj: &Objective, step: usize, beam: &Beam) -> Result<TraceEntry> {
    Ok(TraceEntry {
        step,
        loss: beam.loss,
        text: detokenize(&obj.primary().tokenizer, &beam.ids)?,
    })
}

/// Starting state: the prefix followed by `init_tokens` seeded random tokens.
pub fn initial_state(obj: &Objective, cfg: &SearchConfig) -> Result<SearchState> {
    cfg.validate()?;
    let spec = &obj.primary().tokenizer;
    let known: Vec<usize> = (0..spec.vocab_size())
        .filter(|&id| !spec.is_unknown(id))
        .collect();
    let mut ids = obj.prefix_ids();
    let mut rng = stream_rng(cfg.seed, 0x494e_4954);
    for _ in 0..cfg.init_tokens.min(cfg.max_len) {
        ids.push(known[rng.random_range(0..known.len())]);
    }
    let ids = obj.canonical(&detokenize(spec, &ids)?);
    let beam = Beam {
        loss: obj.total_loss(&ids)?,
        ids,
    };
    Ok(SearchState {
        trace: vec![trace_entry(obj, 0, &beam)?],
        beams: vec![beam],
        step: 0,
        stagnant: 0,
    })
}

/// Edit slot for a beam at a step: round-robin over the prompt positions plus
/// an append slot (dropped once the prompt is `max_len` long). Returned as an
/// index into the full sequence and whether it appends.
pub fn edit_position(prefix_len: usize, len: usize, step: usize, max_len: usize) -> (usize, bool) {
    let prompt = len - prefix_len;
    let slots = if prompt < max_len { prompt + 1 } else { prompt };
    if slots == 0 {
        return (prefix_len, true);
    }
    let p = step % slots;
    (prefix_len + p, p == prompt)
}

/// Canonical ids of a candidate edit, or `None` if it disturbs the prefix.
pub fn apply_edit(
    obj: &Objective,
    ids: &[usize],
    position: usize,
    token: usize,
) -> Result<Option<Vec<usize>>> {
    let mut edited = ids.to_vec();
    if position == edited.len() {
        edited.push(token);
    } else {
        edited[position] = token;
    }
    let canon = obj.canonical(&detokenize(&obj.primary().tokenizer, &edited)?);
    let prefix = obj.prefix_ids();
    Ok(canon.starts_with(&prefix).then_some(canon))
}

/// Candidate successors of one beam: the `top_k` best-scored tokens at the
/// scheduled position, each as a canonical id sequence.
fn successors(
    obj: &Objective,
    beam: &Beam,
    step: usize,
    cfg: &SearchConfig,
) -> Result<Vec<Vec<usize>>> {
    let spec = &obj.primary().tokenizer;
    let prefix_len = obj.prefix_ids().len();
    let (position, append) = edit_position(prefix_len, beam.ids.len(), step, cfg.max_len);
    let mut ids = beam.ids.clone();
    if append {
        // Score replacements of a placeholder: the most likely next token, or
        // the first known token without a language model.
        let logp = obj.logprobs(&ids, position.min(ids.len()));
        let placeholder = (0..spec.vocab_size())
            .filter(|&id| !spec.is_unknown(id))
            .max_by(|&a, &b| logp[a].total_cmp(&logp[b]).then_with(|| b.cmp(&a)))
            .expect("vocab has a known token");
        ids.push(placeholder);
    }
    let eval = obj.evaluate(&ids)?;
    let scores = score_with(obj, &ids, position, &eval.grad)?;
    let current = ids[position];
    let mut order: Vec<usize> = (0..spec.vocab_size())
        .filter(|&id| !spec.is_unknown(id) && (append || id != current))
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b)));
    order.truncate(cfg.top_k);
    let mut out = Vec::with_capacity(order.len());
    for token in order {
        if let Some(c) = apply_edit(obj, &ids, position, token)? {
            out.push(c);
        }
    }
    Ok(out)
}

/// One search step. The current beams compete with their successors, so the
/// best loss never increases.
pub fn step(obj: &Objective, state: &SearchState, cfg: &SearchConfig) -> Result<SearchState> {
    cfg.validate()?;
    let mut candidates = Vec::new();
    for beam in &state.beams {
        candidates.extend(successors(obj, beam, state.step, cfg)?);
    }
    candidates.sort();
    candidates.dedup();
    let mut pool: Vec<Beam> = candidates
        .into_par_iter()
        .map(|ids| {
            Ok(Beam {
                loss: obj.total_loss(&ids)?,
                ids,
            })
        })
        .collect::<Result<_>>()?;
    pool.extend(state.beams.iter().cloned());
    rank(&mut pool, cfg.beam_width);
    let improved = pool[0].loss < state.best().loss;
    let step = state.step + 1;
    let mut trace = state.trace.clone();
    trace.push(trace_entry(obj, step, &pool[0])?);
    Ok(SearchState {
        beams: pool,
        step,
        stagnant: if improved { 0 } else { state.stagnant + 1 },
        trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: TokenSeq,
    pub loss: f64,
    pub steps: usize,
    pub trace: Vec<TraceEntry>,
}

/// Runs [`step`] until `max_steps` or until the best loss has not improved
/// for [`PATIENCE`] consecutive steps.
pub fn optimize(obj: &Objective, cfg: &SearchConfig) -> Result<SearchResult> {
    let mut state = initial_state(obj, cfg)?;
    while state.step < cfg.max_steps && !state.converged() {
        state = step(obj, &state, cfg)?;
        log::debug!("step {}: best loss {}", state.step, state.best().loss);
    }
    let best = state.best();
    Ok(SearchResult {
        best: TokenSeq::from_ids(&obj.primary().tokenizer, best.ids.clone())?,
        loss: best.loss,
        steps: state.step,
        trace: state.trace,
    })
}
