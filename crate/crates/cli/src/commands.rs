use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fuse_core::adapter::{backward_with, ProductOrder, SharedMap};
use fuse_core::models::{SyntheticModel, MANIFEST_EXTENSION};
use fuse_core::optimizer::optimize;
use fuse_core::tokenization::{
    segment_words, tokenize, train_bpe_with, TokenizerSpec, TOKENIZER_HEADER,
};
use fuse_core::toy::demo_setup;
use fuse_core::tproduct::{selfcheck, TENSOR_MAGIC};
use fuse_core::vocab::{fit_adapter, AdapterMap, Embedder, FitConfig, VocabMatrix, ADAPTER_MAGIC};
use fuse_core::Tensor3;
use nalgebra::DMatrix;

use crate::checks::{self, PairCheck, EXACT_TOLERANCE, MIN_SIGN_AGREEMENT};
use crate::config::RunConfig;
use crate::{
    effective_seed, AlgebraArgs, Cli, Command, DemoArgs, FitArgs, GradcheckArgs, InspectArgs,
    OptimizeArgs, OrderArg, Status, TokCommand, TokTrainArgs,
};

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Tok(TokCommand::Train(a)) => tok_train(a),
        Command::Fit(a) => fit(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Optimize(a) => run_optimize(a),
        Command::Algebra(a) => algebra(a),
        Command::Inspect(a) => inspect(a),
        Command::Demo(a) => demo(a),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))
}

fn read_tokenizer(path: &Path) -> Result<TokenizerSpec> {
    TokenizerSpec::read_file(path).with_context(|| format!("reading tokenizer {}", path.display()))
}

/// File name up to the first dot: `primary.vocab.fus3` → `primary`.
fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy())
        .unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn tok_train(a: TokTrainArgs) -> Result<Status> {
    let corpus = read_text(&a.corpus, "corpus")?;
    let spec = if a.char {
        let mut alphabet: Vec<char> = corpus.chars().filter(|c| !c.is_whitespace()).collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        TokenizerSpec::char_level(alphabet, !a.no_marker)?
    } else {
        train_bpe_with(&corpus, a.size, !a.no_marker)?
    };
    spec.write_file(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {}: {} tokenizer, {} tokens, {} merges",
        a.out.display(),
        spec.kind().as_str(),
        spec.vocab_size(),
        spec.merges().len()
    );
    Ok(Status::Ok)
}

fn read_vocab(path: &Path, id: Option<String>) -> Result<VocabMatrix> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = Tensor3::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(VocabMatrix::from_tensor(
        id.unwrap_or_else(|| stem(path)),
        &t,
    )?)
}

fn fit(a: FitArgs) -> Result<Status> {
    let corpus = read_text(&a.corpus, "corpus")?;
    let (ti, tj) = (read_tokenizer(&a.tok_i)?, read_tokenizer(&a.tok_j)?);
    let vi = read_vocab(&a.emb_i, a.id_i.clone())?;
    let vj = read_vocab(&a.emb_j, a.id_j.clone())?;
    let (ei, ej) = (Embedder::new(&ti, &vi)?, Embedder::new(&tj, &vj)?);
    let cfg = FitConfig {
        l_max: a.lmax,
        sample_cap: a.sample,
        seed: effective_seed(a.seed)?,
    };
    println!("# corpus = {}", a.corpus.display());
    println!("# tok_i = {}", a.tok_i.display());
    println!("# tok_j = {}", a.tok_j.display());
    println!("# emb_i = {}", a.emb_i.display());
    println!("# emb_j = {}", a.emb_j.display());
    println!("# lmax = {}", cfg.l_max);
    println!("# sample = {}", cfg.sample_cap);
    println!("# seed = {}", cfg.seed);
    let start = std::time::Instant::now();
    let amap = fit_adapter(&corpus, &ei, &ej, &cfg)?;
    log::info!("fit in {:.2?}", start.elapsed());
    amap.write_file(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", describe_adapter(&amap));
    println!("wrote {}", a.out.display());
    Ok(Status::Ok)
}

fn describe_adapter(amap: &AdapterMap) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "adapter {} -> {}", amap.source_id, amap.target_id);
    let _ = writeln!(
        s,
        "d_i = {}, d_j = {}, l_max = {}",
        amap.d_i,
        amap.d_j,
        amap.l_max()
    );
    let _ = writeln!(
        s,
        "fallback seed = {}, scale = {}",
        amap.fallback_seed, amap.fallback_scale
    );
    for (n, (map, words)) in amap.maps.iter().zip(&amap.bucket_words).enumerate() {
        let note = if *words == 0 {
            " (random fallback)"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "bucket l={}: {} words, {} tubes, |T| = {:.6}{note}",
            n + 1,
            words,
            map.tubes(),
            map.frobenius_norm()
        );
    }
    s
}

fn order_of(o: OrderArg) -> ProductOrder {
    match o {
        OrderArg::Transposed => ProductOrder::Transposed,
        OrderArg::Literal => ProductOrder::Literal,
    }
}

fn load_model(path: &Path) -> Result<SyntheticModel> {
    SyntheticModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn per_head_summary(checks: &[PairCheck], label: &str) {
    let mut by_head: BTreeMap<usize, Vec<PairCheck>> = BTreeMap::new();
    for c in checks {
        by_head.entry(c.head).or_default().push(c.clone());
    }
    for (h, cs) in &by_head {
        println!(
            "head {h} ({}): mean {label} {:.6e}, max {:.6e}, {} prompts",
            cs[0].kind.as_str(),
            checks::mean(cs),
            checks::max(cs),
            cs.len()
        );
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<Status> {
    let seed = effective_seed(a.seed)?;
    let order = order_of(a.order);
    let (mi, mj, prompts, amap) = if a.toy {
        let (mi, mj) = checks::exact_toy(a.dim_i, a.dim_j, seed)?;
        (mi, mj, checks::toy_prompts(a.prompts, seed), None)
    } else {
        let (Some(pi), Some(pj)) = (&a.model_i, &a.model_j) else {
            bail!("pass --toy, or --model-i and --model-j");
        };
        let corpus_path = a
            .corpus
            .as_ref()
            .context("--corpus is required with model bundles")?;
        let corpus = read_text(corpus_path, "corpus")?;
        let amap = match &a.adapter {
            Some(p) => Some(
                AdapterMap::read_file(p)
                    .with_context(|| format!("loading adapter {}", p.display()))?,
            ),
            None => None,
        };
        let prompts = checks::corpus_prompts(&corpus, a.prompts, a.words, seed)?;
        (load_model(pi)?, load_model(pj)?, prompts, amap)
    };
    println!("# models = {} -> {}", mi.id(), mj.id());
    println!("# seed = {seed}");
    println!("# prompts = {}", prompts.len());
    println!("# order = {:?}", a.order);

    if a.zero_grad {
        let mut worst = 0.0f64;
        for p in &prompts {
            let (ti, tj) = (tokenize(&mi.tokenizer, p), tokenize(&mj.tokenizer, p));
            let zero = DMatrix::zeros(tj.len(), mj.dim());
            let out = match &amap {
                Some(amap) => {
                    let (si, sj) = (
                        segment_words(&mi.tokenizer, &ti)?,
                        segment_words(&mj.tokenizer, &tj)?,
                    );
                    backward_with(&zero, &sj, &si, amap, order)?
                }
                None => SharedMap::new(&mi.vocab, &mj.vocab)?.backward(&zero)?,
            };
            worst = worst.max(out.amax());
        }
        let pass = worst == 0.0;
        println!(
            "{} zero gradient: max |output| = {worst:e}",
            if pass { "PASS" } else { "FAIL" }
        );
        return Ok(if pass {
            Status::Ok
        } else {
            Status::CheckFailed
        });
    }

    let pass = match &amap {
        None => {
            println!("regime: shared tokenizer");
            println!(
                "linearization residual max|V_i M - V_j| = {:.3e}",
                checks::shared_residual(&mi, &mj)?
            );
            let results = checks::shared_regime(&mi, &mj, &prompts, order)?;
            per_head_summary(&results, "relative error");
            let worst = checks::max(&results);
            let pass = worst <= EXACT_TOLERANCE;
            println!(
                "{} exact regime: max relative error {worst:.3e} (threshold {EXACT_TOLERANCE:e}, {} pairs)",
                if pass { "PASS" } else { "FAIL" },
                results.len()
            );
            pass
        }
        Some(amap) => {
            println!("regime: tensor adapter, l_max = {}", amap.l_max());
            let results = checks::tensor_regime(&mi, &mj, amap, &prompts, order)?;
            per_head_summary(&results, "sign agreement");
            let mean = checks::mean(&results);
            let pass = mean >= MIN_SIGN_AGREEMENT;
            println!(
                "{} approximate regime: mean sign agreement {mean:.4} (threshold {MIN_SIGN_AGREEMENT}, {} pairs)",
                if pass { "PASS" } else { "FAIL" },
                results.len()
            );
            pass
        }
    };
    Ok(if pass {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

fn run_optimize(a: OptimizeArgs) -> Result<Status> {
    let mut cfg = RunConfig::read(&a.config)?;
    cfg.search.seed = effective_seed(cfg.search.seed)?;
    let obj = cfg.objective()?;
    let res = optimize(&obj, &cfg.search)?;
    if let Some(path) = &cfg.trace {
        let mut out = String::new();
        for line in cfg.resolved() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("step\tloss\ttext\n");
        for t in &res.trace {
            let _ = writeln!(out, "{}\t{}\t{}", t.step, t.loss, t.text);
        }
        std::fs::write(path, out).with_context(|| format!("writing trace {}", path.display()))?;
    }
    log::info!("{} steps, loss {}", res.steps, res.loss);
    println!("{}", res.best.source);
    Ok(Status::Ok)
}

fn algebra(a: AlgebraArgs) -> Result<Status> {
    let first = effective_seed(a.seed)?;
    let results = selfcheck::run_seeds(first..first + a.seeds);
    let mut by_name: Vec<(&str, f64, f64, bool)> = Vec::new();
    for c in &results {
        match by_name.iter_mut().find(|e| e.0 == c.name) {
            Some(e) => {
                e.1 = e.1.max(c.error);
                e.3 &= c.passed();
            }
            None => by_name.push((c.name, c.error, c.tolerance, c.passed())),
        }
    }
    for (name, err, tol, pass) in &by_name {
        println!(
            "{} {name}: max error {err:.3e} (tolerance {tol:e})",
            if *pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|c| !c.passed()).count();
    println!(
        "{} checks over seeds {first}..{}: {failed} failed",
        results.len(),
        first + a.seeds
    );
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

fn inspect(a: InspectArgs) -> Result<Status> {
    let bytes = std::fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    if bytes.starts_with(ADAPTER_MAGIC) {
        print!("{}", describe_adapter(&AdapterMap::from_bytes(&bytes)?));
    } else if bytes.starts_with(TENSOR_MAGIC) {
        let t = Tensor3::from_bytes(&bytes)?;
        let (r, c, n) = t.shape();
        println!("tensor {r} × {c} × {n}");
        println!(
            "|T| = {:.6}, max |t| = {:.6}",
            t.frobenius_norm(),
            t.max_abs()
        );
    } else if bytes.starts_with(TOKENIZER_HEADER.as_bytes()) {
        let spec = TokenizerSpec::from_text(
            std::str::from_utf8(&bytes).context("tokenizer is not UTF-8")?,
        )?;
        println!("tokenizer ({})", spec.kind().as_str());
        println!(
            "{} tokens, {} merges",
            spec.vocab_size(),
            spec.merges().len()
        );
        println!(
            "unknown id = {}, word marker = {}",
            spec.unknown_id(),
            spec.space_marker()
        );
    } else if a.path.extension().is_some_and(|e| e == MANIFEST_EXTENSION) {
        let m = load_model(&a.path)?;
        println!("model {}", m.id());
        println!(
            "d = {}, {} tokens ({})",
            m.dim(),
            m.tokenizer.vocab_size(),
            m.tokenizer.kind().as_str()
        );
        for (h, head) in m.heads.iter().enumerate() {
            println!("head {h}: {}", head.kind().as_str());
        }
    } else {
        bail!("{}: not a recognized artifact", a.path.display());
    }
    Ok(Status::Ok)
}

const DEMO_CONFIG: &str = "\
# Fluent text for the primary model that the similarity model scores close to
# its anchor and the sentiment model reads as positive.

[search]
top_k = 64
beam_width = 5
max_steps = 32
max_len = 16
init_tokens = 6
seed = 0

[objective]
primary = primary.fusemodel
prefix = \"\"

[term]
model = primary.fusemodel
weight = 0.5

[term]
model = similarity.fusemodel
weight = 4.0
adapter = primary-similarity.fuseadpt

[term]
model = sentiment.fusemodel
weight = 1.0
adapter = shared

[output]
trace = trace.tsv
";

fn demo(a: DemoArgs) -> Result<Status> {
    let seed = effective_seed(a.seed)?;
    let out = &a.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let setup = demo_setup(seed)?;
    std::fs::write(out.join("corpus.txt"), &setup.corpus)?;
    for (model, stem) in [
        (&setup.primary, "primary"),
        (&setup.similarity, "similarity"),
        (&setup.sentiment, "sentiment"),
    ] {
        let path = model.save(out, stem)?;
        println!("wrote {}", path.display());
    }
    let cfg = FitConfig {
        seed,
        ..FitConfig::default()
    };
    let amap = fit_adapter(
        &setup.corpus,
        &setup.primary.embedder(),
        &setup.similarity.embedder(),
        &cfg,
    )?;
    let adapter = out.join("primary-similarity.fuseadpt");
    amap.write_file(&adapter)?;
    println!("wrote {}", adapter.display());
    let config = out.join("demo.conf");
    std::fs::write(
        &config,
        DEMO_CONFIG.replace("seed = 0", &format!("seed = {seed}")),
    )?;
    println!("wrote {}", config.display());
    Ok(Status::Ok)
}
