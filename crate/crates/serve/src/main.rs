use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prefx_core::corpus::{read_log, read_triplets, write_log};
use prefx_core::embed::{EmbeddingSource, LabelEmbeddings};
use prefx_core::engine::{Engine, SuggestOptions};
use prefx_core::eval::dir_content_hash;
use prefx_core::index::{IndexAlgorithm, IndexParams, LabelTree};
use prefx_core::model::{train, ScoreTransform, TrainParams};
use prefx_core::pipeline::{
    self, embed_labels, encode_triplets, Dataset, EmbeddingKind, EvalParams, IngestParams, VectorizerParams,
    Vectorizers, N_PRESETS,
    preset,
};
use prefx_core::synth::{generate, SynthParams};
use prefx_core::vectorize::InputMode;
use prefx_serve::{Overrides, ServeConfig, MODEL_DIR_ENV};
use serde::{Deserialize, Serialize};

const EMBEDDINGS_FILE: &str = "label_embeddings.bin";
const TREE_FILE: &str = "tree.bin";

#[derive(Parser)]
#[command(name = "prefx", version, about = "Session-aware query auto-completion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic search log (TSV)
    Synth(SynthArgs),
    /// Sessionize a TSV log and write train/dev/test triplets
    Ingest(IngestArgs),
    /// Fit the previous-query, prefix and label-text vocabularies
    FitVectorizers(FitArgs),
    /// Compute label embeddings for clustering
    EmbedLabels(EmbedArgs),
    /// Build the label tree
    BuildIndex(IndexArgs),
    /// Train node and label classifiers into a model directory
    Train(TrainArgs),
    /// Score a model (and the MFQ baseline) on a triplet file
    Evaluate(EvalArgs),
    /// Print suggestions for one context
    Predict(PredictArgs),
    /// Run the HTTP service
    Serve(ServeArgs),
    /// Build and evaluate several preset configurations on one dataset
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PrevOnly,
    Concat,
}

impl From<Mode> for InputMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PrevOnly => InputMode::PrevOnly,
            Mode::Concat => InputMode::PrevConcatPrefix,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Transform {
    Cubic,
    Sigmoid,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Mfq,
    None,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator parameters; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    dev_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the data directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    position_weighted: bool,
    #[arg(long, default_value_t = 2)]
    token_min_df: usize,
    #[arg(long, default_value_t = 1)]
    char_min_df: usize,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the data directory
    #[arg(long)]
    vectorizers: Option<PathBuf>,
    #[arg(long, value_parser = ["pifa", "text"], default_value = "text")]
    source: String,
    /// Input encoding aggregated by PIFA
    #[arg(long, value_enum, default_value_t = Mode::Concat)]
    input_mode: Mode,
    /// Defaults to <data>/label_embeddings.bin
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingsMeta {
    source: EmbeddingSource,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to <data>/label_embeddings.bin (not needed for a pure trie)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value = "hc")]
    algo: IndexAlgorithm,
    /// Maximum leaf size
    #[arg(long = "M", alias = "max-leaf-size", default_value_t = 100)]
    max_leaf_size: usize,
    #[arg(long, default_value_t = 3)]
    d_trie: usize,
    #[arg(long, default_value_t = 5)]
    d_mlc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to <data>/tree.bin
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the data directory
    #[arg(long)]
    vectorizers: Option<PathBuf>,
    /// Defaults to <data>/tree.bin
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Concat)]
    input_mode: Mode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    prune: f64,
    #[arg(long, value_enum, default_value_t = Transform::Cubic)]
    transform: Transform,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = MODEL_DIR_ENV)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value_t = Baseline::Mfq)]
    baseline: Baseline,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 1000)]
    latency_samples: usize,
    /// Defaults to <model>/report.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, env = MODEL_DIR_ENV)]
    model: PathBuf,
    #[arg(long, default_value = "")]
    prev: String,
    #[arg(long)]
    prefix: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Model directory; also read from PREFX_MODEL_DIR
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_prefix_len: Option<usize>,
    #[arg(long)]
    no_mfq_fallback: bool,
    #[arg(long)]
    demo_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated preset ids; all twelve by default
    #[arg(long, value_delimiter = ',')]
    configs: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 1000)]
    latency_samples: usize,
    /// Maximum leaf size for clustering presets
    #[arg(long = "M", default_value_t = 100)]
    max_leaf_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {}", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    require(&dir.join(pipeline::TRAIN_FILE), "train split")?;
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_vectorizers(dir: &Path) -> Result<Vectorizers> {
    require(&dir.join(pipeline::PREV_VOCAB_FILE), "vectorizers (run fit-vectorizers)")?;
    Ok(Vectorizers::load(dir)?)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut p = match &a.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => SynthParams::default(),
    };
    if let Some(s) = a.sessions {
        p.sessions = s;
    }
    if let Some(s) = a.seed {
        p.seed = s;
    }
    let log = generate(&p)?;
    write_log(&a.out, &log)?;
    println!("wrote {} records ({} sessions) to {}", log.len(), p.sessions, a.out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    require(&a.log, "query log")?;
    let records = read_log(&a.log)?;
    let p = IngestParams {
        train_frac: a.train_frac,
        dev_frac: a.dev_frac,
        seed: a.seed,
    };
    let (ds, summary) = Dataset::from_log(&records, &p)?;
    ds.save(&a.out)?;
    write_json(&a.out.join(pipeline::SUMMARY_FILE), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let p = VectorizerParams {
        position_weighted: a.position_weighted,
        token_min_df: a.token_min_df,
        char_min_df: a.char_min_df,
    };
    let v = Vectorizers::fit(&ds, &p)?;
    let out = a.out.unwrap_or(a.data);
    v.save(&out)?;
    println!(
        "prev {} terms, prefix {} terms, label {} terms (position weighted: {})",
        v.prev.dim(),
        v.prefix.dim(),
        v.label.dim(),
        a.position_weighted
    );
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let vecs = load_vectorizers(a.vectorizers.as_deref().unwrap_or(&a.data))?;
    let kind: EmbeddingKind = a.source.parse()?;
    let (inputs, ids) = match kind {
        EmbeddingKind::Pifa => (encode_triplets(&ds.train, &vecs.encoder(a.input_mode.into())), ds.train_label_ids()?),
        EmbeddingKind::LabelText => (Vec::new(), Vec::new()),
    };
    let emb = embed_labels(kind, &ds, &vecs, &inputs, &ids)?;
    let out = a.out.unwrap_or_else(|| a.data.join(EMBEDDINGS_FILE));
    emb.save(&out)?;
    write_json(&out.with_extension("json"), &EmbeddingsMeta { source: emb.source })?;
    println!(
        "{} label embeddings of dim {} ({} zero rows) -> {}",
        emb.len(),
        emb.dim,
        emb.zero_rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let params = IndexParams {
        algorithm: a.algo,
        max_leaf_size: a.max_leaf_size,
        d_trie: a.d_trie,
        d_mlc: a.d_mlc,
        seed: a.seed,
    };
    let emb = if a.algo == IndexAlgorithm::Trie {
        None
    } else {
        let path = a.embeddings.unwrap_or_else(|| a.data.join(EMBEDDINGS_FILE));
        require(&path, "label embeddings (run embed-labels)")?;
        let meta: EmbeddingsMeta = match fs::read_to_string(path.with_extension("json")) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(_) => EmbeddingsMeta {
                source: EmbeddingSource::Pifa,
            },
        };
        Some(LabelEmbeddings::load(&path, meta.source)?)
    };
    let start = Instant::now();
    let tree = pipeline::build_tree(&params, &ds, emb.as_ref())?;
    let secs = start.elapsed().as_secs_f64();
    let out = a.out.unwrap_or_else(|| a.data.join(TREE_FILE));
    tree.save(&out)?;
    println!(
        "{} tree: {} nodes, {} leaves, depth {}, {} relaxations, {:.2}s -> {}",
        a.algo.name(),
        tree.n_nodes(),
        tree.n_leaves(),
        tree.max_depth(),
        tree.diagnostics.relaxations.len(),
        secs,
        out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let vecs = load_vectorizers(a.vectorizers.as_deref().unwrap_or(&a.data))?;
    let tree_path = a.tree.unwrap_or_else(|| a.data.join(TREE_FILE));
    require(&tree_path, "label tree (run build-index)")?;
    let tree = LabelTree::load(&tree_path)?;
    if tree.n_labels() != ds.vocab.len() {
        bail!("tree has {} labels but the dataset has {}", tree.n_labels(), ds.vocab.len());
    }
    let encoder = vecs.encoder(a.input_mode.into());
    let inputs = encode_triplets(&ds.train, &encoder);
    let ids = ds.train_label_ids()?;
    let params = TrainParams {
        c: a.c,
        tol: a.tol,
        max_epochs: a.max_epochs,
        prune_threshold: a.prune,
        transform: match a.transform {
            Transform::Cubic => ScoreTransform::CubicHinge,
            Transform::Sigmoid => ScoreTransform::Sigmoid,
        },
        seed: a.seed,
    };
    let start = Instant::now();
    let model = train(tree, ds.vocab.labels().to_vec(), &inputs, &ids, &params)?;
    let secs = start.elapsed().as_secs_f64();
    let engine = Engine::new(model, encoder, ds.vocab.counts().to_vec())?;
    engine.save(&a.out)?;
    println!(
        "trained on {} examples in {:.2}s: {} node weights, {} label weights -> {}",
        inputs.len(),
        secs,
        engine.model().node_weights().matrix.nnz(),
        engine.model().label_weights().matrix.nnz(),
        a.out.display()
    );
    Ok(())
}

fn load_engine(dir: &Path) -> Result<Engine> {
    require(dir, "model directory")?;
    Engine::load(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn cmd_evaluate(a: EvalArgs) -> Result<()> {
    let engine = load_engine(&a.model)?;
    require(&a.test, "test triplets")?;
    let test = read_triplets(&a.test)?;
    let p = EvalParams {
        k: a.k,
        beam: a.beam,
        latency_samples: a.latency_samples,
        baseline: a.baseline == Baseline::Mfq,
        ..EvalParams::default()
    };
    let mut report = pipeline::evaluate(&engine, &test, &p)?;
    report.model_hash = dir_content_hash(&a.model)?;
    let out = a.out.unwrap_or_else(|| a.model.join("report.json"));
    report.save(&out)?;
    let line = |name: &str, m: &prefx_core::eval::MethodReport| {
        println!(
            "{name:<6} mrr {:.4}  bleu_rr {:.4}  seen_mrr {}  p50 {}  p99 {}",
            m.mrr,
            m.bleu_rr,
            m.seen_mrr.map_or("-".into(), |v| format!("{v:.4}")),
            m.latency_p50_ms.map_or("-".into(), |v| format!("{v:.3}ms")),
            m.latency_p99_ms.map_or("-".into(), |v| format!("{v:.3}ms")),
        )
    };
    println!("{} examples, coverage {:.3}", report.n_examples, report.coverage);
    line("model", &report.model);
    if let Some(b) = &report.baseline {
        line("mfq", b);
    }
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let engine = load_engine(&a.model)?;
    let opts = SuggestOptions {
        k: a.k,
        beam: a.beam,
        mfq_fallback: !a.no_fallback,
    };
    let out = engine.suggest(&a.prev, &a.prefix, opts);
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let o = Overrides {
        model_dir: a.model,
        host: a.host,
        port: a.port,
        default_k: a.k,
        default_beam: a.beam,
        max_prefix_len: a.max_prefix_len,
        mfq_fallback: a.no_mfq_fallback.then_some(false),
        demo_dir: a.demo_dir,
    };
    let cfg = ServeConfig::resolve(a.config.as_deref(), std::env::var(MODEL_DIR_ENV).ok(), o)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(prefx_serve::run(cfg))?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ids: Vec<usize> = if a.configs.is_empty() {
        (0..N_PRESETS).collect()
    } else {
        a.configs
    };
    let train_params = TrainParams {
        seed: a.seed,
        ..TrainParams::default()
    };
    let eval = EvalParams {
        k: a.k,
        beam: a.beam,
        latency_samples: a.latency_samples,
        ..EvalParams::default()
    };
    println!("{:>3}  {:<36} {:>7} {:>7} {:>9} {:>9} {:>9}", "id", "config", "mrr", "bleu_rr", "index_s", "train_s", "p99_ms");
    let mut configs = Vec::with_capacity(ids.len());
    for id in ids {
        let mut cfg = preset(id).with_context(|| format!("no preset {id}; valid ids are 0..{N_PRESETS}"))?;
        cfg.index.max_leaf_size = a.max_leaf_size;
        cfg.index.seed = a.seed;
        configs.push(cfg);
    }
    let rows = pipeline::run_ablation(&ds, &configs, &VectorizerParams::default(), &train_params, &eval, |r| {
        println!(
            "{:>3}  {:<36} {:>7.4} {:>7.4} {:>9.2} {:>9.2} {:>9}",
            r.config.id,
            r.config.name,
            r.mrr,
            r.bleu_rr,
            r.timings.index_secs,
            r.timings.train_secs,
            r.latency_p99_ms.map_or("-".into(), |v| format!("{v:.3}")),
        )
    })?;
    if let Some(out) = a.out {
        write_json(&out, &rows)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::FitVectorizers(a) => cmd_fit(a),
        Cmd::EmbedLabels(a) => cmd_embed(a),
        Cmd::BuildIndex(a) => cmd_index(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}
