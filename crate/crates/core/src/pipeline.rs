//! Pipeline stages shared by the CLI and the experiment runner, plus the
//! twelve ablation presets.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    quantile_boundaries, read_triplets, split_sessions, temporal_split, write_triplets, LabelVocab,
    LogRecord, QueryTriplet,
};
use crate::embed::{label_text_embed, pifa_embed, LabelEmbeddings};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::eval::{
    bleu, rank_of, weighted_similarity, EvalReport, ExampleResult, MethodReport,
    DEFAULT_FREQ_EDGES,
};
use crate::index::{build_index, IndexAlgorithm, IndexParams, LabelTree};
use crate::model::{train, TrainParams};
use crate::sparse::SparseVector;
use crate::vectorize::{InputEncoder, InputMode, TfidfVocab, VocabKind};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const LABELS_FILE: &str = "labels.txt";
pub const COUNTS_FILE: &str = "label_counts.txt";
pub const SUMMARY_FILE: &str = "split.json";
pub const PREV_VOCAB_FILE: &str = "prev_vocab.json";
pub const PREFIX_VOCAB_FILE: &str = "prefix_vocab.json";
pub const LABEL_VOCAB_FILE: &str = "label_vocab.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestParams {
    pub train_frac: f64,
    pub dev_frac: f64,
    pub seed: u64,
}

impl Default for IngestParams {
    fn default() -> Self {
        IngestParams {
            train_frac: 0.8,
            dev_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub sessions: usize,
    pub dev_start: u64,
    pub test_start: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub labels: usize,
    pub coverage: f64,
    pub seed: u64,
}

/// Train/dev/test triplets and the label vocabulary of the train split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<QueryTriplet>,
    pub dev: Vec<QueryTriplet>,
    pub test: Vec<QueryTriplet>,
    pub vocab: LabelVocab,
}

impl Dataset {
    /// Sessionizes the log and splits sessions by start time at the given
    /// quantiles.
    pub fn from_log(records: &[LogRecord], p: &IngestParams) -> Result<(Dataset, IngestSummary)> {
        let sessions = split_sessions(records);
        let (dev_start, test_start) = quantile_boundaries(&sessions, p.train_frac, p.dev_frac)?;
        let split = temporal_split(&sessions, dev_start, test_start, p.seed)?;
        let summary = IngestSummary {
            records: records.len(),
            sessions: sessions.len(),
            dev_start,
            test_start,
            train: split.train.triplets.len(),
            dev: split.dev.triplets.len(),
            test: split.test.triplets.len(),
            labels: split.vocab.len(),
            coverage: split.coverage,
            seed: p.seed,
        };
        let ds = Dataset {
            train: split.train.triplets,
            dev: split.dev.triplets,
            test: split.test.triplets,
            vocab: split.vocab,
        };
        Ok((ds, summary))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        write_triplets(&dir.join(TRAIN_FILE), &self.train)?;
        write_triplets(&dir.join(DEV_FILE), &self.dev)?;
        write_triplets(&dir.join(TEST_FILE), &self.test)?;
        self.vocab.write_labels(&dir.join(LABELS_FILE))?;
        self.vocab.write_counts(&dir.join(COUNTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let counts = dir.join(COUNTS_FILE);
        Ok(Dataset {
            train: read_triplets(&dir.join(TRAIN_FILE))?,
            dev: read_triplets(&dir.join(DEV_FILE))?,
            test: read_triplets(&dir.join(TEST_FILE))?,
            vocab: LabelVocab::load(&dir.join(LABELS_FILE), counts.exists().then_some(counts.as_path()))?,
        })
    }

    /// Label id of every train triplet's next query.
    pub fn train_label_ids(&self) -> Result<Vec<u32>> {
        self.train
            .iter()
            .map(|t| {
                self.vocab
                    .id(&t.next_query)
                    .ok_or_else(|| Error::invalid(format!("train label {:?} missing from labels", t.next_query)))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorizerParams {
    pub position_weighted: bool,
    pub token_min_df: usize,
    pub char_min_df: usize,
}

impl Default for VectorizerParams {
    fn default() -> Self {
        VectorizerParams {
            position_weighted: true,
            token_min_df: VocabKind::TokenUnigram.default_min_df(),
            char_min_df: VocabKind::CHAR_1_3.default_min_df(),
        }
    }
}

/// Token vocabulary for previous queries, character vocabularies for
/// prefixes and for label text.
#[derive(Clone, Debug)]
pub struct Vectorizers {
    pub prev: TfidfVocab,
    pub prefix: TfidfVocab,
    pub label: TfidfVocab,
}

impl Vectorizers {
    pub fn fit(ds: &Dataset, p: &VectorizerParams) -> Result<Self> {
        let prev = TfidfVocab::fit(
            ds.train.iter().map(|t| t.prev_query.as_str()),
            VocabKind::TokenUnigram,
            p.token_min_df,
            false,
        )?;
        let prefix = TfidfVocab::fit(
            ds.train.iter().map(|t| t.prefix.as_str()),
            VocabKind::CHAR_1_3,
            p.char_min_df,
            p.position_weighted,
        )?;
        let label = TfidfVocab::fit(
            ds.vocab.labels().iter().map(String::as_str),
            VocabKind::CHAR_1_3,
            p.char_min_df,
            p.position_weighted,
        )?;
        Ok(Vectorizers { prev, prefix, label })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        self.prev.save(&dir.join(PREV_VOCAB_FILE))?;
        self.prefix.save(&dir.join(PREFIX_VOCAB_FILE))?;
        self.label.save(&dir.join(LABEL_VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Vectorizers {
            prev: TfidfVocab::load(&dir.join(PREV_VOCAB_FILE))?,
            prefix: TfidfVocab::load(&dir.join(PREFIX_VOCAB_FILE))?,
            label: TfidfVocab::load(&dir.join(LABEL_VOCAB_FILE))?,
        })
    }

    pub fn encoder(&self, mode: InputMode) -> InputEncoder {
        InputEncoder::new(self.prev.clone(), self.prefix.clone(), mode)
    }
}

/// Model inputs of the train split, in triplet order.
pub fn encode_triplets(triplets: &[QueryTriplet], encoder: &InputEncoder) -> Vec<SparseVector> {
    triplets
        .par_iter()
        .map(|t| encoder.encode(&t.prev_query, &t.prefix))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Pifa,
    LabelText,
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pifa" => Ok(EmbeddingKind::Pifa),
            "text" | "label_text" | "label-text" => Ok(EmbeddingKind::LabelText),
            other => Err(Error::invalid(format!("unknown embedding kind {other:?} (pifa or text)"))),
        }
    }
}

/// PIFA aggregates the encoded train inputs; label text uses the label
/// vocabulary.
pub fn embed_labels(
    kind: EmbeddingKind,
    ds: &Dataset,
    vecs: &Vectorizers,
    inputs: &[SparseVector],
    label_ids: &[u32],
) -> Result<LabelEmbeddings> {
    match kind {
        EmbeddingKind::Pifa => pifa_embed(inputs, label_ids, ds.vocab.len()),
        EmbeddingKind::LabelText => Ok(label_text_embed(ds.vocab.labels(), &vecs.label)),
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: usize,
    pub name: String,
    pub input_mode: InputMode,
    pub position_weighted: bool,
    pub embedding: EmbeddingKind,
    pub index: IndexParams,
}

pub const N_PRESETS: usize = 12;

/// Presets 0..=11. Every clustering preset uses M = 100.
pub fn preset(id: usize) -> Option<ExperimentConfig> {
    use EmbeddingKind::*;
    use IndexAlgorithm::*;
    use InputMode::*;
    let (name, mode, pw, emb, algo, d) = match id {
        0 => ("prev only, pifa, hc", PrevOnly, false, Pifa, Hc, 0),
        1 => ("prev only, label text, hc", PrevOnly, false, LabelText, Hc, 0),
        2 => ("prev+prefix, pifa, hc", PrevConcatPrefix, false, Pifa, Hc, 0),
        3 => ("prev+prefix, label text, hc", PrevConcatPrefix, false, LabelText, Hc, 0),
        4 => ("prev+prefix pw, pifa, hc", PrevConcatPrefix, true, Pifa, Hc, 0),
        5 => ("prev+prefix pw, label text pw, hc", PrevConcatPrefix, true, LabelText, Hc, 0),
        6 => ("hybrid trie d=1", PrevConcatPrefix, true, LabelText, Hybrid, 1),
        7 => ("hybrid trie d=2", PrevConcatPrefix, true, LabelText, Hybrid, 2),
        8 => ("hybrid trie d=3", PrevConcatPrefix, true, LabelText, Hybrid, 3),
        9 => ("trie d=16, pw", PrevConcatPrefix, true, LabelText, Trie, 16),
        10 => ("trie d=16, simple", PrevConcatPrefix, false, LabelText, Trie, 16),
        11 => ("must-link d=5", PrevConcatPrefix, true, LabelText, Mlc, 5),
        _ => return None,
    };
    let mut index = IndexParams {
        algorithm: algo,
        ..IndexParams::default()
    };
    match algo {
        Hybrid | Trie => index.d_trie = d,
        Mlc => index.d_mlc = d,
        Hc => {}
    }
    Some(ExperimentConfig {
        id,
        name: name.to_string(),
        input_mode: mode,
        position_weighted: pw,
        embedding: emb,
        index,
    })
}

/// Wall-clock seconds per build stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildTimings {
    pub vectorize_secs: f64,
    pub embed_secs: f64,
    pub index_secs: f64,
    pub train_secs: f64,
}

impl BuildTimings {
    /// Index construction plus classifier training.
    pub fn build_secs(&self) -> f64 {
        self.index_secs + self.train_secs
    }
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f();
    *slot = t.elapsed().as_secs_f64();
    out
}

pub fn build_tree(
    params: &IndexParams,
    ds: &Dataset,
    emb: Option<&LabelEmbeddings>,
) -> Result<LabelTree> {
    let emb = match params.algorithm {
        IndexAlgorithm::Trie => None,
        _ => emb,
    };
    build_index(params, ds.vocab.labels(), emb)
}

/// Runs every stage from vectorizer fitting to training in memory.
pub fn build_engine(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    vec_params: &VectorizerParams,
    train_params: &TrainParams,
) -> Result<(Engine, BuildTimings)> {
    let mut tm = BuildTimings::default();
    let vp = VectorizerParams {
        position_weighted: cfg.position_weighted,
        ..*vec_params
    };
    let (vecs, encoder, inputs, label_ids) = timed(&mut tm.vectorize_secs, || {
        let vecs = Vectorizers::fit(ds, &vp)?;
        let encoder = vecs.encoder(cfg.input_mode);
        let inputs = encode_triplets(&ds.train, &encoder);
        let label_ids = ds.train_label_ids()?;
        Ok((vecs, encoder, inputs, label_ids))
    })?;
    let emb = match cfg.index.algorithm {
        IndexAlgorithm::Trie => None,
        _ => Some(timed(&mut tm.embed_secs, || {
            embed_labels(cfg.embedding, ds, &vecs, &inputs, &label_ids)
        })?),
    };
    let tree = timed(&mut tm.index_secs, || build_tree(&cfg.index, ds, emb.as_ref()))?;
    drop(emb);
    let model = timed(&mut tm.train_secs, || {
        train(tree, ds.vocab.labels().to_vec(), &inputs, &label_ids, train_params)
    })?;
    let engine = Engine::new(model, encoder, ds.vocab.counts().to_vec())?;
    Ok((engine, tm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub k: usize,
    pub beam: usize,
    /// Timed single-threaded queries (cycled over the test set).
    pub latency_samples: usize,
    /// Untimed queries run before timing starts.
    pub warmup: usize,
    pub baseline: bool,
    pub freq_edges: Vec<u64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            k: 10,
            beam: 10,
            latency_samples: 1000,
            warmup: 100,
            baseline: true,
            freq_edges: DEFAULT_FREQ_EDGES.to_vec(),
        }
    }
}

fn example_result(t: &QueryTriplet, preds: &[String], truth_freq: u64, k: usize) -> ExampleResult {
    ExampleResult {
        prefix_len: t.prefix.len(),
        truth_freq,
        rank: rank_of(preds, &t.next_query, k),
        bleu_rr: weighted_similarity(preds, &t.next_query, k, bleu),
    }
}

fn time_queries(test: &[QueryTriplet], p: &EvalParams, mut f: impl FnMut(&QueryTriplet) -> usize) -> Vec<f64> {
    let mut sink = 0usize;
    for t in test.iter().cycle().take(p.warmup) {
        sink = sink.wrapping_add(f(t));
    }
    let mut out = Vec::with_capacity(p.latency_samples);
    for t in test.iter().cycle().take(p.latency_samples) {
        let start = Instant::now();
        sink = sink.wrapping_add(f(t));
        out.push(start.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    out
}

/// Scores the model (and optionally the MFQ baseline) on `test`. The
/// returned report has an empty `model_hash`; callers that evaluate a saved
/// directory fill it in.
pub fn evaluate(engine: &Engine, test: &[QueryTriplet], p: &EvalParams) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    if p.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mfq = engine.mfq();
    let freq: Vec<u64> = test.iter().map(|t| mfq.frequency(&t.next_query)).collect();
    let model_results: Vec<ExampleResult> = test
        .par_iter()
        .zip(&freq)
        .map(|(t, &f)| {
            let preds: Vec<String> = engine
                .predict(&t.prev_query, &t.prefix, p.k, p.beam)
                .into_iter()
                .map(|s| s.query)
                .collect();
            example_result(t, &preds, f, p.k)
        })
        .collect();
    let lat = (p.latency_samples > 0).then(|| {
        time_queries(test, p, |t| engine.predict(&t.prev_query, &t.prefix, p.k, p.beam).len())
    });
    let model = MethodReport::from_results(model_results, lat.as_deref(), &p.freq_edges)?;
    let baseline = if p.baseline {
        let results: Vec<ExampleResult> = test
            .par_iter()
            .zip(&freq)
            .map(|(t, &f)| {
                let preds: Vec<String> = mfq.lookup(&t.prefix, p.k).into_iter().map(|(q, _)| q.to_string()).collect();
                example_result(t, &preds, f, p.k)
            })
            .collect();
        let lat = (p.latency_samples > 0).then(|| time_queries(test, p, |t| mfq.lookup(&t.prefix, p.k).len()));
        Some(MethodReport::from_results(results, lat.as_deref(), &p.freq_edges)?)
    } else {
        None
    };
    let coverage = freq.iter().filter(|&&f| f > 0).count() as f64 / test.len() as f64;
    let config = serde_json::json!({
        "model": engine.model().config(),
        "input_mode": engine.encoder().mode,
        "position_weighted": engine.encoder().prefix_vocab.position_weighted(),
        "index": engine.model().tree().params(),
        "k": p.k,
        "beam": p.beam,
    });
    Ok(EvalReport {
        k: p.k,
        n_examples: test.len(),
        coverage,
        model_hash: String::new(),
        config,
        model,
        baseline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: ExperimentConfig,
    pub mrr: f64,
    pub bleu_rr: f64,
    pub seen_mrr: Option<f64>,
    pub latency_p50_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
    pub timings: BuildTimings,
    pub build_secs: f64,
    pub n_nodes: usize,
    pub max_depth: usize,
}

/// Builds and evaluates each configuration on the same dataset.
pub fn run_ablation(
    ds: &Dataset,
    configs: &[ExperimentConfig],
    vec_params: &VectorizerParams,
    train_params: &TrainParams,
    eval: &EvalParams,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let cfg = cfg.clone();
        let (engine, timings) = build_engine(ds, &cfg, vec_params, train_params)?;
        let report = evaluate(&engine, &ds.test, &EvalParams { baseline: false, ..eval.clone() })?;
        let tree = engine.model().tree();
        let row = AblationRow {
            mrr: report.model.mrr,
            bleu_rr: report.model.bleu_rr,
            seen_mrr: report.model.seen_mrr,
            latency_p50_ms: report.model.latency_p50_ms,
            latency_p99_ms: report.model.latency_p99_ms,
            build_secs: timings.build_secs(),
            timings,
            n_nodes: tree.n_nodes(),
            max_depth: tree.max_depth(),
            config: cfg,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
