//! Ranking metrics, the most-frequent-completion baseline, bucketed reports
//! and latency percentiles.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 1-based rank of `truth` among the first `k` predictions.
pub fn rank_of<S: AsRef<str>>(predictions: &[S], truth: &str, k: usize) -> Option<usize> {
    predictions.iter().take(k).position(|p| p.as_ref() == truth).map(|i| i + 1)
}

pub fn reciprocal_rank<S: AsRef<str>>(predictions: &[S], truth: &str, k: usize) -> f64 {
    rank_of(predictions, truth, k).map_or(0.0, |r| 1.0 / r as f64)
}

fn check_lengths(n_pred: usize, n_truth: usize) -> Result<()> {
    if n_pred != n_truth {
        return Err(Error::invalid("predictions and truths differ in length"));
    }
    if n_truth == 0 {
        return Err(Error::EmptySplit("evaluation"));
    }
    Ok(())
}

pub fn mrr<S: AsRef<str>>(predictions: &[Vec<S>], truths: &[String], k: usize) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    let sum: f64 = predictions.iter().zip(truths).map(|(p, t)| reciprocal_rank(p, t, k)).sum();
    Ok(sum / truths.len() as f64)
}

pub fn harmonic(k: usize) -> f64 {
    (1..=k).map(|j| 1.0 / j as f64).sum()
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Smoothing floor for n-gram orders with no matches.
pub const BLEU_EPSILON: f64 = 0.1;

/// Sentence BLEU of `hypothesis` against one `reference` over whitespace
/// tokens, up to `min(4, |hyp|, |ref|)`-grams with uniform weights. Orders
/// with no clipped match use `ε / total` as their precision; without a
/// single unigram match the score is 0.
pub fn bleu(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let n_max = 4.min(r.len()).min(h.len());
    if n_max == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        let total = (h.len() + 1 - n) as f64;
        let clipped: usize = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 && n == 1 {
            return 0.0;
        }
        let p = if clipped == 0 { BLEU_EPSILON / total } else { clipped as f64 / total };
        log_sum += p.ln() / n_max as f64;
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * log_sum.exp()
}

/// Per-example reciprocal-rank-weighted similarity, normalized by `H_k`.
/// Missing slots score 0.
pub fn weighted_similarity<S, F>(predictions: &[S], truth: &str, k: usize, sim: F) -> f64
where
    S: AsRef<str>,
    F: Fn(&str, &str) -> f64,
{
    let num: f64 = predictions
        .iter()
        .take(k)
        .enumerate()
        .map(|(j, p)| sim(truth, p.as_ref()) / (j + 1) as f64)
        .sum();
    num / harmonic(k)
}

pub fn bleu_rr_with<S, F>(predictions: &[Vec<S>], truths: &[String], k: usize, sim: F) -> Result<f64>
where
    S: AsRef<str>,
    F: Fn(&str, &str) -> f64,
{
    check_lengths(predictions.len(), truths.len())?;
    let sum: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| weighted_similarity(p, t, k, &sim))
        .sum();
    Ok(sum / truths.len() as f64)
}

pub fn bleu_rr<S: AsRef<str>>(predictions: &[Vec<S>], truths: &[String], k: usize) -> Result<f64> {
    bleu_rr_with(predictions, truths, k, bleu)
}

pub fn exact_match(a: &str, b: &str) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default)]
struct MfqNode {
    children: Vec<(u8, u32)>,
    terminal: Option<u32>,
    top_start: u32,
    top_len: u32,
}

/// Character trie over training completions; every node caches the `k`
/// most frequent completions below it (ties in lexicographic order).
#[derive(Clone, Debug)]
pub struct MfqIndex {
    queries: Vec<String>,
    freqs: Vec<u64>,
    nodes: Vec<MfqNode>,
    top: Vec<u32>,
    k: usize,
}

impl MfqIndex {
    pub fn from_counts<I, S>(counts: I, k: usize) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut merged: BTreeMap<String, u64> = BTreeMap::new();
        for (q, c) in counts {
            *merged.entry(q.into()).or_insert(0) += c;
        }
        let (queries, freqs): (Vec<String>, Vec<u64>) = merged.into_iter().unzip();
        let mut nodes = vec![MfqNode::default()];
        for (id, q) in queries.iter().enumerate() {
            let mut cur = 0usize;
            for &b in q.as_bytes() {
                cur = match nodes[cur].children.binary_search_by_key(&b, |c| c.0) {
                    Ok(i) => nodes[cur].children[i].1 as usize,
                    Err(i) => {
                        let new = nodes.len();
                        nodes[cur].children.insert(i, (b, new as u32));
                        nodes.push(MfqNode::default());
                        new
                    }
                };
            }
            nodes[cur].terminal = Some(id as u32);
        }
        let mut index = MfqIndex {
            queries,
            freqs,
            nodes,
            top: Vec::new(),
            k,
        };
        index.fill_top();
        index
    }

    /// Training completions are the `next_query` fields of the triplets.
    pub fn from_next_queries<'a, I: IntoIterator<Item = &'a str>>(queries: I, k: usize) -> Self {
        Self::from_counts(queries.into_iter().map(|q| (q, 1u64)), k)
    }

    fn better(&self, a: u32, b: u32) -> std::cmp::Ordering {
        // query ids are in lexicographic order
        self.freqs[b as usize].cmp(&self.freqs[a as usize]).then(a.cmp(&b))
    }

    fn fill_top(&mut self) {
        // children always have larger ids, so a reverse sweep is post-order
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); self.nodes.len()];
        for id in (0..self.nodes.len()).rev() {
            let mut cand: Vec<u32> = self.nodes[id].terminal.into_iter().collect();
            for &(_, c) in &self.nodes[id].children {
                cand.extend_from_slice(&lists[c as usize]);
            }
            cand.sort_by(|&a, &b| self.better(a, b));
            cand.truncate(self.k);
            lists[id] = cand;
        }
        for (node, list) in self.nodes.iter_mut().zip(lists) {
            node.top_start = self.top.len() as u32;
            node.top_len = list.len() as u32;
            self.top.extend(list);
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn frequency(&self, query: &str) -> u64 {
        self.queries
            .binary_search_by(|q| q.as_str().cmp(query))
            .map_or(0, |i| self.freqs[i])
    }

    /// Up to `min(k, cached k)` completions of `prefix` with frequencies.
    pub fn lookup(&self, prefix: &str, k: usize) -> Vec<(&str, u64)> {
        let mut cur = 0usize;
        for &b in prefix.as_bytes() {
            match self.nodes[cur].children.binary_search_by_key(&b, |c| c.0) {
                Ok(i) => cur = self.nodes[cur].children[i].1 as usize,
                Err(_) => return Vec::new(),
            }
        }
        let n = &self.nodes[cur];
        self.top[n.top_start as usize..(n.top_start + n.top_len) as usize]
            .iter()
            .take(k)
            .map(|&id| (self.queries[id as usize].as_str(), self.freqs[id as usize]))
            .collect()
    }
}

/// Nearest-rank percentile (`p` in `(0, 100]`) of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    nearest_rank(&s, p)
}

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub const MIN_LATENCY_SAMPLES: usize = 100;

/// `(p50, p99)` by nearest rank.
pub fn latency_percentiles(samples_ms: &[f64]) -> Result<(f64, f64)> {
    if samples_ms.len() < MIN_LATENCY_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_LATENCY_SAMPLES,
            got: samples_ms.len(),
        });
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((nearest_rank(&s, 50.0), nearest_rank(&s, 99.0)))
}

/// What is kept about each evaluated example so reports can be re-bucketed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub prefix_len: usize,
    /// Training frequency of the ground-truth next query (0 if unseen).
    pub truth_freq: u64,
    pub rank: Option<usize>,
    pub bleu_rr: f64,
}

impl ExampleResult {
    pub fn reciprocal_rank(&self) -> f64 {
        self.rank.map_or(0.0, |r| 1.0 / r as f64)
    }

    pub fn seen(&self) -> bool {
        self.truth_freq > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub count: usize,
    pub fraction: f64,
    /// `None` for an empty band.
    pub mrr: Option<f64>,
}

pub const PREFIX_BANDS: usize = 7;
pub const DEFAULT_FREQ_EDGES: [u64; 8] = [0, 1, 4, 16, 64, 256, 1024, 2000];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BucketAxis {
    PrefixLength,
    LabelFrequency,
}

fn band_key(axis: BucketAxis, r: &ExampleResult, edges: &[u64]) -> usize {
    match axis {
        BucketAxis::PrefixLength => r.prefix_len.clamp(1, PREFIX_BANDS) - 1,
        BucketAxis::LabelFrequency => edges.iter().rposition(|&e| r.truth_freq >= e).unwrap_or(0),
    }
}

fn band_names(axis: BucketAxis, edges: &[u64]) -> Vec<String> {
    match axis {
        BucketAxis::PrefixLength => (1..=PREFIX_BANDS)
            .map(|l| if l == PREFIX_BANDS { format!("{l}+") } else { l.to_string() })
            .collect(),
        BucketAxis::LabelFrequency => edges
            .iter()
            .enumerate()
            .map(|(i, e)| match edges.get(i + 1) {
                Some(next) => format!("{e}-{}", next - 1),
                None => format!("{e}+"),
            })
            .collect(),
    }
}

/// Partitions results into bands along `axis`. Frequency bands are
/// `[edges[i], edges[i+1])`, the last one open; lengths are 1..6 and 7+.
/// Keys are prefixed with a zero-padded band index so they sort in order.
pub fn bucket_report(results: &[ExampleResult], axis: BucketAxis, edges: &[u64]) -> BTreeMap<String, Band> {
    let names = band_names(axis, edges);
    let mut sums = vec![(0usize, 0.0f64); names.len()];
    for r in results {
        let b = band_key(axis, r, edges);
        sums[b].0 += 1;
        sums[b].1 += r.reciprocal_rank();
    }
    let total = results.len().max(1) as f64;
    names
        .into_iter()
        .zip(sums)
        .enumerate()
        .map(|(i, (name, (count, rr)))| {
            let band = Band {
                count,
                fraction: count as f64 / total,
                mrr: (count > 0).then(|| rr / count as f64),
            };
            (format!("{i:02}:{name}"), band)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub mrr: f64,
    pub bleu_rr: f64,
    /// MRR restricted to examples whose truth was seen in training.
    pub seen_mrr: Option<f64>,
    pub latency_p50_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
    pub buckets: BTreeMap<String, BTreeMap<String, Band>>,
    pub examples: Vec<ExampleResult>,
}

impl MethodReport {
    pub fn from_results(results: Vec<ExampleResult>, latencies_ms: Option<&[f64]>, freq_edges: &[u64]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let n = results.len() as f64;
        let mrr = results.iter().map(ExampleResult::reciprocal_rank).sum::<f64>() / n;
        let bleu_rr = results.iter().map(|r| r.bleu_rr).sum::<f64>() / n;
        let seen: Vec<&ExampleResult> = results.iter().filter(|r| r.seen()).collect();
        let seen_mrr =
            (!seen.is_empty()).then(|| seen.iter().map(|r| r.reciprocal_rank()).sum::<f64>() / seen.len() as f64);
        let (p50, p99) = match latencies_ms {
            Some(l) => {
                let (a, b) = latency_percentiles(l)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let mut buckets = BTreeMap::new();
        buckets.insert(
            "prefix_length".to_string(),
            bucket_report(&results, BucketAxis::PrefixLength, freq_edges),
        );
        buckets.insert(
            "label_frequency".to_string(),
            bucket_report(&results, BucketAxis::LabelFrequency, freq_edges),
        );
        Ok(MethodReport {
            mrr,
            bleu_rr,
            seen_mrr,
            latency_p50_ms: p50,
            latency_p99_ms: p99,
            buckets,
            examples: results,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub n_examples: usize,
    /// Fraction of evaluated truths that occur in training.
    pub coverage: f64,
    pub model_hash: String,
    pub config: serde_json::Value,
    pub model: MethodReport,
    pub baseline: Option<MethodReport>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::file(path, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a directory: each regular file is hashed as a
/// `blob <len>\0<bytes>` object and the sorted `(name, hash)` entries are
/// hashed together. Subdirectories are ignored.
pub fn dir_content_hash(dir: &Path) -> Result<String> {
    let mut entries = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let e = e?;
        if e.file_type()?.is_file() {
            entries.push(e.path());
        }
    }
    entries.sort();
    let mut tree = Sha256::new();
    for path in entries {
        let bytes = fs::read(&path).map_err(|e| Error::file(&path, e))?;
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", bytes.len()).as_bytes());
        blob.update(&bytes);
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        tree.update(name.as_bytes());
        tree.update([0u8]);
        tree.update(blob.finalize());
    }
    Ok(hex(&tree.finalize()))
}
