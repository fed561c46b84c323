//! A servable model directory: tree model, input encoder and the MFQ
//! fallback built from training frequencies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_prefix, normalize_query, read_lines, write_lines};
use crate::error::{Error, Result};
use crate::eval::MfqIndex;
use crate::model::{Suggestion, TreeModel};
use crate::sparse::SparseVector;
use crate::vectorize::{InputEncoder, InputMode, TfidfVocab};

pub const ENCODER_FILE: &str = "encoder.json";
pub const PREV_VOCAB_FILE: &str = "prev_vocab.json";
pub const PREFIX_VOCAB_FILE: &str = "prefix_vocab.json";
pub const COUNTS_FILE: &str = "label_counts.txt";

/// Depth of the per-node cache in the fallback index.
pub const MFQ_CACHE_K: usize = 100;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderFile {
    mode: InputMode,
    prev_vocab: String,
    prefix_vocab: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Model,
    Mfq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub query: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestOutput {
    pub suggestions: Vec<Scored>,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuggestOptions {
    pub k: usize,
    pub beam: usize,
    pub mfq_fallback: bool,
}

impl Default for SuggestOptions {
    fn default() -> Self {
        SuggestOptions {
            k: 10,
            beam: 10,
            mfq_fallback: true,
        }
    }
}

pub struct Engine {
    model: TreeModel,
    encoder: InputEncoder,
    counts: Vec<u64>,
    mfq: MfqIndex,
}

impl Engine {
    /// `counts[l]` is the training frequency of label `l`.
    pub fn new(model: TreeModel, encoder: InputEncoder, counts: Vec<u64>) -> Result<Self> {
        if encoder.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                got: encoder.dim(),
            });
        }
        if counts.len() != model.labels().len() {
            return Err(Error::DimensionMismatch {
                expected: model.labels().len(),
                got: counts.len(),
            });
        }
        let mfq = MfqIndex::from_counts(
            model.labels().iter().map(String::as_str).zip(counts.iter().copied()),
            MFQ_CACHE_K,
        );
        Ok(Engine {
            model,
            encoder,
            counts,
            mfq,
        })
    }

    pub fn model(&self) -> &TreeModel {
        &self.model
    }

    pub fn encoder(&self) -> &InputEncoder {
        &self.encoder
    }

    pub fn mfq(&self) -> &MfqIndex {
        &self.mfq
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        self.encoder.prev_vocab.save(&dir.join(PREV_VOCAB_FILE))?;
        self.encoder.prefix_vocab.save(&dir.join(PREFIX_VOCAB_FILE))?;
        let enc = EncoderFile {
            mode: self.encoder.mode,
            prev_vocab: PREV_VOCAB_FILE.into(),
            prefix_vocab: PREFIX_VOCAB_FILE.into(),
        };
        let path = dir.join(ENCODER_FILE);
        fs::write(&path, serde_json::to_string_pretty(&enc)?).map_err(|e| Error::file(&path, e))?;
        let lines: Vec<String> = self.counts.iter().map(u64::to_string).collect();
        write_lines(&dir.join(COUNTS_FILE), lines.iter().map(String::as_str))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = TreeModel::load(dir)?;
        let path = dir.join(ENCODER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let enc: EncoderFile = serde_json::from_str(&text)?;
        let encoder = InputEncoder::new(
            TfidfVocab::load(&dir.join(&enc.prev_vocab))?,
            TfidfVocab::load(&dir.join(&enc.prefix_vocab))?,
            enc.mode,
        );
        let counts = read_lines(&dir.join(COUNTS_FILE))?
            .iter()
            .map(|l| l.parse::<u64>().map_err(|e| Error::format("label counts", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Engine::new(model, encoder, counts)
    }

    /// Encodes already-normalized inputs.
    pub fn encode(&self, prev: &str, prefix: &str) -> SparseVector {
        self.encoder.encode(prev, prefix)
    }

    /// Model suggestions for already-normalized inputs.
    pub fn predict(&self, prev: &str, prefix: &str, k: usize, beam: usize) -> Vec<Suggestion> {
        self.model.predict(&self.encode(prev, prefix), prefix, beam, k)
    }

    /// Normalizes raw inputs, runs the model and falls back to the most
    /// frequent completions when the model has nothing matching the prefix.
    pub fn suggest(&self, prev: &str, prefix: &str, opts: SuggestOptions) -> SuggestOutput {
        let prev = normalize_query(prev);
        let prefix = normalize_prefix(prefix);
        let found = self.predict(&prev, &prefix, opts.k, opts.beam);
        if found.is_empty() && opts.mfq_fallback {
            let total = self.counts.iter().sum::<u64>().max(1) as f64;
            let suggestions = self
                .mfq
                .lookup(&prefix, opts.k)
                .into_iter()
                .map(|(q, f)| Scored {
                    query: q.to_string(),
                    score: f as f64 / total,
                })
                .collect();
            return SuggestOutput {
                suggestions,
                source: Source::Mfq,
            };
        }
        SuggestOutput {
            suggestions: found
                .into_iter()
                .map(|s| Scored {
                    query: s.query,
                    score: s.score,
                })
                .collect(),
            source: Source::Model,
        }
    }
}
