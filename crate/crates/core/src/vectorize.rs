//! Sparse TF-IDF vectorizers: token unigrams for the previous query and
//! character n-grams (plain or position-weighted) for prefixes and labels.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseVector;

pub const VOCAB_FORMAT: &str = "prefx-tfidf-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum VocabKind {
    /// Whitespace-separated tokens.
    TokenUnigram,
    /// Character n-grams with `min_n <= n <= max_n`, spaces included, never
    /// crossing the string boundary.
    CharNgram { min_n: usize, max_n: usize },
}

impl VocabKind {
    pub const CHAR_1_3: VocabKind = VocabKind::CharNgram { min_n: 1, max_n: 3 };

    pub fn default_min_df(self) -> usize {
        match self {
            VocabKind::TokenUnigram => 2,
            VocabKind::CharNgram { .. } => 1,
        }
    }

    /// Calls `f(term, position)` for every term occurrence; `position` is the
    /// 1-based index of the term's first character (or first token).
    pub fn for_each_term<'t>(self, text: &'t str, mut f: impl FnMut(&'t str, usize)) {
        match self {
            VocabKind::TokenUnigram => {
                for (i, tok) in text.split_whitespace().enumerate() {
                    f(tok, i + 1);
                }
            }
            VocabKind::CharNgram { min_n, max_n } => {
                let bounds: Vec<usize> = text
                    .char_indices()
                    .map(|(i, _)| i)
                    .chain(std::iter::once(text.len()))
                    .collect();
                let chars = bounds.len() - 1;
                for start in 0..chars {
                    for n in min_n..=max_n {
                        if start + n > chars {
                            break;
                        }
                        f(&text[bounds[start]..bounds[start + n]], start + 1);
                    }
                }
            }
        }
    }
}

/// A fitted TF-IDF vocabulary with smoothed idf
/// `ln((1 + N) / (1 + df)) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfVocab {
    kind: VocabKind,
    position_weighted: bool,
    terms: HashMap<String, u32>,
    idf: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    kind: VocabKind,
    position_weighted: bool,
    terms: BTreeMap<String, u32>,
    idf: Vec<f64>,
}

impl TfidfVocab {
    /// Feature ids follow lexicographic term order.
    pub fn fit<'a, I>(corpus: I, kind: VocabKind, min_df: usize, position_weighted: bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut df: HashMap<&'a str, usize> = HashMap::new();
        let mut n_docs = 0usize;
        let mut seen: Vec<&'a str> = Vec::new();
        for doc in corpus {
            n_docs += 1;
            seen.clear();
            kind.for_each_term(doc, |t, _| seen.push(t));
            seen.sort_unstable();
            seen.dedup();
            for t in &seen {
                *df.entry(t).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = df.into_iter().filter(|(_, d)| *d >= min_df).collect();
        if kept.is_empty() {
            return Err(Error::EmptyVocabulary { min_df });
        }
        kept.sort_unstable_by(|a, b| a.0.cmp(b.0));
        let n = n_docs as f64;
        let idf = kept
            .iter()
            .map(|(_, d)| ((1.0 + n) / (1.0 + *d as f64)).ln() + 1.0)
            .collect();
        let terms = kept
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.to_string(), i as u32))
            .collect();
        Ok(TfidfVocab {
            kind,
            position_weighted,
            terms,
            idf,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn position_weighted(&self) -> bool {
        self.position_weighted
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn feature_id(&self, term: &str) -> Option<u32> {
        self.terms.get(term).copied()
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    /// Term frequencies before idf scaling: plain counts, or sums of
    /// `1 / position` when `weighted`.
    pub fn term_counts(&self, text: &str, weighted: bool) -> SparseVector {
        let mut pairs = Vec::new();
        self.kind.for_each_term(text, |t, pos| {
            if let Some(&id) = self.terms.get(t) {
                let w = if weighted { 1.0 / pos as f64 } else { 1.0 };
                pairs.push((id, w));
            }
        });
        SparseVector::from_pairs(self.dim(), pairs)
    }

    fn tfidf(&self, text: &str, weighted: bool) -> SparseVector {
        let mut v = self.term_counts(text, weighted);
        let idf = &self.idf;
        let pairs: Vec<(u32, f64)> = v.iter().map(|(i, c)| (i, c * idf[i as usize])).collect();
        v = SparseVector::from_pairs(self.dim(), pairs);
        v.normalize();
        v
    }

    /// Count × idf, Euclidean-normalized. Out-of-vocabulary terms are ignored;
    /// a text with no known term yields the zero vector.
    pub fn vectorize_simple(&self, text: &str) -> SparseVector {
        self.tfidf(text, false)
    }

    /// Like [`Self::vectorize_simple`] but an occurrence starting at 1-based
    /// position `i` adds `1/i` to its term's count.
    pub fn vectorize_position_weighted(&self, text: &str) -> SparseVector {
        self.tfidf(text, true)
    }

    /// Dispatches on the vocabulary's `position_weighted` flag.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        self.tfidf(text, self.position_weighted)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        serde_json::to_writer(BufWriter::new(f), &self.to_file())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let file: VocabFile = serde_json::from_reader(BufReader::new(f))?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            format: VOCAB_FORMAT.to_string(),
            kind: self.kind,
            position_weighted: self.position_weighted,
            terms: self.terms.iter().map(|(t, i)| (t.clone(), *i)).collect(),
            idf: self.idf.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    fn from_file(file: VocabFile) -> Result<Self> {
        if file.format != VOCAB_FORMAT {
            return Err(Error::format("vocabulary", format!("unknown format tag {:?}", file.format)));
        }
        let dim = file.idf.len();
        let mut used = vec![false; dim];
        for &id in file.terms.values() {
            let slot = used
                .get_mut(id as usize)
                .ok_or_else(|| Error::format("vocabulary", format!("feature id {id} out of range")))?;
            if std::mem::replace(slot, true) {
                return Err(Error::format("vocabulary", format!("feature id {id} reused")));
            }
        }
        if file.terms.len() != dim {
            return Err(Error::format("vocabulary", "term map and idf array differ in size"));
        }
        if file.idf.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::format("vocabulary", "idf must be finite and positive"));
        }
        Ok(TfidfVocab {
            kind: file.kind,
            position_weighted: file.position_weighted,
            terms: file.terms.into_iter().collect(),
            idf: file.idf,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    PrevOnly,
    PrevConcatPrefix,
}

/// Encodes `(previous query, prefix)` pairs into model input vectors.
#[derive(Clone, Debug)]
pub struct InputEncoder {
    pub prev_vocab: TfidfVocab,
    pub prefix_vocab: TfidfVocab,
    pub mode: InputMode,
}

impl InputEncoder {
    pub fn new(prev_vocab: TfidfVocab, prefix_vocab: TfidfVocab, mode: InputMode) -> Self {
        InputEncoder {
            prev_vocab,
            prefix_vocab,
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            InputMode::PrevOnly => self.prev_vocab.dim(),
            InputMode::PrevConcatPrefix => self.prev_vocab.dim() + self.prefix_vocab.dim(),
        }
    }

    /// Each block is normalized on its own before concatenation.
    pub fn encode(&self, prev_query: &str, prefix: &str) -> SparseVector {
        let prev = self.prev_vocab.vectorize(prev_query);
        match self.mode {
            InputMode::PrevOnly => prev,
            InputMode::PrevConcatPrefix => prev.concat(&self.prefix_vocab.vectorize(prefix)),
        }
    }
}
