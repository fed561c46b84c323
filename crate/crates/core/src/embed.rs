//! Label embeddings for indexing: PIFA aggregation of positive inputs, or the
//! character n-gram TF-IDF vector of the label text.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseVector};
use crate::vectorize::TfidfVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Pifa,
    LabelTextSimple,
    LabelTextPosWeighted,
}

/// One unit-norm row per label id. Rows that are exactly zero are listed in
/// `zero_rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddings {
    pub rows: Vec<SparseVector>,
    pub source: EmbeddingSource,
    pub dim: usize,
    pub zero_rows: Vec<u32>,
}

impl LabelEmbeddings {
    fn from_rows(rows: Vec<SparseVector>, source: EmbeddingSource, dim: usize) -> Self {
        let zero_rows = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_zero())
            .map(|(i, _)| i as u32)
            .collect();
        LabelEmbeddings {
            rows,
            source,
            dim,
            zero_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        CsrMatrix::<f64>::from_rows(self.dim, &self.rows).save(path)
    }

    pub fn load(path: &Path, source: EmbeddingSource) -> Result<Self> {
        let m = CsrMatrix::<f64>::load(path)?;
        let rows = (0..m.rows()).map(|r| m.row_vector(r)).collect();
        Ok(Self::from_rows(rows, source, m.dim()))
    }
}

/// `row_ℓ = v_ℓ / ‖v_ℓ‖` with `v_ℓ` the sum of inputs whose label is `ℓ`.
pub fn pifa_embed(inputs: &[SparseVector], label_ids: &[u32], n_labels: usize) -> Result<LabelEmbeddings> {
    if inputs.len() != label_ids.len() {
        return Err(Error::invalid("inputs and label ids differ in length"));
    }
    let dim = inputs.first().map(SparseVector::dim).unwrap_or(0);
    let mut pairs: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_labels];
    let mut seen = vec![false; n_labels];
    for (x, &l) in inputs.iter().zip(label_ids) {
        if x.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.dim(),
            });
        }
        let slot = pairs
            .get_mut(l as usize)
            .ok_or_else(|| Error::invalid(format!("label id {l} out of range")))?;
        slot.extend(x.iter());
        seen[l as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::LabelWithoutExamples(missing));
    }
    let rows = pairs
        .into_iter()
        .map(|p| SparseVector::from_pairs(dim, p).normalized())
        .collect();
    Ok(LabelEmbeddings::from_rows(rows, EmbeddingSource::Pifa, dim))
}

/// Vectorizes each label string with `vocab` (plain or position-weighted per
/// the vocabulary's flag).
pub fn label_text_embed(labels: &[String], vocab: &TfidfVocab) -> LabelEmbeddings {
    let source = if vocab.position_weighted() {
        EmbeddingSource::LabelTextPosWeighted
    } else {
        EmbeddingSource::LabelTextSimple
    };
    let rows = labels.iter().map(|l| vocab.vectorize(l)).collect();
    LabelEmbeddings::from_rows(rows, source, vocab.dim())
}
