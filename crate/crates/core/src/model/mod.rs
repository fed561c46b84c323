//! Linear rankers on a label tree and beam-search inference.

mod solver;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_lines, write_lines};
use crate::error::{Error, Result};
use crate::index::LabelTree;
use crate::sparse::{row_dot, CsrMatrix, SparseVector};

pub use solver::{primal_objective, solve, Rows, Solution, SolverParams};
pub use train::{routing, train};

pub const MODEL_FORMAT: &str = "prefx-model-v1";

pub const TREE_FILE: &str = "tree.bin";
pub const NODE_WEIGHTS_FILE: &str = "node_weights.bin";
pub const LABEL_WEIGHTS_FILE: &str = "label_weights.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const CONFIG_FILE: &str = "model.json";

/// Monotone map from a raw margin into `(0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    /// `exp(−max(0, 1 − s)³)`, floored at the smallest positive normal so
    /// very negative margins do not underflow to zero
    #[default]
    CubicHinge,
    Sigmoid,
}

impl ScoreTransform {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            ScoreTransform::CubicHinge => {
                let h = (1.0 - s).max(0.0);
                (-h * h * h).exp().max(f64::MIN_POSITIVE)
            }
            ScoreTransform::Sigmoid => (1.0 / (1.0 + (-s).exp())).max(f64::MIN_POSITIVE),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    /// Trained weights with smaller magnitude are dropped (bias excluded).
    pub prune_threshold: f64,
    pub transform: ScoreTransform,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            c: 1.0,
            tol: 1e-4,
            max_epochs: 100,
            prune_threshold: 0.1,
            transform: ScoreTransform::CubicHinge,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub format: String,
    pub transform: ScoreTransform,
    pub reg_c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub prune_threshold: f64,
    pub input_dim: usize,
    pub n_labels: usize,
    pub seed: u64,
}

/// One sparse weight row plus a bias per classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub matrix: CsrMatrix<f32>,
    pub bias: Vec<f32>,
}

impl Weights {
    #[inline]
    pub fn margin(&self, r: usize, x: &SparseVector) -> f64 {
        let (idx, val) = self.matrix.row(r);
        row_dot(idx, val, x) + self.bias[r] as f64
    }

    /// Stored with the bias as an extra trailing column.
    fn save(&self, path: &Path) -> Result<()> {
        let dim = self.matrix.dim();
        let mut out = CsrMatrix::<f32>::with_dim(dim + 1);
        for r in 0..self.matrix.rows() {
            let (idx, val) = self.matrix.row(r);
            let tail = (self.bias[r] != 0.0).then_some((dim as u32, self.bias[r]));
            out.push_row(idx.iter().copied().zip(val.iter().copied()).chain(tail));
        }
        out.save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let m = CsrMatrix::<f32>::load(path)?;
        if m.dim() == 0 {
            return Err(Error::format("weights", "missing bias column"));
        }
        let dim = m.dim() - 1;
        let mut matrix = CsrMatrix::with_dim(dim);
        let mut bias = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let (idx, val) = m.row(r);
            let (body, b) = match idx.last() {
                Some(&j) if j as usize == dim => (idx.len() - 1, val[idx.len() - 1]),
                _ => (idx.len(), 0.0),
            };
            if val.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("weights", format!("non-finite weight in row {r}")));
            }
            matrix.push_row(idx[..body].iter().copied().zip(val[..body].iter().copied()));
            bias.push(b);
        }
        Ok(Weights { matrix, bias })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suggestion {
    pub label: u32,
    pub query: String,
    pub score: f64,
}

/// Work done by one beam search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BeamStats {
    pub node_evals: usize,
    pub label_evals: usize,
    /// Sum over evaluated classifiers of the input's nonzero count.
    pub dot_work: usize,
    pub leaves_skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeModel {
    tree: LabelTree,
    nodes: Weights,
    labels_w: Weights,
    labels: Vec<String>,
    config: ModelConfig,
}

impl TreeModel {
    pub(crate) fn from_parts(
        tree: LabelTree,
        nodes: Weights,
        labels_w: Weights,
        labels: Vec<String>,
        config: ModelConfig,
    ) -> Self {
        TreeModel {
            tree,
            nodes,
            labels_w,
            labels,
            config,
        }
    }

    pub fn tree(&self) -> &LabelTree {
        &self.tree
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn node_weights(&self) -> &Weights {
        &self.nodes
    }

    pub fn label_weights(&self) -> &Weights {
        &self.labels_w
    }

    /// Raw margin of the classifier guarding `node` (not the root).
    #[inline]
    pub fn node_margin(&self, node: usize, x: &SparseVector) -> f64 {
        self.nodes.margin(node, x)
    }

    #[inline]
    pub fn label_margin(&self, label: usize, x: &SparseVector) -> f64 {
        self.labels_w.margin(label, x)
    }

    #[inline]
    pub fn transform(&self, s: f64) -> f64 {
        self.config.transform.apply(s)
    }

    pub fn predict(&self, x: &SparseVector, prefix: &str, beam: usize, k: usize) -> Vec<Suggestion> {
        self.predict_with_stats(x, prefix, beam, k, &mut BeamStats::default())
    }

    /// Beam search that keeps the `beam` best nodes per level; leaves reached
    /// early stay in the beam and compete with deeper nodes. Labels of the
    /// final leaves are scored and filtered by `prefix`.
    pub fn predict_with_stats(
        &self,
        x: &SparseVector,
        prefix: &str,
        beam: usize,
        k: usize,
        stats: &mut BeamStats,
    ) -> Vec<Suggestion> {
        self.search(x, prefix, beam, k, stats, true)
    }

    pub(crate) fn search(
        &self,
        x: &SparseVector,
        prefix: &str,
        beam: usize,
        k: usize,
        stats: &mut BeamStats,
        precheck: bool,
    ) -> Vec<Suggestion> {
        let beam = beam.max(1);
        let nnz = x.nnz();
        let mut frontier: Vec<(usize, f64)> = vec![(self.tree.root(), 1.0)];
        let mut next: Vec<(usize, f64)> = Vec::new();
        while frontier.iter().any(|&(n, _)| !self.tree.is_leaf(n)) {
            next.clear();
            for &(n, score) in &frontier {
                if self.tree.is_leaf(n) {
                    next.push((n, score));
                    continue;
                }
                for c in self.tree.children(n) {
                    stats.node_evals += 1;
                    stats.dot_work += nnz;
                    next.push((c, score * self.transform(self.node_margin(c, x))));
                }
            }
            next.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            next.truncate(beam);
            std::mem::swap(&mut frontier, &mut next);
        }
        let mut out: Vec<(f64, u32)> = Vec::new();
        for &(leaf, score) in &frontier {
            let labels = self.tree.leaf_labels(leaf);
            if precheck && !prefix.is_empty() && !self.leaf_may_match(leaf, prefix) {
                stats.leaves_skipped += 1;
                continue;
            }
            for &l in labels {
                if !self.labels[l as usize].starts_with(prefix) {
                    continue;
                }
                stats.label_evals += 1;
                stats.dot_work += nnz;
                out.push((score * self.transform(self.label_margin(l as usize, x)), l));
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.truncate(k);
        out.into_iter()
            .map(|(score, l)| Suggestion {
                label: l,
                query: self.labels[l as usize].clone(),
                score,
            })
            .collect()
    }

    /// False only when the prefix shared by every label of `leaf` already
    /// diverges from `prefix`, so no label there can match.
    fn leaf_may_match(&self, leaf: usize, prefix: &str) -> bool {
        let td = self.tree.node(leaf).trie_depth as usize;
        let Some(&first) = self.tree.leaf_labels(leaf).first() else {
            return false;
        };
        let path = &self.labels[first as usize].as_bytes()[..td];
        let n = path.len().min(prefix.len());
        path[..n] == prefix.as_bytes()[..n]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        self.tree.save(&dir.join(TREE_FILE))?;
        self.nodes.save(&dir.join(NODE_WEIGHTS_FILE))?;
        self.labels_w.save(&dir.join(LABEL_WEIGHTS_FILE))?;
        write_lines(&dir.join(LABELS_FILE), self.labels.iter().map(String::as_str))?;
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&path, json).map_err(|e| Error::file(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        if config.format != MODEL_FORMAT {
            return Err(Error::format("model", format!("unsupported format {:?}", config.format)));
        }
        let tree = LabelTree::load(&dir.join(TREE_FILE))?;
        let nodes = Weights::load(&dir.join(NODE_WEIGHTS_FILE))?;
        let labels_w = Weights::load(&dir.join(LABEL_WEIGHTS_FILE))?;
        let labels = read_lines(&dir.join(LABELS_FILE))?;
        let model = TreeModel {
            tree,
            nodes,
            labels_w,
            labels,
            config,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("model", d));
        if self.labels.len() != self.tree.n_labels() || self.labels.len() != self.config.n_labels {
            return bad("label count disagrees with the tree".into());
        }
        if self.nodes.matrix.rows() != self.tree.n_nodes() || self.labels_w.matrix.rows() != self.labels.len() {
            return bad("weight rows disagree with the tree".into());
        }
        for w in [&self.nodes, &self.labels_w] {
            if w.matrix.dim() != self.config.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.input_dim,
                    got: w.matrix.dim(),
                });
            }
            if w.bias.iter().any(|b| !b.is_finite()) {
                return bad("non-finite bias".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
