//! Hierarchical label indices.
//!
//! Four builders share one tree representation: balanced spherical 2-means
//! clustering ([`build_hc`]), a depth-capped character trie ([`build_trie`]),
//! a trie whose leaf groups are further clustered ([`build_hybrid`]) and
//! 2-means with must-link prefix constraints ([`build_mlc`]).
//!
//! Nodes are stored breadth-first, so the children of a node are contiguous
//! and every leaf owns a contiguous range of a flat label array.

mod cluster;
mod mlc;
mod trie;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cluster::{balanced_split, build_hc, MAX_LLOYD_ITERS};
pub(crate) use cluster::mix as mix_seed;
pub use mlc::build_mlc;
pub use trie::{build_hybrid, build_trie};

pub const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexAlgorithm {
    Hc,
    Trie,
    Hybrid,
    Mlc,
}

impl IndexAlgorithm {
    fn code(self) -> u8 {
        match self {
            IndexAlgorithm::Hc => 0,
            IndexAlgorithm::Trie => 1,
            IndexAlgorithm::Hybrid => 2,
            IndexAlgorithm::Mlc => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => IndexAlgorithm::Hc,
            1 => IndexAlgorithm::Trie,
            2 => IndexAlgorithm::Hybrid,
            3 => IndexAlgorithm::Mlc,
            _ => return Err(Error::format("tree", format!("unknown algorithm code {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexAlgorithm::Hc => "hc",
            IndexAlgorithm::Trie => "trie",
            IndexAlgorithm::Hybrid => "hybrid",
            IndexAlgorithm::Mlc => "mlc",
        }
    }
}

impl FromStr for IndexAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hc" => Ok(IndexAlgorithm::Hc),
            "trie" => Ok(IndexAlgorithm::Trie),
            "hybrid" => Ok(IndexAlgorithm::Hybrid),
            "mlc" => Ok(IndexAlgorithm::Mlc),
            other => Err(Error::invalid(format!("unknown index algorithm {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub algorithm: IndexAlgorithm,
    /// Clustering stops once a node holds fewer than this many labels.
    pub max_leaf_size: usize,
    pub d_trie: usize,
    pub d_mlc: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            algorithm: IndexAlgorithm::Hc,
            max_leaf_size: 100,
            d_trie: 3,
            d_mlc: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: u32,
    pub first_child: u32,
    pub child_count: u32,
    pub label_start: u32,
    pub label_count: u32,
    pub depth: u16,
    /// Length of the prefix shared by every label under this node, as
    /// guaranteed by trie construction (0 outside trie regions).
    pub trie_depth: u16,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.child_count == 0
    }
}

/// A must-link split that could not honor the balance constraint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relaxation {
    /// Depth of the node whose split was relaxed.
    pub depth: usize,
    pub labels: usize,
    pub left: usize,
    pub right: usize,
    pub largest_group: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildDiagnostics {
    pub relaxations: Vec<Relaxation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelTree {
    nodes: Vec<TreeNode>,
    labels: Vec<u32>,
    params: IndexParams,
    pub diagnostics: BuildDiagnostics,
}

/// Nested tree used while building; flattened breadth-first afterwards.
#[derive(Clone, Debug, Default)]
pub(crate) struct Draft {
    pub children: Vec<Draft>,
    pub labels: Vec<u32>,
    pub trie_depth: u16,
}

impl Draft {
    pub fn leaf(labels: Vec<u32>, trie_depth: u16) -> Self {
        Draft {
            children: Vec::new(),
            labels,
            trie_depth,
        }
    }

    pub fn internal(children: Vec<Draft>, trie_depth: u16) -> Self {
        Draft {
            children,
            labels: Vec::new(),
            trie_depth,
        }
    }
}

impl LabelTree {
    pub(crate) fn from_draft(root: Draft, params: IndexParams, diagnostics: BuildDiagnostics) -> Self {
        let mut nodes = Vec::new();
        let mut labels = Vec::new();
        let mut queue = std::collections::VecDeque::new();
        nodes.push(TreeNode {
            parent: NO_PARENT,
            first_child: 0,
            child_count: 0,
            label_start: 0,
            label_count: 0,
            depth: 0,
            trie_depth: root.trie_depth,
        });
        queue.push_back((0usize, root));
        while let Some((id, draft)) = queue.pop_front() {
            if draft.children.is_empty() {
                nodes[id].label_start = labels.len() as u32;
                nodes[id].label_count = draft.labels.len() as u32;
                labels.extend(draft.labels);
                continue;
            }
            let first = nodes.len();
            nodes[id].first_child = first as u32;
            nodes[id].child_count = draft.children.len() as u32;
            let depth = nodes[id].depth + 1;
            for child in draft.children {
                let cid = nodes.len();
                nodes.push(TreeNode {
                    parent: id as u32,
                    first_child: 0,
                    child_count: 0,
                    label_start: 0,
                    label_count: 0,
                    depth,
                    trie_depth: child.trie_depth,
                });
                queue.push_back((cid, child));
            }
        }
        LabelTree {
            nodes,
            labels,
            params,
            diagnostics,
        }
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    #[inline]
    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].is_leaf()
    }

    #[inline]
    pub fn children(&self, id: usize) -> Range<usize> {
        let n = &self.nodes[id];
        n.first_child as usize..(n.first_child + n.child_count) as usize
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        match self.nodes[id].parent {
            NO_PARENT => None,
            p => Some(p as usize),
        }
    }

    #[inline]
    pub fn leaf_labels(&self, id: usize) -> &[u32] {
        let n = &self.nodes[id];
        &self.labels[n.label_start as usize..(n.label_start + n.label_count) as usize]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.nodes[i].is_leaf())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    pub fn max_fanout(&self) -> usize {
        self.nodes.iter().map(|n| n.child_count as usize).max().unwrap_or(0)
    }

    pub fn max_leaf_size(&self) -> usize {
        self.nodes.iter().map(|n| n.label_count as usize).max().unwrap_or(0)
    }

    /// Leaf id for every label id.
    pub fn label_to_leaf(&self) -> Vec<u32> {
        let mut out = vec![u32::MAX; self.labels.len()];
        for leaf in self.leaves() {
            for &l in self.leaf_labels(leaf) {
                out[l as usize] = leaf as u32;
            }
        }
        out
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Labels in the subtree rooted at `id`.
    pub fn subtree_labels(&self, id: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.extend_from_slice(self.leaf_labels(n));
            } else {
                stack.extend(self.children(n));
            }
        }
        out
    }

    /// Structural checks: labels `0..L` each in exactly one leaf, consistent
    /// parent/child links, breadth-first layout.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("tree", d));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        if self.nodes[0].parent != NO_PARENT {
            return bad("root has a parent".into());
        }
        let mut covered = vec![false; self.labels.len()];
        for (id, n) in self.nodes.iter().enumerate() {
            if n.is_leaf() {
                let end = n.label_start as usize + n.label_count as usize;
                if end > self.labels.len() {
                    return bad(format!("leaf {id} label range out of bounds"));
                }
            } else {
                if n.label_count != 0 {
                    return bad(format!("internal node {id} holds labels"));
                }
                for c in self.children(id) {
                    if c <= id || c >= self.nodes.len() || self.nodes[c].parent as usize != id {
                        return bad(format!("broken child link {id} -> {c}"));
                    }
                    if self.nodes[c].depth != n.depth + 1 {
                        return bad(format!("depth mismatch at node {c}"));
                    }
                }
            }
            if id > 0 {
                let p = n.parent as usize;
                if p >= id || !self.children(p).contains(&id) {
                    return bad(format!("broken parent link {id} -> {p}"));
                }
            }
        }
        for leaf in self.leaves() {
            for &l in self.leaf_labels(leaf) {
                let slot = covered
                    .get_mut(l as usize)
                    .ok_or_else(|| Error::format("tree", format!("label {l} out of range")))?;
                if std::mem::replace(slot, true) {
                    return bad(format!("label {l} appears in two leaves"));
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return bad("some label is missing from every leaf".into());
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 8] = b"PFXTREE1";

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u8(self.params.algorithm.code())?;
        w.write_u32::<LittleEndian>(self.params.max_leaf_size as u32)?;
        w.write_u32::<LittleEndian>(2)?;
        w.write_u32::<LittleEndian>(self.params.d_trie as u32)?;
        w.write_u32::<LittleEndian>(self.params.d_mlc as u32)?;
        w.write_u64::<LittleEndian>(self.params.seed)?;
        w.write_u64::<LittleEndian>(self.nodes.len() as u64)?;
        w.write_u64::<LittleEndian>(self.labels.len() as u64)?;
        for n in &self.nodes {
            w.write_u32::<LittleEndian>(n.parent)?;
            w.write_u32::<LittleEndian>(n.first_child)?;
            w.write_u32::<LittleEndian>(n.child_count)?;
            w.write_u8(n.is_leaf() as u8)?;
            w.write_u32::<LittleEndian>(n.label_start)?;
            w.write_u32::<LittleEndian>(n.label_count)?;
            w.write_u16::<LittleEndian>(n.trie_depth)?;
        }
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::format("tree", "bad magic"));
        }
        let algorithm = IndexAlgorithm::from_code(r.read_u8()?)?;
        let max_leaf_size = r.read_u32::<LittleEndian>()? as usize;
        let _branching = r.read_u32::<LittleEndian>()?;
        let d_trie = r.read_u32::<LittleEndian>()? as usize;
        let d_mlc = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let n_nodes = r.read_u64::<LittleEndian>()? as usize;
        let n_labels = r.read_u64::<LittleEndian>()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut parent_depths: Vec<u16> = Vec::with_capacity(n_nodes);
        for id in 0..n_nodes {
            let parent = r.read_u32::<LittleEndian>()?;
            let first_child = r.read_u32::<LittleEndian>()?;
            let child_count = r.read_u32::<LittleEndian>()?;
            let leaf = r.read_u8()? != 0;
            let label_start = r.read_u32::<LittleEndian>()?;
            let label_count = r.read_u32::<LittleEndian>()?;
            let trie_depth = r.read_u16::<LittleEndian>()?;
            if leaf != (child_count == 0) {
                return Err(Error::format("tree", format!("leaf flag mismatch at node {id}")));
            }
            let depth = if parent == NO_PARENT {
                0
            } else {
                *parent_depths
                    .get(parent as usize)
                    .ok_or_else(|| Error::format("tree", "parent after child"))?
                    + 1
            };
            parent_depths.push(depth);
            nodes.push(TreeNode {
                parent,
                first_child,
                child_count,
                label_start,
                label_count,
                depth,
                trie_depth,
            });
        }
        let mut labels = vec![0u32; n_labels];
        r.read_u32_into::<LittleEndian>(&mut labels)?;
        let tree = LabelTree {
            nodes,
            labels,
            params: IndexParams {
                algorithm,
                max_leaf_size,
                d_trie,
                d_mlc,
                seed,
            },
            diagnostics: BuildDiagnostics::default(),
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(f))
    }

    /// Same leaves (as label sets) regardless of node numbering.
    pub fn same_partition(&self, other: &LabelTree) -> bool {
        let mut a: Vec<Vec<u32>> = self.leaves().map(|l| sorted(self.leaf_labels(l))).collect();
        let mut b: Vec<Vec<u32>> = other.leaves().map(|l| sorted(other.leaf_labels(l))).collect();
        a.sort();
        b.sort();
        a == b
    }

    /// Same shape and leaf contents, ignoring build parameters.
    pub fn same_structure(&self, other: &LabelTree) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                a.parent == b.parent && a.first_child == b.first_child && a.child_count == b.child_count
            })
            && self
                .leaves()
                .all(|l| sorted(self.leaf_labels(l)) == sorted(other.leaf_labels(l)))
    }
}

fn sorted(s: &[u32]) -> Vec<u32> {
    let mut v = s.to_vec();
    v.sort_unstable();
    v
}

/// Dispatches to the builder named in `params`. `labels` are needed by the
/// prefix-aware builders and `embeddings` by the clustering ones.
pub fn build_index(
    params: &IndexParams,
    labels: &[String],
    embeddings: Option<&crate::embed::LabelEmbeddings>,
) -> Result<LabelTree> {
    let need_emb = || {
        embeddings.ok_or_else(|| {
            Error::invalid(format!("index algorithm {} needs label embeddings", params.algorithm.name()))
        })
    };
    match params.algorithm {
        IndexAlgorithm::Hc => build_hc(need_emb()?, params.max_leaf_size, params.seed),
        IndexAlgorithm::Trie => build_trie(labels, params.d_trie),
        IndexAlgorithm::Hybrid => build_hybrid(labels, need_emb()?, params.d_trie, params.max_leaf_size, params.seed),
        IndexAlgorithm::Mlc => build_mlc(labels, need_emb()?, params.max_leaf_size, params.d_mlc, params.seed),
    }
}

/// Checks that labels sharing a prefix of length `d <= max_d` share their
/// depth-`d` ancestor (or leaf, if shallower) and that every node's labels
/// agree on its first `trie_depth` characters.
#[cfg(test)]
pub(crate) fn prefix_grouping_violation(t: &LabelTree, labels: &[String], max_d: usize) -> std::result::Result<(), String> {
    let leaf_of = t.label_to_leaf();
    let paths: Vec<Vec<usize>> = leaf_of.iter().map(|&l| t.path_to(l as usize)).collect();
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            let (la, lb) = (labels[a].as_bytes(), labels[b].as_bytes());
            let common = la.iter().zip(lb).take_while(|(x, y)| x == y).count();
            let (pa, pb) = (&paths[a], &paths[b]);
            let k = common.min(max_d).min(pa.len() - 1).min(pb.len() - 1);
            if pa[k] != pb[k] {
                return Err(format!("{:?} and {:?} split at depth {k}", labels[a], labels[b]));
            }
        }
    }
    for id in 0..t.n_nodes() {
        let td = t.node(id).trie_depth as usize;
        let sub = t.subtree_labels(id);
        let p = &labels[sub[0] as usize].as_bytes()[..td];
        if sub.iter().any(|&l| !labels[l as usize].as_bytes().starts_with(p)) {
            return Err(format!("node {id} violates its prefix"));
        }
    }
    Ok(())
}
