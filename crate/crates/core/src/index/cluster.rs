//! Balanced spherical 2-means and the clustering-only tree builder.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BuildDiagnostics, Draft, IndexAlgorithm, IndexParams, LabelTree};
use crate::corpus::splitmix64;
use crate::embed::LabelEmbeddings;
use crate::error::{Error, Result};
use crate::sparse::SparseVector;

pub const MAX_LLOYD_ITERS: usize = 20;

/// A clustering item: one label, or a must-link group of labels.
pub(crate) struct Unit<'a> {
    pub emb: Cow<'a, SparseVector>,
    pub weight: usize,
    /// Smallest label id in the unit; breaks ties.
    pub tie: u32,
}

/// Dense centroid buffers that are reset sparsely between uses.
pub(crate) struct Scratch {
    centroid: [Vec<f64>; 2],
    touched: [Vec<u32>; 2],
    norm: [f64; 2],
}

impl Scratch {
    pub fn new(dim: usize) -> Self {
        Scratch {
            centroid: [vec![0.0; dim], vec![0.0; dim]],
            touched: [Vec::new(), Vec::new()],
            norm: [0.0; 2],
        }
    }

    fn clear(&mut self, k: usize) {
        for &j in &self.touched[k] {
            self.centroid[k][j as usize] = 0.0;
        }
        self.touched[k].clear();
        self.norm[k] = 0.0;
    }

    fn add(&mut self, k: usize, v: &SparseVector, w: f64) {
        let c = &mut self.centroid[k];
        for (j, x) in v.iter() {
            let slot = &mut c[j as usize];
            if *slot == 0.0 {
                self.touched[k].push(j);
            }
            *slot += w * x;
            // an entry that cancels back to zero is pushed again later; the
            // duplicate in `touched` is harmless
        }
    }

    fn finish(&mut self, k: usize) {
        self.touched[k].sort_unstable();
        self.touched[k].dedup();
        let c = &self.centroid[k];
        self.norm[k] = self.touched[k].iter().map(|&j| c[j as usize] * c[j as usize]).sum::<f64>().sqrt();
    }

    fn sim(&self, k: usize, v: &SparseVector) -> f64 {
        if self.norm[k] == 0.0 {
            return 0.0;
        }
        let c = &self.centroid[k];
        v.iter().map(|(j, x)| x * c[j as usize]).sum::<f64>() / self.norm[k]
    }
}

pub(crate) fn mix(seed: u64, k: u64) -> u64 {
    splitmix64(seed ^ splitmix64(k.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Spherical 2-means over `units`. `assign` turns units ordered by
/// decreasing preference for the first centroid into a side mask
/// (`true` = first child). Returns that mask.
pub(crate) fn two_means<F>(units: &[Unit<'_>], seed: u64, scratch: &mut Scratch, assign: F) -> Vec<bool>
where
    F: Fn(&[usize]) -> Vec<bool>,
{
    let n = units.len();
    debug_assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.gen_range(0..n);
    let mut b = usize::MAX;
    let mut best = f64::INFINITY;
    for (i, u) in units.iter().enumerate() {
        if i == a {
            continue;
        }
        let s = u.emb.dot(&units[a].emb);
        if s < best || (s == best && u.tie < units[b].tie) {
            best = s;
            b = i;
        }
    }
    for k in 0..2 {
        scratch.clear(k);
    }
    scratch.add(0, &units[a].emb, 1.0);
    scratch.add(1, &units[b].emb, 1.0);
    scratch.finish(0);
    scratch.finish(1);

    let mut margins = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut current: Option<Vec<bool>> = None;
    for _ in 0..MAX_LLOYD_ITERS {
        for (m, u) in margins.iter_mut().zip(units) {
            *m = scratch.sim(0, &u.emb) - scratch.sim(1, &u.emb);
        }
        order.sort_by(|&i, &j| {
            margins[j]
                .total_cmp(&margins[i])
                .then(units[i].tie.cmp(&units[j].tie))
        });
        let next = assign(&order);
        if current.as_ref() == Some(&next) {
            break;
        }
        for k in 0..2 {
            scratch.clear(k);
        }
        for (u, &left) in units.iter().zip(&next) {
            scratch.add(if left { 0 } else { 1 }, &u.emb, u.weight as f64);
        }
        scratch.finish(0);
        scratch.finish(1);
        current = Some(next);
    }
    current.expect("at least one iteration")
}

/// First `ceil(n/2)` units in preference order go to the first child.
pub(crate) fn halve(order: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; order.len()];
    for &i in &order[..order.len().div_ceil(2)] {
        mask[i] = true;
    }
    mask
}

/// Balanced split of unit-weight rows; `true` marks the first child, which
/// receives `ceil(n/2)` rows.
pub fn balanced_split(rows: &[SparseVector], seed: u64) -> Vec<bool> {
    let dim = rows.iter().map(SparseVector::dim).max().unwrap_or(0);
    let units: Vec<Unit> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| Unit {
            emb: Cow::Borrowed(r),
            weight: 1,
            tie: i as u32,
        })
        .collect();
    if units.len() < 2 {
        return vec![true; units.len()];
    }
    two_means(&units, seed, &mut Scratch::new(dim), halve)
}

/// Recursive balanced 2-means over `ids`; nodes below carry `trie_depth`.
pub(crate) fn hc_draft(
    mut ids: Vec<u32>,
    rows: &[SparseVector],
    max_leaf: usize,
    seed: u64,
    trie_depth: u16,
    scratch: &mut Scratch,
) -> Draft {
    if ids.len() < max_leaf || ids.len() <= 1 {
        ids.sort_unstable();
        return Draft::leaf(ids, trie_depth);
    }
    let units: Vec<Unit> = ids
        .iter()
        .map(|&l| Unit {
            emb: Cow::Borrowed(&rows[l as usize]),
            weight: 1,
            tie: l,
        })
        .collect();
    let mask = two_means(&units, seed, scratch, halve);
    drop(units);
    let (left, right): (Vec<(u32, bool)>, Vec<(u32, bool)>) = ids.into_iter().zip(mask).partition(|&(_, m)| m);
    let left = hc_draft(left.into_iter().map(|p| p.0).collect(), rows, max_leaf, mix(seed, 1), trie_depth, scratch);
    let right = hc_draft(right.into_iter().map(|p| p.0).collect(), rows, max_leaf, mix(seed, 2), trie_depth, scratch);
    Draft::internal(vec![left, right], trie_depth)
}

pub(crate) fn check_inputs(n_labels: usize, max_leaf: usize) -> Result<()> {
    if n_labels == 0 {
        return Err(Error::invalid("cannot index an empty label set"));
    }
    if max_leaf == 0 {
        return Err(Error::invalid("max leaf size must be positive"));
    }
    Ok(())
}

/// Balanced hierarchical 2-means over label embeddings. Nodes with fewer
/// than `max_leaf` labels become leaves.
pub fn build_hc(emb: &LabelEmbeddings, max_leaf: usize, seed: u64) -> Result<LabelTree> {
    check_inputs(emb.len(), max_leaf)?;
    let mut scratch = Scratch::new(emb.dim);
    let ids: Vec<u32> = (0..emb.len() as u32).collect();
    let root = hc_draft(ids, &emb.rows, max_leaf, seed, 0, &mut scratch);
    let params = IndexParams {
        algorithm: IndexAlgorithm::Hc,
        max_leaf_size: max_leaf,
        d_trie: 0,
        d_mlc: 0,
        seed,
    };
    Ok(LabelTree::from_draft(root, params, BuildDiagnostics::default()))
}
