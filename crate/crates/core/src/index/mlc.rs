//! Balanced 2-means with must-link prefix constraints near the root.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::cluster::{check_inputs, hc_draft, mix, two_means, Scratch, Unit};
use super::{BuildDiagnostics, Draft, IndexAlgorithm, IndexParams, LabelTree, Relaxation};
use crate::embed::LabelEmbeddings;
use crate::error::{Error, Result};
use crate::sparse::SparseVector;

/// Side mask over units ordered by preference: the first child gets as
/// close to `ceil(n/2)` total weight as the atomic weights allow.
fn weighted_assign(order: &[usize], weights: &[usize]) -> Vec<bool> {
    let n: usize = weights.iter().sum();
    let target = n.div_ceil(2);
    let mut mask = vec![false; weights.len()];
    let mut left = 0;
    for &i in order {
        if left + weights[i] <= target {
            mask[i] = true;
            left += weights[i];
        }
    }
    if n - left <= left + 1 {
        return mask;
    }
    // greedy fell short: exact subset sum, earlier (preferred) units first
    let mut from: Vec<Option<(u32, u32)>> = vec![None; target + 1];
    let mut reach = vec![false; target + 1];
    reach[0] = true;
    for (pos, &i) in order.iter().enumerate() {
        let w = weights[i];
        for s in (w..=target).rev() {
            if !reach[s] && reach[s - w] {
                reach[s] = true;
                from[s] = Some((pos as u32, (s - w) as u32));
            }
        }
    }
    let best = (0..=target).rev().find(|&s| reach[s]).unwrap_or(0);
    if best <= left {
        return mask;
    }
    let mut mask = vec![false; weights.len()];
    let mut s = best;
    while let Some((pos, prev)) = from[s] {
        mask[order[pos as usize]] = true;
        s = prev as usize;
    }
    mask
}

struct Ctx<'a> {
    labels: &'a [String],
    rows: &'a [SparseVector],
    max_leaf: usize,
    d_mlc: usize,
    scratch: Scratch,
    relaxations: Vec<Relaxation>,
}

fn mlc_draft(mut ids: Vec<u32>, depth: usize, seed: u64, ctx: &mut Ctx<'_>) -> Draft {
    let n = ids.len();
    if n < ctx.max_leaf || n <= 1 {
        ids.sort_unstable();
        return Draft::leaf(ids, 0);
    }
    if depth >= ctx.d_mlc {
        return hc_draft(ids, ctx.rows, ctx.max_leaf, seed, 0, &mut ctx.scratch);
    }
    // children sit at depth + 1 and must keep (depth + 1)-prefix groups whole
    let mut groups: BTreeMap<&[u8], Vec<u32>> = BTreeMap::new();
    for &l in &ids {
        let s = ctx.labels[l as usize].as_bytes();
        groups.entry(&s[..s.len().min(depth + 1)]).or_default().push(l);
    }
    let groups: Vec<Vec<u32>> = groups.into_values().collect();
    if groups.len() == 1 {
        ctx.relaxations.push(Relaxation {
            depth,
            labels: n,
            left: n,
            right: 0,
            largest_group: n,
        });
        let only = mlc_draft(ids, depth + 1, mix(seed, 1), ctx);
        return Draft::internal(vec![only], 0);
    }
    let weights: Vec<usize> = groups.iter().map(Vec::len).collect();
    let largest = *weights.iter().max().expect("non-empty");
    let mask = if largest > n.div_ceil(2) {
        let big = weights.iter().position(|&w| w == largest).expect("present");
        (0..groups.len()).map(|g| g == big).collect()
    } else {
        let units: Vec<Unit> = groups
            .iter()
            .map(|g| {
                let pairs = g.iter().flat_map(|&l| ctx.rows[l as usize].iter()).collect();
                let dim = ctx.rows[g[0] as usize].dim();
                Unit {
                    emb: Cow::Owned(SparseVector::from_pairs(dim, pairs).normalized()),
                    weight: g.len(),
                    tie: *g.iter().min().expect("non-empty"),
                }
            })
            .collect();
        two_means(&units, seed, &mut ctx.scratch, |order| weighted_assign(order, &weights))
    };
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (g, &m) in groups.into_iter().zip(&mask) {
        if m {
            left.extend(g);
        } else {
            right.extend(g);
        }
    }
    if left.len().abs_diff(right.len()) > 1 {
        ctx.relaxations.push(Relaxation {
            depth,
            labels: n,
            left: left.len(),
            right: right.len(),
            largest_group: largest,
        });
    }
    let l = mlc_draft(left, depth + 1, mix(seed, 1), ctx);
    let r = mlc_draft(right, depth + 1, mix(seed, 2), ctx);
    Draft::internal(vec![l, r], 0)
}

/// Balanced 2-means in which, down to depth `d_mlc`, all labels sharing a
/// prefix as long as the node depth stay in the same node. Splits that
/// cannot stay balanced are listed in the tree's diagnostics.
pub fn build_mlc(labels: &[String], emb: &LabelEmbeddings, max_leaf: usize, d_mlc: usize, seed: u64) -> Result<LabelTree> {
    check_inputs(labels.len(), max_leaf)?;
    if emb.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: emb.len(),
        });
    }
    let mut ctx = Ctx {
        labels,
        rows: &emb.rows,
        max_leaf,
        d_mlc,
        scratch: Scratch::new(emb.dim),
        relaxations: Vec::new(),
    };
    let root = mlc_draft((0..labels.len() as u32).collect(), 0, seed, &mut ctx);
    let params = IndexParams {
        algorithm: IndexAlgorithm::Mlc,
        max_leaf_size: max_leaf,
        d_trie: 0,
        d_mlc,
        seed,
    };
    let diagnostics = BuildDiagnostics {
        relaxations: ctx.relaxations,
    };
    Ok(LabelTree::from_draft(root, params, diagnostics))
}
