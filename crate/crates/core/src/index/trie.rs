//! Character trie over label strings, optionally refined by clustering.

use super::cluster::{check_inputs, hc_draft, mix, Scratch};
use super::{BuildDiagnostics, Draft, IndexAlgorithm, IndexParams, LabelTree};
use crate::corpus::fnv1a;
use crate::embed::LabelEmbeddings;
use crate::error::{Error, Result};

/// Trie over `ids` whose labels all share `labels[id][..depth]`. Every
/// character is a node, so a lone label continues as a chain until it ends
/// or `max_depth` is reached; subtrees at `max_depth` collapse into one
/// leaf. `finish` turns every trie leaf group into a subtree (identity for a
/// plain trie).
fn trie_draft<F>(ids: Vec<u32>, labels: &[String], depth: usize, max_depth: usize, finish: &mut F) -> Draft
where
    F: FnMut(Vec<u32>, &[u8], u16) -> Draft,
{
    let td = depth as u16;
    let path = |ids: &[u32]| labels[ids[0] as usize].as_bytes()[..depth].to_vec();
    if depth >= max_depth {
        let p = path(&ids);
        return finish(ids, &p, td);
    }
    let mut ended = Vec::new();
    let mut groups: Vec<(u8, Vec<u32>)> = Vec::new();
    let mut sorted = ids;
    sorted.sort_by(|&a, &b| labels[a as usize].cmp(&labels[b as usize]));
    for id in sorted {
        match labels[id as usize].as_bytes().get(depth) {
            None => ended.push(id),
            Some(&c) => match groups.last_mut() {
                Some((g, members)) if *g == c => members.push(id),
                _ => groups.push((c, vec![id])),
            },
        }
    }
    if groups.is_empty() {
        let p = path(&ended);
        return finish(ended, &p, td);
    }
    let mut children = Vec::with_capacity(groups.len() + 1);
    if !ended.is_empty() {
        // a label that stops at an internal node gets its own leaf
        let p = path(&ended);
        children.push(finish(ended, &p, td));
    }
    for (_, members) in groups {
        children.push(trie_draft(members, labels, depth + 1, max_depth, finish));
    }
    Draft::internal(children, td)
}

fn check_labels(labels: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(labels.len());
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

/// Character trie over label strings, collapsed below depth `d_trie`.
pub fn build_trie(labels: &[String], d_trie: usize) -> Result<LabelTree> {
    check_inputs(labels.len(), 1)?;
    check_labels(labels)?;
    let ids = (0..labels.len() as u32).collect();
    let mut leaf = |mut ids: Vec<u32>, _: &[u8], td: u16| {
        ids.sort_unstable();
        Draft::leaf(ids, td)
    };
    let root = trie_draft(ids, labels, 0, d_trie, &mut leaf);
    let params = IndexParams {
        algorithm: IndexAlgorithm::Trie,
        max_leaf_size: 0,
        d_trie,
        d_mlc: 0,
        seed: 0,
    };
    Ok(LabelTree::from_draft(root, params, BuildDiagnostics::default()))
}

/// Trie down to depth `d_trie`, then balanced 2-means inside every trie
/// leaf group.
pub fn build_hybrid(
    labels: &[String],
    emb: &LabelEmbeddings,
    d_trie: usize,
    max_leaf: usize,
    seed: u64,
) -> Result<LabelTree> {
    check_inputs(labels.len(), max_leaf)?;
    check_labels(labels)?;
    if emb.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: emb.len(),
        });
    }
    let mut scratch = Scratch::new(emb.dim);
    let ids = (0..labels.len() as u32).collect();
    let mut graft = |ids: Vec<u32>, path: &[u8], td: u16| {
        let s = if path.is_empty() { seed } else { mix(seed, fnv1a(path)) };
        hc_draft(ids, &emb.rows, max_leaf, s, td, &mut scratch)
    };
    let root = trie_draft(ids, labels, 0, d_trie, &mut graft);
    let params = IndexParams {
        algorithm: IndexAlgorithm::Hybrid,
        max_leaf_size: max_leaf,
        d_trie,
        d_mlc: 0,
        seed,
    };
    Ok(LabelTree::from_draft(root, params, BuildDiagnostics::default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingSource;
    use crate::index::build_hc;
    use crate::sparse::SparseVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn leaf_sets(t: &LabelTree, labels: &[String]) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = t
            .leaves()
            .map(|l| {
                let mut v: Vec<String> = t.leaf_labels(l).iter().map(|&i| labels[i as usize].clone()).collect();
                v.sort();
                v
            })
            .collect();
        out.sort();
        out
    }

    fn random_embeddings(n: usize, seed: u64) -> LabelEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let pairs = (0..3).map(|_| (rng.gen_range(0..32u32), rng.gen_range(0.1..1.0))).collect();
                SparseVector::from_pairs(32, pairs).normalized()
            })
            .collect();
        LabelEmbeddings {
            rows,
            source: EmbeddingSource::Pifa,
            dim: 32,
            zero_rows: Vec::new(),
        }
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            let len = rng.gen_range(1..7);
            set.insert((0..len).map(|_| (b'a' + rng.gen_range(0..3u8)) as char).collect::<String>());
        }
        let mut v: Vec<String> = set.into_iter().collect();
        // shuffle so label ids are not in lexicographic order
        for i in (1..v.len()).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        v
    }

    #[test]
    fn full_depth_trie_example() {
        let labels = strings(&["a", "ab", "abc", "abd", "b", "bc"]);
        let t = build_trie(&labels, 16).unwrap();
        t.validate().unwrap();
        assert_eq!(t.n_leaves(), 6);
        assert!(t.leaves().all(|l| t.leaf_labels(l).len() == 1));
        // "a" and "ab" end at internal nodes and therefore sit in extra leaves
        let leaf_of = t.label_to_leaf();
        let a_leaf = leaf_of[0] as usize;
        let parent = t.parent(a_leaf).unwrap();
        assert_eq!(t.node(parent).trie_depth, 1);
        assert_eq!(t.children(parent).count(), 2);
        assert_eq!(t.node(a_leaf).trie_depth, 1);
    }

    #[test]
    fn depth_one_trie_example() {
        let labels = strings(&["ab", "abc", "b", "ba", "ca"]);
        let t = build_trie(&labels, 1).unwrap();
        assert_eq!(
            leaf_sets(&t, &labels),
            vec![strings(&["ab", "abc"]), strings(&["b", "ba"]), strings(&["ca"])]
        );
        assert_eq!(t.max_depth(), 1);
    }

    #[test]
    fn label_ending_at_internal_node_has_own_leaf() {
        let labels = strings(&["ab", "abc"]);
        let t = build_trie(&labels, 3).unwrap();
        assert_eq!(leaf_sets(&t, &labels), vec![strings(&["ab"]), strings(&["abc"])]);
    }

    #[test]
    fn depth_zero_trie_is_one_leaf() {
        let labels = strings(&["x", "y", "z"]);
        let t = build_trie(&labels, 0).unwrap();
        assert_eq!(t.n_nodes(), 1);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(build_trie(&strings(&["a", "a"]), 2), Err(Error::DuplicateLabel(_))));
    }

    #[test]
    fn hybrid_depth_zero_equals_hc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = random_labels(&mut rng, 90);
        let emb = random_embeddings(labels.len(), 2);
        let h = build_hybrid(&labels, &emb, 0, 7, 5).unwrap();
        let c = build_hc(&emb, 7, 5).unwrap();
        assert!(h.same_structure(&c));
    }

    #[test]
    fn hybrid_full_depth_equals_trie() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = random_labels(&mut rng, 80);
        let emb = random_embeddings(labels.len(), 4);
        let h = build_hybrid(&labels, &emb, 6, 5, 9).unwrap();
        let t = build_trie(&labels, 6).unwrap();
        assert!(h.same_structure(&t));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn trie_structure(seed in any::<u64>(), n in 1usize..60, d in 0usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n);
            let t = build_trie(&labels, d).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert!(t.max_depth() <= d);
            if let Err(e) = crate::index::prefix_grouping_violation(&t, &labels, d) {
                prop_assert!(false, "{}", e);
            }
            let again = build_trie(&labels, d).unwrap();
            prop_assert_eq!(again.nodes(), t.nodes());
        }

        #[test]
        fn hybrid_structure(seed in any::<u64>(), n in 1usize..60, d in 0usize..4, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n);
            let emb = random_embeddings(n, seed);
            let t = build_hybrid(&labels, &emb, d, m, seed).unwrap();
            prop_assert!(t.validate().is_ok());
            if let Err(e) = crate::index::prefix_grouping_violation(&t, &labels, d) {
                prop_assert!(false, "{}", e);
            }
            // every trie leaf group of size >= m gets split further
            prop_assert!(t.max_leaf_size() <= m.max(1));
        }
    }
}
