//! Teacher-forced training of every node and label classifier.

use rayon::prelude::*;

use super::solver::{solve, Rows, SolverParams};
use super::{ModelConfig, TrainParams, TreeModel, Weights, MODEL_FORMAT};
use crate::error::{Error, Result};
use crate::index::{mix_seed, LabelTree};
use crate::sparse::{CsrMatrix, SparseVector};

/// Examples (ascending ids) whose ground-truth path passes through each node.
pub fn routing(tree: &LabelTree, label_ids: &[u32]) -> Vec<Vec<u32>> {
    let leaf_of = tree.label_to_leaf();
    let mut reach = vec![Vec::new(); tree.n_nodes()];
    let mut path = Vec::new();
    for (i, &l) in label_ids.iter().enumerate() {
        let mut cur = leaf_of[l as usize] as usize;
        path.clear();
        path.push(cur);
        while let Some(p) = tree.parent(cur) {
            path.push(p);
            cur = p;
        }
        for &n in &path {
            reach[n].push(i as u32);
        }
    }
    reach
}

/// Sparse classifier in global feature space.
type Trained = (Vec<u32>, Vec<f32>, f32);

struct LocalRows {
    features: Vec<u32>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

/// Copies the examples into a compact feature space; `map` must be all
/// `u32::MAX` on entry and is restored before returning.
fn localize(examples: &[u32], inputs: &[SparseVector], map: &mut [u32]) -> LocalRows {
    let mut features = Vec::new();
    let mut indptr = Vec::with_capacity(examples.len() + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for &e in examples {
        for (j, v) in inputs[e as usize].iter() {
            let slot = &mut map[j as usize];
            if *slot == u32::MAX {
                *slot = features.len() as u32;
                features.push(j);
            }
            indices.push(*slot);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    for &j in &features {
        map[j as usize] = u32::MAX;
    }
    LocalRows {
        features,
        indptr,
        indices,
        values,
    }
}

fn fit_one(local: &LocalRows, y: &[f64], params: &TrainParams, seed: u64) -> Trained {
    if !y.iter().any(|&v| v > 0.0) {
        return (Vec::new(), Vec::new(), 0.0);
    }
    let rows = Rows {
        indptr: &local.indptr,
        indices: &local.indices,
        values: &local.values,
        dim: local.features.len(),
    };
    let sp = SolverParams {
        c: params.c,
        tol: params.tol,
        max_epochs: params.max_epochs,
        seed,
    };
    let sol = solve(&rows, y, &sp);
    let mut pairs: Vec<(u32, f32)> = sol
        .w
        .iter()
        .zip(&local.features)
        .filter(|(w, _)| w.abs() >= params.prune_threshold && **w != 0.0)
        .map(|(&w, &j)| (j, w as f32))
        .collect();
    pairs.sort_unstable_by_key(|p| p.0);
    let (idx, val) = pairs.into_iter().unzip();
    (idx, val, sol.bias as f32)
}

/// Fits the child classifiers of `node` (or its label classifiers if it is
/// a leaf) on the examples that reach it.
fn fit_node(
    tree: &LabelTree,
    node: usize,
    reach: &[Vec<u32>],
    inputs: &[SparseVector],
    label_ids: &[u32],
    params: &TrainParams,
    map: &mut [u32],
) -> Vec<Trained> {
    let examples = &reach[node];
    let local = localize(examples, inputs, map);
    let node_seed = mix_seed(params.seed, node as u64);
    if tree.is_leaf(node) {
        tree.leaf_labels(node)
            .iter()
            .map(|&l| {
                let y: Vec<f64> = examples
                    .iter()
                    .map(|&e| if label_ids[e as usize] == l { 1.0 } else { -1.0 })
                    .collect();
                fit_one(&local, &y, params, mix_seed(node_seed, l as u64 + 1))
            })
            .collect()
    } else {
        tree.children(node)
            .map(|c| {
                let y: Vec<f64> = examples
                    .iter()
                    .map(|e| if reach[c].binary_search(e).is_ok() { 1.0 } else { -1.0 })
                    .collect();
                fit_one(&local, &y, params, mix_seed(node_seed, c as u64 + 1))
            })
            .collect()
    }
}

fn to_weights(dim: usize, rows: Vec<Trained>) -> Weights {
    let mut m = CsrMatrix::with_dim(dim);
    let mut bias = Vec::with_capacity(rows.len());
    for (idx, val, b) in rows {
        m.push_row(idx.into_iter().zip(val));
        bias.push(b);
    }
    Weights { matrix: m, bias }
}

/// Trains one classifier per non-root node and one per label.
pub fn train(
    tree: LabelTree,
    labels: Vec<String>,
    inputs: &[SparseVector],
    label_ids: &[u32],
    params: &TrainParams,
) -> Result<TreeModel> {
    if labels.len() != tree.n_labels() {
        return Err(Error::DimensionMismatch {
            expected: tree.n_labels(),
            got: labels.len(),
        });
    }
    if inputs.len() != label_ids.len() {
        return Err(Error::invalid("inputs and label ids differ in length"));
    }
    if inputs.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if !(params.c > 0.0) || !(params.tol >= 0.0) || params.max_epochs == 0 {
        return Err(Error::invalid("C must be positive, tol non-negative and max_epochs at least 1"));
    }
    let dim = inputs[0].dim();
    if let Some(x) = inputs.iter().find(|x| x.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.dim(),
        });
    }
    if let Some(&l) = label_ids.iter().find(|&&l| l as usize >= labels.len()) {
        return Err(Error::invalid(format!("label id {l} not in the tree")));
    }
    let reach = routing(&tree, label_ids);
    let per_node: Vec<Vec<Trained>> = (0..tree.n_nodes())
        .into_par_iter()
        .map_init(
            || vec![u32::MAX; dim],
            |map, node| fit_node(&tree, node, &reach, inputs, label_ids, params, map),
        )
        .collect();

    // children come out in node order because the layout is breadth-first
    let mut node_rows: Vec<Trained> = Vec::with_capacity(tree.n_nodes());
    node_rows.push((Vec::new(), Vec::new(), 0.0));
    let mut label_rows: Vec<Option<Trained>> = vec![None; labels.len()];
    for (node, trained) in per_node.into_iter().enumerate() {
        if tree.is_leaf(node) {
            for (&l, t) in tree.leaf_labels(node).iter().zip(trained) {
                label_rows[l as usize] = Some(t);
            }
        } else {
            debug_assert_eq!(node_rows.len(), tree.children(node).start);
            node_rows.extend(trained);
        }
    }
    let label_rows = label_rows.into_iter().map(|t| t.expect("every label sits in a leaf")).collect();
    let config = ModelConfig {
        format: MODEL_FORMAT.to_string(),
        transform: params.transform,
        reg_c: params.c,
        tol: params.tol,
        max_epochs: params.max_epochs,
        prune_threshold: params.prune_threshold,
        input_dim: dim,
        n_labels: labels.len(),
        seed: params.seed,
    };
    Ok(TreeModel::from_parts(
        tree,
        to_weights(dim, node_rows),
        to_weights(dim, label_rows),
        labels,
        config,
    ))
}
