use super::*;
use crate::embed::LabelEmbeddings;
use crate::index::{build_hc, build_hybrid, build_index, build_mlc, build_trie, BuildDiagnostics, Draft, IndexParams};
use proptest::prelude::{prop_assert, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_params() -> TrainParams {
    TrainParams {
        prune_threshold: 0.0,
        ..TrainParams::default()
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut set = std::collections::BTreeSet::new();
    while set.len() < n {
        let len = rng.gen_range(1..6);
        set.insert((0..len).map(|_| (b'a' + rng.gen_range(0..3u8)) as char).collect::<String>());
    }
    let mut v: Vec<String> = set.into_iter().collect();
    for i in (1..v.len()).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    v
}

/// Each label gets a random prototype; examples are noisy copies.
fn random_data(rng: &mut ChaCha8Rng, n_labels: usize, per_label: usize, dim: usize) -> (Vec<SparseVector>, Vec<u32>) {
    let protos: Vec<Vec<(u32, f64)>> = (0..n_labels)
        .map(|_| (0..3).map(|_| (rng.gen_range(0..dim as u32), rng.gen_range(0.2..1.0))).collect())
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (l, p) in protos.iter().enumerate() {
        for _ in 0..per_label {
            let mut pairs = p.clone();
            pairs.push((rng.gen_range(0..dim as u32), rng.gen_range(0.0..0.5)));
            xs.push(SparseVector::from_pairs(dim, pairs).normalized());
            ys.push(l as u32);
        }
    }
    (xs, ys)
}

fn pifa(xs: &[SparseVector], ys: &[u32], n: usize) -> LabelEmbeddings {
    crate::embed::pifa_embed(xs, ys, n).unwrap()
}

struct Instance {
    model: TreeModel,
    queries: Vec<SparseVector>,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=64);
    let labels = random_labels(&mut rng, n);
    let dim = 24;
    let per_label = rng.gen_range(1..4);
    let (xs, ys) = random_data(&mut rng, n, per_label, dim);
    let emb = pifa(&xs, &ys, n);
    let m = rng.gen_range(1..8);
    let tree = match rng.gen_range(0..4) {
        0 => build_hc(&emb, m, seed).unwrap(),
        1 => build_trie(&labels, rng.gen_range(0..5)).unwrap(),
        2 => build_hybrid(&labels, &emb, rng.gen_range(0..3), m, seed).unwrap(),
        _ => build_mlc(&labels, &emb, m, rng.gen_range(0..3), seed).unwrap(),
    };
    let params = TrainParams {
        seed,
        max_epochs: 20,
        prune_threshold: if rng.gen_bool(0.5) { 0.0 } else { 0.1 },
        ..TrainParams::default()
    };
    let model = train(tree, labels, &xs, &ys, &params).unwrap();
    let queries = (0..5)
        .map(|_| {
            let pairs = (0..4).map(|_| (rng.gen_range(0..dim as u32), rng.gen_range(0.1..1.0))).collect();
            SparseVector::from_pairs(dim, pairs).normalized()
        })
        .collect();
    Instance { model, queries }
}

/// Scores every label by multiplying transformed margins along its path.
fn brute_force(model: &TreeModel, x: &SparseVector, prefix: &str, k: usize) -> Vec<(u32, f64)> {
    let tree = model.tree();
    let leaf_of = tree.label_to_leaf();
    let mut all: Vec<(u32, f64)> = Vec::new();
    for (l, label) in model.labels().iter().enumerate() {
        if !label.starts_with(prefix) {
            continue;
        }
        let mut score = 1.0;
        for &n in &tree.path_to(leaf_of[l] as usize)[1..] {
            score *= model.transform(model.node_margin(n, x));
        }
        score *= model.transform(model.label_margin(l, x));
        all.push((l as u32, score));
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn prefixes(model: &TreeModel) -> Vec<String> {
    let mut p = vec![String::new(), "a".into(), "b".into(), "ab".into(), "ca".into(), "zz".into()];
    p.extend(model.labels().iter().take(3).cloned());
    p
}

#[test]
fn transform_values() {
    let t = ScoreTransform::CubicHinge;
    assert_eq!(t.apply(1.0), 1.0);
    assert_eq!(t.apply(3.0), 1.0);
    assert!((t.apply(0.0) - (-1.0f64).exp()).abs() < 1e-15);
    assert!((t.apply(-1.0) - 3.3546e-4).abs() < 1e-7);
    assert!((ScoreTransform::Sigmoid.apply(0.0) - 0.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn transforms_are_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0) {
        for t in [ScoreTransform::CubicHinge, ScoreTransform::Sigmoid] {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.apply(lo) <= t.apply(hi));
            prop_assert!(t.apply(a) > 0.0 && t.apply(a) <= 1.0);
        }
    }
}

#[test]
fn beam_covering_all_leaves_equals_brute_force() {
    for seed in 0..40 {
        let inst = random_instance(seed);
        let b = inst.model.tree().n_leaves();
        for x in &inst.queries {
            for p in prefixes(&inst.model) {
                let got: Vec<(u32, f64)> =
                    inst.model.predict(x, &p, b, 10).into_iter().map(|s| (s.label, s.score)).collect();
                assert_eq!(got, brute_force(&inst.model, x, &p, 10), "seed {seed} prefix {p:?}");
            }
        }
    }
}

#[test]
fn leaf_precheck_is_output_neutral() {
    for seed in 100..130 {
        let inst = random_instance(seed);
        for x in &inst.queries {
            for p in prefixes(&inst.model) {
                for b in [1, 2, 3, 10] {
                    let mut s1 = BeamStats::default();
                    let mut s2 = BeamStats::default();
                    let with = inst.model.search(x, &p, b, 10, &mut s1, true);
                    let without = inst.model.search(x, &p, b, 10, &mut s2, false);
                    assert_eq!(with, without);
                    assert_eq!(s2.leaves_skipped, 0);
                }
            }
        }
    }
}

#[test]
fn suggestions_are_sound() {
    for seed in 200..230 {
        let inst = random_instance(seed);
        for x in &inst.queries {
            for p in prefixes(&inst.model) {
                let out = inst.model.predict(x, &p, 3, 5);
                assert!(out.len() <= 5);
                assert!(out.iter().all(|s| s.query.starts_with(&p)));
                assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
                assert!(out.iter().all(|s| s.score > 0.0 && s.score <= 1.0));
                let mut ids: Vec<u32> = out.iter().map(|s| s.label).collect();
                ids.sort();
                ids.dedup();
                assert_eq!(ids.len(), out.len());
            }
        }
    }
}

#[test]
fn beam_work_is_bounded() {
    for seed in 300..320 {
        let inst = random_instance(seed);
        let t = inst.model.tree();
        for x in &inst.queries {
            for b in [1, 2, 5] {
                let mut st = BeamStats::default();
                inst.model.predict_with_stats(x, "", b, 10, &mut st);
                assert!(st.node_evals <= b * t.max_fanout() * t.max_depth());
                assert!(st.label_evals <= b * t.max_leaf_size());
                assert_eq!(st.dot_work, x.nnz() * (st.node_evals + st.label_evals));
            }
        }
    }
}

#[test]
fn wider_beam_recalls_more_on_average() {
    let mut recall = [0.0f64; 4];
    let widths = [1, 2, 4, 8];
    for seed in 400..440 {
        let inst = random_instance(seed);
        let full = inst.model.tree().n_leaves();
        for x in &inst.queries {
            let truth: Vec<u32> = inst.model.predict(x, "", full, 5).iter().map(|s| s.label).collect();
            for (r, &b) in recall.iter_mut().zip(&widths) {
                let got = inst.model.predict(x, "", b, 5);
                let hit = got.iter().filter(|s| truth.contains(&s.label)).count();
                *r += hit as f64 / truth.len().max(1) as f64;
            }
        }
    }
    assert!(recall.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{recall:?}");
}

#[test]
fn single_leaf_tree_is_flat_one_vs_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = random_labels(&mut rng, 12);
    let (xs, ys) = random_data(&mut rng, 12, 3, 16);
    let tree = build_hc(&pifa(&xs, &ys, 12), 100, 0).unwrap();
    assert_eq!(tree.n_nodes(), 1);
    let model = train(tree, labels, &xs, &ys, &unit_params()).unwrap();
    for x in xs.iter().take(5) {
        let flat = brute_force(&model, x, "", 12);
        for b in [1, 3, 50] {
            let got: Vec<(u32, f64)> = model.predict(x, "", b, 12).into_iter().map(|s| (s.label, s.score)).collect();
            assert_eq!(got, flat);
        }
    }
}

#[test]
fn unmatched_prefix_gives_empty_list() {
    let inst = random_instance(9);
    assert!(inst.model.predict(&inst.queries[0], "zzz", 10, 10).is_empty());
}

/// Hand-built three-level binary tree over eight labels.
fn fig1_model(node_bias: &[f32], label_bias: &[f32]) -> TreeModel {
    let leaf = |a: u32, b: u32| Draft::leaf(vec![a, b], 0);
    let root = Draft::internal(
        vec![
            Draft::internal(vec![leaf(0, 1), leaf(2, 3)], 0),
            Draft::internal(vec![leaf(4, 5), leaf(6, 7)], 0),
        ],
        0,
    );
    let tree = LabelTree::from_draft(root, IndexParams::default(), BuildDiagnostics::default());
    let labels: Vec<String> = ["a", "ab", "abc", "abd", "b", "bc", "bcd", "c"].iter().map(|s| s.to_string()).collect();
    let weights = |bias: &[f32]| {
        let mut m = CsrMatrix::with_dim(1);
        for _ in bias {
            m.push_row(std::iter::empty());
        }
        Weights {
            matrix: m,
            bias: bias.to_vec(),
        }
    };
    let config = ModelConfig {
        format: MODEL_FORMAT.into(),
        transform: ScoreTransform::CubicHinge,
        reg_c: 1.0,
        tol: 1e-4,
        max_epochs: 1,
        prune_threshold: 0.0,
        input_dim: 1,
        n_labels: 8,
        seed: 0,
    };
    TreeModel::from_parts(tree, weights(node_bias), weights(label_bias), labels, config)
}

#[test]
fn width_one_beam_follows_the_argmax_path() {
    // root, then nodes 1..=2, then leaves 3..=6
    let model = fig1_model(
        &[0.0, 0.2, 0.6, -0.5, 0.1, 0.4, -0.2],
        &[0.3, 0.0, 0.9, 0.1, 0.8, 0.5, 0.7, 0.2],
    );
    let x = SparseVector::zeros(1);
    // node 2 (0.6) beats node 1 (0.2); under node 2, leaf 5 (0.4) beats leaf 6
    let out = model.predict(&x, "", 1, 8);
    let ids: Vec<u32> = out.iter().map(|s| s.label).collect();
    assert_eq!(ids, vec![4, 5]);
    let t = ScoreTransform::CubicHinge;
    let f = |v: f32| t.apply(v as f64);
    let expect = f(0.6) * f(0.4) * f(0.8);
    assert!((out[0].score - expect).abs() < 1e-15);
    assert!(model.predict(&x, "c", 1, 8).is_empty());
    let wide: Vec<u32> = model.predict(&x, "", 4, 8).iter().map(|s| s.label).collect();
    let brute: Vec<u32> = brute_force(&model, &x, "", 8).iter().map(|p| p.0).collect();
    assert_eq!(wide, brute);
}

#[test]
fn separable_two_label_tree_reaches_unit_margin() {
    let dim = 2;
    let xs = vec![
        SparseVector::from_pairs(dim, vec![(0, 1.0)]),
        SparseVector::from_pairs(dim, vec![(0, 0.9), (1, 0.1)]),
        SparseVector::from_pairs(dim, vec![(1, 1.0)]),
        SparseVector::from_pairs(dim, vec![(0, 0.2), (1, 0.8)]),
    ];
    let ys = vec![0, 0, 1, 1];
    let tree = build_hc(&pifa(&xs, &ys, 2), 1, 0).unwrap();
    assert_eq!(tree.n_leaves(), 2);
    let params = TrainParams {
        c: 1e4,
        tol: 1e-10,
        max_epochs: 100_000,
        prune_threshold: 0.0,
        ..TrainParams::default()
    };
    let model = train(tree, vec!["x".into(), "y".into()], &xs, &ys, &params).unwrap();
    let leaf_of = model.tree().label_to_leaf();
    for (x, &y) in xs.iter().zip(&ys) {
        for c in model.tree().children(0) {
            let sign = if c == leaf_of[y as usize] as usize { 1.0 } else { -1.0 };
            assert!(sign * model.node_margin(c, x) >= 0.999);
        }
        assert!(model.label_margin(y as usize, x) >= 0.999);
    }
}

#[test]
fn routing_follows_ground_truth_paths() {
    let inst_seed = 17;
    let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
    let labels = random_labels(&mut rng, 30);
    let (xs, ys) = random_data(&mut rng, 30, 2, 16);
    let tree = build_hybrid(&labels, &pifa(&xs, &ys, 30), 1, 3, 0).unwrap();
    let reach = routing(&tree, &ys);
    for n in 0..tree.n_nodes() {
        let sub = tree.subtree_labels(n);
        let expect: Vec<u32> = (0..ys.len() as u32).filter(|&i| sub.contains(&ys[i as usize])).collect();
        assert_eq!(reach[n], expect);
    }
}

/// Dense primal objective in the augmented space.
fn dense_objective(x: &[Vec<f64>], y: &[f64], w: &[f64], c: f64) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let loss: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let m: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum();
            (1.0 - yi * m).max(0.0).powi(2)
        })
        .sum();
    reg + c * loss
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut out = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * out[k]).sum();
        out[r] = (b[r] - s) / a[r][r];
    }
    out
}

/// Generalized Newton method with backtracking on the dense primal.
fn newton_optimum(x: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    for _ in 0..200 {
        let mut g = w.clone();
        let mut h: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        for (xi, &yi) in x.iter().zip(y) {
            let m: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum();
            let slack = 1.0 - yi * m;
            if slack > 0.0 {
                for j in 0..d {
                    g[j] -= 2.0 * c * yi * slack * xi[j];
                    for k in 0..d {
                        h[j][k] += 2.0 * c * xi[j] * xi[k];
                    }
                }
            }
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
        let step = solve_linear(h, g.iter().map(|v| -v).collect());
        let f0 = dense_objective(x, y, &w, c);
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            if dense_objective(x, y, &cand, c) <= f0 + 1e-4 * t * slope || t < 1e-12 {
                w = cand;
                break;
            }
            t *= 0.5;
        }
    }
    dense_objective(x, y, &w, c)
}

#[test]
fn trained_objectives_match_reference_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n_labels = 10;
    let dim = 8;
    let labels = random_labels(&mut rng, n_labels);
    let (xs, ys) = random_data(&mut rng, n_labels, 4, dim);
    let tree = build_hc(&pifa(&xs, &ys, n_labels), 3, 1).unwrap();
    let params = TrainParams {
        tol: 1e-9,
        max_epochs: 100_000,
        prune_threshold: 0.0,
        ..TrainParams::default()
    };
    let model = train(tree.clone(), labels, &xs, &ys, &params).unwrap();
    let dense: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut v = x.to_dense();
            v.push(1.0);
            v
        })
        .collect();
    let reaches = |n: usize| -> Vec<usize> {
        let sub = tree.subtree_labels(n);
        (0..ys.len()).filter(|&i| sub.contains(&ys[i])).collect()
    };
    let check = |examples: &[usize], pos: &dyn Fn(usize) -> bool, w: &Weights, row: usize| {
        let x: Vec<Vec<f64>> = examples.iter().map(|&i| dense[i].clone()).collect();
        let y: Vec<f64> = examples.iter().map(|&i| if pos(i) { 1.0 } else { -1.0 }).collect();
        let mut stored = w.matrix.row_vector(row).to_dense();
        stored.push(w.bias[row] as f64);
        let ours = dense_objective(&x, &y, &stored, params.c);
        let best = newton_optimum(&x, &y, params.c);
        assert!(ours >= best - 1e-9 && (ours - best) / best < 1e-4, "{ours} vs {best}");
    };
    let mut checked = 0;
    for n in 1..tree.n_nodes() {
        let parent = tree.parent(n).unwrap();
        let inside = reaches(n);
        check(&reaches(parent), &|i| inside.contains(&i), model.node_weights(), n);
        checked += 1;
    }
    for leaf in tree.leaves() {
        for &l in tree.leaf_labels(leaf) {
            check(&reaches(leaf), &|i| ys[i] == l, model.label_weights(), l as usize);
            checked += 1;
        }
    }
    assert_eq!(checked, tree.n_nodes() - 1 + n_labels);
}

#[test]
fn save_load_round_trip_and_path_factorization() {
    let inst = random_instance(33);
    let dir = tempfile::tempdir().unwrap();
    inst.model.save(dir.path()).unwrap();
    let back = TreeModel::load(dir.path()).unwrap();
    assert_eq!(back, inst.model);
    let tree = back.tree();
    let leaf_of = tree.label_to_leaf();
    for x in &inst.queries {
        for s in inst.model.predict(x, "", 4, 10) {
            let mut prod = 1.0;
            for &n in &tree.path_to(leaf_of[s.label as usize] as usize)[1..] {
                let (idx, val) = back.node_weights().matrix.row(n);
                let m: f64 = idx.iter().zip(val).map(|(&j, &v)| v as f64 * x.get(j)).sum::<f64>()
                    + back.node_weights().bias[n] as f64;
                prod *= back.transform(m);
            }
            let (idx, val) = back.label_weights().matrix.row(s.label as usize);
            let m: f64 = idx.iter().zip(val).map(|(&j, &v)| v as f64 * x.get(j)).sum::<f64>()
                + back.label_weights().bias[s.label as usize] as f64;
            prod *= back.transform(m);
            assert!((prod - s.score).abs() < 1e-9);
        }
    }
}

#[test]
fn corrupted_model_dir_is_rejected() {
    let inst = random_instance(34);
    let dir = tempfile::tempdir().unwrap();
    inst.model.save(dir.path()).unwrap();
    let extra: String = (0..=inst.model.labels().len()).map(|i| format!("q{i}\n")).collect();
    std::fs::write(dir.path().join(LABELS_FILE), extra).unwrap();
    assert!(TreeModel::load(dir.path()).is_err());
}

#[test]
fn training_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = random_labels(&mut rng, 4);
    let (xs, ys) = random_data(&mut rng, 4, 1, 8);
    let tree = build_index(
        &IndexParams {
            algorithm: crate::index::IndexAlgorithm::Trie,
            ..IndexParams::default()
        },
        &labels,
        None,
    )
    .unwrap();
    assert!(train(tree.clone(), labels[..3].to_vec(), &xs, &ys, &unit_params()).is_err());
    assert!(train(tree.clone(), labels.clone(), &xs, &[0, 1, 2, 9], &unit_params()).is_err());
    let bad = TrainParams { c: 0.0, ..unit_params() };
    assert!(train(tree, labels, &xs, &ys, &bad).is_err());
}
