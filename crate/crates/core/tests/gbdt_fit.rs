use fraudgraph::features::NumericMatrix;
use fraudgraph::gbdt::{fit_gbdt, GbdtParams, TreeEnsemble, TreeNode};
use proptest::prelude::*;

fn params(n_trees: usize, max_depth: usize) -> GbdtParams {
    GbdtParams { n_trees, max_depth, learning_rate: 0.3, lambda: 1.0, min_child_weight: 0.0, min_split_gain: 0.0 }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Second-order gain of every candidate split of the root, in visiting order.
fn root_gains(rows: &[Vec<f64>], g: &[f64], h: &[f64], lambda: f64) -> Vec<(usize, f64, f64)> {
    let score = |gs: f64, hs: f64| gs * gs / (hs + lambda);
    let (gt, ht): (f64, f64) = (g.iter().sum(), h.iter().sum());
    let mut out = Vec::new();
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (mut gl, mut hl) = (0.0, 0.0);
            for (i, r) in rows.iter().enumerate() {
                if r[f] < t {
                    gl += g[i];
                    hl += h[i];
                }
            }
            out.push((f, t, 0.5 * (score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht))));
        }
    }
    out
}

#[test]
fn depth_one_split_is_the_exhaustive_maximum() {
    // 8 rows, 2 binary features; feature 1 separates the labels better
    let rows = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 1.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ];
    let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let x = NumericMatrix::from_rows(&rows).unwrap();
    let e = fit_gbdt(&x, &y, &params(1, 1)).unwrap();
    let p = sigmoid(e.base_score);
    let g: Vec<f64> = y.iter().map(|y| p - y).collect();
    let h = vec![p * (1.0 - p); 8];
    let gains = root_gains(&rows, &g, &h, 1.0);
    assert_eq!(gains.len(), 2);
    let best = gains.iter().max_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
    match e.trees[0].nodes[0] {
        TreeNode::Split { feature, threshold, .. } => {
            assert_eq!(feature, best.0);
            assert_eq!(threshold, best.1);
        }
        _ => panic!("root should split"),
    }
}

/// Refits every stage from scratch with exhaustive search on a 16-row set.
#[test]
fn two_stage_fit_matches_stagewise_recomputation() {
    let rows: Vec<Vec<f64>> = (0..16).map(|i| vec![(i % 4) as f64, (i / 4) as f64, ((i * 7) % 5) as f64]).collect();
    let y: Vec<f64> = (0..16).map(|i| if (i % 4) + (i / 4) >= 4 || i == 1 { 1.0 } else { 0.0 }).collect();
    let p = params(2, 2);
    let x = NumericMatrix::from_rows(&rows).unwrap();
    let e = fit_gbdt(&x, &y, &p).unwrap();

    let mut margin = [e.base_score; 16];
    for tree in &e.trees {
        let g: Vec<f64> = margin.iter().zip(&y).map(|(m, y)| sigmoid(*m) - y).collect();
        let h: Vec<f64> = margin.iter().map(|m| sigmoid(*m) * (1.0 - sigmoid(*m))).collect();
        // root split must be the best candidate
        let gains = root_gains(&rows, &g, &h, p.lambda);
        let top = gains.iter().map(|c| c.2).fold(f64::MIN, f64::max);
        if let TreeNode::Split { feature, threshold, .. } = tree.nodes[0] {
            let chosen = gains.iter().find(|c| c.0 == feature && c.1 == threshold).unwrap();
            assert!((chosen.2 - top).abs() <= 1e-12 * top.abs().max(1.0));
        }
        // leaf values: -G/(H+λ) over the rows routed there
        for n in &tree.nodes {
            if let TreeNode::Leaf { value, leaf_index } = *n {
                let members: Vec<usize> = (0..16).filter(|&i| tree.route(&rows[i]).0 == leaf_index).collect();
                let gs: f64 = members.iter().map(|&i| g[i]).sum();
                let hs: f64 = members.iter().map(|&i| h[i]).sum();
                assert!((value - (-gs / (hs + p.lambda))).abs() < 1e-9);
            }
        }
        for (i, m) in margin.iter_mut().enumerate() {
            *m += p.learning_rate * tree.route(&rows[i]).1;
        }
    }
    for (i, r) in rows.iter().enumerate() {
        assert!((e.margin(r).unwrap() - margin[i]).abs() < 1e-12);
    }
}

fn random_ensemble(seed: u64, n: usize, m: usize, trees: usize, depth: usize) -> (TreeEnsemble, NumericMatrix) {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as f64 / (1u64 << 31) as f64
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| (next() * 10.0).floor()).collect()).collect();
    let mut y: Vec<f64> = rows.iter().map(|r| if r[0] + next() * 4.0 > 6.0 { 1.0 } else { 0.0 }).collect();
    y[0] = 0.0;
    y[1] = 1.0;
    let x = NumericMatrix::from_rows(&rows).unwrap();
    (fit_gbdt(&x, &y, &params(trees, depth)).unwrap(), x)
}

#[test]
fn multihot_matches_row_routing() {
    let (e, x) = random_ensemble(5, 40, 3, 4, 3);
    let cross = e.encode_multihot(&x).unwrap();
    assert_eq!(cross.width(), e.total_leaves());
    for i in 0..x.rows() {
        let mut expected = vec![0.0; e.total_leaves()];
        for t in &e.trees {
            expected[t.route(x.row(i)).0] = 1.0;
        }
        assert_eq!(cross.dense_row(i), expected);
    }
}

#[test]
fn margin_is_base_plus_scaled_leaf_sum() {
    let (e, x) = random_ensemble(9, 30, 4, 3, 2);
    for i in 0..x.rows() {
        let leaves: f64 = e.trees.iter().map(|t| t.route(x.row(i)).1).sum();
        assert!((e.margin(x.row(i)).unwrap() - (e.base_score + e.learning_rate * leaves)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_row_has_one_leaf_per_tree(seed in 0u64..1000, trees in 1usize..6, depth in 1usize..4) {
        let (e, x) = random_ensemble(seed, 32, 3, trees, depth);
        let cross = e.encode_multihot(&x).unwrap();
        for i in 0..x.rows() {
            let row = cross.row(i);
            prop_assert_eq!(row.len(), trees);
            // leaves of tree k fall in tree k's index range
            let mut lo = 0;
            for (k, t) in e.trees.iter().enumerate() {
                prop_assert!((row[k] as usize) >= lo && (row[k] as usize) < lo + t.n_leaves);
                prop_assert!(t.depth() <= depth);
                lo += t.n_leaves;
            }
        }
    }
}
