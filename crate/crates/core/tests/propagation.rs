//! Linearity and M-slice properties of LightGCN propagation on small random graphs.

use cadence_core::corpus::Dataset;
use cadence_core::embed::{init_embeddings, m_column, m_row, propagate, EmbeddingTable};
use cadence_core::spgraph::{build_bipartite_adjacency, DenseMatrix, Normalization, PropagationSpec, SparseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(rng: &mut ChaCha8Rng, max_users: usize, max_items: usize) -> Dataset {
    loop {
        let nu = rng.random_range(1..=max_users);
        let ni = rng.random_range(1..=max_items);
        let edges: Vec<(usize, usize)> =
            (0..nu).flat_map(|u| (0..ni).map(move |i| (u, i))).filter(|_| rng.random::<f64>() < 0.5).collect();
        if !edges.is_empty() {
            return Dataset::from_edges(nu, ni, edges, []).unwrap();
        }
    }
}

fn dense_m(a: &SparseMatrix, spec: &PropagationSpec) -> DenseMatrix {
    let n = a.n_rows();
    let dense = a.to_dense();
    let mut power =
        DenseMatrix::from_vec(n, n, (0..n * n).map(|k| f64::from(u8::from(k / n == k % n))).collect()).unwrap();
    let mut m = power.scaled(spec.layer_weights()[0]);
    for &w in &spec.layer_weights()[1..] {
        let mut next = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                next.row_mut(r)[c] = (0..n).map(|k| power.get(r, k) * dense.get(k, c)).sum();
            }
        }
        power = next;
        m.add_scaled(&power, w);
    }
    m
}

#[test]
fn propagation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..20 {
        let ds = random_dataset(&mut rng, 5, 5);
        let norm = if case % 2 == 0 { Normalization::Symmetric } else { Normalization::RandomWalk };
        let a = build_bipartite_adjacency(&ds, norm).unwrap();
        let spec = PropagationSpec::uniform(case % 4, norm);
        let x = init_embeddings(ds.n_users, ds.n_items, 3, case as u64, 1.0).unwrap();
        let y = init_embeddings(ds.n_users, ds.n_items, 3, 100 + case as u64, 1.0).unwrap();
        let (ca, cb) = (1.7, -0.4);
        let mut mix = x.matrix().scaled(ca);
        mix.add_scaled(y.matrix(), cb);
        let mixed = EmbeddingTable::new(ds.n_users, ds.n_items, mix).unwrap();
        let lhs = propagate(&mixed, &a, &spec).unwrap().combined;
        let mut rhs = propagate(&x, &a, &spec).unwrap().combined.scaled(ca);
        rhs.add_scaled(&propagate(&y, &a, &spec).unwrap().combined, cb);
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }
}

#[test]
fn combined_is_weighted_layer_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = random_dataset(&mut rng, 6, 6);
    let a = build_bipartite_adjacency(&ds, Normalization::Symmetric).unwrap();
    let spec = PropagationSpec::new(vec![0.1, 0.2, 0.3, 0.4], Normalization::Symmetric).unwrap();
    let t = init_embeddings(ds.n_users, ds.n_items, 4, 1, 1.0).unwrap();
    let p = propagate(&t, &a, &spec).unwrap();
    assert_eq!(&p.per_layer[0], t.matrix());
    let mut sum = DenseMatrix::zeros(t.n_nodes(), 4);
    for (layer, &w) in p.per_layer.iter().zip(spec.layer_weights()) {
        sum.add_scaled(layer, w);
    }
    assert!(sum.max_abs_diff(&p.combined) <= 1e-12);
}

#[test]
fn m_slices_match_dense_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..30 {
        let ds = random_dataset(&mut rng, 5, 5);
        let norm = if case % 2 == 0 { Normalization::Symmetric } else { Normalization::RandomWalk };
        let a = build_bipartite_adjacency(&ds, norm).unwrap();
        let spec = PropagationSpec::uniform(case % 4, norm);
        let m = dense_m(&a, &spec);
        let n = a.n_rows();
        for node in 0..n {
            let col = m_column(&a, &spec, node).unwrap();
            for (r, v) in col.iter().enumerate() {
                assert!((v - m.get(r, node)).abs() <= 1e-12);
            }
            let mut row = vec![0.0; n];
            for (c, v) in m_row(&a, &spec, node).unwrap() {
                row[c] = v;
            }
            for (c, v) in row.iter().enumerate() {
                assert!((v - m.get(node, c)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn random_walk_m_rows_are_stochastic() {
    // every node has an edge, so every power of A is row-stochastic
    let ds = Dataset::from_edges(3, 3, [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)], []).unwrap();
    let a = build_bipartite_adjacency(&ds, Normalization::RandomWalk).unwrap();
    let spec = PropagationSpec::uniform(3, Normalization::RandomWalk);
    let n = a.n_rows();
    let mut row_sums = vec![0.0; n];
    for node in 0..n {
        for (r, v) in m_column(&a, &spec, node).unwrap().into_iter().enumerate() {
            row_sums[r] += v;
        }
    }
    for s in row_sums {
        assert!((s - 1.0).abs() < 1e-12);
    }
}
