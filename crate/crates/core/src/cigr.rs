//! Item co-purchase graph: scoring, pruning and item-item aggregation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::spgraph::{spmm, DenseMatrix, SparseMatrix};
use crate::{Error, Result};

/// Undirected item-item graph with edges stored once as `(a, b, w)`, `a < b`,
/// sorted by `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedItemGraph {
    pub n_items: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub pruned: bool,
}

impl WeightedItemGraph {
    /// Canonicalizes and validates `edges`.
    pub fn new(n_items: usize, edges: Vec<(usize, usize, f64)>, pruned: bool) -> Result<Self> {
        let mut out = Vec::with_capacity(edges.len());
        for (a, b, w) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-edge on item {a}")));
            }
            let (a, b) = (a.min(b), a.max(b));
            if b >= n_items {
                return Err(Error::OutOfRange { what: "item", index: b, len: n_items });
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!("edge ({a},{b}) has weight {w}")));
            }
            out.push((a, b, w));
        }
        out.sort_by_key(|&(a, b, _)| (a, b));
        if out.windows(2).any(|p| (p[0].0, p[0].1) == (p[1].0, p[1].1)) {
            return Err(Error::InvalidArgument("duplicate item edge".into()));
        }
        Ok(WeightedItemGraph { n_items, edges: out, pruned })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Per-item neighbor lists `(other, weight)`, ordered by neighbor index.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_items];
        for &(a, b, w) in &self.edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(x, _)| x);
        }
        adj
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search_by_key(&key, |&(x, y, _)| (x, y)).ok().map(|k| self.edges[k].2)
    }
}

/// Co-purchase counts: edge weight is the number of users with both items in train.
///
/// Enumerates every pair within each user's history, so the cost is
/// `O(Σ_u deg(u)²)`.
pub fn build_copurchase(dataset: &Dataset) -> WeightedItemGraph {
    let counts = (0..dataset.n_users)
        .into_par_iter()
        .fold(HashMap::<(usize, usize), usize>::new, |mut acc, u| {
            let items = dataset.train_items(u);
            for (k, &a) in items.iter().enumerate() {
                for &b in &items[k + 1..] {
                    *acc.entry((a, b)).or_insert(0) += 1;
                }
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (key, c) in b {
                *a.entry(key).or_insert(0) += c;
            }
            a
        });
    let mut edges: Vec<(usize, usize, f64)> = counts.into_iter().map(|((a, b), c)| (a, b, c as f64)).collect();
    edges.sort_by_key(|&(a, b, _)| (a, b));
    WeightedItemGraph { n_items: dataset.n_items, edges, pruned: false }
}

/// Scores one co-purchase edge.
pub trait EdgeScorer: Sync {
    /// `co`: users sharing both items; `users_a`, `users_b`: distinct users
    /// of each item; `n_users`: corpus size.
    fn score(&self, co: f64, users_a: usize, users_b: usize, n_users: usize) -> f64;
}

/// Popularity-deconfounded lift `co·U / (U_a·U_b)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Lift;

impl EdgeScorer for Lift {
    fn score(&self, co: f64, users_a: usize, users_b: usize, n_users: usize) -> f64 {
        co * n_users as f64 / (users_a as f64 * users_b as f64)
    }
}

/// Wraps a scorer and counts its invocations.
#[derive(Debug, Default)]
pub struct CountingScorer<S> {
    pub inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<S: EdgeScorer> EdgeScorer for CountingScorer<S> {
    fn score(&self, co: f64, users_a: usize, users_b: usize, n_users: usize) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(co, users_a, users_b, n_users)
    }
}

/// Rescores a co-count graph with `scorer`, visiting each edge once.
pub fn score_edges(graph: &WeightedItemGraph, dataset: &Dataset, scorer: &dyn EdgeScorer) -> Result<WeightedItemGraph> {
    if graph.n_items != dataset.n_items {
        return Err(Error::Shape(format!("graph has {} items, dataset {}", graph.n_items, dataset.n_items)));
    }
    let edges = graph
        .edges
        .par_iter()
        .map(|&(a, b, co)| {
            let (pa, pb) = (dataset.popularity[a], dataset.popularity[b]);
            if pa == 0 || pb == 0 {
                return Err(Error::Precondition(format!("edge ({a},{b}) touches an item without users")));
            }
            let w = scorer.score(co, pa, pb, dataset.n_users);
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NonFinite(format!("score {w} on edge ({a},{b})")));
            }
            Ok((a, b, w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightedItemGraph { n_items: graph.n_items, edges, pruned: graph.pruned })
}

/// Default UACR scores (lift).
pub fn uacr_scores(graph: &WeightedItemGraph, dataset: &Dataset) -> Result<WeightedItemGraph> {
    score_edges(graph, dataset, &Lift)
}

/// Positions (into `graph.edges`) kept by each item's decay envelope.
///
/// Incident edges are sorted by weight descending, ties by neighbor index.
/// The k-th edge survives while `w_k ≥ w_1·r^(k-1)`; the first failure ends
/// the item's list.
pub fn envelope_keeps(graph: &WeightedItemGraph, decay_ratio: f64) -> Vec<Vec<usize>> {
    let mut incident: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph.n_items];
    for (e, &(a, b, _)) in graph.edges.iter().enumerate() {
        incident[a].push((e, b));
        incident[b].push((e, a));
    }
    incident
        .into_par_iter()
        .map(|mut list| {
            list.sort_by(|x, y| graph.edges[y.0].2.total_cmp(&graph.edges[x.0].2).then(x.1.cmp(&y.1)));
            let Some(&(first, _)) = list.first() else { return Vec::new() };
            let top = graph.edges[first].2;
            let mut envelope = top;
            let mut kept = Vec::new();
            for &(e, _) in &list {
                if graph.edges[e].2 < envelope {
                    break;
                }
                kept.push(e);
                envelope *= decay_ratio;
            }
            kept
        })
        .collect()
}

/// Geometric-truncation pruning with a global edge budget.
pub fn geometric_truncate(graph: &WeightedItemGraph, decay_ratio: f64, budget: usize) -> Result<WeightedItemGraph> {
    if !(decay_ratio > 0.0 && decay_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("decay ratio must lie in (0,1], got {decay_ratio}")));
    }
    let mut keep = vec![false; graph.n_edges()];
    for e in envelope_keeps(graph, decay_ratio).into_iter().flatten() {
        keep[e] = true;
    }
    let mut kept: Vec<(usize, usize, f64)> =
        graph.edges.iter().zip(&keep).filter(|(_, k)| **k).map(|(e, _)| *e).collect();
    if kept.len() > budget {
        kept.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        kept.truncate(budget);
        kept.sort_by_key(|&(a, b, _)| (a, b));
    }
    Ok(WeightedItemGraph { n_items: graph.n_items, edges: kept, pruned: true })
}

/// Lazy random-walk operator `½(I + D⁻¹W)`; items without positive-weight
/// edges get an identity row.
pub fn item_operator(graph: &WeightedItemGraph) -> Result<SparseMatrix> {
    let mut strength = vec![0.0; graph.n_items];
    for &(a, b, w) in &graph.edges {
        strength[a] += w;
        strength[b] += w;
    }
    let mut triplets = Vec::with_capacity(2 * graph.n_edges() + graph.n_items);
    for (x, &s) in strength.iter().enumerate() {
        triplets.push((x, x, if s > 0.0 { 0.5 } else { 1.0 }));
    }
    for &(a, b, w) in &graph.edges {
        if w > 0.0 {
            triplets.push((a, b, 0.5 * w / strength[a]));
            triplets.push((b, a, 0.5 * w / strength[b]));
        }
    }
    SparseMatrix::from_triplets(graph.n_items, graph.n_items, triplets)
}

/// `L_II`-layer convolution over the item graph; returns the mean of
/// `h^(0..=L_II)` with `h^(k) = S·h^(k-1)`. Cost `O(L_II·B·d)`.
pub fn item_item_aggregate(items: &DenseMatrix, graph: &WeightedItemGraph, l_ii: usize) -> Result<DenseMatrix> {
    if items.rows() != graph.n_items {
        return Err(Error::Shape(format!("{} item rows for a {}-item graph", items.rows(), graph.n_items)));
    }
    if l_ii == 0 {
        return Ok(items.clone());
    }
    let s = item_operator(graph)?;
    let mut sum = items.clone();
    let mut h = items.clone();
    for _ in 0..l_ii {
        h = spmm(&s, &h)?;
        sum.add_scaled(&h, 1.0);
    }
    Ok(sum.scaled(1.0 / (l_ii + 1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CigrConfig {
    pub decay_ratio: f64,
    pub edge_budget: usize,
    pub l_ii: usize,
}

impl Default for CigrConfig {
    fn default() -> Self {
        CigrConfig { decay_ratio: 0.5, edge_budget: 50_000, l_ii: 2 }
    }
}

/// Builds the raw co-purchase graph, scores it and prunes it.
pub fn build_item_graph(dataset: &Dataset, config: &CigrConfig) -> Result<WeightedItemGraph> {
    let raw = build_copurchase(dataset);
    let scored = uacr_scores(&raw, dataset)?;
    geometric_truncate(&scored, config.decay_ratio, config.edge_budget)
}

pub const GRAPH_CSV_HEADER: &str = "item_a,item_b,uacr";

/// Writes edges with the dataset's original item ids.
pub fn write_graph_csv(path: impl AsRef<Path>, graph: &WeightedItemGraph, item_ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{GRAPH_CSV_HEADER}\n");
    for &(a, b, w) in &graph.edges {
        out.push_str(&format!("{},{},{}\n", item_ids[a], item_ids[b], w));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> WeightedItemGraph {
        WeightedItemGraph::new(n, edges.to_vec(), false).unwrap()
    }

    #[test]
    fn copurchase_counts() {
        let one = Dataset::from_edges(1, 2, [(0, 0), (0, 1)], []).unwrap();
        assert_eq!(build_copurchase(&one).edges, vec![(0, 1, 1.0)]);
        let two = Dataset::from_edges(2, 2, [(0, 0), (0, 1), (1, 0), (1, 1)], []).unwrap();
        assert_eq!(build_copurchase(&two).edges, vec![(0, 1, 2.0)]);
        let three = Dataset::from_edges(1, 3, [(0, 0), (0, 1), (0, 2)], []).unwrap();
        assert_eq!(build_copurchase(&three).edges, vec![(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]);
    }

    #[test]
    fn lift_of_coupled_pair_is_two() {
        // Items 0 and 1 share users 0..2; items 2 and 3 share users 2..4.
        let train = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)];
        let ds = Dataset::from_edges(4, 4, train, []).unwrap();
        let scored = uacr_scores(&build_copurchase(&ds), &ds).unwrap();
        assert_eq!(scored.edges, vec![(0, 1, 2.0), (2, 3, 2.0)]);
    }

    #[test]
    fn lift_of_independent_items_is_one() {
        // Item 0 used by users 0,1; item 1 by users 0,2; 4 users. co=1, 1·4/(2·2)=1.
        let ds = Dataset::from_edges(4, 3, [(0, 0), (1, 0), (0, 1), (2, 1), (3, 2)], []).unwrap();
        let scored = uacr_scores(&build_copurchase(&ds), &ds).unwrap();
        assert_eq!(scored.weight(0, 1), Some(1.0));
        assert_eq!(scored.weight(1, 0), Some(1.0));
    }

    #[test]
    fn counting_scorer_touches_each_edge_once() {
        let ds = Dataset::from_edges(2, 4, [(0, 0), (0, 1), (0, 2), (1, 2), (1, 3)], []).unwrap();
        let raw = build_copurchase(&ds);
        let counter = CountingScorer::new(Lift);
        score_edges(&raw, &ds, &counter).unwrap();
        assert_eq!(counter.calls(), raw.n_edges());
    }

    #[test]
    fn envelope_keeps_all_under_decay() {
        let g = graph(4, &[(0, 1, 1.0), (0, 2, 0.5), (0, 3, 0.3)]);
        let pruned = geometric_truncate(&g, 0.5, usize::MAX).unwrap();
        assert_eq!(pruned.n_edges(), 3);
        assert!(pruned.pruned);
    }

    #[test]
    fn envelope_drops_steep_fall() {
        // Node 0 drops (0,2); node 2 keeps it as its only edge, so look at node 0's keeps.
        let g = graph(3, &[(0, 1, 1.0), (0, 2, 0.2)]);
        let keeps = envelope_keeps(&g, 0.5);
        assert_eq!(keeps[0], vec![0]);
        let g = graph(4, &[(0, 1, 1.0), (0, 2, 0.2), (1, 2, 5.0), (2, 3, 5.0)]);
        let pruned = geometric_truncate(&g, 0.5, usize::MAX).unwrap();
        assert_eq!(pruned.weight(0, 2), None);
    }

    #[test]
    fn ratio_one_keeps_only_ties_with_maximum() {
        let g = graph(4, &[(0, 1, 2.0), (0, 2, 2.0), (0, 3, 1.0)]);
        assert_eq!(envelope_keeps(&g, 1.0)[0].len(), 2);
    }

    #[test]
    fn zero_budget_is_empty() {
        let g = graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]);
        assert_eq!(geometric_truncate(&g, 0.5, 0).unwrap().n_edges(), 0);
    }

    #[test]
    fn budget_keeps_heaviest_with_canonical_ties() {
        let g = graph(4, &[(0, 1, 1.0), (2, 3, 1.0), (1, 2, 3.0)]);
        let pruned = geometric_truncate(&g, 1.0, 2).unwrap();
        assert_eq!(pruned.edges, vec![(0, 1, 1.0), (1, 2, 3.0)]);
    }

    #[test]
    fn aggregate_examples() {
        let g = graph(2, &[(0, 1, 1.0)]);
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(item_item_aggregate(&x, &g, 0).unwrap(), x);
        let y = item_item_aggregate(&x, &g, 1).unwrap();
        assert_eq!(y.as_slice(), &[0.75, 0.25, 0.25, 0.75]);
        let same = DenseMatrix::from_rows(&[vec![0.3, -2.0], vec![0.3, -2.0]]).unwrap();
        let z = item_item_aggregate(&same, &g, 2).unwrap();
        assert!(z.max_abs_diff(&same) < 1e-15);
    }

    #[test]
    fn isolated_items_unchanged() {
        let g = graph(3, &[(0, 1, 1.0)]);
        let x = DenseMatrix::from_rows(&[vec![1.0], vec![3.0], vec![7.0]]).unwrap();
        let y = item_item_aggregate(&x, &g, 2).unwrap();
        assert_eq!(y.get(2, 0), 7.0);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(WeightedItemGraph::new(2, vec![(0, 0, 1.0)], false).is_err());
        assert!(WeightedItemGraph::new(2, vec![(0, 1, -1.0)], false).is_err());
        assert!(WeightedItemGraph::new(2, vec![(0, 1, 1.0), (1, 0, 2.0)], false).is_err());
        assert!(WeightedItemGraph::new(2, vec![(0, 2, 1.0)], false).is_err());
    }

    #[test]
    fn csv_uses_item_ids() {
        let g = graph(2, &[(0, 1, 1.5)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_graph_csv(&p, &g, &["a".into(), "b".into()]).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "item_a,item_b,uacr\na,b,1.5\n");
    }
}
