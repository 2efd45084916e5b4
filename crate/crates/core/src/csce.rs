//! Two-stage candidate selection and counterfactual exposure re-ranking.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::cigr::WeightedItemGraph;
use crate::corpus::Dataset;
use crate::embed::PropagatedEmbeddings;
use crate::spgraph::DenseMatrix;
use crate::{dot, sigmoid, softplus, Error, Result};

/// How a neighbor's stage-1 key combines the weights of its edges into the
/// user's history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborKey {
    #[default]
    Max,
    Sum,
    Mean,
}

impl std::str::FromStr for NeighborKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(NeighborKey::Max),
            "sum" => Ok(NeighborKey::Sum),
            "mean" => Ok(NeighborKey::Mean),
            other => Err(Error::InvalidArgument(format!("unknown neighbor key {other:?}"))),
        }
    }
}

impl std::fmt::Display for NeighborKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NeighborKey::Max => "max",
            NeighborKey::Sum => "sum",
            NeighborKey::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsceConfig {
    pub k_global: usize,
    pub k_category: usize,
    pub alpha: f64,
    pub list_length: usize,
    pub neighbor_key: NeighborKey,
}

impl Default for CsceConfig {
    fn default() -> Self {
        CsceConfig { k_global: 4, k_category: 1, alpha: 1.15, list_length: 100, neighbor_key: NeighborKey::Max }
    }
}

impl CsceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.list_length == 0 {
            return Err(Error::InvalidArgument("list length must be at least 1".into()));
        }
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationList {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Neighbor lists of a pruned item graph, built once per re-ranking pass.
#[derive(Debug, Clone)]
pub struct ItemNeighbors {
    lists: Vec<Vec<(usize, f64)>>,
}

impl ItemNeighbors {
    pub fn new(graph: &WeightedItemGraph) -> Self {
        ItemNeighbors { lists: graph.neighbors() }
    }

    pub fn of(&self, item: usize) -> &[(usize, f64)] {
        &self.lists[item]
    }

    pub fn n_items(&self) -> usize {
        self.lists.len()
    }
}

fn by_key_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Candidate items for `user`, sorted by index.
///
/// Stage 1 ranks the distinct graph neighbors of the user's train items by
/// their aggregated edge weight and keeps the top `k_global`. Stage 2 adds,
/// for each category among the user's train items, the top `k_category`
/// remaining neighbors of that category. Train items are never candidates.
pub fn user_candidates(user: usize, dataset: &Dataset, neighbors: &ItemNeighbors, config: &CsceConfig) -> Vec<usize> {
    let history = dataset.train_items(user);
    let mut agg: HashMap<usize, (f64, usize)> = HashMap::new();
    for &h in history {
        for &(x, w) in neighbors.of(h) {
            if dataset.has_train_edge(user, x) {
                continue;
            }
            let e = agg.entry(x).or_insert((
                match config.neighbor_key {
                    NeighborKey::Max => f64::NEG_INFINITY,
                    _ => 0.0,
                },
                0,
            ));
            match config.neighbor_key {
                NeighborKey::Max => e.0 = e.0.max(w),
                _ => e.0 += w,
            }
            e.1 += 1;
        }
    }
    let mut ranked: Vec<(usize, f64)> = agg
        .into_iter()
        .map(|(x, (s, c))| (x, if config.neighbor_key == NeighborKey::Mean { s / c as f64 } else { s }))
        .collect();
    ranked.sort_by(by_key_then_index);

    let mut chosen: Vec<usize> = ranked.iter().take(config.k_global).map(|&(x, _)| x).collect();
    if config.k_category > 0 {
        let mut categories: Vec<usize> = history.iter().map(|&h| dataset.categories[h]).collect();
        categories.sort_unstable();
        categories.dedup();
        let stage_one = chosen.len();
        for c in categories {
            chosen.extend(
                ranked[stage_one.min(ranked.len())..]
                    .iter()
                    .filter(|(x, _)| dataset.categories[*x] == c)
                    .take(config.k_category)
                    .map(|&(x, _)| x),
            );
        }
    }
    chosen.sort_unstable();
    chosen
}

/// `α·σ(base)` on candidates, `σ(base)` elsewhere.
pub fn counterfactual_exposure(base: &[f64], candidates: &[usize], alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = base.iter().map(|&b| sigmoid(b)).collect();
    for &c in candidates {
        out[c] *= alpha;
    }
    out
}

struct Ranked {
    item: usize,
    score: f64,
    log_score: f64,
    base: f64,
}

fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.log_score.total_cmp(&a.log_score))
        .then(b.base.total_cmp(&a.base))
        .then(a.item.cmp(&b.item))
}

/// Top-`n` eligible items. Ordering is by reported score, then by its
/// logarithm (which keeps resolving once σ saturates), then by raw base
/// score, then by item index.
fn top_n(
    user: usize,
    dataset: &Dataset,
    base: &[f64],
    candidates: &[usize],
    alpha: f64,
    n: usize,
) -> RecommendationList {
    let ln_alpha = alpha.ln();
    let mut is_candidate = vec![false; base.len()];
    for &c in candidates {
        is_candidate[c] = true;
    }
    let mut pool: Vec<Ranked> = base
        .iter()
        .enumerate()
        .filter(|(i, _)| !dataset.has_train_edge(user, *i))
        .map(|(item, &b)| {
            let boost = is_candidate[item];
            Ranked {
                item,
                score: if boost { alpha * sigmoid(b) } else { sigmoid(b) },
                log_score: -softplus(-b) + if boost { ln_alpha } else { 0.0 },
                base: b,
            }
        })
        .collect();
    if pool.len() > n {
        pool.select_nth_unstable_by(n - 1, rank_order);
        pool.truncate(n);
    }
    pool.sort_by(rank_order);
    RecommendationList {
        user,
        items: pool.iter().map(|r| r.item).collect(),
        scores: pool.iter().map(|r| r.score).collect(),
    }
}

fn base_scores(user: &[f64], items: &DenseMatrix) -> Vec<f64> {
    (0..items.rows()).map(|i| dot(user, items.row(i))).collect()
}

fn check_shapes(p: &PropagatedEmbeddings, items: &DenseMatrix, dataset: &Dataset) -> Result<()> {
    if p.n_users() != dataset.n_users || items.rows() != dataset.n_items {
        return Err(Error::Shape(format!(
            "embeddings cover {} users and {} items, dataset has {} and {}",
            p.n_users(),
            items.rows(),
            dataset.n_users,
            dataset.n_items
        )));
    }
    Ok(())
}

/// Re-ranked top-N lists for every user, ordered by user index.
///
/// Per user the cost is `O(|I|·d)` for scoring plus `O(|I| + N log N)` for
/// selection; users are independent and processed in parallel.
pub fn recommend(
    propagated: &PropagatedEmbeddings,
    refined_items: &DenseMatrix,
    dataset: &Dataset,
    graph: &WeightedItemGraph,
    config: &CsceConfig,
) -> Result<Vec<RecommendationList>> {
    config.validate()?;
    check_shapes(propagated, refined_items, dataset)?;
    let neighbors = ItemNeighbors::new(graph);
    Ok((0..dataset.n_users)
        .into_par_iter()
        .map(|u| {
            let base = base_scores(propagated.user(u), refined_items);
            let candidates = user_candidates(u, dataset, &neighbors, config);
            top_n(u, dataset, &base, &candidates, config.alpha, config.list_length)
        })
        .collect())
}

/// Plain base-model top-`n` lists by inner product, without re-ranking.
/// Scores are the raw inner products.
pub fn base_lists(
    propagated: &PropagatedEmbeddings,
    items: &DenseMatrix,
    dataset: &Dataset,
    n: usize,
) -> Vec<RecommendationList> {
    (0..propagated.n_users().min(dataset.n_users))
        .into_par_iter()
        .map(|u| {
            let base = base_scores(propagated.user(u), items);
            let mut pool: Vec<(usize, f64)> =
                base.into_iter().enumerate().filter(|(i, _)| !dataset.has_train_edge(u, *i)).collect();
            if n == 0 {
                pool.clear();
            } else if pool.len() > n {
                pool.select_nth_unstable_by(n - 1, by_key_then_index);
                pool.truncate(n);
            }
            pool.sort_by(by_key_then_index);
            RecommendationList {
                user: u,
                items: pool.iter().map(|p| p.0).collect(),
                scores: pool.iter().map(|p| p.1).collect(),
            }
        })
        .collect()
}

/// Number of candidate items that made it into each user's list, summed.
pub fn candidate_hits(
    lists: &[RecommendationList],
    dataset: &Dataset,
    graph: &WeightedItemGraph,
    config: &CsceConfig,
) -> usize {
    let neighbors = ItemNeighbors::new(graph);
    lists
        .par_iter()
        .map(|l| {
            let c = user_candidates(l.user, dataset, &neighbors, config);
            l.items.iter().filter(|i| c.binary_search(i).is_ok()).count()
        })
        .sum()
}

pub const RECOMMENDATIONS_CSV_HEADER: &str = "user,rank,item,score";

/// Writes lists with original ids and 1-based ranks.
pub fn write_recommendations_csv(
    path: impl AsRef<Path>,
    lists: &[RecommendationList],
    dataset: &Dataset,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{RECOMMENDATIONS_CSV_HEADER}\n");
    for l in lists {
        for (rank, (&item, score)) in l.items.iter().zip(&l.scores).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", dataset.user_ids[l.user], rank + 1, dataset.item_ids[item], score));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a recommendations CSV back against `dataset`'s id maps.
pub fn read_recommendations_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<RecommendationList>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let users: HashMap<&str, usize> = dataset.user_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let items: HashMap<&str, usize> = dataset.item_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if k == 0 {
            if line.trim() != RECOMMENDATIONS_CSV_HEADER {
                return Err(parse_err(lineno, format!("expected header {RECOMMENDATIONS_CSV_HEADER:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 fields, got {}", f.len())));
        }
        let user = *users.get(f[0]).ok_or_else(|| parse_err(lineno, format!("unknown user {:?}", f[0])))?;
        let rank: usize = f[1].parse().map_err(|_| parse_err(lineno, format!("bad rank {:?}", f[1])))?;
        let item = *items.get(f[2]).ok_or_else(|| parse_err(lineno, format!("unknown item {:?}", f[2])))?;
        let score: f64 = f[3].parse().map_err(|_| parse_err(lineno, format!("bad score {:?}", f[3])))?;
        rows.push((user, rank, item, score));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no recommendations", path.display())));
    }
    rows.sort_by_key(|r| (r.0, r.1));
    let mut lists: Vec<RecommendationList> = Vec::new();
    for (user, _, item, score) in rows {
        match lists.last_mut() {
            Some(l) if l.user == user => {
                l.items.push(item);
                l.scores.push(score);
            }
            _ => lists.push(RecommendationList { user, items: vec![item], scores: vec![score] }),
        }
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{init_embeddings, propagate};
    use crate::spgraph::{build_bipartite_adjacency, Normalization, PropagationSpec};

    fn config(k_global: usize, k_category: usize, alpha: f64) -> CsceConfig {
        CsceConfig { k_global, k_category, alpha, list_length: 100, neighbor_key: NeighborKey::Max }
    }

    /// One user with item 0; item 0 neighbors 1 (w=2) and 2 (w=1); item 3 is unrelated.
    fn star() -> (Dataset, WeightedItemGraph) {
        let mut ds = Dataset::from_edges(2, 4, [(0, 0), (1, 1), (1, 2), (1, 3)], []).unwrap();
        ds.assign_categories([("i0", "x"), ("i1", "x"), ("i2", "y"), ("i3", "y")]);
        let g = WeightedItemGraph::new(4, vec![(0, 1, 2.0), (0, 2, 1.0)], true).unwrap();
        (ds, g)
    }

    #[test]
    fn candidate_examples() {
        let (ds, g) = star();
        let nb = ItemNeighbors::new(&g);
        assert!(user_candidates(0, &ds, &nb, &config(0, 0, 1.0)).is_empty());
        assert_eq!(user_candidates(0, &ds, &nb, &config(1, 0, 1.0)), vec![1]);
        // Only category x is in the history; its best remaining neighbor is none after stage 1.
        assert_eq!(user_candidates(0, &ds, &nb, &config(1, 1, 1.0)), vec![1]);
        assert_eq!(user_candidates(0, &ds, &nb, &config(0, 1, 1.0)), vec![1]);
    }

    #[test]
    fn category_stage_caps_per_category() {
        // User holds items 0 (cat x) and 3 (cat y); neighbors 1,4 in x and 2,5 in y.
        let mut ds = Dataset::from_edges(2, 6, [(0, 0), (0, 3), (1, 1), (1, 2), (1, 4), (1, 5)], []).unwrap();
        ds.assign_categories([("i0", "x"), ("i1", "x"), ("i4", "x"), ("i2", "y"), ("i3", "y"), ("i5", "y")]);
        let g = WeightedItemGraph::new(6, vec![(0, 1, 5.0), (0, 4, 4.0), (0, 2, 3.0), (3, 5, 2.0), (3, 2, 1.0)], true)
            .unwrap();
        let nb = ItemNeighbors::new(&g);
        let c = user_candidates(0, &ds, &nb, &config(1, 1, 1.0));
        assert_eq!(c, vec![1, 2, 4]);
        assert!(c.len() <= 1 + 2);
    }

    #[test]
    fn user_without_history_has_no_candidates() {
        let (ds, g) = star();
        let nb = ItemNeighbors::new(&g);
        let empty = Dataset::from_edges(2, 4, [(1, 0)], []).unwrap();
        assert!(user_candidates(0, &empty, &nb, &config(3, 3, 1.0)).is_empty());
        assert!(!user_candidates(0, &ds, &nb, &config(3, 3, 1.0)).is_empty());
    }

    #[test]
    fn exposure_examples() {
        let base = [0.3, -1.0, 2.0];
        let s: Vec<f64> = base.iter().map(|&b| sigmoid(b)).collect();
        assert_eq!(counterfactual_exposure(&base, &[], 1.15), s);
        assert_eq!(counterfactual_exposure(&base, &[0, 2], 1.0), s);
        let logit = (0.8f64 / 0.2).ln();
        let out = counterfactual_exposure(&[logit], &[0], 1.15);
        assert!((out[0] - 0.92).abs() < 1e-12);
    }

    fn model(ds: &Dataset, seed: u64) -> PropagatedEmbeddings {
        let a = build_bipartite_adjacency(ds, Normalization::Symmetric).unwrap();
        let t = init_embeddings(ds.n_users, ds.n_items, 4, seed, 1.0).unwrap();
        propagate(&t, &a, &PropagationSpec::uniform(1, Normalization::Symmetric)).unwrap()
    }

    #[test]
    fn alpha_one_matches_base_lists() {
        let (ds, g) = star();
        let p = model(&ds, 3);
        let items = p.item_matrix();
        let re = recommend(&p, &items, &ds, &g, &CsceConfig { alpha: 1.0, ..config(2, 1, 1.0) }).unwrap();
        let base = base_lists(&p, &items, &ds, 100);
        for (a, b) in re.iter().zip(&base) {
            assert_eq!(a.items, b.items);
        }
    }

    #[test]
    fn lists_are_valid_and_saturate() {
        let (ds, g) = star();
        let p = model(&ds, 5);
        let lists = recommend(&p, &p.item_matrix(), &ds, &g, &config(2, 1, 1.5)).unwrap();
        for l in &lists {
            assert_eq!(l.items.len(), ds.n_items - ds.train_items(l.user).len());
            assert!(l.items.iter().all(|&i| !ds.has_train_edge(l.user, i)));
            assert!(l.scores.windows(2).all(|w| w[0] >= w[1]));
            let mut sorted = l.items.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), l.items.len());
        }
    }

    #[test]
    fn saturated_sigmoid_keeps_base_order() {
        let ds = Dataset::from_edges(1, 3, [(0, 0)], []).unwrap();
        let items = DenseMatrix::from_rows(&[vec![0.0], vec![50.0], vec![60.0]]).unwrap();
        let nodes = DenseMatrix::from_rows(&[vec![1.0], vec![0.0], vec![50.0], vec![60.0]]).unwrap();
        let p = PropagatedEmbeddings::from_combined(1, nodes).unwrap();
        let g = WeightedItemGraph::new(3, vec![], true).unwrap();
        let lists = recommend(&p, &items, &ds, &g, &config(0, 0, 1.0)).unwrap();
        assert_eq!(lists[0].items, vec![2, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let (ds, g) = star();
        let p = model(&ds, 9);
        let lists = recommend(&p, &p.item_matrix(), &ds, &g, &config(2, 1, 1.15)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_recommendations_csv(&path, &lists, &ds).unwrap();
        let back = read_recommendations_csv(&path, &ds).unwrap();
        assert_eq!(back, lists);
        fs::write(&path, format!("{RECOMMENDATIONS_CSV_HEADER}\n")).unwrap();
        assert!(read_recommendations_csv(&path, &ds).is_err());
    }
}
