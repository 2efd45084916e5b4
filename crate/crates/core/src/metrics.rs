//! Accuracy and diversity metrics, plus the exact Wilcoxon signed-rank test.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::corpus::Dataset;
use crate::csce::RecommendationList;
use crate::{Error, Result};

/// Largest sample size accepted by [`wilcoxon_signed_rank`].
pub const WILCOXON_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageMode {
    /// Mean per-user fraction of categories present in the top-K.
    #[default]
    Category,
    /// Fraction of the catalogue appearing in any user's top-K.
    Item,
}

impl std::str::FromStr for CoverageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(CoverageMode::Category),
            "item" | "item-coverage" => Ok(CoverageMode::Item),
            other => Err(Error::InvalidArgument(format!("unknown coverage mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for CoverageMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoverageMode::Category => "category",
            CoverageMode::Item => "item",
        })
    }
}

fn top_k(list: &RecommendationList, k: usize) -> &[usize] {
    &list.items[..k.min(list.items.len())]
}

/// Per-user recall, `None` for users without test items.
///
/// Users that have test items but no list count as zero hits.
pub fn recall_per_user(lists: &[RecommendationList], dataset: &Dataset, k: usize) -> Vec<Option<f64>> {
    let mut by_user: Vec<Option<&RecommendationList>> = vec![None; dataset.n_users];
    for list in lists {
        if list.user < dataset.n_users {
            by_user[list.user] = Some(list);
        }
    }
    (0..dataset.n_users)
        .map(|u| {
            let test = dataset.test_items(u);
            if test.is_empty() {
                return None;
            }
            let hits =
                by_user[u].map(|l| top_k(l, k).iter().filter(|i| test.binary_search(i).is_ok()).count()).unwrap_or(0);
            Some(hits as f64 / test.len() as f64)
        })
        .collect()
}

/// Mean over users with at least one test item of `|top-K ∩ test(u)| / |test(u)|`.
pub fn recall_at_k(lists: &[RecommendationList], dataset: &Dataset, k: usize) -> Result<f64> {
    let values: Vec<f64> = recall_per_user(lists, dataset, k).into_iter().flatten().collect();
    if values.is_empty() {
        return Err(Error::Precondition("no user has test items".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-list category coverage: distinct categories in the top-K over `n_categories`.
pub fn category_coverage_per_user(lists: &[RecommendationList], dataset: &Dataset, k: usize) -> Result<Vec<f64>> {
    let n = dataset.n_categories();
    if n == 0 {
        return Err(Error::Precondition("dataset has no categories".into()));
    }
    Ok(lists
        .iter()
        .map(|l| {
            let seen: HashSet<usize> = top_k(l, k).iter().map(|&i| dataset.categories[i]).collect();
            seen.len() as f64 / n as f64
        })
        .collect())
}

pub fn coverage_at_k(lists: &[RecommendationList], dataset: &Dataset, k: usize, mode: CoverageMode) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Precondition("no recommendation lists".into()));
    }
    match mode {
        CoverageMode::Category => {
            let per_user = category_coverage_per_user(lists, dataset, k)?;
            Ok(per_user.iter().sum::<f64>() / per_user.len() as f64)
        }
        CoverageMode::Item => {
            if dataset.n_items == 0 {
                return Err(Error::Precondition("dataset has no items".into()));
            }
            let seen: HashSet<usize> = lists.iter().flat_map(|l| top_k(l, k).iter().copied()).collect();
            Ok(seen.len() as f64 / dataset.n_items as f64)
        }
    }
}

/// Weighted harmonic mean `(1+β²)·c·r / (β²·r + c)`; zero when the denominator vanishes.
pub fn f_beta(coverage: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * recall + coverage;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * coverage * recall / denom
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    /// One-sided exact p-value `P(W' ≥ W)` under the sign-flip null.
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
}

/// Exact one-sided Wilcoxon signed-rank test for `x > y`.
///
/// Zero differences are dropped; tied magnitudes get average ranks. The
/// p-value enumerates all `2^n` sign assignments, so `n` is capped at
/// [`WILCOXON_MAX_N`].
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("wilcoxon input".into()));
    }
    if diffs.is_empty() {
        return Err(Error::Degenerate("all differences are zero".into()));
    }
    let n = diffs.len();
    if n > WILCOXON_MAX_N {
        return Err(Error::InvalidArgument(format!("exact test supports at most {WILCOXON_MAX_N} pairs, got {n}")));
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    // Average ranks are multiples of 1/2, so doubled ranks are exact integers.
    let doubled: Vec<u64> = average_ranks(&magnitudes).iter().map(|r| (2.0 * r).round() as u64).collect();
    let observed: u64 = diffs.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    // Gray-code walk: consecutive masks differ in one bit.
    let mut sum = 0u64;
    let mut at_least = u64::from(observed == 0);
    for step in 1u64..(1u64 << n) {
        let bit = step.trailing_zeros() as usize;
        let gray = step ^ (step >> 1);
        if gray & (1 << bit) != 0 {
            sum += doubled[bit];
        } else {
            sum -= doubled[bit];
        }
        if sum >= observed {
            at_least += 1;
        }
    }
    Ok(WilcoxonResult { statistic: observed as f64 / 2.0, p_value: at_least as f64 / (1u64 << n) as f64, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub k: usize,
    pub recall_at_k: f64,
    pub coverage_at_k: f64,
    pub beta: f64,
    pub f_beta: f64,
    pub coverage_mode: CoverageMode,
    pub per_user_recall: Option<Vec<Option<f64>>>,
}

impl MetricsReport {
    pub fn compute(
        name: &str,
        lists: &[RecommendationList],
        dataset: &Dataset,
        k: usize,
        beta: f64,
        mode: CoverageMode,
    ) -> Result<Self> {
        let recall = recall_at_k(lists, dataset, k)?;
        let coverage = coverage_at_k(lists, dataset, k, mode)?;
        Ok(MetricsReport {
            dataset: name.to_string(),
            k,
            recall_at_k: recall,
            coverage_at_k: coverage,
            beta,
            f_beta: f_beta(coverage, recall, beta),
            coverage_mode: mode,
            per_user_recall: None,
        })
    }

    pub fn with_per_user(mut self, lists: &[RecommendationList], dataset: &Dataset) -> Self {
        self.per_user_recall = Some(recall_per_user(lists, dataset, self.k));
        self
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.dataset, self.k, self.recall_at_k, self.coverage_at_k, self.beta, self.f_beta)
    }
}

pub const METRICS_CSV_HEADER: &str = "dataset,k,recall,coverage,beta,f_beta";

pub fn write_metrics_csv(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
