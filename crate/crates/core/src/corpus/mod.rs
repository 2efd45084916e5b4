//! Interaction logs, train/test splits and popularity statistics.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub use synthetic::{synthetic_corpus, SyntheticConfig, SyntheticCorpus};

/// Name of the reserved category assigned to items missing from a category file.
pub const UNKNOWN_CATEGORY: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Raw interaction records in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Densely indexed interaction data.
///
/// Users occupy indices `0..n_users` and items `0..n_items`; graph modules
/// place items after users when they need a single node index space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Sorted, duplicate-free `(user, item)` pairs.
    pub train_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    /// Per-item count of training interactions (`n_i`).
    pub popularity: Vec<usize>,
    /// `|D|`, the sum of `popularity`.
    pub total_interactions: usize,
    pub categories: Vec<usize>,
    pub category_names: Vec<String>,
    train_by_user: Vec<Vec<usize>>,
    test_by_user: Vec<Vec<usize>>,
}

/// Outcome of attaching a category file to a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryReport {
    /// Records naming items that are not part of the dataset.
    pub ignored_records: usize,
    /// Dataset items with no category record.
    pub unknown_items: usize,
}

impl Dataset {
    /// Builds a dataset from already indexed edges. Ids are synthesized as
    /// `u{index}` / `i{index}` and every item starts in the unknown category.
    pub fn from_edges(
        n_users: usize,
        n_items: usize,
        train: impl IntoIterator<Item = (usize, usize)>,
        test: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let user_ids = (0..n_users).map(|u| format!("u{u}")).collect();
        let item_ids = (0..n_items).map(|i| format!("i{i}")).collect();
        Self::assemble(user_ids, item_ids, train.into_iter().collect(), test.into_iter().collect())
    }

    fn assemble(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        mut train: Vec<(usize, usize)>,
        mut test: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n_users = user_ids.len();
        let n_items = item_ids.len();
        for &(u, i) in train.iter().chain(test.iter()) {
            if u >= n_users {
                return Err(Error::OutOfRange { what: "users", index: u, len: n_users });
            }
            if i >= n_items {
                return Err(Error::OutOfRange { what: "items", index: i, len: n_items });
            }
        }
        train.sort_unstable();
        train.dedup();
        test.sort_unstable();
        test.dedup();
        test.retain(|e| train.binary_search(e).is_err());

        let mut popularity = vec![0usize; n_items];
        let mut train_by_user = vec![Vec::new(); n_users];
        for &(u, i) in &train {
            popularity[i] += 1;
            train_by_user[u].push(i);
        }
        let mut test_by_user = vec![Vec::new(); n_users];
        for &(u, i) in &test {
            test_by_user[u].push(i);
        }
        Ok(Dataset {
            n_users,
            n_items,
            user_ids,
            item_ids,
            total_interactions: train.len(),
            train_edges: train,
            test_edges: test,
            popularity,
            categories: vec![0; n_items],
            category_names: vec![UNKNOWN_CATEGORY.to_string()],
            train_by_user,
            test_by_user,
        })
    }

    /// Number of user-item training edges (`E`).
    pub fn n_edges(&self) -> usize {
        self.train_edges.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }

    /// Sorted training items of `user`.
    pub fn train_items(&self, user: usize) -> &[usize] {
        &self.train_by_user[user]
    }

    /// Sorted held-out items of `user`.
    pub fn test_items(&self, user: usize) -> &[usize] {
        &self.test_by_user[user]
    }

    pub fn has_train_edge(&self, user: usize, item: usize) -> bool {
        self.train_by_user[user].binary_search(&item).is_ok()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|x| x == id)
    }

    /// Replaces the category map. Items without a record fall into the
    /// `unknown` category; records for items outside the dataset are counted
    /// and skipped. Later records for the same item win.
    pub fn assign_categories<I, S, T>(&mut self, records: I) -> CategoryReport
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let index: HashMap<&str, usize> = self.item_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut report = CategoryReport::default();
        let mut assigned: Vec<Option<String>> = vec![None; self.n_items];
        for (item, category) in records {
            match index.get(item.as_ref()) {
                Some(&i) => assigned[i] = Some(category.as_ref().to_string()),
                None => report.ignored_records += 1,
            }
        }

        let mut names: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut categories = vec![usize::MAX; self.n_items];
        for (i, cat) in assigned.iter().enumerate() {
            if let Some(name) = cat {
                let next = names.len();
                let idx = *lookup.entry(name.clone()).or_insert_with(|| {
                    names.push(name.clone());
                    next
                });
                categories[i] = idx;
            }
        }
        report.unknown_items = assigned.iter().filter(|c| c.is_none()).count();
        if report.unknown_items > 0 {
            // an observed category literally named "unknown" shares the sentinel
            let unknown = match lookup.get(UNKNOWN_CATEGORY) {
                Some(&idx) => idx,
                None => {
                    names.push(UNKNOWN_CATEGORY.to_string());
                    names.len() - 1
                }
            };
            for c in categories.iter_mut().filter(|c| **c == usize::MAX) {
                *c = unknown;
            }
        }
        self.categories = categories;
        self.category_names = names;
        report
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter_map(|(n, line)| {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                None
            } else {
                Some((n + 1, line.split('\t').map(str::to_string).collect()))
            }
        })
        .collect())
}

/// Reads a tab-separated `user \t item [\t timestamp]` file.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut records = Vec::new();
    for (line, fields) in read_records(path)? {
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(line, format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        let user = fields[0].trim();
        let item = fields[1].trim();
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(line, "empty user or item id".into()));
        }
        let timestamp = match fields.get(2) {
            Some(ts) => {
                ts.trim().parse::<i64>().map_err(|_| parse_err(line, format!("non-integer timestamp {ts:?}")))?
            }
            None => 0,
        };
        records.push(Interaction { user: user.to_string(), item: item.to_string(), timestamp });
    }
    Ok(InteractionLog { records })
}

/// Filters, indexes and splits a raw log.
///
/// Users and items with fewer than `min_interactions` records are dropped
/// repeatedly until the filter is stable. For every remaining user the
/// `ceil(holdout_ratio * degree)` most recent distinct items go to the test
/// split; equal timestamps are ordered by a shuffle seeded with `seed`.
pub fn build_dataset(log: &InteractionLog, min_interactions: usize, holdout_ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&holdout_ratio) {
        return Err(Error::InvalidArgument(format!("holdout_ratio must be in [0, 1), got {holdout_ratio}")));
    }

    let mut alive: Vec<&Interaction> = log.records.iter().collect();
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for r in &alive {
            *user_count.entry(&r.user).or_default() += 1;
            *item_count.entry(&r.item).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|r| {
            user_count[r.user.as_str()] >= min_interactions && item_count[r.item.as_str()] >= min_interactions
        });
        if alive.len() == before {
            break;
        }
    }
    if alive.is_empty() {
        return Err(Error::EmptyDataset(format!("no interactions survive min_interactions = {min_interactions}")));
    }

    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    // (user, item) -> latest timestamp
    let mut latest: HashMap<(usize, usize), i64> = HashMap::new();
    for r in &alive {
        let u = *user_index.entry(&r.user).or_insert_with(|| {
            user_ids.push(r.user.clone());
            user_ids.len() - 1
        });
        let i = *item_index.entry(&r.item).or_insert_with(|| {
            item_ids.push(r.item.clone());
            item_ids.len() - 1
        });
        latest.entry((u, i)).and_modify(|t| *t = (*t).max(r.timestamp)).or_insert(r.timestamp);
    }

    let mut per_user: Vec<Vec<(usize, i64)>> = vec![Vec::new(); user_ids.len()];
    for (&(u, i), &t) in &latest {
        per_user[u].push((i, t));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(latest.len());
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        // HashMap iteration order is not stable; canonicalize before shuffling
        items.sort_unstable();
        items.shuffle(&mut rng);
        items.sort_by_key(|&(_, t)| std::cmp::Reverse(t));
        let n_test = holdout_count(holdout_ratio, items.len());
        for (k, &(i, _)) in items.iter().enumerate() {
            if k < n_test {
                test.push((u, i));
            } else {
                train.push((u, i));
            }
        }
    }
    Dataset::assemble(user_ids, item_ids, train, test)
}

fn holdout_count(ratio: f64, degree: usize) -> usize {
    // guard against 0.7 * 10 = 7.000000000000001
    let raw = ratio * degree as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(degree)
}

/// Reads an `item \t category` file and attaches it to `dataset`.
pub fn load_categories(path: impl AsRef<Path>, mut dataset: Dataset) -> Result<(Dataset, CategoryReport)> {
    let path = path.as_ref();
    let mut pairs = Vec::new();
    for (line, fields) in read_records(path)? {
        if fields.len() != 2 || fields[0].trim().is_empty() || fields[1].trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected `item \\t category`".into(),
            });
        }
        pairs.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
    }
    let report = dataset.assign_categories(pairs);
    Ok((dataset, report))
}
