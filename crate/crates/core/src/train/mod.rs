//! BPR training of LightGCN embeddings.

mod loss;
mod optim;
mod sampling;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dataset;
use crate::embed::{propagate, EmbeddingTable, PropagatedEmbeddings};
use crate::spgraph::{spmm, DenseMatrix, PropagationSpec, SparseMatrix};
use crate::{dot, sigmoid, softplus, Error, Result};

pub use loss::{
    bpr_gradients, bpr_loss, gradient_diagnostics, GradientBundle, GradientDiagnostics, SparseRows, TripletFinals,
    TripletRows,
};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use sampling::{Triplet, TripletSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    /// Cutoff of the recall used for early stopping.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-4,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 10,
            optimizer: Optimizer::Adam,
            adam_betas: (0.9, 0.999),
            seed: 2021,
            eval_k: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidArgument("l2 must be non-negative".into()));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument("batch size and patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recall: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Snapshot from the epoch with the best evaluation score.
    pub table: EmbeddingTable,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_recall: f64,
}

/// Mean BPR gradient of a batch, back-propagated through the full graph.
///
/// The gradient with respect to final embeddings is accumulated per node,
/// then pulled back to layer 0 as `Σ α_k (Aᵀ)^k G`. The returned rows are
/// those with a nonzero gradient. The loss is the batch mean of
/// `-ln σ(Δ) + λ(‖e_u^(0)‖² + ‖e_i^(0)‖² + ‖e_j^(0)‖²)`.
pub fn batch_gradient(
    table: &EmbeddingTable,
    propagated: &PropagatedEmbeddings,
    adjacency_t: &SparseMatrix,
    spec: &PropagationSpec,
    batch: &[Triplet],
    l2: f64,
) -> Result<(SparseRows, f64)> {
    let d = table.dim();
    let n_users = table.n_users();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut upstream = DenseMatrix::zeros(table.n_nodes(), d);
    let mut loss = 0.0;
    for t in batch {
        let (iu, ii, ij) = (t.user, n_users + t.positive, n_users + t.negative);
        let eu = propagated.node(iu);
        let ei = propagated.node(ii);
        let ej = propagated.node(ij);
        let delta = dot(eu, ei) - dot(eu, ej);
        let s = (1.0 - sigmoid(delta)) * scale;
        let sq: f64 = [iu, ii, ij].iter().map(|&x| dot(table.node(x), table.node(x))).sum();
        loss += softplus(-delta) + l2 * sq;
        for k in 0..d {
            let (u, i, j) = (eu[k], ei[k], ej[k]);
            upstream.row_mut(iu)[k] += s * (j - i);
            upstream.row_mut(ii)[k] -= s * u;
            upstream.row_mut(ij)[k] += s * u;
        }
    }
    let weights = spec.layer_weights();
    let mut grad = upstream.scaled(weights[0]);
    let mut layer = upstream;
    for &w in &weights[1..] {
        layer = spmm(adjacency_t, &layer)?;
        grad.add_scaled(&layer, w);
    }
    let mut rows = SparseRows::new(d);
    for x in 0..table.n_nodes() {
        let r = grad.row(x);
        if r.iter().any(|&v| v != 0.0) {
            rows.push(x, r);
        }
    }
    Ok((rows, loss * scale))
}

/// Trains with mini-batches of sampled triplets and early stopping.
///
/// Each epoch draws `ceil(|D| / b)` batches; the last one holds the
/// remainder. After every epoch `eval_hook` scores the current model and
/// training stops once `patience` epochs pass without improvement.
pub fn train<F>(
    dataset: &Dataset,
    adjacency: &SparseMatrix,
    table: EmbeddingTable,
    config: &TrainConfig,
    spec: &PropagationSpec,
    mut eval_hook: F,
) -> Result<(TrainedModel, Vec<EpochRecord>)>
where
    F: FnMut(&PropagatedEmbeddings) -> Result<f64>,
{
    config.validate()?;
    if table.n_users() != dataset.n_users || table.n_items() != dataset.n_items {
        return Err(Error::Shape(format!(
            "embedding table is {}x{} users/items, dataset has {}x{}",
            table.n_users(),
            table.n_items(),
            dataset.n_users,
            dataset.n_items
        )));
    }
    let start = Instant::now();
    let adjacency_t = adjacency.transpose();
    let sampler = TripletSampler::new(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig {
        lr: config.learning_rate,
        l2: config.l2,
        beta1: config.adam_betas.0,
        beta2: config.adam_betas.1,
        ..AdamConfig::default()
    };
    let mut adam_state = AdamState::new(&table);

    let mut current = table;
    let mut best = TrainedModel { table: current.clone(), best_epoch: 0, best_recall: f64::NEG_INFINITY };
    let mut history = Vec::new();
    let mut stale = 0;
    let total = dataset.total_interactions;
    let n_batches = total.div_ceil(config.batch_size);
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for b in 0..n_batches {
            let size = if b + 1 == n_batches { total - b * config.batch_size } else { config.batch_size };
            batch.clear();
            batch.extend((0..size).map(|_| sampler.sample(&mut rng)));
            let propagated = propagate(&current, adjacency, spec)?;
            let (grad, loss) = batch_gradient(&current, &propagated, &adjacency_t, spec, &batch, config.l2)?;
            loss_sum += loss * size as f64;
            match config.optimizer {
                Optimizer::Sgd => sgd_step(&mut current, &grad, config.learning_rate, config.l2)?,
                Optimizer::Adam => adam_step(&mut current, &grad, &adam, &mut adam_state)?,
            }
        }
        let propagated = propagate(&current, adjacency, spec)?;
        let recall = eval_hook(&propagated)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / total.max(1) as f64,
            recall,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
        if recall > best.best_recall {
            best = TrainedModel { table: current.clone(), best_epoch: epoch, best_recall: recall };
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if best.best_epoch == 0 {
        best.best_recall = 0.0;
    }
    Ok((best, history))
}

/// Early-stopping hook: Recall@`k` of the full base-model ranking on the
/// dataset's test split.
pub fn recall_hook(dataset: &Dataset, k: usize) -> impl FnMut(&PropagatedEmbeddings) -> Result<f64> + '_ {
    move |p| {
        let lists = crate::csce::base_lists(p, &p.item_matrix(), dataset, k);
        crate::metrics::recall_at_k(&lists, dataset, k)
    }
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,loss,recall_at_k,elapsed_seconds\n");
    for r in history {
        out.push_str(&format!("{},{},{},{:.6}\n", r.epoch, r.loss, r.recall, r.elapsed_seconds));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{init_embeddings, MRowWorkspace};
    use crate::spgraph::{build_bipartite_adjacency, Normalization};

    fn small() -> Dataset {
        Dataset::from_edges(
            4,
            5,
            [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0), (3, 4), (3, 2)],
            [(0, 2), (1, 3), (2, 4), (3, 0)],
        )
        .unwrap()
    }

    #[test]
    fn constant_hook_stops_after_patience() {
        let ds = small();
        let a = build_bipartite_adjacency(&ds, Normalization::Symmetric).unwrap();
        let table = init_embeddings(4, 5, 4, 1, 0.1).unwrap();
        let cfg = TrainConfig { patience: 1, batch_size: 4, max_epochs: 50, ..Default::default() };
        let spec = PropagationSpec::uniform(2, Normalization::Symmetric);
        let (_, history) = train(&ds, &a, table, &cfg, &spec, |_| Ok(0.0)).unwrap();
        assert_eq!(history.len(), 2);
    }

    #[test]
    fn zero_epochs_returns_initial_table() {
        let ds = small();
        let a = build_bipartite_adjacency(&ds, Normalization::Symmetric).unwrap();
        let table = init_embeddings(4, 5, 4, 1, 0.1).unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let spec = PropagationSpec::uniform(2, Normalization::Symmetric);
        let (model, history) = train(&ds, &a, table.clone(), &cfg, &spec, |_| Ok(0.0)).unwrap();
        assert!(history.is_empty());
        assert_eq!(model.table, table);
        assert_eq!(model.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small();
        let a = build_bipartite_adjacency(&ds, Normalization::Symmetric).unwrap();
        let cfg = TrainConfig { batch_size: 3, max_epochs: 5, patience: 10, learning_rate: 0.05, ..Default::default() };
        let spec = PropagationSpec::uniform(3, Normalization::Symmetric);
        let run = || {
            let table = init_embeddings(4, 5, 8, 7, 0.1).unwrap();
            let (m, h) = train(&ds, &a, table, &cfg, &spec, recall_hook(&ds, 2)).unwrap();
            (m.table, h.into_iter().map(|r| (r.epoch, r.loss, r.recall)).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss() {
        let ds = small();
        let a = build_bipartite_adjacency(&ds, Normalization::Symmetric).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 60,
            patience: 1000,
            learning_rate: 0.05,
            l2: 0.0,
            ..Default::default()
        };
        let spec = PropagationSpec::uniform(1, Normalization::Symmetric);
        let table = init_embeddings(4, 5, 8, 7, 0.1).unwrap();
        let (_, h) = train(&ds, &a, table, &cfg, &spec, |_| Ok(0.0)).unwrap();
        let first = h.first().unwrap().loss;
        let last = h.last().unwrap().loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn batch_of_one_matches_triplet_bundle() {
        let ds = small();
        for norm in [Normalization::Symmetric, Normalization::RandomWalk] {
            let a = build_bipartite_adjacency(&ds, norm).unwrap();
            let spec = PropagationSpec::new(vec![0.4, 0.3, 0.2, 0.1], norm).unwrap();
            let table = init_embeddings(4, 5, 3, 2, 0.5).unwrap();
            let p = propagate(&table, &a, &spec).unwrap();
            let t = Triplet { user: 1, positive: 2, negative: 4 };
            let (batch, _) = batch_gradient(&table, &p, &a.transpose(), &spec, &[t], 0.0).unwrap();
            let rows = TripletRows::new(&a, &spec, 4, &t, &mut MRowWorkspace::new(9));
            let bundle = bpr_gradients(&TripletFinals::from_propagated(&p, &t), &rows);
            for (node, g) in bundle.d_layer0.iter() {
                let other = batch.get(node).unwrap_or(&[0.0, 0.0, 0.0]);
                for (x, y) in g.iter().zip(other) {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn history_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history_csv(&path, &[EpochRecord { epoch: 1, loss: 0.5, recall: 0.25, elapsed_seconds: 1.0 }]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss,recall_at_k,elapsed_seconds\n1,0.5,0.25,"));
    }
}
