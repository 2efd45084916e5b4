//! Command implementations. Each writes its outputs and a `manifest.txt`
//! into the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use cadence_core::cigr::{build_item_graph, item_item_aggregate, write_graph_csv, WeightedItemGraph};
use cadence_core::corpus::{build_dataset, load_categories, load_interactions, synthetic_corpus, Dataset};
use cadence_core::csce::{read_recommendations_csv, recommend, write_recommendations_csv, RecommendationList};
use cadence_core::embed::{init_embeddings, propagate, read_checkpoint, write_checkpoint, EmbeddingTable};
use cadence_core::metrics::{write_metrics_csv, MetricsReport};
use cadence_core::normlab::{
    verify_norm as run_verify, write_item_csv, write_summary_csv, NormReport, DOMINANCE_MARGIN,
};
use cadence_core::spgraph::{build_bipartite_adjacency, DenseMatrix};
use cadence_core::train::{recall_hook, train as run_train, write_history_csv, EpochRecord};

use crate::config::{RunConfig, SweepParam};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const GRAPH_FILE: &str = "item_graph.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const NORM_ITEMS_FILE: &str = "normlab_items.csv";
pub const NORM_SUMMARY_FILE: &str = "normlab_summary.csv";
pub const NORM_TRAJECTORY_FILE: &str = "normlab_trajectories.csv";
pub const SWEEP_CSV_HEADER: &str = "value,recall,coverage,f_beta";

fn prepare_out(config: &RunConfig, command: &str) -> CliResult<()> {
    fs::create_dir_all(&config.out)
        .map_err(|e| CliError::Data(format!("cannot create output directory {}: {e}", config.out.display())))?;
    let path = config.out.join(MANIFEST_FILE);
    fs::write(&path, config.to_manifest(command))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// Loads the configured dataset and a short name for reports.
pub fn load_dataset(config: &RunConfig) -> CliResult<(Dataset, String)> {
    if config.synthetic {
        let corpus = synthetic_corpus(&config.synthetic_config())?;
        return Ok((corpus.into_dataset(config.holdout_ratio, config.seed)?, "synthetic".into()));
    }
    let path = config
        .interactions
        .as_ref()
        .ok_or_else(|| CliError::Usage("no dataset: set `interactions` or `synthetic = true`".into()))?;
    require_file(path, "interactions file")?;
    let log = load_interactions(path)?;
    let mut dataset = build_dataset(&log, config.min_interactions, config.holdout_ratio, config.seed)?;
    if let Some(cats) = &config.categories {
        require_file(cats, "categories file")?;
        let (with_cats, report) = load_categories(cats, dataset)?;
        if report.ignored_records > 0 {
            eprintln!("warning: {} category records name unknown items", report.ignored_records);
        }
        if report.unknown_items > 0 {
            eprintln!("warning: {} items have no category", report.unknown_items);
        }
        dataset = with_cats;
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((dataset, name))
}

fn item_graph(config: &RunConfig, dataset: &Dataset) -> CliResult<WeightedItemGraph> {
    if config.cigr {
        Ok(build_item_graph(dataset, &config.cigr_config())?)
    } else {
        Ok(WeightedItemGraph::new(dataset.n_items, Vec::new(), true)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub graph_edges: Option<usize>,
    pub graph_seconds: f64,
    pub train_seconds: f64,
}

/// Builds the item graph (when enabled), trains, and writes the
/// checkpoint, history and pruned graph.
pub fn train(config: &RunConfig) -> CliResult<TrainSummary> {
    let (dataset, _) = load_dataset(config)?;
    prepare_out(config, "train")?;

    let start = Instant::now();
    let graph_edges = if config.cigr {
        let graph = build_item_graph(&dataset, &config.cigr_config())?;
        write_graph_csv(config.out.join(GRAPH_FILE), &graph, &dataset.item_ids)?;
        Some(graph.n_edges())
    } else {
        None
    };
    let graph_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let spec = config.propagation_spec();
    let adjacency = build_bipartite_adjacency(&dataset, spec.normalization)?;
    let table = init_embeddings(dataset.n_users, dataset.n_items, config.train_dim(), config.seed, config.init_scale)?;
    let (model, history) =
        run_train(&dataset, &adjacency, table, &config.train_config(), &spec, recall_hook(&dataset, config.eval_k))?;
    let train_seconds = start.elapsed().as_secs_f64();

    let checkpoint = config.checkpoint_path();
    write_checkpoint(&checkpoint, &model.table)?;
    write_history_csv(config.out.join(HISTORY_FILE), &history)?;
    Ok(TrainSummary {
        checkpoint,
        history,
        best_epoch: model.best_epoch,
        best_recall: model.best_recall,
        graph_edges,
        graph_seconds,
        train_seconds,
    })
}

fn load_checkpoint_for(config: &RunConfig, dataset: &Dataset) -> CliResult<EmbeddingTable> {
    let path = config.checkpoint_path();
    require_file(&path, "checkpoint")?;
    let table = read_checkpoint(&path)?;
    if table.n_users() != dataset.n_users || table.n_items() != dataset.n_items {
        return Err(CliError::Data(format!(
            "checkpoint {} holds {} users and {} items, dataset has {} and {}",
            path.display(),
            table.n_users(),
            table.n_items(),
            dataset.n_users,
            dataset.n_items
        )));
    }
    Ok(table)
}

/// Everything the re-ranker needs, built once per checkpoint.
pub struct Scorer {
    pub dataset: Dataset,
    pub name: String,
    pub propagated: cadence_core::embed::PropagatedEmbeddings,
    pub refined_items: DenseMatrix,
    pub graph: WeightedItemGraph,
}

impl Scorer {
    pub fn load(config: &RunConfig) -> CliResult<Self> {
        let (dataset, name) = load_dataset(config)?;
        let table = load_checkpoint_for(config, &dataset)?;
        let spec = config.propagation_spec();
        let adjacency = build_bipartite_adjacency(&dataset, spec.normalization)?;
        let propagated = propagate(&table, &adjacency, &spec)?;
        let graph = item_graph(config, &dataset)?;
        let items = propagated.item_matrix();
        let refined_items = if config.cigr { item_item_aggregate(&items, &graph, config.lii)? } else { items };
        Ok(Scorer { dataset, name, propagated, refined_items, graph })
    }

    pub fn recommend(&self, config: &RunConfig) -> CliResult<Vec<RecommendationList>> {
        Ok(recommend(&self.propagated, &self.refined_items, &self.dataset, &self.graph, &config.csce_config())?)
    }
}

fn warn_saturation(config: &RunConfig, dataset: &Dataset) {
    if config.list_length > dataset.n_items {
        eprintln!(
            "warning: list length {} exceeds the catalog of {} items; lists hold every eligible item",
            config.list_length, dataset.n_items
        );
    }
}

/// Re-ranks with the item graph and counterfactual exposure and writes the
/// recommendation lists.
pub fn rerank(config: &RunConfig) -> CliResult<Vec<RecommendationList>> {
    let scorer = Scorer::load(config)?;
    prepare_out(config, "rerank")?;
    warn_saturation(config, &scorer.dataset);
    let lists = scorer.recommend(config)?;
    write_recommendations_csv(config.recommendations_path(), &lists, &scorer.dataset)?;
    Ok(lists)
}

/// Scores a recommendations file against the dataset's test split.
pub fn eval(config: &RunConfig) -> CliResult<MetricsReport> {
    let (dataset, name) = load_dataset(config)?;
    let recs = config.recommendations_path();
    require_file(&recs, "recommendations file")?;
    let lists = read_recommendations_csv(&recs, &dataset)?;
    prepare_out(config, "eval")?;
    let report = MetricsReport::compute(&name, &lists, &dataset, config.eval_k, config.beta_f, config.coverage_mode)?;
    write_metrics_csv(config.out.join(METRICS_FILE), std::slice::from_ref(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub recall: f64,
    pub coverage: f64,
    pub f_beta: f64,
}

/// Re-ranks one fixed checkpoint for every sweep value.
pub fn sweep(config: &RunConfig) -> CliResult<Vec<SweepRow>> {
    if config.sweep_values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let scorer = Scorer::load(config)?;
    prepare_out(config, "sweep")?;
    warn_saturation(config, &scorer.dataset);
    let mut rows = Vec::with_capacity(config.sweep_values.len());
    for &value in &config.sweep_values {
        let mut point = config.clone();
        match config.sweep_param {
            SweepParam::Alpha => point.alpha = value,
            SweepParam::KGlobal => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(CliError::Usage(format!("k_global must be a non-negative integer, got {value}")));
                }
                point.kg = value as usize;
            }
        }
        let lists = scorer.recommend(&point)?;
        let r = MetricsReport::compute(
            &scorer.name,
            &lists,
            &scorer.dataset,
            config.eval_k,
            config.beta_f,
            config.coverage_mode,
        )?;
        rows.push(SweepRow { value, recall: r.recall_at_k, coverage: r.coverage_at_k, f_beta: r.f_beta });
    }
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in &rows {
        out.push_str(&format!("{},{},{},{}\n", r.value, r.recall, r.coverage, r.f_beta));
    }
    let path = config.out.join(SWEEP_FILE);
    fs::write(&path, out).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct NormSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<NormReport>,
    pub pearson_spread: f64,
    /// Human-readable description of every failed check.
    pub failures: Vec<String>,
}

impl NormSummary {
    pub fn passes(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs the norm-dynamics lab for every seed in parallel, the bound
/// experiment on the first seed, and collects failed checks.
pub fn verify_norm(config: &RunConfig) -> CliResult<NormSummary> {
    let seeds = config.norm_seeds();
    let first = config.norm_config(seeds[0]);
    if config.trials > 0 {
        let (eta, l2) = (first.learning_rate, first.l2);
        if !(l2 > 0.0) || eta > 1.0 / (4.0 * l2) {
            return Err(CliError::Usage(format!(
                "precondition violated: the bound check needs lambda > 0 and eta <= 1/(4 lambda); got eta = {eta}, lambda = {l2}"
            )));
        }
    }
    first.validate()?;
    prepare_out(config, "verify-norm")?;

    let azuma = config.azuma_config();
    let reports = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &seed)| {
            let with_azuma = (k == 0 && config.trials > 0).then_some(&azuma);
            run_verify(&config.norm_config(seed), with_azuma)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (seed, r) in seeds.iter().zip(&reports) {
        eprintln!(
            "seed {seed}: pearson r = {:.4}, dominance = {:.4}, kappa = {:.4}, beta = {:.4}",
            r.fit.pearson_r, r.dominance, r.estimates.kappa_bar, r.estimates.beta_hat
        );
    }

    let item_ids: Vec<String> = config.norm_config(seeds[0]).dataset()?.item_ids;
    write_item_csv(config.out.join(NORM_ITEMS_FILE), &reports[0].estimates, first.l2, &item_ids)?;
    write_summary_csv(config.out.join(NORM_SUMMARY_FILE), &reports)?;
    write_trajectories(&config.out.join(NORM_TRAJECTORY_FILE), &reports[0], &item_ids)?;

    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(&reports) {
        if r.fit.pearson_r < r.min_pearson {
            failures.push(format!("seed {seed}: pearson r {:.4} below {}", r.fit.pearson_r, r.min_pearson));
        }
        if r.dominance < r.min_dominance {
            failures.push(format!(
                "seed {seed}: dominance at margin {DOMINANCE_MARGIN} is {:.4}, below {}",
                r.dominance, r.min_dominance
            ));
        }
        if let Some(a) = &r.azuma {
            if !a.hypothesis_holds() {
                failures.push(format!(
                    "seed {seed}: {} steps exceed the bounded-difference constant",
                    a.bounded_difference_violations
                ));
            }
            if a.exceedance_frequency > a.bound {
                failures.push(format!(
                    "seed {seed}: exceedance frequency {:.4} above bound {:.4}",
                    a.exceedance_frequency, a.bound
                ));
            }
        }
    }
    let rs: Vec<f64> = reports.iter().map(|r| r.fit.pearson_r).collect();
    let pearson_spread =
        rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - rs.iter().cloned().fold(f64::INFINITY, f64::min);
    if pearson_spread > config.max_pearson_spread {
        failures.push(format!("pearson r spread {pearson_spread:.4} above {}", config.max_pearson_spread));
    }
    Ok(NormSummary { seeds, reports, pearson_spread, failures })
}

fn write_trajectories(path: &Path, report: &NormReport, item_ids: &[String]) -> CliResult<()> {
    let est = &report.estimates;
    let mut out = String::from("item,step,norm\n");
    for t in &est.norm_trajectories {
        for (k, n) in t.norms.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", item_ids[t.item], k * est.record_every, n));
        }
    }
    fs::write(path, out).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
