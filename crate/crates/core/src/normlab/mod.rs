//! Simulation lab for item-norm dynamics under plain per-sample SGD.
//!
//! Trains LightGCN embeddings on a synthetic Zipf corpus with one sampled
//! triplet per step, random-walk normalization and uniform negatives, and
//! measures how layer-0 item norms relate to item popularity.

mod azuma;
mod theory;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{synthetic_corpus, Dataset, SyntheticConfig};
use crate::embed::{init_embeddings, EmbeddingTable, MRowWorkspace};
use crate::spgraph::{build_bipartite_adjacency, Normalization, PropagationSpec, SparseMatrix};
use crate::train::{bpr_gradients, gradient_diagnostics, Triplet, TripletFinals, TripletRows, TripletSampler};
use crate::{norm, Error, Result};

pub use azuma::{azuma_empirical, run_trials as azuma_from, AzumaConfig, AzumaOutcome};
pub use theory::{
    azuma_bound, dominance_probability, drift_root, fixed_point_predict, fixed_point_residual, norm_popularity_fit,
    AzumaParams, PopularityFit,
};

/// Which rows the `2λe` decay reaches on each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regularization {
    /// Rows with a nonzero gradient in the step.
    #[default]
    Touched,
    /// Every row, every step.
    Dense,
}

impl std::str::FromStr for Regularization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "touched" | "sparse" => Ok(Regularization::Touched),
            "dense" => Ok(Regularization::Dense),
            other => Err(Error::InvalidArgument(format!("unknown regularization mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Regularization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regularization::Touched => "touched",
            Regularization::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLabConfig {
    pub corpus: SyntheticConfig,
    pub dim: usize,
    pub init_scale: f64,
    /// Propagation weights `α_0..α_L` over the random-walk adjacency.
    pub layer_weights: Vec<f64>,
    pub learning_rate: f64,
    pub l2: f64,
    pub regularization: Regularization,
    pub steps: usize,
    pub seed: u64,
    /// Trajectory sampling interval in steps.
    pub record_every: usize,
    /// Items whose norms are recorded; empty picks five popularity quantiles.
    pub tracked_items: Vec<usize>,
    /// First step contributing to κ̄ and β̂; `None` means the second half.
    pub estimate_after: Option<usize>,
    /// Steps before the divergence guard is armed; `None` means a tenth.
    pub warmup: Option<usize>,
}

impl Default for NormLabConfig {
    fn default() -> Self {
        NormLabConfig {
            corpus: SyntheticConfig::default(),
            dim: 16,
            init_scale: 0.1,
            layer_weights: vec![0.5, 0.5],
            learning_rate: 5e-3,
            l2: 1e-3,
            regularization: Regularization::Dense,
            steps: 600_000,
            seed: 2021,
            record_every: 10,
            tracked_items: Vec::new(),
            estimate_after: None,
            warmup: None,
        }
    }
}

impl NormLabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::InvalidArgument("learning rate and l2 must be non-negative".into()));
        }
        if 2.0 * self.learning_rate * self.l2 >= 1.0 {
            return Err(Error::InvalidArgument("2ηλ must be below 1".into()));
        }
        if self.dim == 0 || self.record_every == 0 {
            return Err(Error::InvalidArgument("dim and record interval must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<PropagationSpec> {
        PropagationSpec::new(self.layer_weights.clone(), Normalization::RandomWalk)
    }

    /// The synthetic corpus with every interaction in train.
    pub fn dataset(&self) -> Result<Dataset> {
        synthetic_corpus(&self.corpus)?.into_dataset(0.0, self.corpus.seed)
    }
}

/// Layer-0 embeddings stored as `scale · raw`; dense decay only touches
/// the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    raw: EmbeddingTable,
    scale: f64,
    pub steps_taken: u64,
}

impl SgdState {
    pub fn new(table: EmbeddingTable) -> Self {
        SgdState { raw: table, scale: 1.0, steps_taken: 0 }
    }

    pub fn node_norm(&self, x: usize) -> f64 {
        self.scale * norm(self.raw.node(x))
    }

    pub fn item_norms(&self) -> Vec<f64> {
        (0..self.raw.n_items()).map(|i| self.node_norm(self.raw.item_node(i))).collect()
    }

    pub fn user_norms(&self) -> Vec<f64> {
        (0..self.raw.n_users()).map(|u| self.node_norm(u)).collect()
    }

    pub fn table(&self) -> EmbeddingTable {
        let mut t = self.raw.clone();
        for v in t.matrix_mut().as_mut_slice() {
            *v *= self.scale;
        }
        t
    }

    /// Rescales node `x` to norm `target`, keeping its direction.
    pub fn set_norm(&mut self, x: usize, target: f64) -> Result<()> {
        let current = norm(self.raw.node(x));
        if current == 0.0 {
            return Err(Error::Degenerate(format!("node {x} has zero norm")));
        }
        let factor = target / (self.scale * current);
        for v in self.raw.node_mut(x) {
            *v *= factor;
        }
        Ok(())
    }

    fn renormalize(&mut self) {
        let s = self.scale;
        for v in self.raw.matrix_mut().as_mut_slice() {
            *v *= s;
        }
        self.scale = 1.0;
    }
}

/// Per-step quantities feeding the running estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepProbe {
    pub triplet: Triplet,
    /// Component of the positive item's gradient along its layer-0 direction.
    pub g_parallel: f64,
    /// `s·(M_ii + M_ui)·cos θ_ui`.
    pub kappa_sample: f64,
    /// `s·M_ui / ‖e_u‖`.
    pub beta_sample: f64,
    pub user_norm: f64,
    pub norm_before: f64,
    pub norm_after: f64,
}

/// Shared, read-only simulation context.
pub struct NormLab<'a> {
    pub dataset: &'a Dataset,
    pub adjacency: SparseMatrix,
    pub spec: PropagationSpec,
    sampler: TripletSampler<'a>,
    pub learning_rate: f64,
    pub l2: f64,
    pub regularization: Regularization,
}

impl<'a> NormLab<'a> {
    pub fn new(dataset: &'a Dataset, config: &NormLabConfig) -> Result<Self> {
        let spec = config.spec()?;
        let adjacency = build_bipartite_adjacency(dataset, spec.normalization)?;
        Ok(NormLab {
            dataset,
            adjacency,
            spec,
            sampler: TripletSampler::new(dataset)?,
            learning_rate: config.learning_rate,
            l2: config.l2,
            regularization: config.regularization,
        })
    }

    /// One SGD step `e ← (1 - 2ηλ)e - η·g` on a freshly sampled triplet.
    ///
    /// Returns the probe when the diagnostics are defined (nonzero user and
    /// positive-item norms). `touched` receives every updated node.
    pub fn step(
        &self,
        state: &mut SgdState,
        rng: &mut ChaCha8Rng,
        workspace: &mut MRowWorkspace,
        touched: &mut Vec<usize>,
    ) -> Result<Option<StepProbe>> {
        let triplet = self.sampler.sample(rng);
        let rows = TripletRows::new(&self.adjacency, &self.spec, self.dataset.n_users, &triplet, workspace);
        let mut finals = TripletFinals::from_rows(&state.raw, &rows);
        for v in finals.user.iter_mut().chain(&mut finals.positive).chain(&mut finals.negative) {
            *v *= state.scale;
        }
        let bundle = bpr_gradients(&finals, &rows);
        // Diagnostics only use the layer-0 direction, which the lazy scale preserves.
        let diag = gradient_diagnostics(&bundle, &state.raw, &finals, &rows).ok();
        let pos = rows.nodes[1];
        let norm_before = state.node_norm(pos);

        let decay = 1.0 - 2.0 * self.learning_rate * self.l2;
        let (new_scale, row_decay) = match self.regularization {
            Regularization::Dense => (state.scale * decay, 1.0),
            Regularization::Touched => (state.scale, decay),
        };
        let step = self.learning_rate / new_scale;
        touched.clear();
        for (y, g) in bundle.d_layer0.iter() {
            let row = state.raw.node_mut(y);
            for (e, gk) in row.iter_mut().zip(g) {
                *e = row_decay * *e - step * gk;
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("node {y} at step {}", state.steps_taken)));
            }
            touched.push(y);
        }
        state.scale = new_scale;
        state.steps_taken += 1;
        if state.scale < 1e-8 {
            state.renormalize();
        }
        let norm_after = state.node_norm(pos);
        Ok(diag.map(|d| {
            let s = 1.0 - d.sigma_delta;
            let cos = d.theta_ui.cos();
            StepProbe {
                triplet,
                g_parallel: d.g_parallel,
                kappa_sample: s * (d.m_ii + d.m_ui) * cos,
                beta_sample: s * d.m_ui / d.user_norm,
                user_norm: d.user_norm,
                norm_before,
                norm_after,
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub item: usize,
    /// Norm after steps `0, r, 2r, ...` where `r` is the record interval.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    n: u64,
    sum: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean != 0.0).then(|| var.sqrt() / mean.abs())
}

/// Minimum positive samples for an item to enter the per-item spread.
pub const MIN_ITEM_SAMPLES: u64 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEstimates {
    pub kappa_bar: f64,
    pub beta_hat: f64,
    /// Positive samples behind `kappa_bar` and `beta_hat`.
    pub estimate_samples: u64,
    /// Per-item means of κ, β and the final user norm over the item's samples.
    pub per_item_kappa: Vec<Option<f64>>,
    pub per_item_beta: Vec<Option<f64>>,
    pub per_item_user_norm: Vec<Option<f64>>,
    /// Coefficients of variation across items with enough samples.
    pub kappa_cv: Option<f64>,
    pub beta_cv: Option<f64>,
    pub user_norm_cv: Option<f64>,
    pub norm_trajectories: Vec<Trajectory>,
    pub record_every: usize,
    pub popularity: Vec<usize>,
    pub total: usize,
    /// Layer-0 item norms at the end of the run.
    pub final_norms: Vec<f64>,
    /// Mean and max of `|realized Δ‖e_i‖ - (-η g∥ - 2ηλ‖e_i‖)|` over probed steps.
    pub increment_gap_mean: f64,
    pub increment_gap_max: f64,
    pub final_state: SgdState,
}

impl DynamicsEstimates {
    pub fn predicted_norms(&self, l2: f64) -> Result<Vec<f64>> {
        self.popularity.iter().map(|&n| fixed_point_predict(self.kappa_bar, self.beta_hat, l2, n, self.total)).collect()
    }
}

fn default_tracked(popularity: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..popularity.len()).collect();
    order.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
    let mut picks: Vec<usize> =
        [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|q| order[((order.len() - 1) as f64 * q).round() as usize]).collect();
    picks.dedup();
    picks
}

/// Runs the simulation from a fresh initialization.
pub fn run_norm_dynamics(config: &NormLabConfig) -> Result<DynamicsEstimates> {
    config.validate()?;
    let dataset = config.dataset()?;
    let table = init_embeddings(dataset.n_users, dataset.n_items, config.dim, config.seed, config.init_scale)?;
    let lab = NormLab::new(&dataset, config)?;
    run_from(&lab, SgdState::new(table), config)
}

/// Runs `config.steps` steps of `lab` starting at `state`.
pub fn run_from(lab: &NormLab<'_>, mut state: SgdState, config: &NormLabConfig) -> Result<DynamicsEstimates> {
    let ds = lab.dataset;
    let n_users = ds.n_users;
    let estimate_after = config.estimate_after.unwrap_or(config.steps / 2);
    let warmup = config.warmup.unwrap_or(config.steps / 10);
    let tracked =
        if config.tracked_items.is_empty() { default_tracked(&ds.popularity) } else { config.tracked_items.clone() };
    if let Some(&bad) = tracked.iter().find(|&&i| i >= ds.n_items) {
        return Err(Error::OutOfRange { what: "items", index: bad, len: ds.n_items });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e6f_726d);
    let mut workspace = MRowWorkspace::new(n_users + ds.n_items);
    let mut touched = Vec::new();
    let mut trajectories: Vec<Trajectory> =
        tracked.iter().map(|&item| Trajectory { item, norms: vec![state.node_norm(n_users + item)] }).collect();
    let (mut kappa, mut beta) = (Moments::default(), Moments::default());
    let mut item_kappa = vec![Moments::default(); ds.n_items];
    let mut item_beta = vec![Moments::default(); ds.n_items];
    let mut item_user_norm = vec![Moments::default(); ds.n_items];
    let (mut gap_sum, mut gap_max, mut gap_n) = (0.0, 0.0f64, 0u64);
    let (eta, l2) = (lab.learning_rate, lab.l2);

    for t in 0..config.steps {
        let probe = lab.step(&mut state, &mut rng, &mut workspace, &mut touched)?;
        if let Some(p) = probe {
            let predicted = -eta * p.g_parallel - 2.0 * eta * l2 * p.norm_before;
            let gap = ((p.norm_after - p.norm_before) - predicted).abs();
            gap_sum += gap;
            gap_max = gap_max.max(gap);
            gap_n += 1;
            if t >= estimate_after {
                let i = p.triplet.positive;
                kappa.push(p.kappa_sample);
                beta.push(p.beta_sample);
                item_kappa[i].push(p.kappa_sample);
                item_beta[i].push(p.beta_sample);
                item_user_norm[i].push(p.user_norm);
            }
        }
        if t >= warmup && l2 > 0.0 {
            if let Some(k) = kappa.mean().filter(|k| *k > 0.0) {
                let limit = 10.0 * k / (2.0 * l2);
                if let Some(&x) = touched.iter().find(|&&x| state.node_norm(x) > limit) {
                    return Err(Error::Diverged(format!(
                        "node {x} reached norm {} > 10·C = {limit} at step {t}",
                        state.node_norm(x)
                    )));
                }
            }
        }
        if (t + 1) % config.record_every == 0 {
            for tr in &mut trajectories {
                tr.norms.push(state.node_norm(n_users + tr.item));
            }
        }
    }

    let means = |m: &[Moments]| -> Vec<Option<f64>> { m.iter().map(|x| x.mean()).collect() };
    let cv = |m: &[Moments]| {
        let v: Vec<f64> = m.iter().filter(|x| x.n >= MIN_ITEM_SAMPLES).filter_map(|x| x.mean()).collect();
        coefficient_of_variation(&v)
    };
    Ok(DynamicsEstimates {
        kappa_bar: kappa.mean().unwrap_or(0.0),
        beta_hat: beta.mean().unwrap_or(0.0),
        estimate_samples: kappa.n,
        per_item_kappa: means(&item_kappa),
        per_item_beta: means(&item_beta),
        per_item_user_norm: means(&item_user_norm),
        kappa_cv: cv(&item_kappa),
        beta_cv: cv(&item_beta),
        user_norm_cv: cv(&item_user_norm),
        norm_trajectories: trajectories,
        record_every: config.record_every,
        popularity: ds.popularity.clone(),
        total: ds.total_interactions,
        final_norms: state.item_norms(),
        increment_gap_mean: if gap_n > 0 { gap_sum / gap_n as f64 } else { 0.0 },
        increment_gap_max: gap_max,
        final_state: state,
    })
}

/// Outcome of the full set of norm-theorem checks.
#[derive(Debug, Clone, PartialEq)]
pub struct NormReport {
    pub estimates: DynamicsEstimates,
    pub fit: PopularityFit,
    pub dominance: f64,
    pub azuma: Option<AzumaOutcome>,
    pub min_pearson: f64,
    pub min_dominance: f64,
}

impl NormReport {
    pub fn fit_passes(&self) -> bool {
        self.fit.pearson_r >= self.min_pearson && self.dominance >= self.min_dominance
    }

    pub fn passes(&self) -> bool {
        self.fit_passes() && self.azuma.as_ref().is_none_or(|a| a.passes())
    }
}

/// Default thresholds for the correlation and dominance checks.
pub const MIN_PEARSON: f64 = 0.8;
pub const MIN_DOMINANCE: f64 = 0.9;
pub const DOMINANCE_MARGIN: f64 = 2.0;

/// Runs the dynamics, fits norms against popularity, and optionally runs
/// the bound experiment from the final state.
pub fn verify_norm(config: &NormLabConfig, azuma: Option<&AzumaConfig>) -> Result<NormReport> {
    let estimates = run_norm_dynamics(config)?;
    let fit = norm_popularity_fit(&estimates.final_norms, &estimates.popularity)?;
    let dominance = dominance_probability(&estimates.final_norms, &estimates.popularity, DOMINANCE_MARGIN)?;
    let azuma = match azuma {
        Some(a) => Some(azuma::run_trials(config, &estimates, a)?),
        None => None,
    };
    Ok(NormReport { estimates, fit, dominance, azuma, min_pearson: MIN_PEARSON, min_dominance: MIN_DOMINANCE })
}

pub const ITEM_CSV_HEADER: &str = "item,n_i,final_norm,mu_predicted";
pub const SUMMARY_CSV_HEADER: &str = "kappa_bar,beta_hat,pearson_r,slope,dominance,exceedance,bound";

pub fn write_item_csv(
    path: impl AsRef<Path>,
    estimates: &DynamicsEstimates,
    l2: f64,
    item_ids: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let predicted = estimates.predicted_norms(l2).unwrap_or_else(|_| vec![f64::NAN; estimates.popularity.len()]);
    let mut out = format!("{ITEM_CSV_HEADER}\n");
    for (i, ((n, norm), mu)) in estimates.popularity.iter().zip(&estimates.final_norms).zip(&predicted).enumerate() {
        out.push_str(&format!("{},{},{},{}\n", item_ids[i], n, norm, mu));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: impl AsRef<Path>, reports: &[NormReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for r in reports {
        let (exc, bound) = r.azuma.as_ref().map_or((f64::NAN, f64::NAN), |a| (a.exceedance_frequency, a.bound));
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.estimates.kappa_bar, r.estimates.beta_hat, r.fit.pearson_r, r.fit.slope, r.dominance, exc, bound
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
