//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then a config file, then
//! command-line flags. The resolved configuration is written back in the
//! same format as the run manifest, so a manifest can be fed to `--config`
//! to reproduce a run.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cadence_core::cigr::CigrConfig;
use cadence_core::corpus::SyntheticConfig;
use cadence_core::csce::{CsceConfig, NeighborKey};
use cadence_core::metrics::CoverageMode;
use cadence_core::normlab::{AzumaConfig, NormLabConfig, Regularization};
use cadence_core::spgraph::{Normalization, PropagationSpec};
use cadence_core::train::{Optimizer, TrainConfig};

use crate::error::CliError;

/// Training defaults that differ from the norm-dynamics lab.
const TRAIN_LR: f64 = 1e-3;
const TRAIN_L2: f64 = 1e-4;
const TRAIN_DIM: usize = 32;
const TRAIN_LAYERS: usize = 3;
const NORM_LAYERS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    KGlobal,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "k_global" | "kg" => Ok(SweepParam::KGlobal),
            other => Err(format!("unknown sweep parameter {other:?}, expected alpha or k_global")),
        }
    }
}

impl Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Alpha => "alpha",
            SweepParam::KGlobal => "k_global",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub min_interactions: usize,
    pub holdout_ratio: f64,
    pub synthetic: bool,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_zipf: f64,
    pub synthetic_mean: f64,
    pub synthetic_categories: usize,
    pub synthetic_taste_share: f64,
    pub synthetic_seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub recommendations: Option<PathBuf>,

    /// Unset means the command's own default (training or norm lab).
    pub lr: Option<f64>,
    pub l2: Option<f64>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub init_scale: f64,
    pub normalization: Normalization,
    pub eval_k: usize,
    pub seed: u64,
    pub threads: usize,

    pub cigr: bool,
    pub decay_ratio: f64,
    pub edge_budget: usize,
    pub lii: usize,

    pub kg: usize,
    pub kc: usize,
    pub alpha: f64,
    pub list_length: usize,
    pub neighbor_key: NeighborKey,

    pub beta_f: f64,
    pub coverage_mode: CoverageMode,

    pub steps: usize,
    pub regularization: Regularization,
    pub trials: usize,
    pub horizon: u64,
    pub target_bound: f64,
    pub azuma_seed: u64,
    /// Extra seeds for the stability run; empty runs only `seed`.
    pub seeds: Vec<u64>,
    pub max_pearson_spread: f64,

    pub sweep_param: SweepParam,
    pub sweep_values: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let train = TrainConfig::default();
        let cigr = CigrConfig::default();
        let csce = CsceConfig::default();
        let norm = NormLabConfig::default();
        let azuma = AzumaConfig::default();
        RunConfig {
            interactions: None,
            categories: None,
            min_interactions: 1,
            holdout_ratio: 0.2,
            synthetic: false,
            synthetic_users: syn.n_users,
            synthetic_items: syn.n_items,
            synthetic_zipf: syn.zipf_exponent,
            synthetic_mean: syn.mean_interactions,
            synthetic_categories: syn.n_categories,
            synthetic_taste_share: syn.taste_share,
            synthetic_seed: syn.seed,
            out: PathBuf::from("out"),
            checkpoint: None,
            recommendations: None,
            lr: None,
            l2: None,
            dim: None,
            layers: None,
            batch_size: train.batch_size,
            epochs: train.max_epochs,
            patience: train.patience,
            optimizer: train.optimizer,
            adam_beta1: train.adam_betas.0,
            adam_beta2: train.adam_betas.1,
            init_scale: 0.1,
            normalization: Normalization::default(),
            eval_k: train.eval_k,
            seed: train.seed,
            threads: 0,
            cigr: true,
            decay_ratio: cigr.decay_ratio,
            edge_budget: cigr.edge_budget,
            lii: cigr.l_ii,
            kg: csce.k_global,
            kc: csce.k_category,
            alpha: csce.alpha,
            list_length: csce.list_length,
            neighbor_key: csce.neighbor_key,
            beta_f: 4.0,
            coverage_mode: CoverageMode::default(),
            steps: norm.steps,
            regularization: norm.regularization,
            trials: azuma.trials,
            horizon: azuma.horizon,
            target_bound: azuma.target_bound,
            azuma_seed: azuma.seed,
            seeds: Vec::new(),
            max_pearson_spread: 0.2,
            sweep_param: SweepParam::Alpha,
            sweep_values: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| CliError::Usage(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_opt<T: Display>(value: &Option<T>) -> String {
    value.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

fn show_path(value: &Option<PathBuf>) -> String {
    value.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key. Empty values reset optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let opt_f64 = |v: &str| if v.is_empty() { Ok(None) } else { parse(&key, v).map(Some) };
        let opt_usize = |v: &str| if v.is_empty() { Ok(None) } else { parse(&key, v).map(Some) };
        match key.as_str() {
            "interactions" => self.interactions = optional_path(value),
            "categories" => self.categories = optional_path(value),
            "min_interactions" => self.min_interactions = parse(&key, value)?,
            "holdout_ratio" => self.holdout_ratio = parse(&key, value)?,
            "synthetic" => self.synthetic = parse(&key, value)?,
            "synthetic_users" => self.synthetic_users = parse(&key, value)?,
            "synthetic_items" => self.synthetic_items = parse(&key, value)?,
            "synthetic_zipf" => self.synthetic_zipf = parse(&key, value)?,
            "synthetic_mean" => self.synthetic_mean = parse(&key, value)?,
            "synthetic_categories" => self.synthetic_categories = parse(&key, value)?,
            "synthetic_taste_share" => self.synthetic_taste_share = parse(&key, value)?,
            "synthetic_seed" => self.synthetic_seed = parse(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = optional_path(value),
            "recommendations" => self.recommendations = optional_path(value),
            "lr" => self.lr = opt_f64(value)?,
            "l2" => self.l2 = opt_f64(value)?,
            "dim" => self.dim = opt_usize(value)?,
            "layers" => self.layers = opt_usize(value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "patience" => self.patience = parse(&key, value)?,
            "optimizer" => self.optimizer = parse(&key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(&key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(&key, value)?,
            "init_scale" => self.init_scale = parse(&key, value)?,
            "normalization" => self.normalization = parse(&key, value)?,
            "eval_k" => self.eval_k = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "threads" => self.threads = parse(&key, value)?,
            "cigr" => self.cigr = parse(&key, value)?,
            "decay_ratio" => self.decay_ratio = parse(&key, value)?,
            "edge_budget" => self.edge_budget = parse(&key, value)?,
            "lii" => self.lii = parse(&key, value)?,
            "kg" | "k_global" => self.kg = parse(&key, value)?,
            "kc" | "k_category" => self.kc = parse(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "list_length" => self.list_length = parse(&key, value)?,
            "neighbor_key" => self.neighbor_key = parse(&key, value)?,
            "beta_f" => self.beta_f = parse(&key, value)?,
            "coverage_mode" => self.coverage_mode = parse(&key, value)?,
            "steps" => self.steps = parse(&key, value)?,
            "regularization" => self.regularization = parse(&key, value)?,
            "trials" => self.trials = parse(&key, value)?,
            "horizon" => self.horizon = parse(&key, value)?,
            "target_bound" => self.target_bound = parse(&key, value)?,
            "azuma_seed" => self.azuma_seed = parse(&key, value)?,
            "seeds" => self.seeds = parse_list(&key, value)?,
            "max_pearson_spread" => self.max_pearson_spread = parse(&key, value)?,
            "sweep_param" => self.sweep_param = parse(&key, value)?,
            "sweep_values" => self.sweep_values = parse_list(&key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document. `#` starts a comment line.
    pub fn apply_str(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", origin.display(), n + 1)))?;
            self.set(key, value)
                .map_err(|e| CliError::Usage(format!("{}:{}: {}", origin.display(), n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_str(&text, path)
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("interactions", show_path(&self.interactions)),
            ("categories", show_path(&self.categories)),
            ("min_interactions", self.min_interactions.to_string()),
            ("holdout_ratio", self.holdout_ratio.to_string()),
            ("synthetic", self.synthetic.to_string()),
            ("synthetic_users", self.synthetic_users.to_string()),
            ("synthetic_items", self.synthetic_items.to_string()),
            ("synthetic_zipf", self.synthetic_zipf.to_string()),
            ("synthetic_mean", self.synthetic_mean.to_string()),
            ("synthetic_categories", self.synthetic_categories.to_string()),
            ("synthetic_taste_share", self.synthetic_taste_share.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("out", self.out.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("recommendations", show_path(&self.recommendations)),
            ("lr", show_opt(&self.lr)),
            ("l2", show_opt(&self.l2)),
            ("dim", show_opt(&self.dim)),
            ("layers", show_opt(&self.layers)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("init_scale", self.init_scale.to_string()),
            ("normalization", self.normalization.to_string()),
            ("eval_k", self.eval_k.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("cigr", self.cigr.to_string()),
            ("decay_ratio", self.decay_ratio.to_string()),
            ("edge_budget", self.edge_budget.to_string()),
            ("lii", self.lii.to_string()),
            ("kg", self.kg.to_string()),
            ("kc", self.kc.to_string()),
            ("alpha", self.alpha.to_string()),
            ("list_length", self.list_length.to_string()),
            ("neighbor_key", self.neighbor_key.to_string()),
            ("beta_f", self.beta_f.to_string()),
            ("coverage_mode", self.coverage_mode.to_string()),
            ("steps", self.steps.to_string()),
            ("regularization", self.regularization.to_string()),
            ("trials", self.trials.to_string()),
            ("horizon", self.horizon.to_string()),
            ("target_bound", self.target_bound.to_string()),
            ("azuma_seed", self.azuma_seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("max_pearson_spread", self.max_pearson_spread.to_string()),
            ("sweep_param", self.sweep_param.to_string()),
            ("sweep_values", join(&self.sweep_values)),
        ]
    }

    pub fn to_manifest(&self, command: &str) -> String {
        let mut out = format!("# cadence {} {command}\n# checkpoint format CADEMB1\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.cademb"))
    }

    pub fn recommendations_path(&self) -> PathBuf {
        self.recommendations.clone().unwrap_or_else(|| self.out.join("recommendations.csv"))
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_users: self.synthetic_users,
            n_items: self.synthetic_items,
            zipf_exponent: self.synthetic_zipf,
            mean_interactions: self.synthetic_mean,
            n_categories: self.synthetic_categories,
            taste_share: self.synthetic_taste_share,
            seed: self.synthetic_seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr.unwrap_or(TRAIN_LR),
            l2: self.l2.unwrap_or(TRAIN_L2),
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            optimizer: self.optimizer,
            adam_betas: (self.adam_beta1, self.adam_beta2),
            seed: self.seed,
            eval_k: self.eval_k,
        }
    }

    pub fn train_dim(&self) -> usize {
        self.dim.unwrap_or(TRAIN_DIM)
    }

    pub fn propagation_spec(&self) -> PropagationSpec {
        PropagationSpec::uniform(self.layers.unwrap_or(TRAIN_LAYERS), self.normalization)
    }

    pub fn cigr_config(&self) -> CigrConfig {
        CigrConfig { decay_ratio: self.decay_ratio, edge_budget: self.edge_budget, l_ii: self.lii }
    }

    pub fn csce_config(&self) -> CsceConfig {
        CsceConfig {
            k_global: self.kg,
            k_category: self.kc,
            alpha: self.alpha,
            list_length: self.list_length,
            neighbor_key: self.neighbor_key,
        }
    }

    pub fn norm_config(&self, seed: u64) -> NormLabConfig {
        let base = NormLabConfig::default();
        let layers = self.layers.unwrap_or(NORM_LAYERS);
        NormLabConfig {
            corpus: self.synthetic_config(),
            dim: self.dim.unwrap_or(base.dim),
            init_scale: self.init_scale,
            layer_weights: vec![1.0 / (layers + 1) as f64; layers + 1],
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            l2: self.l2.unwrap_or(base.l2),
            regularization: self.regularization,
            steps: self.steps,
            seed,
            ..base
        }
    }

    pub fn azuma_config(&self) -> AzumaConfig {
        AzumaConfig {
            trials: self.trials,
            horizon: self.horizon,
            target_bound: self.target_bound,
            seed: self.azuma_seed,
            ..AzumaConfig::default()
        }
    }

    /// Seeds for the norm lab: `seed` alone unless a seed list is given.
    pub fn norm_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}
