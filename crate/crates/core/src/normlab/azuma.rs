//! Monte Carlo check of the high-probability norm bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::theory::{azuma_bound, AzumaParams};
use super::{run_norm_dynamics, DynamicsEstimates, NormLab, NormLabConfig};
use crate::embed::MRowWorkspace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AzumaConfig {
    pub trials: usize,
    /// Steps `T` per trajectory.
    pub horizon: u64,
    /// Bound value used to pick `ε` when `epsilon` is unset.
    pub target_bound: f64,
    pub epsilon: Option<f64>,
    /// Tracked item; `None` picks the most popular one.
    pub tracked_item: Option<usize>,
    pub seed: u64,
}

impl Default for AzumaConfig {
    fn default() -> Self {
        AzumaConfig { trials: 200, horizon: 2000, target_bound: 0.2, epsilon: None, tracked_item: None, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AzumaOutcome {
    pub trials: usize,
    pub exceedances: usize,
    pub exceedance_frequency: f64,
    pub bound: f64,
    pub params: AzumaParams,
    pub tracked_item: usize,
    /// Steps (over all trials) where `|Z_{t+1} - Z_t| > c`.
    pub bounded_difference_violations: u64,
    pub violating_trials: usize,
    /// Largest observed `|Z_{t+1} - Z_t| / c`.
    pub max_step_ratio: f64,
}

impl AzumaOutcome {
    /// The bounded-difference hypothesis held on every step.
    pub fn hypothesis_holds(&self) -> bool {
        self.bounded_difference_violations == 0
    }

    pub fn passes(&self) -> bool {
        self.hypothesis_holds() && self.exceedance_frequency <= self.bound
    }
}

struct TrialResult {
    exceeded: bool,
    violations: u64,
    max_ratio: f64,
}

/// Runs a pilot to equilibrium, then `azuma.trials` independent
/// trajectories of the tracked item.
pub fn azuma_empirical(config: &NormLabConfig, azuma: &AzumaConfig) -> Result<AzumaOutcome> {
    if azuma.trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let pilot = run_norm_dynamics(config)?;
    run_trials(config, &pilot, azuma)
}

/// Trajectories start from the pilot's final state with the tracked item's
/// layer-0 norm set to `C`, so `Z_0 = 0`. Each trial has its own RNG stream.
pub fn run_trials(config: &NormLabConfig, pilot: &DynamicsEstimates, azuma: &AzumaConfig) -> Result<AzumaOutcome> {
    if azuma.trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let epsilon = azuma.epsilon.unwrap_or_else(|| {
        AzumaParams::epsilon_for(pilot.kappa_bar, config.l2, config.learning_rate, azuma.horizon, azuma.target_bound)
    });
    let params = AzumaParams {
        kappa_bar: pilot.kappa_bar,
        l2: config.l2,
        eta: config.learning_rate,
        steps: azuma.horizon,
        epsilon,
    };
    let bound = azuma_bound(&params)?;
    let (upper, c) = (params.upper_norm(), params.step_bound());

    let dataset = config.dataset()?;
    let item = match azuma.tracked_item {
        Some(i) if i >= dataset.n_items => {
            return Err(Error::OutOfRange { what: "items", index: i, len: dataset.n_items })
        }
        Some(i) => i,
        None => (0..dataset.n_items)
            .max_by(|&a, &b| dataset.popularity[a].cmp(&dataset.popularity[b]).then(b.cmp(&a)))
            .unwrap_or(0),
    };
    let node = dataset.n_users + item;
    let lab = NormLab::new(&dataset, config)?;

    let results = (0..azuma.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialResult> {
            let mut state = pilot.final_state.clone();
            state.set_norm(node, upper)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(azuma.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64));
            let mut workspace = MRowWorkspace::new(dataset.n_users + dataset.n_items);
            let mut touched = Vec::new();
            let mut z = state.node_norm(node) - upper;
            let mut out = TrialResult { exceeded: false, violations: 0, max_ratio: 0.0 };
            for _ in 0..azuma.horizon {
                lab.step(&mut state, &mut rng, &mut workspace, &mut touched)?;
                let next = state.node_norm(node) - upper;
                let ratio = (next - z).abs() / c;
                out.max_ratio = out.max_ratio.max(ratio);
                if ratio > 1.0 + 1e-9 {
                    out.violations += 1;
                }
                out.exceeded |= next > epsilon;
                z = next;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let exceedances = results.iter().filter(|r| r.exceeded).count();
    Ok(AzumaOutcome {
        trials: azuma.trials,
        exceedances,
        exceedance_frequency: exceedances as f64 / azuma.trials as f64,
        bound,
        params,
        tracked_item: item,
        bounded_difference_violations: results.iter().map(|r| r.violations).sum(),
        violating_trials: results.iter().filter(|r| r.violations > 0).count(),
        max_step_ratio: results.iter().map(|r| r.max_ratio).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SyntheticConfig;

    fn small() -> NormLabConfig {
        NormLabConfig {
            corpus: SyntheticConfig {
                n_users: 200,
                n_items: 60,
                mean_interactions: 10.0,
                ..SyntheticConfig::default()
            },
            dim: 8,
            steps: 5000,
            ..NormLabConfig::default()
        }
    }

    #[test]
    fn zero_trials_is_an_error() {
        let az = AzumaConfig { trials: 0, ..AzumaConfig::default() };
        assert!(azuma_empirical(&small(), &az).is_err());
    }

    #[test]
    fn huge_slack_never_exceeds() {
        let az = AzumaConfig { trials: 8, horizon: 200, epsilon: Some(1e9), ..AzumaConfig::default() };
        let out = azuma_empirical(&small(), &az).unwrap();
        assert_eq!(out.exceedances, 0);
        assert_eq!(out.trials, 8);
    }

    #[test]
    fn refuses_learning_rate_above_limit() {
        let cfg = NormLabConfig { l2: 0.4, learning_rate: 1.0, steps: 10, ..small() };
        let az = AzumaConfig { trials: 2, horizon: 10, epsilon: Some(1.0), ..AzumaConfig::default() };
        assert!(matches!(azuma_empirical(&cfg, &az), Err(Error::Precondition(_)) | Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn trials_are_deterministic() {
        let az = AzumaConfig { trials: 4, horizon: 100, ..AzumaConfig::default() };
        let a = azuma_empirical(&small(), &az).unwrap();
        let b = azuma_empirical(&small(), &az).unwrap();
        assert_eq!(a, b);
    }
}
