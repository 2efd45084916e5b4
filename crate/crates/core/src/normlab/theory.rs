//! Closed-form predictions and summary statistics for norm dynamics.

use crate::{Error, Result};

/// Steady-state norm `μ_i = κ̄ / (2λ + β̂) · n_i / |D|`.
pub fn fixed_point_predict(kappa_bar: f64, beta_hat: f64, l2: f64, n_i: usize, total: usize) -> Result<f64> {
    let denom = 2.0 * l2 + beta_hat;
    if !(denom > 0.0) {
        return Err(Error::Precondition(format!("2λ + β̂ must be positive, got {denom}")));
    }
    if total == 0 {
        return Err(Error::Precondition("|D| must be positive".into()));
    }
    Ok(kappa_bar / denom * n_i as f64 / total as f64)
}

/// Root of [`fixed_point_residual`] in `μ`: `κ̄·s / (2λ + β̂·s)` with
/// `s = n_i / |D|`. Coincides with [`fixed_point_predict`] only when
/// `β̂ = 0` or `s = 1`.
pub fn drift_root(kappa_bar: f64, beta_hat: f64, l2: f64, n_i: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Precondition("|D| must be positive".into()));
    }
    let share = n_i as f64 / total as f64;
    let denom = 2.0 * l2 + beta_hat * share;
    if !(denom > 0.0) {
        return Err(Error::Precondition(format!("2λ + β̂·n_i/|D| must be positive, got {denom}")));
    }
    Ok(kappa_bar * share / denom)
}

/// Expected one-step norm drift `η[(κ̄ - β̂μ)·n_i/|D| - 2λμ]`.
pub fn fixed_point_residual(
    mu: f64,
    kappa_bar: f64,
    beta_hat: f64,
    l2: f64,
    n_i: usize,
    total: usize,
    eta: f64,
) -> f64 {
    let share = n_i as f64 / total as f64;
    eta * ((kappa_bar - beta_hat * mu) * share - 2.0 * l2 * mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopularityFit {
    pub pearson_r: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Items used in the fit (those with `n_i > 0`).
    pub n_items: usize,
    /// Norms had zero variance; `pearson_r` is reported as 0.
    pub degenerate: bool,
}

/// Least-squares line of norm against popularity, plus Pearson correlation.
/// Items with `n_i = 0` are excluded.
pub fn norm_popularity_fit(final_norms: &[f64], popularity: &[usize]) -> Result<PopularityFit> {
    if final_norms.len() != popularity.len() {
        return Err(Error::Shape(format!("{} norms for {} items", final_norms.len(), popularity.len())));
    }
    let pts: Vec<(f64, f64)> =
        popularity.iter().zip(final_norms).filter(|(n, _)| **n > 0).map(|(&n, &y)| (n as f64, y)).collect();
    let mut distinct: Vec<usize> = popularity.iter().copied().filter(|&n| n > 0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if pts.len() < 10 || distinct.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 10 items and 2 distinct popularities, got {} and {}",
            pts.len(),
            distinct.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let degenerate = syy == 0.0;
    Ok(PopularityFit {
        pearson_r: if degenerate { 0.0 } else { sxy / (sxx * syy).sqrt() },
        slope,
        intercept: my - slope * mx,
        n_items: pts.len(),
        degenerate,
    })
}

/// Fraction of pairs with `n_i ≥ margin·n_j` (and `n_j ≥ 1`) where
/// `‖e_i‖ > ‖e_j‖`.
pub fn dominance_probability(final_norms: &[f64], popularity: &[usize], margin: f64) -> Result<f64> {
    if !(margin >= 1.0) {
        return Err(Error::InvalidArgument(format!("margin must be >= 1, got {margin}")));
    }
    if final_norms.len() != popularity.len() {
        return Err(Error::Shape(format!("{} norms for {} items", final_norms.len(), popularity.len())));
    }
    let (mut pairs, mut wins) = (0u64, 0u64);
    for (i, &ni) in popularity.iter().enumerate() {
        for (j, &nj) in popularity.iter().enumerate() {
            if i != j && nj >= 1 && ni as f64 >= margin * nj as f64 {
                pairs += 1;
                wins += u64::from(final_norms[i] > final_norms[j]);
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Degenerate("no item pairs satisfy the popularity margin".into()));
    }
    Ok(wins as f64 / pairs as f64)
}

/// Parameters of the high-probability norm bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzumaParams {
    pub kappa_bar: f64,
    pub l2: f64,
    pub eta: f64,
    pub steps: u64,
    pub epsilon: f64,
}

impl AzumaParams {
    /// `C = κ̄ / (2λ)`.
    pub fn upper_norm(&self) -> f64 {
        self.kappa_bar / (2.0 * self.l2)
    }

    /// `c = 2η(κ̄ + λC)`.
    pub fn step_bound(&self) -> f64 {
        2.0 * self.eta * (self.kappa_bar + self.l2 * self.upper_norm())
    }

    pub fn check(&self) -> Result<()> {
        if !(self.l2 > 0.0) {
            return Err(Error::Precondition("the bound needs λ > 0".into()));
        }
        if self.eta > 1.0 / (4.0 * self.l2) {
            return Err(Error::Precondition(format!(
                "η = {} exceeds 1/(4λ) = {}; the bound is not claimed",
                self.eta,
                1.0 / (4.0 * self.l2)
            )));
        }
        if !(self.epsilon > 0.0) || self.steps == 0 {
            return Err(Error::Precondition("ε must be positive and T at least 1".into()));
        }
        if !(self.kappa_bar > 0.0) {
            return Err(Error::Precondition(format!("κ̄ must be positive, got {}", self.kappa_bar)));
        }
        Ok(())
    }

    /// Slack giving a bound of exactly `target`.
    pub fn epsilon_for(kappa_bar: f64, l2: f64, eta: f64, steps: u64, target: f64) -> f64 {
        let p = AzumaParams { kappa_bar, l2, eta, steps, epsilon: 1.0 };
        p.step_bound() * (4.0 * steps as f64 * (1.0 / target).ln()).sqrt()
    }
}

/// `exp(-ε² / (4Tc²))`.
pub fn azuma_bound(params: &AzumaParams) -> Result<f64> {
    params.check()?;
    let c = params.step_bound();
    Ok((-(params.epsilon * params.epsilon) / (4.0 * params.steps as f64 * c * c)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_examples() {
        assert_eq!(fixed_point_predict(1.0, 0.5, 0.25, 0, 10).unwrap(), 0.0);
        assert!((fixed_point_predict(1.0, 0.5, 0.25, 1, 10).unwrap() - 0.1).abs() < 1e-15);
        let a = fixed_point_predict(0.7, 0.1, 0.01, 3, 100).unwrap();
        let b = fixed_point_predict(0.7, 0.1, 0.01, 6, 100).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert!(fixed_point_predict(1.0, -0.5, 0.25, 1, 10).is_err());
    }

    #[test]
    fn residual_signs() {
        let (k, b, l, n, t, eta) = (0.8, 0.3, 0.05, 7, 50, 0.01);
        let mu = drift_root(k, b, l, n, t).unwrap();
        assert!(fixed_point_residual(mu, k, b, l, n, t, eta).abs() < 1e-12);
        let at_zero = fixed_point_residual(0.0, k, b, l, n, t, eta);
        assert!((at_zero - eta * k * n as f64 / t as f64).abs() < 1e-15);
        assert!(fixed_point_residual(2.0 * mu, k, b, l, n, t, eta) < 0.0);
    }

    #[test]
    fn predicted_norm_misses_drift_root_by_closed_form_gap() {
        // At μ = κ̄s/(2λ+β̂) the drift is ηκ̄sβ̂(1-s)/(2λ+β̂).
        let (k, b, l, n, t, eta) = (0.8, 0.3, 0.05, 7, 50, 0.01);
        let s = n as f64 / t as f64;
        let mu = fixed_point_predict(k, b, l, n, t).unwrap();
        let gap = eta * k * s * b * (1.0 - s) / (2.0 * l + b);
        assert!((fixed_point_residual(mu, k, b, l, n, t, eta) - gap).abs() < 1e-15);
        assert!(gap > 1e-4);
        let same = fixed_point_predict(k, 0.0, l, n, t).unwrap();
        assert!(fixed_point_residual(same, k, 0.0, l, n, t, eta).abs() < 1e-15);
    }

    #[test]
    fn fit_examples() {
        let pop: Vec<usize> = (1..=20).collect();
        let norms: Vec<f64> = pop.iter().map(|&n| 0.5 * n as f64).collect();
        let fit = norm_popularity_fit(&norms, &pop).unwrap();
        assert!((fit.pearson_r - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!((fit.slope - 0.5).abs() < 1e-12);
        let flat = norm_popularity_fit(&[2.0; 20], &pop).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.pearson_r, 0.0);
        assert!(norm_popularity_fit(&[1.0; 20], &[3; 20]).is_err());
    }

    #[test]
    fn fit_excludes_unpopular_items() {
        let mut pop: Vec<usize> = (1..=12).collect();
        let mut norms: Vec<f64> = pop.iter().map(|&n| n as f64).collect();
        pop.push(0);
        norms.push(100.0);
        let fit = norm_popularity_fit(&norms, &pop).unwrap();
        assert_eq!(fit.n_items, 12);
        assert!((fit.pearson_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dominance_examples() {
        let pop = [1, 2, 4, 8];
        assert_eq!(dominance_probability(&[1.0, 2.0, 3.0, 4.0], &pop, 2.0).unwrap(), 1.0);
        assert_eq!(dominance_probability(&[4.0, 3.0, 2.0, 1.0], &pop, 2.0).unwrap(), 0.0);
        assert!(dominance_probability(&[1.0, 1.0], &[1, 1], 2.0).is_err());
        assert!(dominance_probability(&[1.0, 1.0], &[1, 4], 0.5).is_err());
    }

    #[test]
    fn azuma_examples() {
        let p = AzumaParams { kappa_bar: 1.0, l2: 0.5, eta: 0.01, steps: 100, epsilon: 0.6 };
        assert!((p.upper_norm() - 1.0).abs() < 1e-15);
        assert!((p.step_bound() - 0.03).abs() < 1e-15);
        assert!((azuma_bound(&p).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        let tiny = AzumaParams { epsilon: 1e-9, ..p };
        assert!(azuma_bound(&tiny).unwrap() > 1.0 - 1e-9);
        let longer = AzumaParams { steps: 200, ..p };
        assert!(azuma_bound(&longer).unwrap() > azuma_bound(&p).unwrap());
        let too_fast = AzumaParams { eta: 0.6, ..p };
        assert!(azuma_bound(&too_fast).is_err());
    }

    #[test]
    fn epsilon_for_hits_target() {
        let eps = AzumaParams::epsilon_for(0.3, 1e-3, 5e-3, 1000, 0.2);
        let p = AzumaParams { kappa_bar: 0.3, l2: 1e-3, eta: 5e-3, steps: 1000, epsilon: eps };
        assert!((azuma_bound(&p).unwrap() - 0.2).abs() < 1e-12);
    }
}
