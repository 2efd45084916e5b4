//! Diversified recommendation on top of a LightGCN backbone.
//!
//! The pipeline has three stages:
//!
//! 1. [`train`]: LightGCN embeddings trained with the BPR pairwise loss
//!    over a normalized user-item graph ([`spgraph`], [`embed`]).
//! 2. [`cigr`]: an item-item co-purchase graph scored with a
//!    popularity-deconfounded relation score, pruned by geometric
//!    truncation, and used to refine item embeddings.
//! 3. [`csce`]: two-stage candidate selection followed by a
//!    counterfactual exposure boost applied once, after training.
//!
//! [`metrics`] evaluates recall, category coverage and their F-beta
//! combination, and [`normlab`] is a simulation lab that measures how
//! item embedding norms track item popularity under plain SGD.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cigr;
pub mod corpus;
pub mod csce;
pub mod embed;
mod error;
pub mod metrics;
pub mod normlab;
pub mod spgraph;
pub mod train;

pub use error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-30.0, -2.5, 0.0, 0.7, 12.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
