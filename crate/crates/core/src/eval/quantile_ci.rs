//! Strict versus upper-confidence quantile estimation on heavy-tailed data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PlotPoint;
use crate::envs::{gen_t1, true_t1_quantile};
use crate::error::{Error, Result};
use crate::quantile::{conformal_index, inflated_level, ucb_rank};
use crate::rng::{derive_seed, DOMAIN_REPLICATION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantileCiConfig {
    pub deltas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for QuantileCiConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.2, 0.1, 0.05, 0.01],
            sizes: vec![200, 400, 800, 1600, 3200, 6400],
            trials: 1000,
            seed: 0,
        }
    }
}

impl QuantileCiConfig {
    pub fn quick() -> Self {
        Self {
            trials: 100,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCiRecord {
    pub delta: f64,
    pub n: usize,
    pub trials: usize,
    pub true_quantile: f64,
    pub strict_rank: usize,
    pub ucb_rank: usize,
    /// False when no order statistic reaches confidence `1 - delta`, in
    /// which case the maximum is used.
    pub ucb_guaranteed: bool,
    /// Fraction of trials whose estimate is at least the true quantile.
    pub strict_success: f64,
    pub ucb_success: f64,
    pub strict_median: f64,
    pub ucb_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCiReport {
    pub config: QuantileCiConfig,
    pub records: Vec<QuantileCiRecord>,
}

impl QuantileCiReport {
    pub fn plot_points(&self) -> Vec<PlotPoint> {
        let mut out = Vec::new();
        for r in &self.records {
            let figure = format!("t1_success_delta{}", r.delta);
            out.push(PlotPoint::new(
                figure.clone(),
                "strict",
                r.n as f64,
                r.strict_success,
            ));
            out.push(PlotPoint::new(figure, "ucb", r.n as f64, r.ucb_success));
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run_quantile_ci_study(config: &QuantileCiConfig) -> Result<QuantileCiReport> {
    if config.trials == 0 {
        return Err(Error::InvalidInput("trials must be positive".into()));
    }
    let base = derive_seed(config.seed, DOMAIN_REPLICATION);
    let mut records = Vec::new();
    for (di, &delta) in config.deltas.iter().enumerate() {
        for (ni, &n) in config.sizes.iter().enumerate() {
            let strict_rank = conformal_index(n, delta)?;
            let (rank, guaranteed) = match ucb_rank(n, inflated_level(n, delta), 1.0 - delta) {
                Some(r) => (r, true),
                None => (n, false),
            };
            let truth = true_t1_quantile(1.0 - delta);
            let cell = derive_seed(base, ((di as u64) << 32) | ni as u64);
            let estimates: Vec<(f64, f64)> = (0..config.trials)
                .into_par_iter()
                .map(|trial| {
                    let scores = gen_t1(n, derive_seed(cell, trial as u64));
                    let mut sorted = scores.as_slice().to_vec();
                    sorted.sort_by(f64::total_cmp);
                    (sorted[strict_rank - 1], sorted[rank - 1])
                })
                .collect();
            let trials = estimates.len() as f64;
            records.push(QuantileCiRecord {
                delta,
                n,
                trials: config.trials,
                true_quantile: truth,
                strict_rank,
                ucb_rank: rank,
                ucb_guaranteed: guaranteed,
                strict_success: estimates.iter().filter(|e| e.0 >= truth).count() as f64 / trials,
                ucb_success: estimates.iter().filter(|e| e.1 >= truth).count() as f64 / trials,
                strict_median: median(estimates.iter().map(|e| e.0).collect()),
                ucb_median: median(estimates.iter().map(|e| e.1).collect()),
            });
        }
    }
    Ok(QuantileCiReport {
        config: config.clone(),
        records,
    })
}
