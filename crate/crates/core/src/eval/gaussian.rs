//! Repeated point-set study on equicorrelated Gaussians.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coverage::left_quantile;
use super::PlotPoint;
use crate::envs::gen_gaussian;
use crate::error::{Error, Result};
use crate::multibox::{box_contains, fit_bonferroni, fit_sbox, BoxInterval, PointSet};
use crate::quantile::QuantileStrategy;
use crate::rng::{derive_seed, DOMAIN_REPLICATION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianStudyConfig {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub n_test: usize,
    pub replications: usize,
    pub rhos: Vec<f64>,
    pub deltas: Vec<f64>,
    pub seed: u64,
}

impl Default for GaussianStudyConfig {
    fn default() -> Self {
        Self {
            d: 10,
            n: 2000,
            m: 50,
            n_test: 5000,
            replications: 100,
            rhos: vec![0.0, 0.9],
            deltas: vec![0.2, 0.1, 0.05, 0.01],
            seed: 0,
        }
    }
}

impl GaussianStudyConfig {
    pub fn quick() -> Self {
        Self {
            replications: 10,
            n_test: 500,
            ..Self::default()
        }
    }
}

pub const BOX_METHODS: [&str; 3] = ["SBox", "SBoxCI", "Bonferroni"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub rho: f64,
    pub delta: f64,
    pub method: String,
    pub mean_coverage: f64,
    /// Left-continuous `delta`-quantile of coverage across replications.
    pub coverage_quantile: f64,
    pub mean_width: f64,
    pub coverages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianReport {
    pub config: GaussianStudyConfig,
    pub records: Vec<GaussianRecord>,
}

impl GaussianReport {
    pub fn find(&self, rho: f64, delta: f64, method: &str) -> Option<&GaussianRecord> {
        self.records
            .iter()
            .find(|r| r.rho == rho && r.delta == delta && r.method == method)
    }

    pub fn plot_points(&self) -> Vec<PlotPoint> {
        let mut out = Vec::new();
        for r in &self.records {
            let series = r.method.clone();
            out.push(PlotPoint::new(
                format!("gaussian_coverage_quantile_rho{}", r.rho),
                &series,
                r.delta,
                r.coverage_quantile,
            ));
            out.push(PlotPoint::new(
                format!("gaussian_mean_coverage_rho{}", r.rho),
                &series,
                r.delta,
                r.mean_coverage,
            ));
            out.push(PlotPoint::new(
                format!("gaussian_mean_width_rho{}", r.rho),
                &series,
                r.delta,
                r.mean_width,
            ));
        }
        out
    }
}

fn fit_method(method: &str, train: &PointSet, m: usize, delta: f64) -> Result<BoxInterval> {
    match method {
        "SBox" => fit_sbox(train, m, delta, QuantileStrategy::Strict),
        "SBoxCI" => fit_sbox(train, m, delta, QuantileStrategy::ucb_for(delta)?),
        "Bonferroni" => fit_bonferroni(train, m, delta),
        other => Err(Error::InvalidInput(format!("unknown box method `{other}`"))),
    }
}

/// `(coverage, width)` for every `(delta, method)` of one replication.
fn replicate(config: &GaussianStudyConfig, rho: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    let all = gen_gaussian(config.n + config.n_test, config.d, rho, seed)?;
    let rows: Vec<&[f64]> = all.rows().collect();
    let train = PointSet::from_rows(
        &rows[..config.n]
            .iter()
            .map(|r| r.to_vec())
            .collect::<Vec<_>>(),
    )?;
    let test = &rows[config.n..];
    let mut out = Vec::with_capacity(config.deltas.len() * BOX_METHODS.len());
    for &delta in &config.deltas {
        for method in BOX_METHODS {
            let fit = fit_method(method, &train, config.m, delta)?;
            let mut hits = 0usize;
            for x in test {
                hits += usize::from(box_contains(&fit, x)?);
            }
            out.push((hits as f64 / test.len() as f64, fit.mean_width()));
        }
    }
    Ok(out)
}

pub fn run_gaussian_study(config: &GaussianStudyConfig) -> Result<GaussianReport> {
    if config.replications == 0 || config.n_test == 0 {
        return Err(Error::InvalidInput(
            "replications and n_test must be positive".into(),
        ));
    }
    let base = derive_seed(config.seed, DOMAIN_REPLICATION);
    let mut records = Vec::new();
    for (ri, &rho) in config.rhos.iter().enumerate() {
        let per_rep: Vec<Vec<(f64, f64)>> = (0..config.replications)
            .into_par_iter()
            .map(|r| {
                replicate(
                    config,
                    rho,
                    derive_seed(base, ((ri as u64) << 32) | r as u64),
                )
            })
            .collect::<Result<_>>()?;
        for (di, &delta) in config.deltas.iter().enumerate() {
            for (mi, method) in BOX_METHODS.iter().enumerate() {
                let slot = di * BOX_METHODS.len() + mi;
                let coverages: Vec<f64> = per_rep.iter().map(|v| v[slot].0).collect();
                let reps = coverages.len() as f64;
                records.push(GaussianRecord {
                    rho,
                    delta,
                    method: method.to_string(),
                    mean_coverage: coverages.iter().sum::<f64>() / reps,
                    coverage_quantile: left_quantile(&coverages, delta)?,
                    mean_width: per_rep.iter().map(|v| v[slot].1).sum::<f64>() / reps,
                    coverages,
                });
            }
        }
    }
    Ok(GaussianReport {
        config: config.clone(),
        records,
    })
}
