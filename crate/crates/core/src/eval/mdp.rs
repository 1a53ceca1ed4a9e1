//! Trajectory-band study on a simulated MDP.
//!
//! Trajectories are shuffled once and split into a training pool, a
//! calibration pool and a test set. For each size `s` the first `s` rows of
//! each pool are used, the per-timestep forests are fitted once, and every
//! method and `delta` is evaluated on the same forests and the same test
//! trajectories.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::coverage::{coverage_ci_lower, failure_table, FailureTable};
use super::PlotPoint;
use crate::envs::{sample_trajectories, EnvConfig, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::forest::{FeatureVector, ForestParams};
use crate::quantile::QuantileStrategy;
use crate::rng::{derive_seed, stream, DOMAIN_SHUFFLE, DOMAIN_TREE};
use crate::trajband::{
    calibrate_cte, calibrate_sqbox, exceedance, stream_track_quantiles, BehaviorMatrix,
};

pub const MDP_METHODS: [&str; 5] = ["QR", "SQBox", "SQBoxCI", "CTE", "CTECI"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpStudyConfig {
    pub env: EnvConfig,
    pub n_trajectories: usize,
    pub n_test: usize,
    pub sizes: Vec<usize>,
    pub deltas: Vec<f64>,
    /// Calibration trajectories used for the per-timestep scales.
    pub m: usize,
    pub delta_prime: f64,
    pub forest: ForestParams,
    /// Confidence of the one-sided lower bound on test coverage.
    pub confidence: f64,
    pub failure_size: usize,
    pub failure_delta: f64,
    pub examples: usize,
    pub seed: u64,
}

impl MdpStudyConfig {
    pub fn new(env: EnvConfig) -> Self {
        Self {
            env,
            n_trajectories: 9000,
            n_test: 5000,
            sizes: vec![250, 500, 1000, 2000],
            deltas: vec![0.2, 0.1, 0.05, 0.01],
            m: 100,
            delta_prime: 0.2,
            forest: ForestParams::default(),
            confidence: 0.99,
            failure_size: 2000,
            failure_delta: 0.1,
            examples: 3,
            seed: 0,
        }
    }

    pub fn quick(env: EnvConfig) -> Self {
        Self {
            n_trajectories: 3000,
            n_test: 1000,
            sizes: vec![250, 500, 1000],
            forest: ForestParams {
                tree_count: 100,
                ..ForestParams::default()
            },
            failure_size: 1000,
            ..Self::new(env)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.forest.validate()?;
        let largest = self.sizes.iter().copied().max().unwrap_or(0);
        if self.sizes.is_empty() || self.deltas.is_empty() {
            return Err(Error::InvalidInput(
                "sizes and deltas must be nonempty".into(),
            ));
        }
        if 2 * largest + self.n_test > self.n_trajectories {
            return Err(Error::BadSplit(format!(
                "2 x {largest} pool rows + {} test rows exceed {} trajectories",
                self.n_test, self.n_trajectories
            )));
        }
        if self.sizes.iter().any(|&s| s <= self.m) {
            return Err(Error::BadSplit(format!(
                "every size must exceed m = {}",
                self.m
            )));
        }
        if self.n_test == 0 {
            return Err(Error::InvalidInput("n_test must be positive".into()));
        }
        if let Some(&d) = self
            .deltas
            .iter()
            .find(|&&d| !(d > 0.0 && d <= self.delta_prime))
        {
            return Err(Error::InvalidInput(format!(
                "delta {d} must lie in (0, delta_prime = {}]",
                self.delta_prime
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpRecord {
    pub method: String,
    pub size: usize,
    pub delta: f64,
    pub n_test: usize,
    pub coverage: f64,
    pub ci_lower: f64,
    pub mean_width: f64,
    pub width_profile: Vec<f64>,
    /// `beta` for the box methods, the total-exceedance bound for CTE.
    pub correction: Option<f64>,
    pub guaranteed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFailureTable {
    pub method: String,
    pub size: usize,
    pub axes: (String, String),
    pub table: FailureTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleBand {
    pub method: String,
    pub size: usize,
    pub delta: f64,
    pub start_features: FeatureVector,
    pub behavior: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpReport {
    pub config: MdpStudyConfig,
    pub records: Vec<MdpRecord>,
    pub failure_tables: Vec<NamedFailureTable>,
    pub examples: Vec<ExampleBand>,
}

impl MdpReport {
    pub fn find(&self, method: &str, size: usize, delta: f64) -> Option<&MdpRecord> {
        self.records
            .iter()
            .find(|r| r.method == method && r.size == size && r.delta == delta)
    }

    pub fn plot_points(&self) -> Vec<PlotPoint> {
        let env = self.config.env.name();
        let mut out = Vec::new();
        for r in &self.records {
            let series = format!("{}_delta{}", r.method, r.delta);
            out.push(PlotPoint::new(
                format!("{env}_coverage"),
                &series,
                r.size as f64,
                r.coverage,
            ));
            out.push(PlotPoint::new(
                format!("{env}_coverage_ci_lower"),
                &series,
                r.size as f64,
                r.ci_lower,
            ));
            out.push(PlotPoint::new(
                format!("{env}_mean_width"),
                &series,
                r.size as f64,
                r.mean_width,
            ));
            let profile = format!("{}_size{}_delta{}", r.method, r.size, r.delta);
            for (t, w) in r.width_profile.iter().enumerate() {
                out.push(PlotPoint::new(
                    format!("{env}_width_by_timestep"),
                    &profile,
                    (t + 1) as f64,
                    *w,
                ));
            }
            if r.method.starts_with("CTE") {
                if let Some(c) = r.correction {
                    out.push(PlotPoint::new(
                        format!("{env}_exceedance_bound"),
                        &format!("{}_size{}", r.method, r.size),
                        r.delta,
                        c,
                    ));
                }
            }
        }
        for (k, ex) in self.examples.iter().enumerate() {
            let series = format!("example{k}");
            for t in 0..ex.behavior.len() {
                let x = (t + 1) as f64;
                out.push(PlotPoint::new(
                    format!("{env}_example_behavior"),
                    &series,
                    x,
                    ex.behavior[t],
                ));
                out.push(PlotPoint::new(
                    format!("{env}_example_lo"),
                    &series,
                    x,
                    ex.lo[t],
                ));
                out.push(PlotPoint::new(
                    format!("{env}_example_hi"),
                    &series,
                    x,
                    ex.hi[t],
                ));
            }
        }
        out
    }
}

struct Split {
    train: Vec<usize>,
    calibration: Vec<usize>,
    test: Vec<usize>,
}

fn split(config: &MdpStudyConfig, n: usize) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(config.seed, DOMAIN_SHUFFLE, 0));
    let pool = config.sizes.iter().copied().max().unwrap_or(0);
    Split {
        train: order[..pool].to_vec(),
        calibration: order[pool..2 * pool].to_vec(),
        test: order[n - config.n_test..].to_vec(),
    }
}

struct Evaluated {
    record: MdpRecord,
    covered: Vec<bool>,
}

/// Hits, mean width per timestep and per-row coverage of the bands
/// `[lo_i - pad, hi_i + pad]`.
fn evaluate_band(
    lo: &[Vec<f64>],
    hi: &[Vec<f64>],
    pad: &[f64],
    behaviors: &[&[f64]],
) -> (usize, Vec<f64>, Vec<bool>) {
    let h = pad.len();
    let mut width = vec![0.0; h];
    let mut covered = Vec::with_capacity(behaviors.len());
    for ((l, u), b) in lo.iter().zip(hi).zip(behaviors) {
        let mut inside = true;
        for t in 0..h {
            let (a, c) = if l[t] > u[t] {
                (u[t], l[t])
            } else {
                (l[t], u[t])
            };
            let (a, c) = (a - pad[t], c + pad[t]);
            width[t] += c - a;
            inside &= a <= b[t] && b[t] <= c;
        }
        covered.push(inside);
    }
    let n = behaviors.len() as f64;
    width.iter_mut().for_each(|w| *w /= n);
    (covered.iter().filter(|&&c| c).count(), width, covered)
}

#[allow(clippy::too_many_arguments)]
fn record(
    method: &str,
    size: usize,
    delta: f64,
    hits: usize,
    n_test: usize,
    width_profile: Vec<f64>,
    correction: Option<f64>,
    guaranteed: bool,
    confidence: f64,
) -> MdpRecord {
    MdpRecord {
        method: method.to_string(),
        size,
        delta,
        n_test,
        coverage: hits as f64 / n_test as f64,
        ci_lower: coverage_ci_lower(hits as u64, n_test as u64, confidence),
        mean_width: width_profile.iter().sum::<f64>() / width_profile.len() as f64,
        width_profile,
        correction,
        guaranteed,
    }
}

fn exceedances(lo: &[Vec<f64>], hi: &[Vec<f64>], behaviors: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    lo.iter()
        .zip(hi)
        .zip(behaviors)
        .map(|((l, u), b)| {
            let (l, u): (Vec<f64>, Vec<f64>) = l
                .iter()
                .zip(u)
                .map(|(&a, &c)| if a > c { (c, a) } else { (a, c) })
                .unzip();
            exceedance(b, &l, &u)
        })
        .collect()
}

fn alpha_key(a: f64) -> u64 {
    a.to_bits()
}

/// Runs the study on trajectories simulated from `config`.
pub fn run_mdp_study(config: &MdpStudyConfig) -> Result<MdpReport> {
    config.validate()?;
    let records = sample_trajectories(
        &config.env,
        config.n_trajectories,
        config.env.horizon(),
        config.seed,
    )?;
    run_mdp_study_on(config, &records)
}

/// Runs the study on given trajectories (row order matters, the shuffle is
/// seeded by the config).
pub fn run_mdp_study_on(
    config: &MdpStudyConfig,
    trajectories: &[TrajectoryRecord],
) -> Result<MdpReport> {
    config.validate()?;
    if trajectories.len() != config.n_trajectories {
        return Err(Error::LengthMismatch {
            expected: config.n_trajectories,
            got: trajectories.len(),
        });
    }
    let split = split(config, trajectories.len());
    let test_feats: Vec<&[f64]> = split
        .test
        .iter()
        .map(|&i| trajectories[i].start_features.as_slice())
        .collect();
    let test_b: Vec<&[f64]> = split
        .test
        .iter()
        .map(|&i| trajectories[i].behavior.as_slice())
        .collect();
    let test_keys = test_feats
        .iter()
        .map(|f| config.env.cell_key(f))
        .collect::<Result<Vec<_>>>()?;

    // every quantile level any method needs, deduplicated
    let mut alphas: BTreeMap<u64, f64> = BTreeMap::new();
    for a in [config.delta_prime / 2.0, 1.0 - config.delta_prime / 2.0] {
        alphas.insert(alpha_key(a), a);
    }
    for &d in &config.deltas {
        for a in [d / 2.0, 1.0 - d / 2.0] {
            alphas.insert(alpha_key(a), a);
        }
    }
    let alpha_list: Vec<f64> = alphas.values().copied().collect();
    let slot = |a: f64| {
        alpha_list
            .iter()
            .position(|&x| x.to_bits() == a.to_bits())
            .expect("registered level")
    };

    let forest = config
        .forest
        .with_seed(derive_seed(config.seed, DOMAIN_TREE));
    let mut out = Vec::new();
    let mut tables = Vec::new();
    let mut examples = Vec::new();
    for &size in &config.sizes {
        let train = &split.train[..size];
        let cal = &split.calibration[..size];
        let train_x: Vec<FeatureVector> = train
            .iter()
            .map(|&i| trajectories[i].start_features.clone())
            .collect();
        let train_b = BehaviorMatrix::from_rows(
            &train
                .iter()
                .map(|&i| trajectories[i].behavior.clone())
                .collect::<Vec<_>>(),
        )?;
        let cal_b: Vec<&[f64]> = cal
            .iter()
            .map(|&i| trajectories[i].behavior.as_slice())
            .collect();
        let mut queries: Vec<&[f64]> = cal
            .iter()
            .map(|&i| trajectories[i].start_features.as_slice())
            .collect();
        queries.extend_from_slice(&test_feats);
        let q = stream_track_quantiles(&train_x, &train_b, &queries, &alpha_list, forest)?;
        let (cal_q, test_q): (Vec<_>, Vec<_>) = q
            .into_iter()
            .map(|mut rows| {
                let test = rows.split_off(size);
                (rows, test)
            })
            .unzip();
        let zero = vec![0.0; train_b.horizon()];

        let (inner_lo, inner_hi) = (
            slot(config.delta_prime / 2.0),
            slot(1.0 - config.delta_prime / 2.0),
        );
        let inner_exc = exceedances(&cal_q[inner_lo], &cal_q[inner_hi], &cal_b)?;

        for &delta in &config.deltas {
            let (lo, hi) = (slot(delta / 2.0), slot(1.0 - delta / 2.0));
            let mut evaluated: Vec<Evaluated> = Vec::new();

            let (hits, width, covered) = evaluate_band(&test_q[lo], &test_q[hi], &zero, &test_b);
            evaluated.push(Evaluated {
                record: record(
                    "QR",
                    size,
                    delta,
                    hits,
                    config.n_test,
                    width,
                    None,
                    true,
                    config.confidence,
                ),
                covered,
            });

            for (name, strategy) in [
                ("SQBox", QuantileStrategy::Strict),
                ("SQBoxCI", QuantileStrategy::ucb_for(delta)?),
            ] {
                let cal_fit = calibrate_sqbox(&inner_exc, config.m, delta, strategy)?;
                let pad: Vec<f64> = cal_fit
                    .sigma
                    .iter()
                    .map(|s| cal_fit.beta.value * s)
                    .collect();
                let (hits, width, covered) =
                    evaluate_band(&test_q[inner_lo], &test_q[inner_hi], &pad, &test_b);
                evaluated.push(Evaluated {
                    record: record(
                        name,
                        size,
                        delta,
                        hits,
                        config.n_test,
                        width,
                        Some(cal_fit.beta.value),
                        cal_fit.beta.guaranteed,
                        config.confidence,
                    ),
                    covered,
                });
            }

            let cte_exc = exceedances(&cal_q[lo], &cal_q[hi], &cal_b)?;
            let test_exc = exceedances(&test_q[lo], &test_q[hi], &test_b)?;
            let (_, width, _) = evaluate_band(&test_q[lo], &test_q[hi], &zero, &test_b);
            for (name, strategy) in [
                ("CTE", QuantileStrategy::Strict),
                ("CTECI", QuantileStrategy::ucb_for(delta)?),
            ] {
                let est = calibrate_cte(&cte_exc, delta, strategy)?;
                let covered: Vec<bool> = test_exc
                    .iter()
                    .map(|x| x.iter().sum::<f64>() <= est.value)
                    .collect();
                let hits = covered.iter().filter(|&&c| c).count();
                evaluated.push(Evaluated {
                    record: record(
                        name,
                        size,
                        delta,
                        hits,
                        config.n_test,
                        width.clone(),
                        Some(est.value),
                        est.guaranteed,
                        config.confidence,
                    ),
                    covered,
                });
            }

            if size == config.failure_size && delta == config.failure_delta {
                let (ax, ay) = config.env.cell_axes();
                for ev in evaluated
                    .iter()
                    .filter(|e| e.record.method.starts_with("SQBox"))
                {
                    let violations: Vec<bool> = ev.covered.iter().map(|c| !c).collect();
                    tables.push(NamedFailureTable {
                        method: ev.record.method.clone(),
                        size,
                        axes: (ax.to_string(), ay.to_string()),
                        table: failure_table(&test_keys, &violations, delta)?,
                    });
                }
                if let Some(ci) = evaluated.iter().find(|e| e.record.method == "SQBoxCI") {
                    let beta = ci.record.correction.unwrap_or(0.0);
                    let cal_fit = calibrate_sqbox(
                        &inner_exc,
                        config.m,
                        delta,
                        QuantileStrategy::ucb_for(delta)?,
                    )?;
                    for k in 0..config.examples.min(config.n_test) {
                        let (lo_v, hi_v): (Vec<f64>, Vec<f64>) = test_q[inner_lo][k]
                            .iter()
                            .zip(&test_q[inner_hi][k])
                            .zip(&cal_fit.sigma)
                            .map(|((&a, &c), s)| {
                                let (a, c) = if a > c { (c, a) } else { (a, c) };
                                (a - beta * s, c + beta * s)
                            })
                            .unzip();
                        examples.push(ExampleBand {
                            method: "SQBoxCI".into(),
                            size,
                            delta,
                            start_features: test_feats[k].to_vec(),
                            behavior: test_b[k].to_vec(),
                            lo: lo_v,
                            hi: hi_v,
                        });
                    }
                }
            }
            out.extend(evaluated.into_iter().map(|e| e.record));
        }
    }
    Ok(MdpReport {
        config: config.clone(),
        records: out,
        failure_tables: tables,
        examples,
    })
}
