//! Trajectory-wise prediction bands.
//!
//! Per-timestep quantile regressions on the starting state give an inner
//! band. Calibration trajectories are scored by how far they leave that
//! band (their exceedances); the scaled-quantile box conformalizes the
//! maximum standardized exceedance, and the total-exceedance variant
//! conformalizes the sum of exceedances instead.
//!
//! Row layout of the input data is positional: rows `0..l` train the
//! quantile forests, rows `l..l+m` estimate the per-timestep scales, and
//! the remaining rows supply conformal scores. Callers shuffle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{FeatureVector, Forest, ForestParams};
use crate::multibox::fill_zero_scales;
use crate::quantile::{conformal_quantile, QuantileEstimate, QuantileStrategy, ScoreList};
use crate::rng::{derive_seed, DOMAIN_TIMESTEP};

/// Behavior vectors `b_1..b_H` of `n` trajectories, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMatrix {
    n: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl BehaviorMatrix {
    pub fn new(values: Vec<f64>, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if values.len() % horizon != 0 {
            return Err(Error::LengthMismatch {
                expected: values.len().div_ceil(horizon) * horizon,
                got: values.len(),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("behavior matrix contains NaN".into()));
        }
        Ok(Self {
            n: values.len() / horizon,
            horizon,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let horizon = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * horizon);
        for row in rows {
            if row.len() != horizon {
                return Err(Error::LengthMismatch {
                    expected: horizon,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, horizon)
    }

    /// Side-by-side concatenation, for bounding several behavior variables
    /// at once (the maximum exceedance then runs over all of them).
    pub fn hconcat(parts: &[&BehaviorMatrix]) -> Result<Self> {
        let n = parts.first().map_or(0, |p| p.n);
        if let Some(p) = parts.iter().find(|p| p.n != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                got: p.n,
            });
        }
        let horizon = parts.iter().map(|p| p.horizon).sum();
        let mut values = Vec::with_capacity(n * horizon);
        for i in 0..n {
            for p in parts {
                values.extend_from_slice(p.row(i));
            }
        }
        Self::new(values, horizon)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.horizon)
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        self.rows().map(|r| r[t]).collect()
    }

    pub fn select(&self, rows: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut values = Vec::new();
        for i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self::new(values, self.horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Rows used to fit the quantile regressions.
    pub l: usize,
    /// Rows used to estimate per-timestep scales (unused by the total
    /// exceedance method).
    pub m: usize,
    pub delta: f64,
    /// Miscoverage targeted by the inner quantile band.
    pub delta_prime: f64,
    pub strategy: QuantileStrategy,
}

impl SplitConfig {
    pub fn sqbox(
        l: usize,
        m: usize,
        delta: f64,
        delta_prime: f64,
        strategy: QuantileStrategy,
    ) -> Self {
        Self {
            l,
            m,
            delta,
            delta_prime,
            strategy,
        }
    }

    pub fn cte(l: usize, delta: f64, strategy: QuantileStrategy) -> Self {
        Self {
            l,
            m: 0,
            delta,
            delta_prime: delta,
            strategy,
        }
    }

    fn check_delta(delta: f64, n_scores: usize) -> Result<()> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::DeltaInvalid(delta));
        }
        let min = 1.0 / (n_scores as f64 + 1.0);
        if delta < min {
            return Err(Error::DeltaTooSmall {
                delta,
                n: n_scores,
                min,
            });
        }
        Ok(())
    }

    pub fn validate_sqbox(&self, n: usize) -> Result<()> {
        self.strategy.validate()?;
        if self.l == 0 || self.m == 0 {
            return Err(Error::BadSplit(format!(
                "l = {} and m = {} must be positive",
                self.l, self.m
            )));
        }
        if self.l + self.m >= n {
            return Err(Error::BadSplit(format!(
                "l + m = {} leaves no calibration rows of {n}",
                self.l + self.m
            )));
        }
        if !(self.delta_prime >= self.delta && self.delta_prime < 1.0) {
            return Err(Error::InvalidInput(format!(
                "delta_prime {} must lie in [delta, 1) with delta = {}",
                self.delta_prime, self.delta
            )));
        }
        Self::check_delta(self.delta, n - self.l - self.m)
    }

    pub fn validate_cte(&self, n: usize) -> Result<()> {
        self.strategy.validate()?;
        if self.l == 0 || self.l >= n {
            return Err(Error::BadSplit(format!(
                "l = {} must lie in 1..{n}",
                self.l
            )));
        }
        if self.delta_prime != self.delta {
            return Err(Error::InvalidInput(format!(
                "total-exceedance bands use delta_prime = delta, got {} and {}",
                self.delta_prime, self.delta
            )));
        }
        Self::check_delta(self.delta, n - self.l)
    }
}

/// Closed band `[lo_t, hi_t]`, `t = 1..H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Band {
    pub fn horizon(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn mean_width(&self) -> f64 {
        self.widths().iter().sum::<f64>() / self.horizon() as f64
    }

    /// `(t, lo_t, hi_t)` with `t` counted from 1.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.lo
            .iter()
            .zip(&self.hi)
            .enumerate()
            .map(|(i, (l, h))| (i + 1, *l, *h))
    }

    fn widened(lo: &[f64], hi: &[f64], pad: &[f64]) -> Self {
        let mut band = Band {
            lo: Vec::with_capacity(lo.len()),
            hi: Vec::with_capacity(lo.len()),
        };
        for ((&a, &b), &p) in lo.iter().zip(hi).zip(pad) {
            let (a, b) = if a > b { (b, a) } else { (a, b) };
            band.lo.push(a - p);
            band.hi.push(b + p);
        }
        band
    }
}

/// `max(0, qlo_t - b_t, b_t - qhi_t)` per timestep.
pub fn exceedance(b: &[f64], qlo: &[f64], qhi: &[f64]) -> Result<Vec<f64>> {
    if qlo.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: b.len(),
            got: qlo.len(),
        });
    }
    if qhi.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: b.len(),
            got: qhi.len(),
        });
    }
    Ok(b.iter()
        .zip(qlo)
        .zip(qhi)
        .map(|((&b, &lo), &hi)| 0f64.max(lo - b).max(b - hi))
        .collect())
}

/// True iff `lo_t <= b_t <= hi_t` for every `t`.
pub fn band_covers(band: &Band, b: &[f64]) -> Result<bool> {
    if b.len() != band.horizon() {
        return Err(Error::LengthMismatch {
            expected: band.horizon(),
            got: b.len(),
        });
    }
    Ok(band
        .lo
        .iter()
        .zip(&band.hi)
        .zip(b)
        .all(|((l, h), x)| l <= x && x <= h))
}

/// Seed of the forest fitted at timestep `t` (0-based).
pub fn timestep_seed(seed: u64, t: usize) -> u64 {
    derive_seed(derive_seed(seed, DOMAIN_TIMESTEP), t as u64)
}

fn flatten_rows(
    features: &[FeatureVector],
    rows: std::ops::Range<usize>,
) -> Result<(Vec<f64>, usize)> {
    let dim = features.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for row in &features[rows] {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Ok((flat, dim))
}

/// One quantile regression forest per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTracks {
    forests: Vec<Forest>,
}

impl QuantileTracks {
    /// Fits forests on `rows` of `(features, behaviors[., t])` for every `t`.
    pub fn fit(
        features: &[FeatureVector],
        behaviors: &BehaviorMatrix,
        rows: std::ops::Range<usize>,
        params: ForestParams,
    ) -> Result<Self> {
        if features.len() != behaviors.n() {
            return Err(Error::LengthMismatch {
                expected: behaviors.n(),
                got: features.len(),
            });
        }
        let (flat, dim) = flatten_rows(features, rows.clone())?;
        let forests = (0..behaviors.horizon())
            .map(|t| {
                let y: Vec<f64> = rows.clone().map(|i| behaviors.row(i)[t]).collect();
                Forest::fit_flat(
                    flat.clone(),
                    dim,
                    y,
                    params.with_seed(timestep_seed(params.seed, t)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { forests })
    }

    pub fn horizon(&self) -> usize {
        self.forests.len()
    }

    pub fn dim(&self) -> usize {
        self.forests[0].dim()
    }

    pub fn forests(&self) -> &[Forest] {
        &self.forests
    }

    /// `out[k][t]`: level `alphas[k]` at timestep `t` for starting state `s0`.
    pub fn quantiles(&self, s0: &[f64], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::with_capacity(self.horizon()); alphas.len()];
        for forest in &self.forests {
            for (k, q) in forest
                .predict_quantiles(s0, alphas)?
                .into_iter()
                .enumerate()
            {
                out[k].push(q);
            }
        }
        Ok(out)
    }

    /// `out[k][i][t]` for many starting states at once.
    pub fn quantiles_batch(
        &self,
        queries: &[&[f64]],
        alphas: &[f64],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = vec![vec![Vec::with_capacity(self.horizon()); queries.len()]; alphas.len()];
        for forest in &self.forests {
            let per_query = forest.predict_batch(queries, alphas)?;
            for (i, row) in per_query.into_iter().enumerate() {
                for (k, q) in row.into_iter().enumerate() {
                    out[k][i].push(q);
                }
            }
        }
        Ok(out)
    }
}

/// Quantile tracks for `queries` without retaining the forests: each
/// timestep's forest is fitted, queried and dropped, keeping memory at one
/// forest. Returns `out[k][i][t]`.
pub fn stream_track_quantiles(
    train_features: &[FeatureVector],
    train_behaviors: &BehaviorMatrix,
    queries: &[&[f64]],
    alphas: &[f64],
    params: ForestParams,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if train_features.len() != train_behaviors.n() {
        return Err(Error::LengthMismatch {
            expected: train_behaviors.n(),
            got: train_features.len(),
        });
    }
    let (flat, dim) = flatten_rows(train_features, 0..train_features.len())?;
    let horizon = train_behaviors.horizon();
    let per_t: Vec<Vec<Vec<f64>>> = (0..horizon)
        .into_par_iter()
        .map(|t| {
            let forest = Forest::fit_flat(
                flat.clone(),
                dim,
                train_behaviors.column(t),
                params.with_seed(timestep_seed(params.seed, t)),
            )?;
            forest.predict_batch(queries, alphas)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![vec![vec![0.0; horizon]; queries.len()]; alphas.len()];
    for (t, rows) in per_t.into_iter().enumerate() {
        for (i, row) in rows.into_iter().enumerate() {
            for (k, q) in row.into_iter().enumerate() {
                out[k][i][t] = q;
            }
        }
    }
    Ok(out)
}

/// Scales and conformal factor of the scaled-quantile box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqboxCalibration {
    pub sigma: Vec<f64>,
    pub beta: QuantileEstimate,
}

/// Calibrates on exceedance rows: the first `m` rows give the per-timestep
/// root-mean-square scale, the rest give standardized maximum exceedances.
pub fn calibrate_sqbox(
    exceedances: &[Vec<f64>],
    m: usize,
    delta: f64,
    strategy: QuantileStrategy,
) -> Result<SqboxCalibration> {
    if exceedances.len() <= m || m == 0 {
        return Err(Error::InsufficientData(format!(
            "{} exceedance rows cannot supply m = {m} scale rows and any scores",
            exceedances.len()
        )));
    }
    let horizon = exceedances[0].len();
    if let Some(r) = exceedances.iter().find(|r| r.len() != horizon) {
        return Err(Error::LengthMismatch {
            expected: horizon,
            got: r.len(),
        });
    }
    let mut sigma = vec![0.0; horizon];
    for row in &exceedances[..m] {
        for (s, x) in sigma.iter_mut().zip(row) {
            *s += x * x;
        }
    }
    sigma.iter_mut().for_each(|s| *s = (*s / m as f64).sqrt());
    fill_zero_scales(&mut sigma)?;
    let scores: Vec<f64> = exceedances[m..]
        .iter()
        .map(|row| {
            row.iter()
                .zip(&sigma)
                .map(|(x, s)| x / s)
                .fold(0.0, f64::max)
        })
        .collect();
    let beta = conformal_quantile(&ScoreList::new(scores)?, delta, strategy)?;
    Ok(SqboxCalibration { sigma, beta })
}

/// Conformal bound on the total exceedance `sum_t x_t`.
pub fn calibrate_cte(
    exceedances: &[Vec<f64>],
    delta: f64,
    strategy: QuantileStrategy,
) -> Result<QuantileEstimate> {
    let totals: Vec<f64> = exceedances.iter().map(|r| r.iter().sum()).collect();
    conformal_quantile(&ScoreList::new(totals)?, delta, strategy)
}

fn exceedance_rows(
    tracks: &QuantileTracks,
    features: &[FeatureVector],
    behaviors: &BehaviorMatrix,
    rows: std::ops::Range<usize>,
    alpha_lo: f64,
    alpha_hi: f64,
) -> Result<Vec<Vec<f64>>> {
    let queries: Vec<&[f64]> = features[rows.clone()].iter().map(Vec::as_slice).collect();
    let q = tracks.quantiles_batch(&queries, &[alpha_lo, alpha_hi])?;
    rows.enumerate()
        .map(|(k, i)| {
            let (lo, hi) = order_pair(&q[0][k], &q[1][k]);
            exceedance(behaviors.row(i), &lo, &hi)
        })
        .collect()
}

fn order_pair(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    lo.iter()
        .zip(hi)
        .map(|(&a, &b)| if a > b { (b, a) } else { (a, b) })
        .unzip()
}

fn check_inputs(features: &[FeatureVector], behaviors: &BehaviorMatrix) -> Result<()> {
    if features.len() != behaviors.n() {
        return Err(Error::LengthMismatch {
            expected: behaviors.n(),
            got: features.len(),
        });
    }
    Ok(())
}

/// Scaled-quantile box model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqboxModel {
    pub tracks: QuantileTracks,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub sigma: Vec<f64>,
    pub beta: f64,
    pub guaranteed: bool,
    pub config: SplitConfig,
}

/// Fits the scaled-quantile box on `n` trajectories.
pub fn fit_sqbox(
    features: &[FeatureVector],
    behaviors: &BehaviorMatrix,
    config: SplitConfig,
    forest_params: ForestParams,
) -> Result<SqboxModel> {
    check_inputs(features, behaviors)?;
    let n = behaviors.n();
    config.validate_sqbox(n)?;
    let (alpha_lo, alpha_hi) = (config.delta_prime / 2.0, 1.0 - config.delta_prime / 2.0);
    let tracks = QuantileTracks::fit(features, behaviors, 0..config.l, forest_params)?;
    let exceed = exceedance_rows(
        &tracks,
        features,
        behaviors,
        config.l..n,
        alpha_lo,
        alpha_hi,
    )?;
    let cal = calibrate_sqbox(&exceed, config.m, config.delta, config.strategy)?;
    Ok(SqboxModel {
        tracks,
        alpha_lo,
        alpha_hi,
        sigma: cal.sigma,
        beta: cal.beta.value,
        guaranteed: cal.beta.guaranteed,
        config,
    })
}

impl SqboxModel {
    /// The uncorrected quantile band at `s0`.
    pub fn inner_band(&self, s0: &[f64]) -> Result<Band> {
        let q = self.tracks.quantiles(s0, &[self.alpha_lo, self.alpha_hi])?;
        Ok(Band::widened(&q[0], &q[1], &vec![0.0; self.sigma.len()]))
    }

    /// The additive correction `beta * sigma_t`, identical for every start.
    pub fn correction(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| self.beta * s).collect()
    }

    pub fn predict_band(&self, s0: &[f64]) -> Result<Band> {
        let q = self.tracks.quantiles(s0, &[self.alpha_lo, self.alpha_hi])?;
        Ok(Band::widened(&q[0], &q[1], &self.correction()))
    }
}

/// Model-level entry point matching [`SqboxModel::predict_band`].
pub fn predict_band(model: &SqboxModel, s0: &[f64]) -> Result<Band> {
    model.predict_band(s0)
}

/// Conformalized total-exceedance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CteModel {
    pub tracks: QuantileTracks,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub c_hat: f64,
    pub guaranteed: bool,
    pub config: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtePrediction {
    pub band: Band,
    /// Bound on `sum_t` of the exceedances against `band`.
    pub c_hat: f64,
}

pub fn fit_cte(
    features: &[FeatureVector],
    behaviors: &BehaviorMatrix,
    config: SplitConfig,
    forest_params: ForestParams,
) -> Result<CteModel> {
    check_inputs(features, behaviors)?;
    let n = behaviors.n();
    config.validate_cte(n)?;
    let (alpha_lo, alpha_hi) = (config.delta / 2.0, 1.0 - config.delta / 2.0);
    let tracks = QuantileTracks::fit(features, behaviors, 0..config.l, forest_params)?;
    let exceed = exceedance_rows(
        &tracks,
        features,
        behaviors,
        config.l..n,
        alpha_lo,
        alpha_hi,
    )?;
    let est = calibrate_cte(&exceed, config.delta, config.strategy)?;
    Ok(CteModel {
        tracks,
        alpha_lo,
        alpha_hi,
        c_hat: est.value,
        guaranteed: est.guaranteed,
        config,
    })
}

impl CteModel {
    pub fn predict(&self, s0: &[f64]) -> Result<CtePrediction> {
        let q = self.tracks.quantiles(s0, &[self.alpha_lo, self.alpha_hi])?;
        let band = Band::widened(&q[0], &q[1], &vec![0.0; q[0].len()]);
        Ok(CtePrediction {
            band,
            c_hat: self.c_hat,
        })
    }

    /// True iff the total exceedance of `b` against the band at `s0` is at
    /// most the calibrated bound.
    pub fn covers(&self, s0: &[f64], b: &[f64]) -> Result<bool> {
        let p = self.predict(s0)?;
        let total: f64 = exceedance(b, &p.band.lo, &p.band.hi)?.iter().sum();
        Ok(total <= p.c_hat)
    }
}

/// Conformal correction for a scalar response given precomputed quantile
/// predictions on the calibration rows. With `clamp` the scores are
/// exceedances (never negative); without it they are signed distances
/// outside the band, so an over-wide band yields a negative correction.
pub fn cqr_correction(
    qlo: &[f64],
    qhi: &[f64],
    y: &[f64],
    delta: f64,
    strategy: QuantileStrategy,
    clamp: bool,
) -> Result<QuantileEstimate> {
    if qlo.len() != y.len() || qhi.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            got: qlo.len().min(qhi.len()),
        });
    }
    let floor = if clamp { 0.0 } else { f64::NEG_INFINITY };
    let scores: Vec<f64> = qlo
        .iter()
        .zip(qhi)
        .zip(y)
        .map(|((lo, hi), y)| floor.max(lo - y).max(y - hi))
        .collect();
    conformal_quantile(&ScoreList::new(scores)?, delta, strategy)
}

/// Conformalized quantile regression for a scalar response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqrModel {
    pub forest: Forest,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub c_hat: f64,
}

impl CqrModel {
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let q = self
            .forest
            .predict_quantiles(x, &[self.alpha_lo, self.alpha_hi])?;
        Ok((q[0] - self.c_hat, q[1] + self.c_hat))
    }
}

/// Fits `q_{delta/2}` and `q_{1-delta/2}` on rows `0..l` and conformalizes
/// the signed scores of rows `l..n`.
pub fn cqr_scalar(
    features: &[FeatureVector],
    responses: &[f64],
    l: usize,
    delta: f64,
    forest_params: ForestParams,
) -> Result<CqrModel> {
    if features.len() != responses.len() {
        return Err(Error::LengthMismatch {
            expected: responses.len(),
            got: features.len(),
        });
    }
    if l == 0 || l >= responses.len() {
        return Err(Error::InsufficientData(format!(
            "l = {l} must leave calibration rows among {}",
            responses.len()
        )));
    }
    let (alpha_lo, alpha_hi) = (delta / 2.0, 1.0 - delta / 2.0);
    let forest = Forest::fit(&features[..l], &responses[..l], forest_params)?;
    let queries: Vec<&[f64]> = features[l..].iter().map(Vec::as_slice).collect();
    let q = forest.predict_batch(&queries, &[alpha_lo, alpha_hi])?;
    let qlo: Vec<f64> = q.iter().map(|r| r[0]).collect();
    let qhi: Vec<f64> = q.iter().map(|r| r[1]).collect();
    let est = cqr_correction(
        &qlo,
        &qhi,
        &responses[l..],
        delta,
        QuantileStrategy::Strict,
        false,
    )?;
    Ok(CqrModel {
        forest,
        alpha_lo,
        alpha_hi,
        c_hat: est.value,
    })
}
