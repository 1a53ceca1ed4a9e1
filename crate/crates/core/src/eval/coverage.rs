use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::binomial_upper_tail;
use crate::trajband::Band;
use crate::trajband::{band_covers, BehaviorMatrix};

/// Significance level of the per-cell binomial test.
pub const FAILURE_ALPHA: f64 = 0.05;

/// One-sided exact (Clopper-Pearson) lower confidence bound on a success
/// probability: the `p` solving `P(Bin(n, p) >= hits) = 1 - confidence`.
pub fn coverage_ci_lower(hits: u64, n: u64, confidence: f64) -> f64 {
    if hits == 0 || n == 0 {
        return 0.0;
    }
    let alpha = 1.0 - confidence;
    if hits >= n {
        return alpha.powf(1.0 / n as f64);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binomial_upper_tail(hits, n, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Left-continuous empirical quantile: the smallest `x` with
/// `F_n(x) >= p`.
pub fn left_quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "quantile level {p} outside [0, 1]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub n: usize,
    pub hits: usize,
    pub coverage: f64,
    pub ci_lower: f64,
    pub mean_width: f64,
    /// Mean band width at each timestep.
    pub width_profile: Vec<f64>,
    /// Fraction of trajectories outside the band at each timestep.
    pub violation_profile: Vec<f64>,
}

/// Trajectory-wise coverage of `bands[i]` for `behaviors.row(i)`.
pub fn coverage(
    bands: &[Band],
    behaviors: &BehaviorMatrix,
    confidence: f64,
) -> Result<CoverageSummary> {
    if bands.len() != behaviors.n() {
        return Err(Error::LengthMismatch {
            expected: behaviors.n(),
            got: bands.len(),
        });
    }
    if bands.is_empty() {
        return Err(Error::InsufficientData("no test trajectories".into()));
    }
    let h = behaviors.horizon();
    let mut width_profile = vec![0.0; h];
    let mut violation_profile = vec![0.0; h];
    let mut hits = 0;
    for (band, b) in bands.iter().zip(behaviors.rows()) {
        if band_covers(band, b)? {
            hits += 1;
        }
        for t in 0..h {
            width_profile[t] += band.hi[t] - band.lo[t];
            if b[t] < band.lo[t] || b[t] > band.hi[t] {
                violation_profile[t] += 1.0;
            }
        }
    }
    let n = bands.len();
    width_profile.iter_mut().for_each(|w| *w /= n as f64);
    violation_profile.iter_mut().for_each(|v| *v /= n as f64);
    Ok(CoverageSummary {
        n,
        hits,
        coverage: hits as f64 / n as f64,
        ci_lower: coverage_ci_lower(hits as u64, n as u64, confidence),
        mean_width: width_profile.iter().sum::<f64>() / h as f64,
        width_profile,
        violation_profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCell {
    pub key: (i64, i64),
    pub trials: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// `P(Bin(trials, delta) >= violations)`.
    pub p_value: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTable {
    pub delta: f64,
    pub cells: Vec<FailureCell>,
}

impl FailureTable {
    pub fn flagged(&self) -> impl Iterator<Item = &FailureCell> {
        self.cells.iter().filter(|c| c.flagged)
    }

    pub fn total_trials(&self) -> usize {
        self.cells.iter().map(|c| c.trials).sum()
    }
}

/// Groups violations by cell and flags cells whose violation rate is
/// significantly above `delta` under a one-sided exact binomial test.
pub fn failure_table(keys: &[(i64, i64)], violations: &[bool], delta: f64) -> Result<FailureTable> {
    if keys.len() != violations.len() {
        return Err(Error::LengthMismatch {
            expected: keys.len(),
            got: violations.len(),
        });
    }
    if keys.is_empty() {
        return Err(Error::InsufficientData(
            "failure table needs at least one trial".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::DeltaInvalid(delta));
    }
    let mut counts: BTreeMap<(i64, i64), (usize, usize)> = BTreeMap::new();
    for (&key, &violated) in keys.iter().zip(violations) {
        let entry = counts.entry(key).or_default();
        entry.0 += 1;
        entry.1 += usize::from(violated);
    }
    let cells = counts
        .into_iter()
        .map(|(key, (trials, violations))| {
            let p_value = binomial_upper_tail(violations as u64, trials as u64, delta);
            FailureCell {
                key,
                trials,
                violations,
                violation_rate: violations as f64 / trials as f64,
                p_value,
                flagged: p_value < FAILURE_ALPHA,
            }
        })
        .collect();
    Ok(FailureTable { delta, cells })
}
