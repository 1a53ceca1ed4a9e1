//! Exact order-statistic selection for split-conformal calibration.
//!
//! Every interval in this crate ends in the same step: sort a list of
//! exchangeable nonconformity scores and pick one order statistic. The
//! strict rule picks rank `ceil((1 - delta)(n + 1))`, which yields marginal
//! coverage in `[1 - delta, 1 - delta + 1/(n + 1)]`. The upper-confidence
//! rule picks the smallest rank whose binomial coverage of the inflated
//! quantile reaches a requested confidence, so the resulting threshold sits
//! above the true quantile in a `confidence` fraction of calibration draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack subtracted before taking the ceiling in [`conformal_index`], so
/// that `(1 - 0.7) * 10 = 3.0000000000000004` still maps to rank 3.
const UCB_SLACK: f64 = 1e-12;
const INDEX_SLACK: f64 = 1e-9;

/// Nonconformity scores `c_i` of a calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreList(Vec<f64>);

impl ScoreList {
    /// Wraps `scores`, rejecting NaN. Empty lists are allowed here and
    /// rejected by the selection routines.
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|c| c.is_nan()) {
            return Err(Error::InvalidInput(format!("score {i} is NaN")));
        }
        Ok(Self(scores))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The `rank`-th smallest score (1-based).
    pub fn order_statistic(&self, rank: usize) -> Result<f64> {
        if self.0.is_empty() {
            return Err(Error::EmptyScores);
        }
        if rank == 0 || rank > self.0.len() {
            return Err(Error::InvalidInput(format!(
                "rank {rank} outside 1..={}",
                self.0.len()
            )));
        }
        let mut work = self.0.clone();
        let (_, value, _) = work.select_nth_unstable_by(rank - 1, f64::total_cmp);
        Ok(*value)
    }
}

impl TryFrom<Vec<f64>> for ScoreList {
    type Error = Error;

    fn try_from(scores: Vec<f64>) -> Result<Self> {
        Self::new(scores)
    }
}

impl From<ScoreList> for Vec<f64> {
    fn from(scores: ScoreList) -> Self {
        scores.0
    }
}

/// How the conformal threshold is read off the sorted scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantileStrategy {
    /// Rank `ceil((1 - delta)(n + 1))`.
    Strict,
    /// Upper confidence bound on the `(1 - delta)(n + 1)/n` quantile.
    UpperConfidence { confidence: f64 },
}

impl QuantileStrategy {
    pub fn upper_confidence(confidence: f64) -> Result<Self> {
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::InvalidInput(format!(
                "confidence {confidence} must lie in (0, 1)"
            )));
        }
        Ok(Self::UpperConfidence { confidence })
    }

    /// Upper-confidence strategy at level `1 - delta`, the level used by the
    /// CI method variants.
    pub fn ucb_for(delta: f64) -> Result<Self> {
        Self::upper_confidence(1.0 - delta)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Strict => Ok(()),
            Self::UpperConfidence { confidence } => Self::upper_confidence(confidence).map(|_| ()),
        }
    }

    pub fn is_strict(&self) -> bool {
        matches!(self, Self::Strict)
    }
}

/// A selected order statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub value: f64,
    /// 1-based rank of `value` among the scores.
    pub rank: usize,
    /// False when no order statistic reached the requested confidence and
    /// the sample maximum was returned instead.
    pub guaranteed: bool,
}

/// Conformal rank `ceil((1 - delta)(n_cal + 1))`.
pub fn conformal_index(n_cal: usize, delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::DeltaInvalid(delta));
    }
    if n_cal == 0 {
        return Err(Error::EmptyScores);
    }
    let n1 = (n_cal + 1) as f64;
    let raw = ((1.0 - delta) * n1 - INDEX_SLACK).ceil();
    let k = raw.max(1.0) as usize;
    if k > n_cal {
        return Err(Error::DeltaTooSmall {
            delta,
            n: n_cal,
            min: 1.0 / n1,
        });
    }
    Ok(k)
}

/// Conformal threshold of `scores` at miscoverage `delta`.
pub fn conformal_quantile(
    scores: &ScoreList,
    delta: f64,
    strategy: QuantileStrategy,
) -> Result<QuantileEstimate> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    strategy.validate()?;
    let n = scores.len();
    let k = conformal_index(n, delta)?;
    match strategy {
        QuantileStrategy::Strict => Ok(QuantileEstimate {
            value: scores.order_statistic(k)?,
            rank: k,
            guaranteed: true,
        }),
        QuantileStrategy::UpperConfidence { confidence } => {
            quantile_ucb(scores, inflated_level(n, delta), confidence)
        }
    }
}

/// The inflated quantile level `(1 - delta)(n + 1)/n`, kept strictly below 1.
pub fn inflated_level(n: usize, delta: f64) -> f64 {
    let q = (1.0 - delta) * (n as f64 + 1.0) / n as f64;
    q.min(1.0 - f64::EPSILON)
}

/// Upper confidence bound on the `q` quantile of the score distribution.
///
/// Returns the order statistic of rank
/// `r = min { k : P(Bin(n, q) <= k - 1) >= confidence }`. When no rank
/// qualifies the maximum is returned with `guaranteed = false`.
pub fn quantile_ucb(scores: &ScoreList, q: f64, confidence: f64) -> Result<QuantileEstimate> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!(
            "quantile level {q} must lie in (0, 1)"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence {confidence} must lie in (0, 1)"
        )));
    }
    let n = scores.len();
    let (rank, guaranteed) = match ucb_rank(n, q, confidence) {
        Some(r) => (r, true),
        None => (n, false),
    };
    Ok(QuantileEstimate {
        value: scores.order_statistic(rank)?,
        rank,
        guaranteed,
    })
}

/// Smallest rank `r` in `1..=n` with `P(Bin(n, q) <= r - 1) >= confidence`.
///
/// A cumulative probability within `1e-12` of `confidence` counts as
/// reaching it, so exact ties such as `P(Bin(15, 0.5) <= 7) = 0.5` are not
/// lost to rounding.
pub fn ucb_rank(n: usize, q: f64, confidence: f64) -> Option<usize> {
    let pmf = binomial_pmf(n as u64, q);
    let mut cum = 0.0;
    // cum holds P(X <= r - 1) at the top of each iteration.
    for (r, mass) in (1..=n).zip(pmf.iter()) {
        cum += mass;
        if cum >= confidence - UCB_SLACK {
            return Some(r);
        }
    }
    None
}

/// Probability masses `P(Bin(n, p) = j)` for `j = 0..=n`.
///
/// Computed by the ratio recurrence from `(1 - p)^n` when that does not
/// underflow. Otherwise log-masses are exponentiated relative to their
/// maximum and normalized, so extreme `n` and `p` stay finite.
pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    let len = n as usize + 1;
    if p <= 0.0 {
        let mut v = vec![0.0; len];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; len];
        v[len - 1] = 1.0;
        return v;
    }
    let odds = p / (1.0 - p);
    let head = if n <= i32::MAX as u64 {
        (1.0 - p).powi(n as i32)
    } else {
        0.0
    };
    if head > 1e-280 {
        // Direct products keep small cases exact to rounding.
        let mut mass = Vec::with_capacity(len);
        let mut m = head;
        mass.push(m);
        for j in 0..n {
            m *= (n - j) as f64 / (j + 1) as f64 * odds;
            mass.push(m);
        }
        return mass;
    }
    let log_odds = p.ln() - (-p).ln_1p();
    let mut log_mass = Vec::with_capacity(len);
    let mut lp = n as f64 * (-p).ln_1p();
    log_mass.push(lp);
    for j in 0..n {
        lp += ((n - j) as f64).ln() - ((j + 1) as f64).ln() + log_odds;
        log_mass.push(lp);
    }
    let peak = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = log_mass.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    mass
}

/// `P(Bin(n, p) <= k)`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    let pmf = binomial_pmf(n, p);
    let lower: f64 = pmf[..=k as usize].iter().sum();
    lower.min(1.0)
}

/// `P(Bin(n, p) >= k)`, summed from the upper tail for accuracy when small.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let pmf = binomial_pmf(n, p);
    let upper: f64 = pmf[k as usize..].iter().sum();
    upper.min(1.0)
}
