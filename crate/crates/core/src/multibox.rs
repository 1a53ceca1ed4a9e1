//! Axis-aligned multivariate prediction boxes.
//!
//! [`fit_sbox`] scales every coordinate by its sample standard deviation from
//! the first `m` rows and conformalizes the maximum standardized deviation of
//! the remaining rows, so a single factor `beta` inflates the whole box.
//! [`fit_bonferroni`] is the per-coordinate baseline at level `delta / d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{conformal_quantile, QuantileStrategy, ScoreList};

/// `n` points of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl PointSet {
    pub fn new(values: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be at least 1".into()));
        }
        if values.len() % d != 0 {
            return Err(Error::LengthMismatch {
                expected: values.len() / d * d + d,
                got: values.len(),
            });
        }
        let n = values.len() / d;
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "{n} points, need at least 2"
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("point set contains NaN".into()));
        }
        Ok(Self { n, d, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }
}

/// A closed box `[lo, hi]` with `lo = center - beta * scale` and
/// `hi = center + beta * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxInterval {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub beta: f64,
    pub guaranteed: bool,
}

impl BoxInterval {
    fn from_parts(center: Vec<f64>, scale: Vec<f64>, beta: f64, guaranteed: bool) -> Self {
        let lo = center
            .iter()
            .zip(&scale)
            .map(|(c, s)| c - beta * s)
            .collect();
        let hi = center
            .iter()
            .zip(&scale)
            .map(|(c, s)| c + beta * s)
            .collect();
        Self {
            lo,
            hi,
            center,
            scale,
            beta,
            guaranteed,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Mean side length `(1/d) sum_j (hi_j - lo_j)`.
    pub fn mean_width(&self) -> f64 {
        let total: f64 = self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).sum();
        total / self.dim() as f64
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        box_contains(self, point)
    }
}

/// True iff `lo_j <= point_j <= hi_j` for every coordinate.
pub fn box_contains(interval: &BoxInterval, point: &[f64]) -> Result<bool> {
    if point.len() != interval.dim() {
        return Err(Error::DimensionMismatch {
            expected: interval.dim(),
            got: point.len(),
        });
    }
    Ok(interval
        .lo
        .iter()
        .zip(&interval.hi)
        .zip(point)
        .all(|((l, h), x)| l <= x && x <= h))
}

fn check_split(n: usize, m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::BadSplit(format!("m = {m}, need m >= 2")));
    }
    if m >= n - 1 {
        return Err(Error::BadSplit(format!(
            "m = {m} leaves {} calibration rows of {n}, need at least 2",
            n.saturating_sub(m)
        )));
    }
    Ok(())
}

/// Column means and `m - 1`-denominator standard deviations of rows `0..m`.
fn head_moments(points: &PointSet, m: usize) -> (Vec<f64>, Vec<f64>) {
    let d = points.d();
    let mut mean = vec![0.0; d];
    for row in points.rows().take(m) {
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; d];
    for row in points.rows().take(m) {
        for ((acc, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (x - mu) * (x - mu);
        }
    }
    let sd = var
        .into_iter()
        .map(|v| (v / (m as f64 - 1.0)).sqrt())
        .collect();
    (mean, sd)
}

/// Replaces zero scales with the smallest positive one.
pub(crate) fn fill_zero_scales(scale: &mut [f64]) -> Result<()> {
    let smallest = scale
        .iter()
        .copied()
        .filter(|s| *s > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return Err(Error::AllScalesZero);
    }
    for s in scale.iter_mut().filter(|s| **s <= 0.0) {
        *s = smallest;
    }
    Ok(())
}

/// Scaled box: mean and standard deviation from rows `0..m`, conformal
/// factor from the maximum standardized deviation of rows `m..n`.
pub fn fit_sbox(
    points: &PointSet,
    m: usize,
    delta: f64,
    strategy: QuantileStrategy,
) -> Result<BoxInterval> {
    check_split(points.n(), m)?;
    let (center, mut scale) = head_moments(points, m);
    fill_zero_scales(&mut scale)?;
    let scores: Vec<f64> = points
        .rows()
        .skip(m)
        .map(|row| {
            row.iter()
                .zip(&center)
                .zip(&scale)
                .map(|((x, mu), s)| (x - mu).abs() / s)
                .fold(0.0, f64::max)
        })
        .collect();
    let est = conformal_quantile(&ScoreList::new(scores)?, delta, strategy)?;
    Ok(BoxInterval::from_parts(
        center,
        scale,
        est.value,
        est.guaranteed,
    ))
}

/// Per-coordinate scaled boxes at level `delta / d`, sharing the same
/// first-`m` split. The per-coordinate factors are folded into `scale`.
pub fn fit_bonferroni(points: &PointSet, m: usize, delta: f64) -> Result<BoxInterval> {
    check_split(points.n(), m)?;
    let d = points.d();
    let per_dim = delta / d as f64;
    let mut center = Vec::with_capacity(d);
    let mut scale = Vec::with_capacity(d);
    for j in 0..d {
        let column = PointSet::new(points.column(j), 1)?;
        let one = fit_sbox(&column, m, per_dim, QuantileStrategy::Strict)?;
        center.push(one.center[0]);
        scale.push(one.beta * one.scale[0]);
    }
    Ok(BoxInterval::from_parts(center, scale, 1.0, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_abort() {
        let pts = PointSet::new(vec![2.0; 30], 3).unwrap();
        assert_eq!(
            fit_sbox(&pts, 4, 0.2, QuantileStrategy::Strict),
            Err(Error::AllScalesZero)
        );
    }

    #[test]
    fn hand_computed_one_dimensional_box() {
        // head rows -1, 1 give mean 0 and sd sqrt(2); scale rows so scores
        // land on 0.5, 1.0, 1.5, 2.0 in standard units.
        let s = 2f64.sqrt();
        let rows = vec![-1.0, 1.0, 0.5 * s, -s, 1.5 * s, -2.0 * s];
        let pts = PointSet::new(rows, 1).unwrap();
        let fit = fit_sbox(&pts, 2, 0.2, QuantileStrategy::Strict).unwrap();
        assert!((fit.beta - 2.0).abs() < 1e-12);
        assert!((fit.lo[0] + 2.0 * s).abs() < 1e-12);
        assert!((fit.hi[0] - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_replaced_by_smallest_positive() {
        let rows = vec![
            vec![0.0, 5.0, 1.0],
            vec![2.0, 5.0, 5.0],
            vec![1.0, 5.0, 3.0],
            vec![0.5, 6.0, 3.0],
            vec![1.5, 5.0, 2.0],
            vec![1.0, 4.0, 4.0],
        ];
        let pts = PointSet::from_rows(&rows).unwrap();
        let fit = fit_sbox(&pts, 3, 0.25, QuantileStrategy::Strict).unwrap();
        assert_eq!(fit.scale[1], fit.scale[0]);
        assert_eq!(fit.scale[0], 1.0);
        assert_eq!(fit.scale[2], 2.0);
    }

    #[test]
    fn split_errors() {
        let pts = PointSet::new((0..10).map(f64::from).collect(), 1).unwrap();
        assert!(matches!(
            fit_sbox(&pts, 1, 0.5, QuantileStrategy::Strict),
            Err(Error::BadSplit(_))
        ));
        assert!(matches!(
            fit_sbox(&pts, 9, 0.5, QuantileStrategy::Strict),
            Err(Error::BadSplit(_))
        ));
        assert!(matches!(
            fit_sbox(&pts, 5, 0.1, QuantileStrategy::Strict),
            Err(Error::DeltaTooSmall { .. })
        ));
        let wide = PointSet::new((0..40).map(f64::from).collect(), 4).unwrap();
        // per-dimension level 0.5/4 = 0.125 < 1/(5+1)
        assert!(matches!(
            fit_bonferroni(&wide, 5, 0.5),
            Err(Error::DeltaTooSmall { .. })
        ));
    }

    #[test]
    fn bonferroni_one_dimension_matches_sbox() {
        let vals: Vec<f64> = (0..40).map(|i| ((i * 17) % 23) as f64 * 0.3).collect();
        let pts = PointSet::new(vals, 1).unwrap();
        let a = fit_sbox(&pts, 10, 0.1, QuantileStrategy::Strict).unwrap();
        let b = fit_bonferroni(&pts, 10, 0.1).unwrap();
        assert_eq!(a.lo, b.lo);
        assert_eq!(a.hi, b.hi);
    }

    #[test]
    fn containment_is_closed() {
        let b = BoxInterval::from_parts(vec![0.0, 1.0], vec![1.0, 2.0], 1.5, true);
        assert!(box_contains(&b, &b.center).unwrap());
        assert!(box_contains(&b, &[1.5, 1.0]).unwrap());
        assert!(box_contains(&b, &[-1.5, 4.0]).unwrap());
        assert!(!box_contains(&b, &[1.5 + 1e-12, 1.0]).unwrap());
        assert!(matches!(
            box_contains(&b, &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
