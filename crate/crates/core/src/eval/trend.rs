use crate::error::{Error, Result};

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(
            "rank correlation needs two points".into(),
        ));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exact one-sided permutation p-value for an increasing monotone trend of
/// `y` in `x`: the fraction of orderings of `y` whose Spearman correlation
/// with `x` is at least the observed one. Limited to 8 points.
pub fn increasing_trend_p_value(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() > 8 {
        return Err(Error::InvalidInput(
            "exact permutation test is limited to 8 points".into(),
        ));
    }
    let observed = spearman(x, y)?;
    let perms = permutations(y.len());
    let at_least = perms
        .iter()
        .filter(|p| {
            let shuffled: Vec<f64> = p.iter().map(|&i| y[i]).collect();
            spearman(x, &shuffled).is_ok_and(|r| r >= observed - 1e-12)
        })
        .count();
    Ok(at_least as f64 / perms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&x, &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((r - 0.894_427_190_999_915_9).abs() < 1e-12);
    }

    #[test]
    fn permutation_p_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!(
            (increasing_trend_p_value(&x, &[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.0 / 24.0).abs()
                < 1e-12
        );
        assert_eq!(
            increasing_trend_p_value(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(),
            1.0
        );
    }
}
