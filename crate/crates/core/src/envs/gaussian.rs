use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::multibox::PointSet;
use crate::quantile::ScoreList;
use crate::rng::{stream, DOMAIN_SAMPLE};

/// `n` draws from a zero-mean Gaussian with unit variances and common
/// correlation `rho`.
pub fn gen_gaussian(n: usize, d: usize, rho: f64, seed: u64) -> Result<PointSet> {
    let lower = if d > 1 {
        -1.0 / (d as f64 - 1.0)
    } else {
        f64::NEG_INFINITY
    };
    if !(rho > lower && rho < 1.0) {
        return Err(Error::InvalidCorrelation { rho, d });
    }
    let mut rng = stream(seed, DOMAIN_SAMPLE, 0);
    let mut values = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        if rho >= 0.0 {
            let shared: f64 = rng.sample(StandardNormal);
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            values.extend(z.iter().map(|v| a * shared + b * v));
        } else {
            // (I + c 11') z has covariance I + u 11' with u = rho / (1 - rho)
            let u = rho / (1.0 - rho);
            let c = (-1.0 + (1.0 + d as f64 * u).sqrt()) / d as f64;
            let s: f64 = z.iter().sum();
            let norm = (1.0 + u).sqrt();
            values.extend(z.iter().map(|v| (v + c * s) / norm));
        }
    }
    PointSet::new(values, d)
}

/// `n` draws from the standard Cauchy (Student t with one degree of freedom).
pub fn gen_t1(n: usize, seed: u64) -> ScoreList {
    let mut rng = stream(seed, DOMAIN_SAMPLE, 1);
    let draws = (0..n)
        .map(|_| (std::f64::consts::PI * (rng.random::<f64>() - 0.5)).tan())
        .collect();
    ScoreList::new(draws).expect("finite draws")
}

pub fn true_t1_quantile(p: f64) -> f64 {
    (std::f64::consts::PI * (p - 0.5)).tan()
}
