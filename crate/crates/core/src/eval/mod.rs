//! Coverage measurement and the replication studies.

pub mod coverage;
pub mod gaussian;
pub mod mdp;
pub mod quantile_ci;
pub mod trend;

use serde::{Deserialize, Serialize};

pub use coverage::{
    coverage, coverage_ci_lower, failure_table, left_quantile, CoverageSummary, FailureCell,
    FailureTable,
};
pub use gaussian::{run_gaussian_study, GaussianRecord, GaussianReport, GaussianStudyConfig};
pub use mdp::{run_mdp_study, run_mdp_study_on, MdpRecord, MdpReport, MdpStudyConfig};
pub use quantile_ci::{
    run_quantile_ci_study, QuantileCiConfig, QuantileCiRecord, QuantileCiReport,
};
pub use trend::{increasing_trend_p_value, spearman};

/// One `(x, y)` point of a named series within a figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub figure: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
}

impl PlotPoint {
    pub fn new(figure: impl Into<String>, series: &str, x: f64, y: f64) -> Self {
        Self {
            figure: figure.into(),
            series: series.to_string(),
            x,
            y,
        }
    }
}
