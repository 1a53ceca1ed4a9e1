//! On-disk formats: line-delimited trajectory files and model bundles.
//!
//! A trajectory file starts with one header line describing how it was
//! generated, followed by one record per line. A model bundle is a single
//! JSON document carrying a format tag, a version, the fitted model and the
//! configuration that produced it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::trajband::{Band, CteModel, SqboxModel};

pub const TRAJECTORY_FORMAT: &str = "sqbox-trajectories";
pub const MODEL_FORMAT: &str = "sqbox-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub env: EnvConfig,
    pub n: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl TrajectoryHeader {
    pub fn new(env: EnvConfig, n: usize, horizon: usize, seed: u64) -> Self {
        Self {
            format: TRAJECTORY_FORMAT.into(),
            version: FORMAT_VERSION,
            generator: concat!("sqbox ", env!("CARGO_PKG_VERSION")).into(),
            env,
            n,
            horizon,
            seed,
        }
    }
}

pub fn write_trajectories<W: Write>(
    mut out: W,
    header: &TrajectoryHeader,
    records: &[TrajectoryRecord],
) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trajectories(
    path: &Path,
    header: &TrajectoryHeader,
    records: &[TrajectoryRecord],
) -> Result<()> {
    write_trajectories(BufWriter::new(File::create(path)?), header, records)
}

/// Reads records, accepting files with or without a header line.
pub fn read_trajectories<R: BufRead>(
    input: R,
) -> Result<(Option<TrajectoryHeader>, Vec<TrajectoryRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        if value.get("format").is_some() {
            if lineno != 0 {
                return Err(Error::Schema(format!(
                    "line {}: header after the first line",
                    lineno + 1
                )));
            }
            let h: TrajectoryHeader = serde_json::from_value(value)?;
            if h.format != TRAJECTORY_FORMAT || h.version != FORMAT_VERSION {
                return Err(Error::Schema(format!(
                    "unsupported trajectory format {} v{}",
                    h.format, h.version
                )));
            }
            header = Some(h);
        } else {
            let r: TrajectoryRecord = serde_json::from_value(value)
                .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
            if r.rewards.len() != r.behavior.len() {
                return Err(Error::Schema(format!(
                    "line {}: rewards and behavior lengths differ",
                    lineno + 1
                )));
            }
            records.push(r);
        }
    }
    if let Some(h) = records.first().map(|r| r.behavior.len()) {
        if let Some(r) = records.iter().find(|r| r.behavior.len() != h) {
            return Err(Error::Schema(format!(
                "record {} has horizon {}, expected {h}",
                r.id,
                r.behavior.len()
            )));
        }
    }
    Ok((header, records))
}

pub fn load_trajectories(path: &Path) -> Result<(Option<TrajectoryHeader>, Vec<TrajectoryRecord>)> {
    read_trajectories(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FittedModel {
    Sqbox(SqboxModel),
    Cte(CteModel),
}

/// Band at `s0`; for total-exceedance models also the bound on the summed
/// exceedance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub band: Band,
    pub total_exceedance_bound: Option<f64>,
}

impl FittedModel {
    pub fn horizon(&self) -> usize {
        match self {
            Self::Sqbox(m) => m.tracks.horizon(),
            Self::Cte(m) => m.tracks.horizon(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Sqbox(m) => m.tracks.dim(),
            Self::Cte(m) => m.tracks.dim(),
        }
    }

    pub fn delta(&self) -> f64 {
        match self {
            Self::Sqbox(m) => m.config.delta,
            Self::Cte(m) => m.config.delta,
        }
    }

    pub fn predict(&self, s0: &[f64]) -> Result<Prediction> {
        match self {
            Self::Sqbox(m) => Ok(Prediction {
                band: m.predict_band(s0)?,
                total_exceedance_bound: None,
            }),
            Self::Cte(m) => {
                let p = m.predict(s0)?;
                Ok(Prediction {
                    band: p.band,
                    total_exceedance_bound: Some(p.c_hat),
                })
            }
        }
    }

    /// Whether `b` is covered: inside the band for box models, total
    /// exceedance within the bound for total-exceedance models.
    pub fn covers(&self, s0: &[f64], b: &[f64]) -> Result<bool> {
        match self {
            Self::Sqbox(m) => crate::trajband::band_covers(&m.predict_band(s0)?, b),
            Self::Cte(m) => m.covers(s0, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub forest: ForestParams,
    /// Free-form provenance (data source, command line settings).
    pub provenance: serde_json::Value,
    pub model: FittedModel,
}

impl ModelBundle {
    pub fn new(model: FittedModel, forest: ForestParams, provenance: serde_json::Value) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: FORMAT_VERSION,
            generator: concat!("sqbox ", env!("CARGO_PKG_VERSION")).into(),
            forest,
            provenance,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        match (
            probe.get("format").and_then(|v| v.as_str()),
            probe.get("version").and_then(|v| v.as_u64()),
        ) {
            (Some(MODEL_FORMAT), Some(v)) if v == u64::from(FORMAT_VERSION) => {
                Ok(serde_json::from_value(probe)?)
            }
            (f, v) => Err(Error::Schema(format!(
                "not a {MODEL_FORMAT} v{FORMAT_VERSION} bundle (format {f:?}, version {v:?})"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `%g`-style rendering with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
