//! Data generators: two fixed-policy MDPs and the samplers behind the
//! point-set and quantile studies.

pub mod battle;
pub mod gaussian;
pub mod tamarisk;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::FeatureVector;
use crate::rng::{stream, DOMAIN_TRAJECTORY};
use crate::trajband::BehaviorMatrix;

pub use battle::{battle_step, battle_transition, BattleConfig, BattleState, BattleTransition};
pub use gaussian::{gen_gaussian, gen_t1, true_t1_quantile};
pub use tamarisk::{
    feasible_actions, tamarisk_policy, tamarisk_step, EdgeState, Primitive, TamariskAction,
    TamariskConfig, TamariskPolicy, TamariskState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvConfig {
    Tamarisk(TamariskConfig),
    Battle(BattleConfig),
}

impl EnvConfig {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tamarisk" => Ok(Self::Tamarisk(TamariskConfig::default())),
            "battle" => Ok(Self::Battle(BattleConfig::default())),
            other => Err(Error::InvalidInput(format!(
                "unknown environment `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tamarisk(_) => "tamarisk",
            Self::Battle(_) => "battle",
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::Tamarisk(c) => c.horizon,
            Self::Battle(c) => c.horizon,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Tamarisk(_) => tamarisk::EDGES,
            Self::Battle(_) => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Tamarisk(c) => c.validate(),
            Self::Battle(c) => c.validate(),
        }
    }

    /// Failure-table cell of a start state: `(natives, invaded)` edge
    /// counts for Tamarisk, `(blue, red)` for the battle.
    pub fn cell_key(&self, features: &[f64]) -> Result<(i64, i64)> {
        match self {
            Self::Tamarisk(_) => {
                let s = TamariskState::from_features(features)?;
                Ok((
                    s.count(EdgeState::Native) as i64,
                    s.count(EdgeState::Invaded) as i64,
                ))
            }
            Self::Battle(_) => match features {
                [blue, red] => Ok((*blue as i64, *red as i64)),
                _ => Err(Error::DimensionMismatch {
                    expected: 2,
                    got: features.len(),
                }),
            },
        }
    }

    pub fn cell_axes(&self) -> (&'static str, &'static str) {
        match self {
            Self::Tamarisk(_) => ("native", "tamarisk"),
            Self::Battle(_) => ("blue", "red"),
        }
    }
}

/// A rollout: start-state features, per-step rewards and the cumulative
/// reward behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: u64,
    pub start_features: FeatureVector,
    pub rewards: Vec<f64>,
    pub behavior: Vec<f64>,
}

impl TrajectoryRecord {
    fn from_rewards(id: u64, start_features: FeatureVector, rewards: Vec<f64>) -> Self {
        let behavior = rewards
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        Self {
            id,
            start_features,
            rewards,
            behavior,
        }
    }
}

/// `n` rollouts of `horizon` steps; trajectory `i` uses its own random
/// stream, so the output does not depend on the thread count.
pub fn sample_trajectories(
    env: &EnvConfig,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    env.validate()?;
    match env {
        EnvConfig::Tamarisk(cfg) => {
            let policy = TamariskPolicy::new(cfg)?;
            (0..n as u64)
                .into_par_iter()
                .map(|id| {
                    let mut rng = stream(seed, DOMAIN_TRAJECTORY, id);
                    let start = TamariskState::random(&mut rng);
                    let mut state = start;
                    let mut rewards = Vec::with_capacity(horizon);
                    for _ in 0..horizon {
                        let (next, r) = tamarisk_step(&state, &policy.act(&state), cfg, &mut rng)?;
                        rewards.push(r);
                        state = next;
                    }
                    Ok(TrajectoryRecord::from_rewards(
                        id,
                        start.features(),
                        rewards,
                    ))
                })
                .collect()
        }
        EnvConfig::Battle(cfg) => Ok((0..n as u64)
            .into_par_iter()
            .map(|id| {
                let mut rng = stream(seed, DOMAIN_TRAJECTORY, id);
                let start = cfg.start(&mut rng);
                let mut state = start;
                let rewards = (0..horizon)
                    .map(|_| {
                        let (next, r) = battle_step(&state, cfg, &mut rng);
                        state = next;
                        r
                    })
                    .collect();
                TrajectoryRecord::from_rewards(id, start.features(), rewards)
            })
            .collect()),
    }
}

pub fn features_of(records: &[TrajectoryRecord]) -> Vec<FeatureVector> {
    records.iter().map(|r| r.start_features.clone()).collect()
}

pub fn behaviors_of(records: &[TrajectoryRecord]) -> Result<BehaviorMatrix> {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.behavior.clone()).collect();
    BehaviorMatrix::from_rows(&rows)
}
