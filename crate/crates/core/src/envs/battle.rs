//! Two-team battle with a hidden reinforcement draw.
//!
//! Blue is rewarded +1 per red unit destroyed and -1 per blue unit lost,
//! plus Gaussian noise. The teams close in until `engage_at`, then trade
//! binomial casualties every step; red receives `U{0..N}` extra units at
//! `reinforce_at`, where `N` is drawn with the start state but never shown
//! to the predictor.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BattleState {
    pub blue: u64,
    pub red: u64,
    pub t: usize,
    pub reinforcement_cap: u64,
    pub engaged: bool,
}

impl BattleState {
    /// Predictor features `(blue, red)`.
    pub fn features(&self) -> Vec<f64> {
        vec![self.blue as f64, self.red as f64]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BattleConfig {
    pub blue_min: u64,
    pub blue_max: u64,
    pub red_min: u64,
    pub red_max: u64,
    pub reinforcement_cap_max: u64,
    pub engage_at: usize,
    pub reinforce_at: usize,
    pub kill_prob: f64,
    pub noise_sd: f64,
    pub horizon: usize,
}

impl Default for BattleConfig {
    fn default() -> Self {
        Self {
            blue_min: 5,
            blue_max: 20,
            red_min: 5,
            red_max: 10,
            reinforcement_cap_max: 15,
            engage_at: 5,
            reinforce_at: 14,
            kill_prob: 0.08,
            noise_sd: 0.05,
            horizon: 57,
        }
    }
}

impl BattleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blue_min > self.blue_max || self.red_min > self.red_max {
            return Err(Error::InvalidInput(
                "unit ranges must satisfy min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kill_prob) {
            return Err(Error::InvalidInput(format!(
                "kill_prob = {} is not a probability",
                self.kill_prob
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise_sd = {} must be finite and nonnegative",
                self.noise_sd
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn start<R: Rng>(&self, rng: &mut R) -> BattleState {
        BattleState {
            blue: rng.random_range(self.blue_min..=self.blue_max),
            red: rng.random_range(self.red_min..=self.red_max),
            t: 0,
            reinforcement_cap: rng.random_range(0..=self.reinforcement_cap_max),
            engaged: false,
        }
    }
}

/// One step with the integer combat reward and the noise kept apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BattleTransition {
    pub state: BattleState,
    pub blue_lost: u64,
    pub red_lost: u64,
    pub reinforcements: u64,
    pub noise: f64,
}

impl BattleTransition {
    pub fn reward(&self) -> f64 {
        self.red_lost as f64 - self.blue_lost as f64 + self.noise
    }
}

fn binomial<R: Rng>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p == 0.0 {
        return 0;
    }
    Binomial::new(n, p)
        .expect("validated probability")
        .sample(rng)
}

pub fn battle_transition<R: Rng>(
    state: &BattleState,
    config: &BattleConfig,
    rng: &mut R,
) -> BattleTransition {
    let mut next = *state;
    let mut reinforcements = 0;
    if state.t == config.reinforce_at {
        reinforcements = rng.random_range(0..=state.reinforcement_cap);
        next.red += reinforcements;
    }
    next.engaged = state.engaged || state.t >= config.engage_at;
    let (mut blue_lost, mut red_lost) = (0, 0);
    if next.engaged {
        blue_lost = binomial(next.red, config.kill_prob, rng).min(next.blue);
        red_lost = binomial(next.blue, config.kill_prob, rng).min(next.red);
        next.blue -= blue_lost;
        next.red -= red_lost;
    }
    let noise = if config.noise_sd > 0.0 {
        Normal::new(0.0, config.noise_sd)
            .expect("validated sd")
            .sample(rng)
    } else {
        0.0
    };
    next.t += 1;
    BattleTransition {
        state: next,
        blue_lost,
        red_lost,
        reinforcements,
        noise,
    }
}

pub fn battle_step<R: Rng>(
    state: &BattleState,
    config: &BattleConfig,
    rng: &mut R,
) -> (BattleState, f64) {
    let tr = battle_transition(state, config, rng);
    (tr.state, tr.reward())
}
