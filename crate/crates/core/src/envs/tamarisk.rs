//! Stylized invasive-species river network.
//!
//! Seven edges form a balanced binary tree: edge 0 is the bottom, edges 1
//! and 2 the middle level, edges 3..7 the top. Water and seeds flow from
//! the top down, so an edge's upstream neighbors are its two children.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EDGES: usize = 7;
pub const STATE_COUNT: usize = 2187;
pub const BOTTOM: usize = 0;
pub const MIDDLE: [usize; 2] = [1, 2];
pub const TOP: [usize; 4] = [3, 4, 5, 6];

const COST_SLACK: f64 = 1e-9;

/// Feature codes are the discriminants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeState {
    Invaded = 0,
    Empty = 1,
    Native = 2,
}

impl EdgeState {
    pub const ALL: [EdgeState; 3] = [EdgeState::Invaded, EdgeState::Empty, EdgeState::Native];

    pub fn code(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TamariskState {
    pub edges: [EdgeState; EDGES],
}

impl TamariskState {
    pub fn uniform(state: EdgeState) -> Self {
        Self {
            edges: [state; EDGES],
        }
    }

    /// Base-3 index with edge 0 as the least significant digit.
    pub fn index(&self) -> usize {
        self.edges.iter().rev().fold(0, |acc, e| acc * 3 + e.code())
    }

    pub fn from_index(mut index: usize) -> Self {
        let mut edges = [EdgeState::Invaded; EDGES];
        for e in &mut edges {
            *e = EdgeState::ALL[index % 3];
            index /= 3;
        }
        Self { edges }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut edges = [EdgeState::Invaded; EDGES];
        for e in &mut edges {
            *e = EdgeState::ALL[rng.random_range(0..3)];
        }
        Self { edges }
    }

    pub fn features(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.code() as f64).collect()
    }

    pub fn from_features(features: &[f64]) -> Result<Self> {
        if features.len() != EDGES {
            return Err(Error::DimensionMismatch {
                expected: EDGES,
                got: features.len(),
            });
        }
        let mut edges = [EdgeState::Invaded; EDGES];
        for (e, &f) in edges.iter_mut().zip(features) {
            *e = match f {
                0.0 => EdgeState::Invaded,
                1.0 => EdgeState::Empty,
                2.0 => EdgeState::Native,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "edge code {f} is not 0, 1 or 2"
                    )))
                }
            };
        }
        Ok(Self { edges })
    }

    pub fn count(&self, state: EdgeState) -> usize {
        self.edges.iter().filter(|&&e| e == state).count()
    }
}

pub fn upstream(edge: usize) -> &'static [usize] {
    match edge {
        0 => &[1, 2],
        1 => &[3, 4],
        2 => &[5, 6],
        _ => &[],
    }
}

/// Ordered for the lexicographic tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    DoNothing,
    Eradicate,
    Plant,
    EradicatePlant,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::DoNothing,
        Primitive::Eradicate,
        Primitive::Plant,
        Primitive::EradicatePlant,
    ];

    fn eradicates(self) -> bool {
        matches!(self, Primitive::Eradicate | Primitive::EradicatePlant)
    }

    fn plants(self) -> bool {
        matches!(self, Primitive::Plant | Primitive::EradicatePlant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TamariskAction {
    pub edges: [Primitive; EDGES],
}

impl TamariskAction {
    pub fn nothing() -> Self {
        Self {
            edges: [Primitive::DoNothing; EDGES],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TamariskConfig {
    pub cost_eradicate: f64,
    pub cost_plant: f64,
    pub cost_eradicate_plant: f64,
    pub invasion_penalty: f64,
    pub budget: f64,
    pub eradication_success: f64,
    pub death_prob: f64,
    pub invaded_weight: f64,
    pub native_weight: f64,
    pub exogenous_weight: f64,
    pub colonization_rate: f64,
    /// Treat invaded top edges with Eradicate+Plant instead of Eradicate.
    pub top_eradicate_plant: bool,
    pub horizon: usize,
}

impl Default for TamariskConfig {
    fn default() -> Self {
        Self {
            cost_eradicate: 0.5,
            cost_plant: 0.9,
            cost_eradicate_plant: 1.2,
            invasion_penalty: 0.1,
            budget: 2.0,
            eradication_success: 0.85,
            death_prob: 0.1,
            invaded_weight: 2.0,
            native_weight: 1.0,
            exogenous_weight: 0.5,
            colonization_rate: 0.4,
            top_eradicate_plant: false,
            horizon: 50,
        }
    }
}

impl TamariskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("eradication_success", self.eradication_success),
            ("death_prob", self.death_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!(
                    "{name} = {p} is not a probability"
                )));
            }
        }
        let nonneg = [
            ("cost_eradicate", self.cost_eradicate),
            ("cost_plant", self.cost_plant),
            ("cost_eradicate_plant", self.cost_eradicate_plant),
            ("invasion_penalty", self.invasion_penalty),
            ("invaded_weight", self.invaded_weight),
            ("native_weight", self.native_weight),
            ("exogenous_weight", self.exogenous_weight),
            ("colonization_rate", self.colonization_rate),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        if self.budget.is_nan() || self.budget < 0.0 {
            return Err(Error::NoFeasibleAction(self.budget));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn primitive_cost(&self, p: Primitive) -> f64 {
        match p {
            Primitive::DoNothing => 0.0,
            Primitive::Eradicate => self.cost_eradicate,
            Primitive::Plant => self.cost_plant,
            Primitive::EradicatePlant => self.cost_eradicate_plant,
        }
    }

    pub fn action_cost(&self, action: &TamariskAction) -> f64 {
        action.edges.iter().map(|&p| self.primitive_cost(p)).sum()
    }

    fn affordable(&self, cost: f64) -> bool {
        cost <= self.budget + COST_SLACK
    }
}

/// Every action vector within budget, in lexicographic order (bottom edge
/// most significant).
pub fn feasible_actions(config: &TamariskConfig) -> Vec<TamariskAction> {
    fn extend(
        config: &TamariskConfig,
        prefix: &mut Vec<Primitive>,
        spent: f64,
        out: &mut Vec<TamariskAction>,
    ) {
        if prefix.len() == EDGES {
            let mut edges = [Primitive::DoNothing; EDGES];
            edges.copy_from_slice(prefix);
            out.push(TamariskAction { edges });
            return;
        }
        for p in Primitive::ALL {
            let cost = spent + config.primitive_cost(p);
            if config.affordable(cost) {
                prefix.push(p);
                extend(config, prefix, cost, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(config, &mut Vec::with_capacity(EDGES), 0.0, &mut out);
    out
}

/// Keeps the candidates that apply an accepted primitive to the most target
/// edges. A filter with no target edges keeps everything.
fn keep_most(
    candidates: &mut Vec<TamariskAction>,
    targets: impl Iterator<Item = usize> + Clone,
    accept: impl Fn(Primitive) -> bool,
) {
    let score = |a: &TamariskAction| targets.clone().filter(|&e| accept(a.edges[e])).count();
    let best = candidates.iter().map(score).max().unwrap_or(0);
    if best > 0 {
        candidates.retain(|a| score(a) == best);
    }
}

fn choose(
    state: &TamariskState,
    config: &TamariskConfig,
    feasible: &[TamariskAction],
) -> TamariskAction {
    let at = |edges: &'static [usize], s: EdgeState| {
        edges.iter().copied().filter(move |&e| state.edges[e] == s)
    };
    let bottom: &'static [usize] = &[BOTTOM];
    let mut candidates = feasible.to_vec();
    keep_most(
        &mut candidates,
        at(&MIDDLE, EdgeState::Empty),
        Primitive::plants,
    );
    if config.top_eradicate_plant {
        keep_most(&mut candidates, at(&TOP, EdgeState::Invaded), |p| {
            p == Primitive::EradicatePlant
        });
    } else {
        keep_most(&mut candidates, at(&TOP, EdgeState::Invaded), |p| {
            p == Primitive::Eradicate
        });
    }
    keep_most(
        &mut candidates,
        at(bottom, EdgeState::Empty),
        Primitive::plants,
    );
    keep_most(&mut candidates, at(&MIDDLE, EdgeState::Invaded), |p| {
        p == Primitive::EradicatePlant
    });
    keep_most(&mut candidates, at(bottom, EdgeState::Invaded), |p| {
        p == Primitive::EradicatePlant
    });
    candidates
        .into_iter()
        .min()
        .unwrap_or_else(TamariskAction::nothing)
}

/// The rule-based action for `state`.
pub fn tamarisk_policy(state: &TamariskState, config: &TamariskConfig) -> Result<TamariskAction> {
    if config.budget.is_nan() || config.budget < 0.0 {
        return Err(Error::NoFeasibleAction(config.budget));
    }
    Ok(choose(state, config, &feasible_actions(config)))
}

/// Policy memoized over all `3^7` states.
#[derive(Debug, Clone)]
pub struct TamariskPolicy {
    table: Vec<TamariskAction>,
}

impl TamariskPolicy {
    pub fn new(config: &TamariskConfig) -> Result<Self> {
        if config.budget.is_nan() || config.budget < 0.0 {
            return Err(Error::NoFeasibleAction(config.budget));
        }
        let feasible = feasible_actions(config);
        let table = (0..STATE_COUNT)
            .map(|i| choose(&TamariskState::from_index(i), config, &feasible))
            .collect();
        Ok(Self { table })
    }

    pub fn act(&self, state: &TamariskState) -> TamariskAction {
        self.table[state.index()]
    }
}

/// Applies `action`, then natural deaths, then colonization of empty edges.
/// The reward charges the action cost and the invasion penalty of `state`.
pub fn tamarisk_step<R: Rng>(
    state: &TamariskState,
    action: &TamariskAction,
    config: &TamariskConfig,
    rng: &mut R,
) -> Result<(TamariskState, f64)> {
    let cost = config.action_cost(action);
    if !config.affordable(cost) {
        return Err(Error::InfeasibleAction {
            cost,
            budget: config.budget,
        });
    }
    let reward = -(cost + config.invasion_penalty * state.count(EdgeState::Invaded) as f64);

    let mut next = *state;
    for (e, &p) in next.edges.iter_mut().zip(&action.edges) {
        if p.eradicates() && *e == EdgeState::Invaded && rng.random_bool(config.eradication_success)
        {
            *e = EdgeState::Empty;
        }
        if p.plants() && *e == EdgeState::Empty {
            *e = EdgeState::Native;
        }
    }
    for e in &mut next.edges {
        if *e != EdgeState::Empty && rng.random_bool(config.death_prob) {
            *e = EdgeState::Empty;
        }
    }
    let settled = next;
    for edge in 0..EDGES {
        if settled.edges[edge] != EdgeState::Empty {
            continue;
        }
        let up = upstream(edge);
        let count = |s| up.iter().filter(|&&u| settled.edges[u] == s).count() as f64;
        let w_invaded = config.invaded_weight * count(EdgeState::Invaded) + config.exogenous_weight;
        let w_native = config.native_weight * count(EdgeState::Native) + config.exogenous_weight;
        let total = w_invaded + w_native;
        if total <= 0.0 {
            continue;
        }
        let colonize = 1.0 - (-config.colonization_rate * total).exp();
        if rng.random_bool(colonize) {
            next.edges[edge] = if rng.random::<f64>() * total < w_invaded {
                EdgeState::Invaded
            } else {
                EdgeState::Native
            };
        }
    }
    Ok((next, reward))
}
