//! Quantile regression forest.
//!
//! Trees are grown on every training row (no bootstrap) with variance
//! reduction splits over a random subset of features at each node. Each
//! leaf keeps the indices of the training rows that reached it; a query is
//! answered by weighting every training response by `1 / (trees * leaf
//! size)` for each tree whose leaf it shares with the query, and reading
//! the quantile off that weighted empirical CDF.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, DOMAIN_TREE};

/// Absorbs rounding in accumulated leaf weights when comparing against `alpha`.
const CDF_SLACK: f64 = 1e-12;

/// Starting-state features of one trajectory.
pub type FeatureVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturesPerSplit {
    /// `max(1, ceil(d / 3))`.
    Auto,
    All,
    Count(usize),
}

impl FeaturesPerSplit {
    fn resolve(self, d: usize) -> usize {
        match self {
            Self::Auto => d.div_ceil(3).max(1),
            Self::All => d,
            Self::Count(k) => k.clamp(1, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub tree_count: usize,
    pub min_leaf: usize,
    pub features_per_split: FeaturesPerSplit,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            tree_count: 1000,
            min_leaf: 20,
            features_per_split: FeaturesPerSplit::Auto,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::InvalidInput("tree_count must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidInput("min_leaf must be at least 1".into()));
        }
        if self.features_per_split == FeaturesPerSplit::Count(0) {
            return Err(Error::InvalidInput(
                "features_per_split must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        len: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
    /// Training indices grouped by leaf, ascending within each leaf.
    members: Vec<u32>,
}

impl Tree {
    fn leaf_of(&self, x: &[f64]) -> (u32, u32) {
        let mut id = 0usize;
        loop {
            match self.nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if x[feature as usize] <= threshold {
                        left
                    } else {
                        right
                    } as usize;
                }
                Node::Leaf { start, len } => return (start, len),
            }
        }
    }

    fn leaf_members(&self, x: &[f64]) -> &[u32] {
        let (start, len) = self.leaf_of(x);
        &self.members[start as usize..(start + len) as usize]
    }
}

/// A fitted quantile regression forest. Immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    params: ForestParams,
    dim: usize,
    features: Vec<f64>,
    responses: Vec<f64>,
    /// Training indices sorted by response, ties by index.
    response_order: Vec<u32>,
    trees: Vec<Tree>,
}

struct Training<'a> {
    dim: usize,
    features: &'a [f64],
    responses: &'a [f64],
}

impl Training<'_> {
    fn x(&self, i: u32, f: usize) -> f64 {
        self.features[i as usize * self.dim + f]
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn best_split_on(
    data: &Training<'_>,
    sorted: &[u32],
    f: usize,
    min_leaf: usize,
    total: f64,
) -> Option<Candidate> {
    let n = sorted.len();
    let mut left_sum = 0.0;
    let mut best: Option<Candidate> = None;
    for (pos, pair) in sorted.windows(2).enumerate() {
        left_sum += data.responses[pair[0] as usize];
        let n_left = pos + 1;
        let (xa, xb) = (data.x(pair[0], f), data.x(pair[1], f));
        if xa == xb || n_left < min_leaf || n - n_left < min_leaf {
            continue;
        }
        let right_sum = total - left_sum;
        let gain =
            left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
        if best.as_ref().map_or(true, |b| gain > b.gain) {
            let mid = xa + (xb - xa) / 2.0;
            // midpoint can round up to xb for adjacent floats
            let threshold = if mid < xb { mid } else { xa };
            best = Some(Candidate {
                gain,
                feature: f,
                threshold,
            });
        }
    }
    best
}

fn grow_tree(
    data: &Training<'_>,
    presorted: &[Vec<u32>],
    min_leaf: usize,
    per_split: usize,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let n = data.responses.len();
    let d = data.dim;
    let mut order: Vec<Vec<u32>> = presorted.to_vec();
    let mut nodes = vec![Node::Leaf { start: 0, len: 0 }];
    let mut members = Vec::with_capacity(n);
    let mut goes_left = vec![false; n];
    let mut scratch = vec![0u32; n];
    let mut features: Vec<usize> = (0..d).collect();
    let mut stack = vec![(0usize, 0usize, n)];

    while let Some((id, a, b)) = stack.pop() {
        let size = b - a;
        let rows = &order[0][a..b];
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let y = data.responses[i as usize];
                (lo.min(y), hi.max(y))
            });
        let mut best: Option<Candidate> = None;
        if size >= 2 * min_leaf && lo < hi {
            let total: f64 = rows.iter().map(|&i| data.responses[i as usize]).sum();
            features.shuffle(rng);
            let mut examined = 0;
            for &f in &features {
                if examined == per_split {
                    break;
                }
                let sorted = &order[f][a..b];
                if data.x(sorted[0], f) == data.x(sorted[size - 1], f) {
                    continue;
                }
                examined += 1;
                if let Some(c) = best_split_on(data, sorted, f, min_leaf, total) {
                    let better = match &best {
                        None => true,
                        Some(b) => c.gain > b.gain || (c.gain == b.gain && c.feature < b.feature),
                    };
                    if better {
                        best = Some(c);
                    }
                }
            }
        }

        match best {
            None => {
                let start = members.len() as u32;
                let mut leaf: Vec<u32> = order[0][a..b].to_vec();
                leaf.sort_unstable();
                members.extend_from_slice(&leaf);
                nodes[id] = Node::Leaf {
                    start,
                    len: size as u32,
                };
            }
            Some(split) => {
                for &i in &order[split.feature][a..b] {
                    goes_left[i as usize] = data.x(i, split.feature) <= split.threshold;
                }
                let mut n_left = 0;
                for sorted in order.iter_mut() {
                    let span = &mut sorted[a..b];
                    let mut l = 0;
                    let mut r = 0;
                    for k in 0..span.len() {
                        let i = span[k];
                        if goes_left[i as usize] {
                            span[l] = i;
                            l += 1;
                        } else {
                            scratch[r] = i;
                            r += 1;
                        }
                    }
                    span[l..].copy_from_slice(&scratch[..r]);
                    n_left = l;
                }
                let left = nodes.len();
                nodes.push(Node::Leaf { start: 0, len: 0 });
                let right = nodes.len();
                nodes.push(Node::Leaf { start: 0, len: 0 });
                nodes[id] = Node::Split {
                    feature: split.feature as u32,
                    threshold: split.threshold,
                    left: left as u32,
                    right: right as u32,
                };
                stack.push((right, a + n_left, b));
                stack.push((left, a, a + n_left));
            }
        }
    }
    Tree { nodes, members }
}

fn flatten(features: &[FeatureVector]) -> Result<(Vec<f64>, usize)> {
    let dim = features.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(features.len() * dim);
    for row in features {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Ok((flat, dim))
}

fn sort_by_response(responses: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..responses.len() as u32).collect();
    order.sort_by(|&a, &b| {
        responses[a as usize]
            .total_cmp(&responses[b as usize])
            .then(a.cmp(&b))
    });
    order
}

impl Forest {
    /// Fits a forest on `features` (one row per training point).
    pub fn fit(
        features: &[FeatureVector],
        responses: &[f64],
        params: ForestParams,
    ) -> Result<Self> {
        let (flat, dim) = flatten(features)?;
        Self::fit_flat(flat, dim, responses.to_vec(), params)
    }

    /// Fits a forest on a row-major `n x dim` feature matrix.
    pub fn fit_flat(
        features: Vec<f64>,
        dim: usize,
        responses: Vec<f64>,
        params: ForestParams,
    ) -> Result<Self> {
        params.validate()?;
        let n = responses.len();
        if dim == 0 {
            return Err(Error::InvalidInput(
                "feature dimension must be at least 1".into(),
            ));
        }
        if features.len() != n * dim {
            return Err(Error::LengthMismatch {
                expected: n * dim,
                got: features.len(),
            });
        }
        if n == 0 || n < params.min_leaf {
            return Err(Error::InsufficientData(format!(
                "{n} training rows, min_leaf is {}",
                params.min_leaf
            )));
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidInput("too many training rows".into()));
        }
        if features.iter().chain(&responses).any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("training data contains NaN".into()));
        }

        let data = Training {
            dim,
            features: &features,
            responses: &responses,
        };
        let presorted: Vec<Vec<u32>> = (0..dim)
            .map(|f| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| data.x(a, f).total_cmp(&data.x(b, f)).then(a.cmp(&b)));
                idx
            })
            .collect();
        let per_split = params.features_per_split.resolve(dim);
        let trees: Vec<Tree> = (0..params.tree_count)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(params.seed, DOMAIN_TREE, t as u64);
                grow_tree(&data, &presorted, params.min_leaf, per_split, &mut rng)
            })
            .collect();

        let response_order = sort_by_response(&responses);
        Ok(Self {
            params,
            dim,
            features,
            responses,
            response_order,
            trees,
        })
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    /// Leaf sizes of every tree, in leaf order.
    pub fn leaf_sizes(&self) -> Vec<Vec<usize>> {
        self.trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .filter_map(|n| match n {
                        Node::Leaf { len, .. } => Some(*len as usize),
                        Node::Split { .. } => None,
                    })
                    .collect()
            })
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn accumulate_weights(&self, x: &[f64], weights: &mut [f64]) {
        weights.fill(0.0);
        let per_tree = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            let leaf = tree.leaf_members(x);
            let share = per_tree / leaf.len() as f64;
            for &i in leaf {
                weights[i as usize] += share;
            }
        }
    }

    /// Weight of every training response for query `x`; sums to one.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut w = vec![0.0; self.responses.len()];
        self.accumulate_weights(x, &mut w);
        Ok(w)
    }

    /// Reads each level in `alphas` off the weighted CDF: the smallest
    /// response whose cumulative weight reaches the level.
    fn read_quantiles(&self, weights: &[f64], alphas: &[f64]) -> Vec<f64> {
        let mut by_level: Vec<usize> = (0..alphas.len()).collect();
        by_level.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
        let mut out = vec![f64::NAN; alphas.len()];
        let mut next = 0;
        let mut cum = 0.0;
        let mut last = f64::NAN;
        for &i in &self.response_order {
            let w = weights[i as usize];
            if w == 0.0 {
                continue;
            }
            cum += w;
            last = self.responses[i as usize];
            while next < by_level.len() && cum + CDF_SLACK >= alphas[by_level[next]] {
                out[by_level[next]] = last;
                next += 1;
            }
            if next == by_level.len() {
                break;
            }
        }
        for &k in &by_level[next..] {
            out[k] = last;
        }
        out
    }

    fn check_alphas(alphas: &[f64]) -> Result<()> {
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidInput(format!(
                "quantile level {a} must lie in (0, 1)"
            )));
        }
        Ok(())
    }

    pub fn predict_quantile(&self, x: &[f64], alpha: f64) -> Result<f64> {
        Ok(self.predict_quantiles(x, &[alpha])?[0])
    }

    pub fn predict_quantiles(&self, x: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
        Self::check_alphas(alphas)?;
        let w = self.weights(x)?;
        Ok(self.read_quantiles(&w, alphas))
    }

    /// Quantiles for many queries at once; `out[i][k]` is level `alphas[k]`
    /// at query `i`. Identical queries share one CDF evaluation.
    pub fn predict_batch(&self, queries: &[&[f64]], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
        Self::check_alphas(alphas)?;
        for q in queries {
            self.check_dim(q)?;
        }
        let mut slot: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut uniques: Vec<&[f64]> = Vec::new();
        let assignment: Vec<usize> = queries
            .iter()
            .map(|q| {
                let key: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
                *slot.entry(key).or_insert_with(|| {
                    uniques.push(q);
                    uniques.len() - 1
                })
            })
            .collect();
        let answers: Vec<Vec<f64>> = uniques
            .par_iter()
            .map_init(
                || vec![0.0; self.responses.len()],
                |w, q| {
                    self.accumulate_weights(q, w);
                    self.read_quantiles(w, alphas)
                },
            )
            .collect();
        Ok(assignment.into_iter().map(|u| answers[u].clone()).collect())
    }
}

/// Fits a quantile regression forest.
pub fn fit_forest(
    features: &[FeatureVector],
    responses: &[f64],
    params: ForestParams,
) -> Result<Forest> {
    Forest::fit(features, responses, params)
}

/// Weighted empirical `alpha`-quantile of the responses sharing leaves with `x`.
pub fn predict_quantile(forest: &Forest, x: &[f64], alpha: f64) -> Result<f64> {
    forest.predict_quantile(x, alpha)
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    /// Split feature per node, `-1` for leaves.
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ForestRecord {
    params: ForestParams,
    dim: usize,
    features: Vec<f64>,
    responses: Vec<f64>,
    trees: Vec<TreeRecord>,
}

impl From<&Forest> for ForestRecord {
    fn from(forest: &Forest) -> Self {
        let trees = forest
            .trees
            .iter()
            .map(|t| {
                let mut rec = TreeRecord {
                    feature: Vec::with_capacity(t.nodes.len()),
                    threshold: Vec::with_capacity(t.nodes.len()),
                    left: Vec::with_capacity(t.nodes.len()),
                    right: Vec::with_capacity(t.nodes.len()),
                };
                for node in &t.nodes {
                    let (f, th, l, r) = match *node {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => (i64::from(feature), threshold, left, right),
                        Node::Leaf { .. } => (-1, 0.0, 0, 0),
                    };
                    rec.feature.push(f);
                    rec.threshold.push(th);
                    rec.left.push(l);
                    rec.right.push(r);
                }
                rec
            })
            .collect();
        Self {
            params: forest.params,
            dim: forest.dim,
            features: forest.features.clone(),
            responses: forest.responses.clone(),
            trees,
        }
    }
}

fn rebuild_tree(rec: TreeRecord, dim: usize, features: &[f64], n: usize) -> Result<Tree> {
    let count = rec.feature.len();
    if [rec.threshold.len(), rec.left.len(), rec.right.len()] != [count; 3] || count == 0 {
        return Err(Error::InvalidInput(
            "tree node arrays have inconsistent lengths".into(),
        ));
    }
    let mut nodes = Vec::with_capacity(count);
    for k in 0..count {
        nodes.push(if rec.feature[k] < 0 {
            Node::Leaf { start: 0, len: 0 }
        } else {
            let feature = rec.feature[k] as usize;
            let (left, right) = (rec.left[k], rec.right[k]);
            if feature >= dim
                || left as usize >= count
                || right as usize >= count
                || left as usize <= k
                || right as usize <= k
            {
                return Err(Error::InvalidInput(format!("malformed split node {k}")));
            }
            Node::Split {
                feature: feature as u32,
                threshold: rec.threshold[k],
                left,
                right,
            }
        });
    }
    let mut per_leaf: Vec<Vec<u32>> = vec![Vec::new(); count];
    for i in 0..n {
        let x = &features[i * dim..(i + 1) * dim];
        let mut id = 0usize;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = nodes[id]
        {
            id = if x[feature as usize] <= threshold {
                left
            } else {
                right
            } as usize;
        }
        per_leaf[id].push(i as u32);
    }
    // leaves laid out in the same left-first preorder that growth uses
    let mut members = Vec::with_capacity(n);
    let mut stack = vec![0usize];
    while let Some(k) = stack.pop() {
        match nodes[k] {
            Node::Split { left, right, .. } => {
                stack.push(right as usize);
                stack.push(left as usize);
            }
            Node::Leaf { .. } => {
                let rows = std::mem::take(&mut per_leaf[k]);
                if rows.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "leaf {k} holds no training rows"
                    )));
                }
                nodes[k] = Node::Leaf {
                    start: members.len() as u32,
                    len: rows.len() as u32,
                };
                members.extend(rows);
            }
        }
    }
    Ok(Tree { nodes, members })
}

impl TryFrom<ForestRecord> for Forest {
    type Error = Error;

    fn try_from(rec: ForestRecord) -> Result<Self> {
        rec.params.validate()?;
        let n = rec.responses.len();
        if rec.dim == 0 || rec.features.len() != n * rec.dim || n == 0 {
            return Err(Error::InvalidInput(
                "forest training data is malformed".into(),
            ));
        }
        if rec.trees.is_empty() {
            return Err(Error::InvalidInput("forest has no trees".into()));
        }
        let trees = rec
            .trees
            .into_iter()
            .map(|t| rebuild_tree(t, rec.dim, &rec.features, n))
            .collect::<Result<Vec<_>>>()?;
        let response_order = sort_by_response(&rec.responses);
        Ok(Self {
            params: rec.params,
            dim: rec.dim,
            features: rec.features,
            responses: rec.responses,
            response_order,
            trees,
        })
    }
}

impl Serialize for Forest {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        ForestRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Forest {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let rec = ForestRecord::deserialize(deserializer)?;
        Forest::try_from(rec).map_err(serde::de::Error::custom)
    }
}
