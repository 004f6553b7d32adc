//! Synthetic rollout/training mismatch.
//!
//! Three generators of `theta` from `roll`: smooth logit noise, routing flips
//! that move most of a row's top mass onto another token, and staleness as a
//! few exact surrogate-gradient steps. Each context draws from its own RNG
//! stream, so results do not depend on iteration order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::divergence::kl_unchecked;
use crate::error::{LabError, Result};
use crate::float_json;
use crate::objectives::{surrogate_gradient, true_objective};
use crate::seed::stream_rng;
use crate::tabular_mdp::{RewardTable, TabularPolicy};
use crate::trm::{leaf_path_max, sgd_step};

/// Per-token mass floor applied after a soft routing flip.
pub const FLIP_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    LogitNoise,
    RoutingFlip,
    Staleness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default = "default_collapse")]
    pub collapse_factor: f64,
    /// Move all of the top token's mass and skip the floor; KL may be infinite.
    #[serde(default)]
    pub hard: bool,
    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma() -> f64 {
    1e-3
}
fn default_flip_prob() -> f64 {
    0.3
}
fn default_collapse() -> f64 {
    0.889
}
fn default_k_steps() -> usize {
    3
}
fn default_lr() -> f64 {
    1.0
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind) -> Self {
        Self {
            kind,
            sigma: default_sigma(),
            flip_prob: default_flip_prob(),
            collapse_factor: default_collapse(),
            hard: false,
            k_steps: default_k_steps(),
            learning_rate: default_lr(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidParameter(msg));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma {} must be finite and nonnegative", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(self.collapse_factor > 0.0 && self.collapse_factor < 1.0) {
            return bad(format!("collapse_factor {} outside (0, 1)", self.collapse_factor));
        }
        if !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} is not finite", self.learning_rate));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        match self.kind {
            PerturbationKind::LogitNoise => self.sigma == 0.0,
            PerturbationKind::RoutingFlip => self.flip_prob == 0.0,
            PerturbationKind::Staleness => self.k_steps == 0 || self.learning_rate == 0.0,
        }
    }
}

pub fn perturb(roll: &TabularPolicy, spec: &PerturbationSpec, rewards: Option<&RewardTable>) -> Result<TabularPolicy> {
    spec.validate()?;
    if spec.kind == PerturbationKind::Staleness && rewards.is_none() {
        return Err(LabError::MissingRewards("staleness"));
    }
    if spec.kind != PerturbationKind::RoutingFlip && roll.logits().is_none() {
        return Err(LabError::MissingLogits("logit noise and staleness"));
    }
    if spec.is_identity() {
        return Ok(roll.clone());
    }
    match spec.kind {
        PerturbationKind::LogitNoise => logit_noise(roll, spec),
        PerturbationKind::RoutingFlip => routing_flip(roll, spec),
        PerturbationKind::Staleness => staleness(roll, spec, rewards.expect("checked above")),
    }
}

fn logit_noise(roll: &TabularPolicy, spec: &PerturbationSpec) -> Result<TabularPolicy> {
    let v = roll.tree().vocab_size();
    let mut z = roll.logits().expect("checked by perturb").to_vec();
    for (c, row) in z.chunks_mut(v).enumerate() {
        let mut rng = stream_rng(spec.seed, c as u64);
        for x in row {
            *x += spec.sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    TabularPolicy::from_logits(roll.tree().clone(), z)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Moves `factor` of the top token's mass onto token `to` and applies the floor.
pub(crate) fn flip_row(row: &[f64], to: usize, factor: f64, floor: bool) -> Vec<f64> {
    let top = argmax(row);
    let mut out = row.to_vec();
    let moved = row[top] * factor;
    out[top] -= moved;
    out[to] += moved;
    if floor {
        for p in &mut out {
            *p = p.max(FLIP_FLOOR);
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

fn routing_flip(roll: &TabularPolicy, spec: &PerturbationSpec) -> Result<TabularPolicy> {
    let tree = roll.tree().clone();
    let v = tree.vocab_size();
    let mut probs = roll.probabilities().to_vec();
    let mut logits = roll.logits().map(<[f64]>::to_vec);
    for c in 0..tree.num_nodes() {
        let mut rng = stream_rng(spec.seed, c as u64);
        if v < 2 || rng.random::<f64>() >= spec.flip_prob {
            continue;
        }
        let row = roll.row(c);
        let top = argmax(row);
        let mut to = rng.random_range(0..v - 1);
        if to >= top {
            to += 1;
        }
        let factor = if spec.hard { 1.0 } else { spec.collapse_factor };
        let flipped = flip_row(row, to, factor, !spec.hard);
        probs[c * v..(c + 1) * v].copy_from_slice(&flipped);
        if let Some(z) = logits.as_mut() {
            if flipped.iter().all(|p| *p > 0.0) {
                for (zi, p) in z[c * v..(c + 1) * v].iter_mut().zip(&flipped) {
                    *zi = p.ln();
                }
            } else {
                logits = None;
            }
        }
    }
    match logits {
        Some(z) => TabularPolicy::from_parts(tree, probs, z),
        None => TabularPolicy::from_probabilities(tree, probs),
    }
}

/// `k` exact surrogate-gradient ascent steps from `roll`, baseline `J(roll)`.
fn staleness(roll: &TabularPolicy, spec: &PerturbationSpec, rewards: &RewardTable) -> Result<TabularPolicy> {
    let baseline = true_objective(roll, rewards)?;
    let mut z = roll.logits().expect("checked by perturb").to_vec();
    let mut theta = roll.clone();
    for _ in 0..spec.k_steps {
        let grad = surrogate_gradient(roll, &theta, rewards, baseline)?;
        sgd_step(&mut z, &grad, spec.learning_rate);
        theta = TabularPolicy::from_logits(roll.tree().clone(), z.clone())?;
    }
    Ok(theta)
}

/// Replaces one context's row of `policy` by `(1 - lambda) row + lambda e_token`.
pub fn blend_toward_token(policy: &TabularPolicy, context: usize, token: usize, lambda: f64) -> Result<TabularPolicy> {
    let tree = policy.tree().clone();
    let v = tree.vocab_size();
    if context >= tree.num_nodes() || token >= v {
        return Err(LabError::InvalidParameter(format!("no token {token} at context {context}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LabError::InvalidParameter(format!("blend weight {lambda} outside [0, 1]")));
    }
    let mut probs = policy.probabilities().to_vec();
    for (i, p) in probs[context * v..(context + 1) * v].iter_mut().enumerate() {
        *p = (1.0 - lambda) * *p + if i == token { lambda } else { 0.0 };
    }
    TabularPolicy::from_probabilities(tree, probs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive lower edge (the first bin holds exact zeros only).
    pub lo: f64,
    #[serde(with = "float_json::scalar")]
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRatePoint {
    pub delta: f64,
    /// Rollout probability of trajectories whose max per-context KL is <= delta.
    pub accepted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchProfile {
    #[serde(with = "float_json::vec")]
    pub per_context_kl: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    #[serde(with = "float_json::scalar")]
    pub median_kl: f64,
    #[serde(with = "float_json::scalar")]
    pub max_kl: f64,
    pub infinite_contexts: usize,
    #[serde(with = "float_json::scalar")]
    pub rho_max: f64,
    pub rho_min: f64,
    pub mask_rate: Vec<MaskRatePoint>,
}

/// Log-spaced thresholds from 1e-6 to 10.
pub fn default_delta_grid() -> Vec<f64> {
    (-12..=2).map(|k| 10f64.powf(k as f64 / 2.0)).collect()
}

pub fn mismatch_profile(roll: &TabularPolicy, theta: &TabularPolicy, deltas: &[f64]) -> Result<MismatchProfile> {
    roll.check_same_tree(theta)?;
    let tree = roll.tree();
    let per_context_kl: Vec<f64> = (0..tree.num_nodes())
        .map(|c| kl_unchecked(roll.row(c), theta.row(c)))
        .collect();

    let mut edges = vec![0.0];
    edges.extend((-12..=2).map(|k| 10f64.powi(k)));
    edges.push(f64::INFINITY);
    let mut histogram: Vec<HistogramBin> = edges
        .windows(2)
        .map(|w| HistogramBin { lo: w[0], hi: w[1], count: 0 })
        .collect();
    for &kl in &per_context_kl {
        let bin = if kl == 0.0 {
            0
        } else {
            histogram
                .iter()
                .position(|b| b.lo > 0.0 && kl >= b.lo && kl < b.hi)
                .unwrap_or(histogram.len() - 1)
        };
        histogram[bin].count += 1;
    }

    let mut sorted = per_context_kl.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median_kl = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };

    let (mut rho_max, mut rho_min) = (f64::NEG_INFINITY, f64::INFINITY);
    for (r, t) in roll.probabilities().iter().zip(theta.probabilities()) {
        if *r > 0.0 {
            let rho = t / r;
            rho_max = rho_max.max(rho);
            rho_min = rho_min.min(rho);
        }
    }

    let leaf_max = leaf_path_max(roll, theta);
    let leaf_p = roll.leaf_distribution();
    let mask_rate = deltas
        .iter()
        .map(|&delta| MaskRatePoint {
            delta,
            accepted: leaf_p
                .iter()
                .zip(&leaf_max)
                .filter(|(_, m)| **m <= delta)
                .map(|(p, _)| p)
                .sum(),
        })
        .collect();

    Ok(MismatchProfile {
        infinite_contexts: per_context_kl.iter().filter(|k| k.is_infinite()).count(),
        max_kl: sorted.last().copied().unwrap_or(0.0),
        median_kl,
        per_context_kl,
        histogram,
        rho_max,
        rho_min,
        mask_rate,
    })
}
