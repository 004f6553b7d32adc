//! Adversarial instances.
//!
//! The concentrated pair puts all of the divergence at one rarely visited
//! context `c*`, so the sequence-level KL shrinks with the visit probability
//! while the per-context maximum stays put. No function of the sequence KL
//! alone can bound the maximum. The token-masking demo shows that dropping
//! per-token gradient terms leaves both policies, and hence every divergence
//! and bound, untouched.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bounds::adaptive_bound;
use crate::divergence::{divergence_report, kl_unchecked};
use crate::error::{LabError, Result};
use crate::float_json;
use crate::objectives::{importance_ratio, surrogate_gradient};
use crate::perturbation::blend_toward_token;
use crate::tabular_mdp::{ContextTree, ProblemShape, RewardTable, TabularPolicy};

/// Upper end of the mixture weight; keeps the hot row strictly positive.
const MAX_BLEND: f64 = 1.0 - 1e-12;
const BISECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentratedPairSpec {
    /// Rollout visit probability of `c*`.
    pub epsilon: f64,
    #[serde(default = "unit")]
    pub hot_kl: f64,
    pub shape: ProblemShape,
}

fn unit() -> f64 {
    1.0
}

impl ConcentratedPairSpec {
    pub fn new(epsilon: f64, shape: ProblemShape) -> Self {
        Self {
            epsilon,
            hot_kl: 1.0,
            shape,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConcentratedPair {
    pub roll: TabularPolicy,
    pub theta: TabularPolicy,
    /// Node id of `c*`: the child of prompt 0's root through token 0.
    pub hot_context: usize,
}

fn blended_kl(base: &[f64], lambda: f64) -> f64 {
    let hot: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, p)| (1.0 - lambda) * p + if i == 0 { lambda } else { 0.0 })
        .collect();
    kl_unchecked(base, &hot)
}

/// Mixture weight `lambda` with `KL(base || (1 - lambda) base + lambda e_0) = target`.
fn solve_blend(base: &[f64], target: f64) -> Result<f64> {
    let max = blended_kl(base, MAX_BLEND);
    if !(target > 0.0) || target > max {
        return Err(LabError::InfeasibleKl { target, max });
    }
    let (mut lo, mut hi) = (0.0, MAX_BLEND);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if blended_kl(base, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Bracket endpoints differ by 1e-12 in lambda; pick the closer one.
    let (klo, khi) = (blended_kl(base, lo), blended_kl(base, hi));
    Ok(if (klo - target).abs() <= (khi - target).abs() { lo } else { hi })
}

/// Roll is uniform everywhere except prompt 0's root row, which sends
/// `epsilon / P(x0)` to token 0 and spreads the rest evenly. Theta equals roll
/// except at `c*`, whose row is blended toward token 0 until its KL is `hot_kl`.
pub fn build_concentrated_pair(spec: &ConcentratedPairSpec) -> Result<ConcentratedPair> {
    if !(spec.epsilon > 0.0 && spec.epsilon <= 1.0) {
        return Err(LabError::InvalidParameter(format!("epsilon {} outside (0, 1]", spec.epsilon)));
    }
    if spec.shape.horizon < 2 || spec.shape.vocab_size < 2 {
        return Err(LabError::InvalidShape("the concentrated pair needs V >= 2 and T >= 2".into()));
    }
    let p0 = spec.shape.prompts.first().map_or(0.0, |p| p.prob);
    if spec.epsilon > p0 {
        return Err(LabError::InvalidParameter(format!(
            "epsilon {} exceeds the probability {p0} of the first prompt",
            spec.epsilon
        )));
    }
    let tree = ContextTree::build(spec.shape.clone())?;
    let v = tree.vocab_size();
    let root = tree.prompt_root(0);
    let hot_context = tree.child(root, 0).expect("horizon >= 2");

    let mut probs = vec![1.0 / v as f64; tree.num_nodes() * v];
    let branch = (spec.epsilon / p0).min(1.0);
    let rest = (1.0 - branch) / (v - 1) as f64;
    for (i, p) in probs[root * v..(root + 1) * v].iter_mut().enumerate() {
        *p = if i == 0 { branch } else { rest };
    }
    let roll = TabularPolicy::from_probabilities(tree.clone(), probs)?;
    let lambda = solve_blend(roll.row(hot_context), spec.hot_kl)?;
    let theta = blend_toward_token(&roll, hot_context, 0, lambda)?;
    Ok(ConcentratedPair {
        roll,
        theta,
        hot_context,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentratedRow {
    pub epsilon: f64,
    pub seq_kl: f64,
    pub kl_tok_max: f64,
    pub classical: f64,
    pub pinsker_marginal: f64,
    pub mixed: f64,
}

pub fn concentrated_sweep(epsilons: &[f64], hot_kl: f64, shape: &ProblemShape) -> Result<Vec<ConcentratedRow>> {
    epsilons
        .iter()
        .map(|&epsilon| {
            let pair = build_concentrated_pair(&ConcentratedPairSpec {
                epsilon,
                hot_kl,
                shape: shape.clone(),
            })?;
            let div = divergence_report(&pair.roll, &pair.theta)?;
            let t = shape.horizon;
            Ok(ConcentratedRow {
                epsilon,
                seq_kl: div.seq_kl,
                kl_tok_max: div.kl_tok_max,
                classical: crate::bounds::classical_bound(t, div.kl_tok_max),
                pinsker_marginal: crate::bounds::pinsker_marginal_bound(t, div.kl_tok_max),
                mixed: crate::bounds::mixed_bound(t, div.kl_tok_max, div.seq_kl),
            })
        })
        .collect()
}

/// First epsilon whose concentrated pair has `f(seq_kl) < kl_tok_max`, i.e. a
/// pair that refutes `kl_tok_max <= f(seq_kl)`.
pub fn non_boundability_witness(
    f: impl Fn(f64) -> f64,
    epsilons: &[f64],
    hot_kl: f64,
    shape: &ProblemShape,
) -> Result<Option<ConcentratedRow>> {
    for row in concentrated_sweep(epsilons, hot_kl, shape)? {
        if f(row.seq_kl) < row.kl_tok_max {
            return Ok(Some(row));
        }
    }
    Ok(None)
}

/// Contexts whose per-token gradient terms are dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenMask {
    pub contexts: BTreeSet<usize>,
}

impl TokenMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(tree: &ContextTree) -> Self {
        Self {
            contexts: (0..tree.num_nodes()).collect(),
        }
    }

    pub fn of(contexts: impl IntoIterator<Item = usize>) -> Self {
        Self {
            contexts: contexts.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMaskingReport {
    pub masked_gradient: Vec<f64>,
    pub unmasked_gradient: Vec<f64>,
    pub gradient_changed: bool,
    #[serde(with = "float_json::scalar")]
    pub kl_tok_max_before: f64,
    #[serde(with = "float_json::scalar")]
    pub kl_tok_max_after: f64,
    #[serde(with = "float_json::scalar")]
    pub adaptive_bound_before: f64,
    #[serde(with = "float_json::scalar")]
    pub adaptive_bound_after: f64,
}

/// Exact `E_roll[(R - b) sum_t M_t rho_t grad log theta(y_t | c_t)]` with
/// `M_t = 0` at masked contexts, next to the unmasked gradient.
pub fn token_masking_demo(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    baseline: f64,
    mask: &TokenMask,
) -> Result<TokenMaskingReport> {
    let before = divergence_report(roll, theta)?;
    let tree = roll.tree();
    if let Some(&c) = mask.contexts.iter().find(|&&c| c >= tree.num_nodes()) {
        return Err(LabError::InvalidParameter(format!("masked context {c} is not in the tree")));
    }
    let vocab = tree.vocab_size();
    let mut masked_gradient = vec![0.0; tree.num_nodes() * vocab];
    for (leaf, p) in roll.leaf_distribution().into_iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let traj = tree.leaf_trajectory(leaf);
        let a = rewards.value(leaf) - baseline;
        for (&c, &y) in traj.contexts.iter().zip(&traj.tokens) {
            if mask.contexts.contains(&c) {
                continue;
            }
            let w = p * a * importance_ratio(theta.prob(c, y), roll.prob(c, y));
            let row = theta.row(c);
            for i in 0..vocab {
                let score = if i == y { 1.0 } else { 0.0 } - row[i];
                masked_gradient[c * vocab + i] += w * score;
            }
        }
    }
    let unmasked_gradient = surrogate_gradient(roll, theta, rewards, baseline)?;
    // Masking touches only the gradient sum; the divergences see the same two
    // policies through the same code path.
    let after = divergence_report(roll, theta)?;
    let horizon = tree.horizon();
    let gradient_changed = masked_gradient
        .iter()
        .zip(&unmasked_gradient)
        .any(|(a, b)| (a - b).abs() > 1e-12);
    Ok(TokenMaskingReport {
        gradient_changed,
        masked_gradient,
        unmasked_gradient,
        kl_tok_max_before: before.kl_tok_max,
        kl_tok_max_after: after.kl_tok_max,
        adaptive_bound_before: adaptive_bound(horizon, before.kl_tok_max, before.seq_kl),
        adaptive_bound_after: adaptive_bound(horizon, after.kl_tok_max, after.seq_kl),
    })
}
