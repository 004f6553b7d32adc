//! Exact divergences between two tabular policies.
//!
//! All logarithms are natural. Token-level KL is `KL(roll || theta)` unless a
//! name says `rev`. A KL that violates absolute continuity is `f64::INFINITY`;
//! it propagates through maxima and sums instead of aborting, so TV-based
//! checks still run on support-collapsed pairs.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::float_json;
use crate::tabular_mdp::TabularPolicy;

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(LabError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

pub(crate) fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `sum_v p(v) ln(p(v) / q(v))`, skipping `p(v) = 0` and returning infinity
/// when `p(v) > 0 = q(v)`.
pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total.max(0.0)
}

/// Total variation `1/2 sum |p - q|`.
pub fn tv_token(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(tv_unchecked(p, q))
}

/// `KL(p_roll || p_theta)`; infinite when `p_theta` misses support of `p_roll`.
pub fn kl_token(p_roll: &[f64], p_theta: &[f64]) -> Result<f64> {
    check_lengths(p_roll, p_theta)?;
    Ok(kl_unchecked(p_roll, p_theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinskerGap {
    pub tv_sq: f64,
    #[serde(with = "float_json::scalar")]
    pub half_kl: f64,
    #[serde(with = "float_json::scalar")]
    pub gap: f64,
    #[serde(with = "float_json::scalar")]
    pub half_kl_rev: f64,
    #[serde(with = "float_json::scalar")]
    pub gap_rev: f64,
}

/// Pinsker slack `KL/2 - TV^2` in both KL directions.
pub fn pinsker_gap(p: &[f64], q: &[f64]) -> Result<PinskerGap> {
    check_lengths(p, q)?;
    let tv = tv_unchecked(p, q);
    let half_kl = 0.5 * kl_unchecked(p, q);
    let half_kl_rev = 0.5 * kl_unchecked(q, p);
    let tv_sq = tv * tv;
    Ok(PinskerGap {
        tv_sq,
        half_kl,
        gap: half_kl - tv_sq,
        half_kl_rev,
        gap_rev: half_kl_rev - tv_sq,
    })
}

/// Every divergence quantity the bounds consume.
///
/// Per-context arrays are indexed by node id; per-step arrays by `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_context_tv: Vec<f64>,
    #[serde(with = "float_json::vec")]
    pub per_context_kl: Vec<f64>,
    #[serde(with = "float_json::vec")]
    pub per_context_kl_rev: Vec<f64>,
    pub tv_tok_max: f64,
    #[serde(with = "float_json::scalar")]
    pub kl_tok_max: f64,
    #[serde(with = "float_json::scalar")]
    pub kl_tok_max_rev: f64,
    /// `E_{d_t^roll}[KL(c_t)]`.
    #[serde(with = "float_json::vec")]
    pub expected_step_kl: Vec<f64>,
    /// `KL(d_t^roll || d_t^theta)` computed directly on the marginals.
    #[serde(with = "float_json::vec")]
    pub marginal_kl: Vec<f64>,
    /// Partial sums `sum_{s<t} E_{d_s^roll}[KL(c_s)]`.
    #[serde(with = "float_json::vec")]
    pub marginal_kl_chain: Vec<f64>,
    /// `TV(d_t^roll, d_t^theta)`.
    pub marginal_tv: Vec<f64>,
    #[serde(with = "float_json::scalar")]
    pub seq_kl_chain: f64,
    #[serde(with = "float_json::scalar")]
    pub seq_kl_direct: f64,
    /// Chain-rule value; the one fed to bounds.
    #[serde(with = "float_json::scalar")]
    pub seq_kl: f64,
    pub kl_infinite: bool,
    pub kl_rev_infinite: bool,
}

impl DivergenceReport {
    /// Direction-symmetric variant: the smaller of the two directions' token maxima.
    pub fn kl_tok_max_min_direction(&self) -> f64 {
        self.kl_tok_max.min(self.kl_tok_max_rev)
    }

    pub fn seq_kl_discrepancy(&self) -> f64 {
        if self.seq_kl_chain.is_infinite() && self.seq_kl_direct.is_infinite() {
            0.0
        } else {
            (self.seq_kl_chain - self.seq_kl_direct).abs()
        }
    }

    /// Largest `|marginal_kl - marginal_kl_chain|` over steps.
    pub fn marginal_chain_discrepancy(&self) -> f64 {
        self.marginal_kl
            .iter()
            .zip(&self.marginal_kl_chain)
            .map(|(a, b)| {
                if a.is_infinite() && b.is_infinite() {
                    0.0
                } else {
                    (a - b).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

pub fn divergence_report(roll: &TabularPolicy, theta: &TabularPolicy) -> Result<DivergenceReport> {
    roll.check_same_tree(theta)?;
    let tree = roll.tree();
    let n = tree.num_nodes();
    let horizon = tree.horizon();

    let mut per_context_tv = Vec::with_capacity(n);
    let mut per_context_kl = Vec::with_capacity(n);
    let mut per_context_kl_rev = Vec::with_capacity(n);
    for c in 0..n {
        let (r, q) = (roll.row(c), theta.row(c));
        per_context_tv.push(tv_unchecked(q, r));
        per_context_kl.push(kl_unchecked(r, q));
        per_context_kl_rev.push(kl_unchecked(q, r));
    }
    let max = |xs: &[f64]| xs.iter().cloned().fold(0.0, f64::max);

    let mass_roll = roll.visitation();
    let mass_theta = theta.visitation();

    let mut expected_step_kl = Vec::with_capacity(horizon);
    let mut marginal_kl = Vec::with_capacity(horizon);
    let mut marginal_tv = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let ids = tree.depth_nodes(t)?;
        let mut step = 0.0;
        for &c in ids {
            // Unreachable contexts contribute nothing, even with infinite KL.
            if mass_roll[c] > 0.0 {
                step += mass_roll[c] * per_context_kl[c];
            }
        }
        expected_step_kl.push(step);
        let dr: Vec<f64> = ids.iter().map(|&c| mass_roll[c]).collect();
        let dq: Vec<f64> = ids.iter().map(|&c| mass_theta[c]).collect();
        marginal_kl.push(kl_unchecked(&dr, &dq));
        marginal_tv.push(tv_unchecked(&dr, &dq));
    }

    let mut marginal_kl_chain = Vec::with_capacity(horizon);
    let mut partial = 0.0;
    for step in &expected_step_kl {
        marginal_kl_chain.push(partial);
        partial += step;
    }
    let seq_kl_chain = partial;
    let seq_kl_direct = kl_unchecked(
        &roll.leaf_distribution_from(&mass_roll),
        &theta.leaf_distribution_from(&mass_theta),
    );

    let kl_tok_max = max(&per_context_kl);
    let kl_tok_max_rev = max(&per_context_kl_rev);
    Ok(DivergenceReport {
        tv_tok_max: max(&per_context_tv),
        kl_tok_max,
        kl_tok_max_rev,
        kl_infinite: kl_tok_max.is_infinite(),
        kl_rev_infinite: kl_tok_max_rev.is_infinite(),
        per_context_tv,
        per_context_kl,
        per_context_kl_rev,
        expected_step_kl,
        marginal_kl,
        marginal_kl_chain,
        marginal_tv,
        seq_kl_chain,
        seq_kl_direct,
        seq_kl: seq_kl_chain,
    })
}
