//! Error bounds on the surrogate approximation and their empirical audit.
//!
//! | bound            | value                          | scaling   |
//! |------------------|--------------------------------|-----------|
//! | classical        | `T (T - 1) K`                  | `T^2`     |
//! | Pinsker-marginal | `4/3 T^(3/2) K`                | `T^(3/2)` |
//! | mixed            | `2 T sqrt(K S)`                | `T`       |
//!
//! `K` is the token-level KL maximum and `S` the sequence KL, both
//! `KL(roll || theta)`. The adaptive bound is the smaller of the last two and
//! feeds the minorizer `L - adaptive`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_report, DivergenceReport};
use crate::document::PairBundle;
use crate::error::{LabError, Result};
use crate::objectives::{advantage_table, error_decomposition_with, ObjectiveReport};
use crate::perturbation::{perturb, PerturbationSpec};
use crate::seed::derive_seed;
use crate::tabular_mdp::{random_softmax_policy, ContextTree, ProblemShape, RewardTable, TabularPolicy};
use crate::tolerance::{EQUALITY, INEQUALITY_SLACK, MARTINGALE, MINORIZER_POSITIVE, PDI_IDENTITY};

/// `a * b`, defined as zero when either factor is zero (so `0 * inf = 0`).
fn scaled(weight: f64, kl: f64) -> f64 {
    if weight == 0.0 || kl == 0.0 {
        0.0
    } else {
        weight * kl
    }
}

pub fn classical_bound(horizon: usize, kl_tok_max: f64) -> f64 {
    let t = horizon as f64;
    scaled(t * (t - 1.0), kl_tok_max)
}

pub fn pinsker_marginal_bound(horizon: usize, kl_tok_max: f64) -> f64 {
    let t = horizon as f64;
    scaled(4.0 / 3.0 * t.powf(1.5), kl_tok_max)
}

pub fn mixed_bound(horizon: usize, kl_tok_max: f64, kl_seq: f64) -> f64 {
    let t = horizon as f64;
    scaled(2.0 * t, scaled(kl_tok_max, kl_seq).sqrt())
}

pub fn adaptive_bound(horizon: usize, kl_tok_max: f64, kl_seq: f64) -> f64 {
    pinsker_marginal_bound(horizon, kl_tok_max).min(mixed_bound(horizon, kl_tok_max, kl_seq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub name: String,
    pub formula: String,
    pub scaling: String,
    pub value: f64,
}

/// The three bounds at a given `(T, K, S)`, in table order.
pub fn bound_table(horizon: usize, kl_tok_max: f64, kl_seq: f64) -> Vec<BoundRow> {
    let row = |name: &str, formula: &str, scaling: &str, value: f64| BoundRow {
        name: name.into(),
        formula: formula.into(),
        scaling: scaling.into(),
        value,
    };
    vec![
        row("Classical", "T(T-1)*K", "O(T^2)", classical_bound(horizon, kl_tok_max)),
        row(
            "Pinsker-Marginal",
            "(4/3)*T^(3/2)*K",
            "O(T^(3/2))",
            pinsker_marginal_bound(horizon, kl_tok_max),
        ),
        row("Mixed", "2T*sqrt(K*S)", "O(T)", mixed_bound(horizon, kl_tok_max, kl_seq)),
    ]
}

/// Least-squares slope of `ln f(T)` against `ln T`.
pub fn scaling_exponent(horizons: &[usize], f: impl Fn(usize) -> f64) -> f64 {
    let pts: Vec<(f64, f64)> = horizons
        .iter()
        .map(|&t| ((t as f64).ln(), f(t).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub horizon: usize,
    pub kl_tok_max: f64,
    pub kl_seq: f64,
    pub classical: f64,
    pub pinsker_marginal: f64,
    pub mixed: f64,
    pub adaptive: f64,
    pub surrogate_l: f64,
    /// `surrogate_l - adaptive`.
    pub minorizer: f64,
    pub actual_error: Option<f64>,
    /// Same bounds with the token maximum taken over the smaller KL direction.
    pub min_direction_kl_tok_max: f64,
    pub min_direction_adaptive: f64,
}

impl BoundReport {
    pub fn from_parts(horizon: usize, div: &DivergenceReport, obj: &ObjectiveReport) -> Self {
        let k = div.kl_tok_max;
        let s = div.seq_kl;
        let adaptive = adaptive_bound(horizon, k, s);
        let k_min = div.kl_tok_max_min_direction();
        Self {
            horizon,
            kl_tok_max: k,
            kl_seq: s,
            classical: classical_bound(horizon, k),
            pinsker_marginal: pinsker_marginal_bound(horizon, k),
            mixed: mixed_bound(horizon, k, s),
            adaptive,
            surrogate_l: obj.surrogate_l,
            minorizer: obj.surrogate_l - adaptive,
            actual_error: Some(obj.error),
            min_direction_kl_tok_max: k_min,
            min_direction_adaptive: adaptive_bound(horizon, k_min, s),
        }
    }

    /// Names of the bounds that `|actual_error|` exceeds by more than `slack`.
    pub fn violated_bounds(&self, slack: f64) -> Vec<&'static str> {
        let Some(err) = self.actual_error else {
            return Vec::new();
        };
        let err = err.abs();
        [
            ("classical", self.classical),
            ("pinsker_marginal", self.pinsker_marginal),
            ("mixed", self.mixed),
            ("min_direction_adaptive", self.min_direction_adaptive),
        ]
        .into_iter()
        .filter(|(_, b)| !(err <= b + slack))
        .map(|(n, _)| n)
        .collect()
    }
}

/// Bounds, surrogate and exact error for an enumerable pair; `b = J(roll)`.
pub fn bound_report(roll: &TabularPolicy, theta: &TabularPolicy, rewards: &RewardTable) -> Result<BoundReport> {
    let div = divergence_report(roll, theta)?;
    let obj = crate::objectives::error_decomposition(roll, theta, rewards)?;
    Ok(BoundReport::from_parts(roll.tree().horizon(), &div, &obj))
}

/// Every exact check run on one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAudit {
    pub bounds: BoundReport,
    pub j_roll: f64,
    pub j_theta: f64,
    pub pdi_residual: f64,
    pub seq_chain_discrepancy: f64,
    pub marginal_chain_discrepancy: f64,
    pub martingale_residual: f64,
    /// `max_c |g(c)| - 2 TV(c)`; nonpositive when the lemma holds.
    pub advantage_excess: f64,
    /// `max_t marginal_kl[t] - (t-1) K`.
    pub context_shift_excess: f64,
    /// `max_t marginal_tv[t] - (t-1) TV_max`.
    pub simulation_excess: f64,
    /// `max_t marginal_tv[t]^2 - marginal_kl[t] / 2`.
    pub marginal_pinsker_excess: f64,
    pub failed_checks: Vec<String>,
}

pub fn audit_pair(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    slack: f64,
) -> Result<PairAudit> {
    let tree = roll.tree();
    let horizon = tree.horizon();
    let div = divergence_report(roll, theta)?;
    let adv = advantage_table(roll, theta, rewards)?;
    let obj = error_decomposition_with(roll, theta, rewards, &adv)?;
    let bounds = BoundReport::from_parts(horizon, &div, &obj);

    let advantage_excess = adv
        .g
        .iter()
        .zip(&div.per_context_tv)
        .map(|(g, tv)| g.abs() - 2.0 * tv)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut context_shift_excess = f64::NEG_INFINITY;
    let mut simulation_excess = f64::NEG_INFINITY;
    let mut marginal_pinsker_excess = f64::NEG_INFINITY;
    for t in 1..=horizon {
        let shift = (t - 1) as f64;
        let kl = div.marginal_kl[t - 1];
        let tv = div.marginal_tv[t - 1];
        context_shift_excess = context_shift_excess.max(kl - scaled(shift, div.kl_tok_max));
        simulation_excess = simulation_excess.max(tv - shift * div.tv_tok_max);
        marginal_pinsker_excess = marginal_pinsker_excess.max(tv * tv - 0.5 * kl);
    }
    // Infinite marginal KL on both sides is consistent, not a violation.
    if context_shift_excess.is_nan() {
        context_shift_excess = 0.0;
    }

    let mut failed: Vec<String> = bounds
        .violated_bounds(slack)
        .into_iter()
        .map(|b| format!("bound:{b}"))
        .collect();
    let mut check = |ok: bool, name: &str| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    let seq_chain_discrepancy = div.seq_kl_discrepancy();
    let marginal_chain_discrepancy = div.marginal_chain_discrepancy();
    let martingale_residual = adv.martingale_residual(roll);
    let pdi_residual = obj.identity_residual();
    check(seq_chain_discrepancy <= EQUALITY, "chain_rule:sequence");
    check(marginal_chain_discrepancy <= EQUALITY, "chain_rule:marginal");
    check(martingale_residual <= MARTINGALE, "martingale");
    check(advantage_excess <= INEQUALITY_SLACK, "advantage_bound");
    check(pdi_residual <= PDI_IDENTITY, "pdi_identity");
    check(context_shift_excess <= slack, "context_shift");
    check(simulation_excess <= slack, "simulation_lemma");
    check(!(marginal_pinsker_excess > slack), "pinsker:marginal");
    check(
        !(bounds.minorizer > MINORIZER_POSITIVE) || obj.j_theta > obj.j_roll,
        "monotonic_improvement",
    );

    Ok(PairAudit {
        bounds,
        j_roll: obj.j_roll,
        j_theta: obj.j_theta,
        pdi_residual,
        seq_chain_discrepancy,
        marginal_chain_discrepancy,
        martingale_residual,
        advantage_excess,
        context_shift_excess,
        simulation_excess,
        marginal_pinsker_excess,
        failed_checks: failed,
    })
}

/// One block of generated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub vocab: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub prompts: usize,
    /// Logit scale of the random rollout policy.
    pub scale: f64,
    pub pairs: usize,
    /// When absent, theta is an independent random softmax policy of the same
    /// scale; otherwise theta is `perturb(roll, spec)`.
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub cells: Vec<SweepCell>,
    pub seed: u64,
    /// Slack on every bound inequality. Negative values force violations and
    /// exist to exercise the repro path.
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_slack() -> f64 {
    INEQUALITY_SLACK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub pair_index: usize,
    pub cell: usize,
    pub failed_checks: Vec<String>,
    pub bundle: PairBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessStat {
    pub bound: String,
    /// Largest `|error| / bound` over pairs with a nonzero bound.
    pub max_ratio: f64,
    pub evaluated: usize,
    /// Pairs whose bound is exactly zero (identical policies).
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub pairs: usize,
    pub tightness: Vec<TightnessStat>,
    pub max_seq_chain_discrepancy: f64,
    pub max_marginal_chain_discrepancy: f64,
    pub max_martingale_residual: f64,
    pub max_advantage_excess: f64,
    pub max_pdi_residual: f64,
    pub minorizer_positive: usize,
    pub violations: Vec<Violation>,
}

impl SweepSummary {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Per-pair seeds: `pair = derive_seed(root, index)` with sub-streams 0 (roll),
/// 1 (theta), 2 (rewards), 3 (perturbation). `index` counts pairs across cells
/// in declaration order.
fn generate_pair(cell: &SweepCell, tree: &std::sync::Arc<ContextTree>, pair_seed: u64) -> Result<PairBundle> {
    let roll = random_softmax_policy(tree.clone(), cell.scale, derive_seed(pair_seed, 0))?;
    let mut rewards = RewardTable::random(tree.clone(), derive_seed(pair_seed, 2));
    let theta = match &cell.perturbation {
        None => random_softmax_policy(tree.clone(), cell.scale, derive_seed(pair_seed, 1))?,
        Some(spec) => {
            let spec = PerturbationSpec {
                seed: derive_seed(pair_seed, 3),
                ..spec.clone()
            };
            perturb(&roll, &spec, Some(&rewards))?
        }
    };
    let j_roll = crate::objectives::true_objective(&roll, &rewards)?;
    rewards = rewards.with_baseline(j_roll);
    Ok(PairBundle::new(&roll, &theta, &rewards))
}

/// Generates and audits every pair of the sweep. Pairs are audited in
/// parallel; results are reduced in index order, so output does not depend on
/// the thread count.
pub fn dominance_sweep(config: &SweepConfig) -> Result<SweepSummary> {
    let mut jobs = Vec::new();
    for (ci, cell) in config.cells.iter().enumerate() {
        let shape = ProblemShape::uniform_prompts(cell.vocab, cell.horizon, cell.prompts)?;
        let tree = ContextTree::build(shape)?;
        for _ in 0..cell.pairs {
            let index = jobs.len();
            jobs.push((index, ci, tree.clone()));
        }
    }

    let results: Vec<Result<(PairAudit, Option<PairBundle>)>> = jobs
        .par_iter()
        .map(|(index, ci, tree)| {
            let cell = &config.cells[*ci];
            let bundle = generate_pair(cell, tree, derive_seed(config.seed, *index as u64))?;
            let (roll, theta, rewards) = bundle.materialize()?;
            let audit = audit_pair(&roll, &theta, &rewards, config.slack)?;
            let keep = (!audit.failed_checks.is_empty()).then_some(bundle);
            Ok((audit, keep))
        })
        .collect();

    let names = ["classical", "pinsker_marginal", "mixed", "adaptive"];
    let mut tightness: Vec<TightnessStat> = names
        .iter()
        .map(|n| TightnessStat {
            bound: n.to_string(),
            max_ratio: 0.0,
            evaluated: 0,
            skipped: 0,
        })
        .collect();
    let mut summary = SweepSummary {
        pairs: jobs.len(),
        tightness: Vec::new(),
        max_seq_chain_discrepancy: 0.0,
        max_marginal_chain_discrepancy: 0.0,
        max_martingale_residual: 0.0,
        max_advantage_excess: f64::NEG_INFINITY,
        max_pdi_residual: 0.0,
        minorizer_positive: 0,
        violations: Vec::new(),
    };
    for ((index, ci, _), res) in jobs.iter().zip(results) {
        let (audit, bundle) = res?;
        let b = &audit.bounds;
        let err = b.actual_error.unwrap_or(0.0).abs();
        for (stat, bound) in tightness
            .iter_mut()
            .zip([b.classical, b.pinsker_marginal, b.mixed, b.adaptive])
        {
            if bound > 0.0 && bound.is_finite() {
                stat.max_ratio = stat.max_ratio.max(err / bound);
                stat.evaluated += 1;
            } else {
                stat.skipped += 1;
            }
        }
        summary.max_seq_chain_discrepancy = summary.max_seq_chain_discrepancy.max(audit.seq_chain_discrepancy);
        summary.max_marginal_chain_discrepancy =
            summary.max_marginal_chain_discrepancy.max(audit.marginal_chain_discrepancy);
        summary.max_martingale_residual = summary.max_martingale_residual.max(audit.martingale_residual);
        summary.max_advantage_excess = summary.max_advantage_excess.max(audit.advantage_excess);
        summary.max_pdi_residual = summary.max_pdi_residual.max(audit.pdi_residual);
        if b.minorizer > MINORIZER_POSITIVE {
            summary.minorizer_positive += 1;
        }
        if let Some(bundle) = bundle {
            summary.violations.push(Violation {
                pair_index: *index,
                cell: *ci,
                failed_checks: audit.failed_checks,
                bundle,
            });
        }
    }
    summary.tightness = tightness;
    Ok(summary)
}

/// Re-runs the audit stored in a violation bundle.
pub fn replay(bundle: &PairBundle, slack: f64) -> Result<PairAudit> {
    let (roll, theta, rewards) = bundle.materialize()?;
    audit_pair(&roll, &theta, &rewards, slack)
}

pub fn validate_sweep(config: &SweepConfig) -> Result<()> {
    if config.cells.is_empty() {
        return Err(LabError::InvalidParameter("sweep has no cells".into()));
    }
    for cell in &config.cells {
        if !(cell.scale >= 0.0) {
            return Err(LabError::InvalidParameter(format!("negative scale {}", cell.scale)));
        }
    }
    Ok(())
}
