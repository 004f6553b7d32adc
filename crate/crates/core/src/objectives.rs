//! True objective, surrogate, approximation error and gradient checks.
//!
//! The surrogate is the sum-of-ratios form `E_roll[(R - b) * sum_t rho_t]`.
//! Its error against `J(theta) - J(roll)` decomposes exactly into per-step
//! terms `E_{d_t^theta}[g_t] - E_{d_t^roll}[g_t]` when `b = J(roll)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tabular_mdp::{RewardTable, TabularPolicy};
use crate::tolerance::NORMALIZATION;

/// `theta_p / roll_p`; infinite when the rollout probability is zero.
pub fn importance_ratio(theta_p: f64, roll_p: f64) -> f64 {
    if roll_p > 0.0 {
        theta_p / roll_p
    } else {
        f64::INFINITY
    }
}

pub fn true_objective(policy: &TabularPolicy, rewards: &RewardTable) -> Result<f64> {
    rewards.check_policy(policy)?;
    Ok(policy
        .leaf_distribution()
        .iter()
        .zip(rewards.values())
        .map(|(p, r)| p * r)
        .sum())
}

/// `sum_t rho_t` along the path to every leaf; infinite where a ratio is.
pub(crate) fn leaf_ratio_sums(roll: &TabularPolicy, theta: &TabularPolicy) -> Vec<f64> {
    let tree = roll.tree();
    let v = tree.vocab_size();
    let mut prefix = vec![0.0; tree.num_nodes()];
    for (id, node) in tree.nodes().iter().enumerate() {
        if let (Some(p), Some(tok)) = (node.parent, node.token) {
            prefix[id] = prefix[p] + importance_ratio(theta.prob(p, tok), roll.prob(p, tok));
        }
    }
    let mut out = Vec::with_capacity(tree.num_leaves());
    for &c in tree.depth_nodes(tree.horizon()).expect("horizon >= 1") {
        for tok in 0..v {
            out.push(prefix[c] + importance_ratio(theta.prob(c, tok), roll.prob(c, tok)));
        }
    }
    out
}

/// Exact `L = E_roll[(R - b) sum_t rho_t]` over all leaves. Leaves the
/// rollout policy never reaches carry no weight.
pub fn surrogate(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    baseline: f64,
) -> Result<f64> {
    roll.check_same_tree(theta)?;
    rewards.check_policy(roll)?;
    let ratios = leaf_ratio_sums(roll, theta);
    Ok(roll
        .leaf_distribution()
        .iter()
        .zip(rewards.values())
        .zip(&ratios)
        .filter(|((p, _), _)| **p > 0.0)
        .map(|((p, r), s)| p * (r - baseline) * s)
        .sum())
}

/// Per-step advantages of the rollout policy, indexed like policy tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    /// `Q(c, y) = E_roll[R | c, y]`, node-major.
    pub q: Vec<f64>,
    /// `V(c) = E_roll[R | c]`.
    pub v: Vec<f64>,
    /// `A(c, y) = Q(c, y) - V(c)`.
    pub a: Vec<f64>,
    /// `g(c) = E_{y ~ theta}[A(c, y)]`.
    pub g: Vec<f64>,
}

impl AdvantageTable {
    /// Largest `|E_{y ~ roll}[A(c, y)]|` over contexts.
    pub fn martingale_residual(&self, roll: &TabularPolicy) -> f64 {
        let vocab = roll.tree().vocab_size();
        (0..self.v.len())
            .map(|c| {
                roll.row(c)
                    .iter()
                    .zip(&self.a[c * vocab..(c + 1) * vocab])
                    .map(|(p, a)| p * a)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Backward induction over the tree.
pub fn advantage_table(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
) -> Result<AdvantageTable> {
    roll.check_same_tree(theta)?;
    rewards.check_policy(roll)?;
    let tree = roll.tree();
    let vocab = tree.vocab_size();
    let n = tree.num_nodes();
    let mut q = vec![0.0; n * vocab];
    let mut v = vec![0.0; n];
    // Children have larger ids than their parent, so reverse order is bottom-up.
    for c in (0..n).rev() {
        for tok in 0..vocab {
            q[c * vocab + tok] = match tree.child(c, tok) {
                Some(child) => v[child],
                None => rewards.value(tree.leaf_index(c, tok)),
            };
        }
        v[c] = roll
            .row(c)
            .iter()
            .zip(&q[c * vocab..(c + 1) * vocab])
            .map(|(p, x)| p * x)
            .sum();
    }
    let a: Vec<f64> = (0..n * vocab).map(|i| q[i] - v[i / vocab]).collect();
    let g = (0..n)
        .map(|c| {
            theta
                .row(c)
                .iter()
                .zip(&a[c * vocab..(c + 1) * vocab])
                .map(|(p, x)| p * x)
                .sum()
        })
        .collect();
    Ok(AdvantageTable { q, v, a, g })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub j_roll: f64,
    pub j_theta: f64,
    pub baseline: f64,
    pub surrogate_l: f64,
    /// `j_theta - j_roll - surrogate_l`.
    pub error: f64,
    /// `E_{d_t^theta}[g_t] - E_{d_t^roll}[g_t]` for `t = 1..=T`.
    pub pdi_terms: Vec<f64>,
    pub pdi_error: f64,
}

impl ObjectiveReport {
    pub fn identity_residual(&self) -> f64 {
        (self.error - self.pdi_error).abs()
    }
}

/// Direct error and its performance-difference decomposition, with the
/// surrogate baseline fixed at `J(roll)`.
pub fn error_decomposition(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
) -> Result<ObjectiveReport> {
    let adv = advantage_table(roll, theta, rewards)?;
    error_decomposition_with(roll, theta, rewards, &adv)
}

pub(crate) fn error_decomposition_with(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    adv: &AdvantageTable,
) -> Result<ObjectiveReport> {
    let j_roll = true_objective(roll, rewards)?;
    let j_theta = true_objective(theta, rewards)?;
    let surrogate_l = surrogate(roll, theta, rewards, j_roll)?;
    let tree = roll.tree();
    let mass_roll = roll.visitation();
    let mass_theta = theta.visitation();
    let mut pdi_terms = Vec::with_capacity(tree.horizon());
    for t in 1..=tree.horizon() {
        let term: f64 = tree
            .depth_nodes(t)?
            .iter()
            .map(|&c| (mass_theta[c] - mass_roll[c]) * adv.g[c])
            .sum();
        pdi_terms.push(term);
    }
    Ok(ObjectiveReport {
        j_roll,
        j_theta,
        baseline: j_roll,
        surrogate_l,
        error: j_theta - j_roll - surrogate_l,
        pdi_error: pdi_terms.iter().sum(),
        pdi_terms,
    })
}

/// Exact gradient of the surrogate with respect to the logits of `theta`.
///
/// Score-function form `E_roll[(R - b) sum_t rho_t grad log theta(y_t | c_t)]`
/// collapsed per context to
/// `d_roll(c) * theta(v|c) * ((Q(c,v) - b) - E_{y~theta}[Q(c,y) - b])`.
pub fn surrogate_gradient(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    baseline: f64,
) -> Result<Vec<f64>> {
    let adv = advantage_table(roll, theta, rewards)?;
    let tree = roll.tree();
    let vocab = tree.vocab_size();
    let mass = roll.visitation();
    let mut grad = vec![0.0; tree.num_nodes() * vocab];
    for c in 0..tree.num_nodes() {
        if mass[c] == 0.0 {
            continue;
        }
        let row = theta.row(c);
        let q = &adv.q[c * vocab..(c + 1) * vocab];
        let mean: f64 = row.iter().zip(q).map(|(p, x)| p * (x - baseline)).sum();
        for tok in 0..vocab {
            grad[c * vocab + tok] = mass[c] * row[tok] * ((q[tok] - baseline) - mean);
        }
    }
    Ok(grad)
}

/// Central-difference gradient of `J` with respect to a logit table.
pub fn objective_gradient_fd(
    template: &TabularPolicy,
    logits: &[f64],
    rewards: &RewardTable,
    step: f64,
) -> Result<Vec<f64>> {
    let tree = template.tree().clone();
    let mut work = logits.to_vec();
    let j_at = |work: &[f64]| -> Result<f64> {
        let pi = TabularPolicy::from_logits(tree.clone(), work.to_vec())?;
        true_objective(&pi, rewards)
    };
    let mut grad = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let base = work[i];
        work[i] = base + step;
        let up = j_at(&work)?;
        work[i] = base - step;
        let down = j_at(&work)?;
        work[i] = base;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Step used for the third-difference estimate of the truncation constant.
const THIRD_DIFFERENCE_STEP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOffender {
    pub context: usize,
    pub token: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub step: f64,
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub max_abs_error: f64,
    /// Estimated `C` in the `C h^2` truncation term.
    pub truncation_constant: f64,
    /// `C h^2 + 1e-8`.
    pub tolerance: f64,
    pub richardson: bool,
    pub passed: bool,
    /// Largest discrepancies first, at most five.
    pub worst: Vec<GradientOffender>,
}

/// Analytic surrogate gradient vs. finite-difference objective gradient at
/// the reference point `theta = roll`.
pub fn gradient_check(
    roll: &TabularPolicy,
    theta_logits: &[f64],
    rewards: &RewardTable,
    step: f64,
) -> Result<GradientCheckReport> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(LabError::StepTooSmall {
            step,
            reason: "step must be positive and finite".into(),
        });
    }
    let tree = roll.tree().clone();
    let vocab = tree.vocab_size();
    let theta = TabularPolicy::from_logits(tree.clone(), theta_logits.to_vec())?;
    if let Some(i) = theta
        .probabilities()
        .iter()
        .zip(roll.probabilities())
        .position(|(a, b)| (a - b).abs() > NORMALIZATION)
    {
        return Err(LabError::InvalidParameter(format!(
            "gradient check requires theta = roll; context {} differs",
            i / vocab
        )));
    }

    let j_ref = true_objective(&theta, rewards)?;
    let analytic = surrogate_gradient(roll, &theta, rewards, j_ref)?;
    let fd_h = objective_gradient_fd(&theta, theta_logits, rewards, step)?;

    // Roundoff floor of a central difference: eps * |J| / h.
    let roundoff = f64::EPSILON * j_ref.abs().max(1.0) / step;
    let third = third_derivatives(&theta, theta_logits, rewards)?;
    let truncation_constant = third.iter().fold(0.0f64, |m, x| m.max(x.abs())) / 6.0;
    let tolerance = truncation_constant * step * step + 1e-8;

    if roundoff > tolerance {
        let fd_2h = objective_gradient_fd(&theta, theta_logits, rewards, 2.0 * step)?;
        let fd_4h = objective_gradient_fd(&theta, theta_logits, rewards, 4.0 * step)?;
        let near = max_abs_diff(&fd_h, &fd_2h);
        let far = max_abs_diff(&fd_2h, &fd_4h);
        if near > far {
            return Err(LabError::StepTooSmall {
                step,
                reason: format!(
                    "differences oscillate ({near:.3e} at h vs {far:.3e} at 2h); roundoff {roundoff:.3e} exceeds tolerance {tolerance:.3e}"
                ),
            });
        }
    }

    let mut finite_difference = fd_h;
    let mut max_abs_error = max_abs_diff(&analytic, &finite_difference);
    let mut richardson = false;
    if max_abs_error > tolerance {
        let fd_half = objective_gradient_fd(&theta, theta_logits, rewards, step / 2.0)?;
        finite_difference = fd_half
            .iter()
            .zip(&finite_difference)
            .map(|(half, full)| (4.0 * half - full) / 3.0)
            .collect();
        max_abs_error = max_abs_diff(&analytic, &finite_difference);
        richardson = true;
    }

    let mut worst: Vec<GradientOffender> = analytic
        .iter()
        .zip(&finite_difference)
        .enumerate()
        .map(|(i, (&a, &f))| GradientOffender {
            context: i / vocab,
            token: i % vocab,
            analytic: a,
            finite_difference: f,
            abs_error: (a - f).abs(),
        })
        .collect();
    worst.sort_by(|x, y| y.abs_error.total_cmp(&x.abs_error));
    worst.truncate(5);

    Ok(GradientCheckReport {
        step,
        analytic,
        finite_difference,
        max_abs_error,
        truncation_constant,
        tolerance,
        richardson,
        passed: max_abs_error <= tolerance,
        worst,
    })
}

fn third_derivatives(
    theta: &TabularPolicy,
    logits: &[f64],
    rewards: &RewardTable,
) -> Result<Vec<f64>> {
    let h = THIRD_DIFFERENCE_STEP;
    let tree = theta.tree().clone();
    let mut work = logits.to_vec();
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let base = work[i];
        let mut at = |offset: f64| -> Result<f64> {
            work[i] = base + offset;
            let pi = TabularPolicy::from_logits(tree.clone(), work.clone())?;
            true_objective(&pi, rewards)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        work[i] = base;
        out.push((p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * h * h * h));
    }
    Ok(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::divergence_report;
    use crate::tabular_mdp::{random_softmax_policy, ContextTree, ProblemShape};
    use std::sync::Arc;

    fn setup(v: usize, t: usize, prompts: usize, seed: u64) -> (TabularPolicy, TabularPolicy, RewardTable) {
        let tree = ContextTree::build(ProblemShape::uniform_prompts(v, t, prompts).unwrap()).unwrap();
        let roll = random_softmax_policy(tree.clone(), 1.0, seed).unwrap();
        let theta = random_softmax_policy(tree.clone(), 1.0, seed + 1000).unwrap();
        let rewards = RewardTable::random(tree, seed + 2000);
        (roll, theta, rewards)
    }

    /// `Q(c, y)` by summing over every leaf below `(c, y)`.
    fn q_by_enumeration(roll: &TabularPolicy, rewards: &RewardTable) -> Vec<f64> {
        let tree = roll.tree();
        let vocab = tree.vocab_size();
        let mut num = vec![0.0; tree.num_nodes() * vocab];
        let mut den = vec![0.0; tree.num_nodes() * vocab];
        for leaf in 0..tree.num_leaves() {
            let traj = tree.leaf_trajectory(leaf);
            for (k, (&c, &y)) in traj.contexts.iter().zip(&traj.tokens).enumerate() {
                let tail: f64 = traj.contexts[k + 1..]
                    .iter()
                    .zip(&traj.tokens[k + 1..])
                    .map(|(&c2, &y2)| roll.prob(c2, y2))
                    .product();
                num[c * vocab + y] += tail * rewards.value(leaf);
                den[c * vocab + y] += tail;
            }
        }
        num.iter().zip(&den).map(|(n, d)| n / d).collect()
    }

    #[test]
    fn constant_reward_normalizes() {
        let (roll, theta, _) = setup(3, 3, 2, 1);
        let ones = RewardTable::constant(roll.tree().clone(), 1.0).unwrap();
        assert!((true_objective(&theta, &ones).unwrap() - 1.0).abs() < 1e-12);
        let adv = advantage_table(&roll, &theta, &ones).unwrap();
        assert!(adv.a.iter().all(|a| a.abs() < 1e-12));
        assert!(adv.g.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn deterministic_policy_earns_its_path_reward() {
        let tree = ContextTree::build(ProblemShape::single_prompt(2, 2).unwrap()).unwrap();
        let mut probs = vec![0.0; tree.num_nodes() * 2];
        for c in 0..tree.num_nodes() {
            probs[c * 2] = 1.0;
        }
        let pi = TabularPolicy::from_probabilities(tree.clone(), probs).unwrap();
        let rewards = RewardTable::new(tree, vec![0.7, 0.1, 0.2, 0.3], 0.0).unwrap();
        assert_eq!(true_objective(&pi, &rewards).unwrap(), 0.7);
    }

    #[test]
    fn surrogate_at_reference_is_horizon_times_advantage() {
        let (roll, _, rewards) = setup(2, 3, 1, 4);
        let j = true_objective(&roll, &rewards).unwrap();
        let l = surrogate(&roll, &roll, &rewards, 0.25).unwrap();
        assert!((l - 3.0 * (j - 0.25)).abs() < 1e-12);
        assert!(surrogate(&roll, &roll, &rewards, j).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_step_surrogate_is_theta_expectation() {
        let (roll, theta, rewards) = setup(3, 1, 1, 9);
        let b = 0.4;
        let l = surrogate(&roll, &theta, &rewards, b).unwrap();
        let direct: f64 = (0..3).map(|y| theta.prob(0, y) * (rewards.value(y) - b)).sum();
        assert!((l - direct).abs() < 1e-14);
    }

    #[test]
    fn backward_induction_matches_enumeration() {
        let (roll, theta, rewards) = setup(3, 3, 2, 12);
        let adv = advantage_table(&roll, &theta, &rewards).unwrap();
        let oracle = q_by_enumeration(&roll, &rewards);
        for (a, b) in adv.q.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(adv.martingale_residual(&roll) < 1e-12);
        assert!(adv.a.iter().all(|a| a.abs() <= 1.0));
    }

    #[test]
    fn advantage_bounded_by_twice_tv() {
        let (roll, theta, rewards) = setup(3, 3, 1, 21);
        let adv = advantage_table(&roll, &theta, &rewards).unwrap();
        let div = divergence_report(&roll, &theta).unwrap();
        for (g, tv) in adv.g.iter().zip(&div.per_context_tv) {
            assert!(g.abs() <= 2.0 * tv + 1e-12);
        }
    }

    #[test]
    fn identical_policies_have_zero_error() {
        let (roll, _, rewards) = setup(2, 4, 1, 2);
        let rep = error_decomposition(&roll, &roll, &rewards).unwrap();
        assert!(rep.error.abs() < 1e-12);
        assert!(rep.pdi_terms.iter().all(|x| x.abs() < 1e-12));
        let adv = advantage_table(&roll, &roll, &rewards).unwrap();
        assert!(adv.g.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn pdi_identity_holds() {
        for seed in 0..20 {
            let (roll, theta, rewards) = setup(3, 3, 2, seed);
            let rep = error_decomposition(&roll, &theta, &rewards).unwrap();
            assert!(rep.identity_residual() < 1e-9, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn single_step_gradient_has_closed_form() {
        let (roll, _, rewards) = setup(2, 1, 1, 33);
        let logits = roll.logits().unwrap().to_vec();
        let rep = gradient_check(&roll, &logits, &rewards, 1e-4).unwrap();
        // d/dz_v sum_y pi(y) R(y) = pi(v) (R(v) - J)
        let j = true_objective(&roll, &rewards).unwrap();
        for v in 0..2 {
            let closed = roll.prob(0, v) * (rewards.value(v) - j);
            assert!((rep.analytic[v] - closed).abs() < 1e-14);
            assert!((rep.finite_difference[v] - closed).abs() < 1e-8);
        }
        assert!(rep.passed);
    }

    #[test]
    fn constant_reward_gradients_vanish() {
        let (roll, _, _) = setup(2, 3, 1, 5);
        let ones = RewardTable::constant(roll.tree().clone(), 0.5).unwrap();
        let rep = gradient_check(&roll, roll.logits().unwrap(), &ones, 1e-4).unwrap();
        assert!(rep.analytic.iter().all(|g| g.abs() < 1e-12));
        assert!(rep.max_abs_error < 1e-8);
    }

    #[test]
    fn gradient_check_rejects_bad_steps_and_off_reference_points() {
        let (roll, theta, rewards) = setup(2, 2, 1, 6);
        assert!(matches!(
            gradient_check(&roll, roll.logits().unwrap(), &rewards, 0.0),
            Err(LabError::StepTooSmall { .. })
        ));
        assert!(gradient_check(&roll, theta.logits().unwrap(), &rewards, 1e-4).is_err());
        assert!(matches!(
            gradient_check(&roll, roll.logits().unwrap(), &rewards, 1e-13),
            Err(LabError::StepTooSmall { .. })
        ));
    }

    #[test]
    fn error_vanishes_faster_than_step() {
        let (roll, dir, rewards) = setup(2, 3, 1, 8);
        let tree: Arc<_> = roll.tree().clone();
        let base = roll.logits().unwrap();
        let direction = dir.logits().unwrap();
        let ratio = |eta: f64| {
            let z: Vec<f64> = base.iter().zip(direction).map(|(a, d)| a + eta * d).collect();
            let theta = TabularPolicy::from_logits(tree.clone(), z).unwrap();
            error_decomposition(&roll, &theta, &rewards).unwrap().error.abs() / eta
        };
        let mut prev = ratio(0.02);
        let mut eta = 0.01;
        for _ in 0..4 {
            let cur = ratio(eta);
            assert!(cur <= 0.6 * prev, "eta {eta}: {cur} vs {prev}");
            prev = cur;
            eta /= 2.0;
        }
    }
}
