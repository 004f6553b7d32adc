//! Trust Region Masking.
//!
//! A sampled sequence is kept only if every visited context satisfies the
//! trust region; rejected sequences contribute nothing to the gradient, and the
//! gradient is normalized by the full batch size `N`. With exact per-context
//! KL the max criterion is a certificate; the sample-based detectors
//! (`|log rho|` for max, `k3` for average) are approximate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounds::{adaptive_bound, mixed_bound, pinsker_marginal_bound};
use crate::divergence::{divergence_report, kl_token, kl_unchecked};
use crate::error::{LabError, Result};
use crate::float_json;
use crate::objectives::{importance_ratio, leaf_ratio_sums, surrogate, true_objective};
use crate::perturbation::{perturb, PerturbationSpec};
use crate::seed::derive_seed;
use crate::tolerance::MINORIZER_POSITIVE;
use crate::tabular_mdp::{random_softmax_policy, ContextTree, ProblemShape, RewardTable, TabularPolicy, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `-log rho`
    K1,
    /// `rho - 1 - log rho`
    K3,
    /// `|log rho|`
    AbsLog,
}

impl Estimator {
    pub fn apply(self, rho: f64) -> f64 {
        match self {
            Estimator::K1 => 0.0 - rho.ln(),
            Estimator::K3 => rho - 1.0 - rho.ln(),
            Estimator::AbsLog => rho.ln().abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSample {
    pub rho: f64,
    pub k1: f64,
    pub k3: f64,
    pub abs_log: f64,
}

pub fn estimator_values(rho: f64) -> Result<EstimatorSample> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(LabError::InvalidRatio(rho));
    }
    Ok(EstimatorSample {
        rho,
        k1: Estimator::K1.apply(rho),
        k3: Estimator::K3.apply(rho),
        abs_log: Estimator::AbsLog.apply(rho),
    })
}

/// Ratios of the k1/k3 reference table.
pub const ESTIMATOR_TABLE_RATIOS: [f64; 5] = [0.5, 1.0, 2.0, 10.0, 100.0];

/// Exact `E_{v ~ roll}[f(theta(v) / roll(v))]`.
pub fn estimator_expectation(roll_row: &[f64], theta_row: &[f64], which: Estimator) -> Result<f64> {
    // Length and support checks shared with kl_token.
    if kl_token(roll_row, theta_row)?.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(roll_row
        .iter()
        .zip(theta_row)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, t)| r * which.apply(t / r))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipCell {
    /// `rho > 1 + eps`, `A > 0`
    HighRatioPositive,
    /// `rho < 1 - eps`, `A < 0`
    LowRatioNegative,
    /// `rho > 1 + eps`, `A < 0`
    HighRatioNegative,
    /// `rho < 1 - eps`, `A > 0`
    LowRatioPositive,
    /// Ratio inside the clip range, or zero advantage.
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selected {
    Clipped,
    Unclipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub value: f64,
    /// Derivative of the per-token objective with respect to `rho`.
    pub grad: f64,
    pub cell: ClipCell,
    pub selected: Selected,
}

/// `min(rho A, clip(rho, 1 - eps, 1 + eps) A)` with its derivative in `rho`.
pub fn ppo_clip_value_and_grad(rho: f64, advantage: f64, epsilon: f64) -> Result<ClipEval> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(LabError::InvalidParameter(format!("clip epsilon {epsilon} outside (0, 1)")));
    }
    if !(rho >= 0.0) || !advantage.is_finite() {
        return Err(LabError::InvalidRatio(rho));
    }
    let (lo, hi) = (1.0 - epsilon, 1.0 + epsilon);
    let unclipped = rho * advantage;
    let clipped = rho.clamp(lo, hi) * advantage;
    let cell = match (rho, advantage) {
        (r, a) if r > hi && a > 0.0 => ClipCell::HighRatioPositive,
        (r, a) if r < lo && a < 0.0 => ClipCell::LowRatioNegative,
        (r, a) if r > hi && a < 0.0 => ClipCell::HighRatioNegative,
        (r, a) if r < lo && a > 0.0 => ClipCell::LowRatioPositive,
        _ => ClipCell::Interior,
    };
    let (value, grad, selected) = if clipped < unclipped {
        (clipped, 0.0, Selected::Clipped)
    } else {
        (unclipped, advantage, Selected::Unclipped)
    };
    Ok(ClipEval {
        value,
        grad,
        cell,
        selected,
    })
}

/// Exact `KL(roll(.|c_t) || theta(.|c_t))` at each visited context.
pub fn per_position_kls(roll: &TabularPolicy, theta: &TabularPolicy, traj: &Trajectory) -> Result<Vec<f64>> {
    roll.check_same_tree(theta)?;
    roll.tree().check_trajectory(traj)?;
    Ok(traj
        .contexts
        .iter()
        .map(|&c| kl_unchecked(roll.row(c), theta.row(c)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSource {
    /// Full-vocabulary KL at each visited context.
    Exact,
    /// Single-sample detectors: `|log rho|` for max, `k3` for average.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub source: KlSource,
    /// Max-criterion threshold.
    pub delta: Option<f64>,
    /// Average-criterion threshold; combined with `delta` by conjunction.
    pub delta_avg: Option<f64>,
}

impl MaskConfig {
    pub fn exact_max(delta: f64) -> Self {
        Self {
            source: KlSource::Exact,
            delta: Some(delta),
            delta_avg: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta.is_none() && self.delta_avg.is_none() {
            return Err(LabError::InvalidParameter(
                "masking needs a max threshold, an average threshold, or both".into(),
            ));
        }
        for d in self.delta.iter().chain(&self.delta_avg) {
            if !(*d >= 0.0) {
                return Err(LabError::InvalidParameter(format!("threshold {d} is negative")));
            }
        }
        Ok(())
    }

    /// Only the exact max criterion certifies `max_t KL <= delta`.
    pub fn guaranteed(&self) -> bool {
        self.source == KlSource::Exact && self.delta.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub advantage: f64,
    /// Importance ratio of the sampled token at each position.
    #[serde(with = "float_json::vec")]
    pub rho: Vec<f64>,
    #[serde(with = "float_json::vec")]
    pub per_position_kl: Vec<f64>,
    pub mask_max: Option<bool>,
    pub mask_avg: Option<bool>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub sequences: Vec<MaskedSequence>,
    pub config: MaskConfig,
    pub n_total: usize,
    pub n_accepted: usize,
    /// True for sample-based detectors or when the max criterion is absent.
    pub approximate: bool,
}

impl MaskedBatch {
    pub fn mask_rate(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_accepted as f64 / self.n_total as f64
        }
    }

    /// Largest exact per-position KL among accepted sequences.
    pub fn max_kl_accepted(&self) -> Option<f64> {
        self.sequences
            .iter()
            .filter(|s| s.accepted)
            .flat_map(|s| s.per_position_kl.iter().cloned())
            .reduce(f64::max)
    }

    /// `(1/N) sum_i M_i A_i sum_t rho_t`.
    pub fn surrogate_estimate(&self) -> f64 {
        if self.n_total == 0 {
            return 0.0;
        }
        self.sequences
            .iter()
            .filter(|s| s.accepted)
            .map(|s| s.advantage * s.rho.iter().sum::<f64>())
            .sum::<f64>()
            / self.n_total as f64
    }
}

fn criterion(stats: &[f64], threshold: Option<f64>, reduce: fn(&[f64]) -> f64) -> Option<bool> {
    threshold.map(|d| {
        let value = reduce(stats);
        value.is_finite() && value <= d
    })
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::NEG_INFINITY, |m, x| if x.is_nan() { f64::NAN } else { m.max(x) })
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Computes per-position statistics and masks for a sampled batch.
pub fn apply_masks(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    baseline: f64,
    trajectories: &[Trajectory],
    config: &MaskConfig,
) -> Result<MaskedBatch> {
    config.validate()?;
    roll.check_same_tree(theta)?;
    rewards.check_policy(roll)?;
    let tree = roll.tree();
    let mut sequences = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let per_position_kl = per_position_kls(roll, theta, traj)?;
        let rho: Vec<f64> = traj
            .contexts
            .iter()
            .zip(&traj.tokens)
            .map(|(&c, &y)| importance_ratio(theta.prob(c, y), roll.prob(c, y)))
            .collect();
        let (max_stat, avg_stat) = match config.source {
            KlSource::Exact => (per_position_kl.clone(), per_position_kl.clone()),
            KlSource::Sampled => (
                rho.iter().map(|&r| Estimator::AbsLog.apply(r)).collect(),
                rho.iter().map(|&r| Estimator::K3.apply(r)).collect(),
            ),
        };
        let mask_max = criterion(&max_stat, config.delta, max_of);
        let mask_avg = criterion(&avg_stat, config.delta_avg, mean_of);
        let accepted = mask_max.unwrap_or(true) && mask_avg.unwrap_or(true);
        let reward = rewards.value(traj.leaf_index(tree));
        sequences.push(MaskedSequence {
            trajectory: traj.clone(),
            reward,
            advantage: reward - baseline,
            rho,
            per_position_kl,
            mask_max,
            mask_avg,
            accepted,
        });
    }
    let n_accepted = sequences.iter().filter(|s| s.accepted).count();
    Ok(MaskedBatch {
        n_total: sequences.len(),
        n_accepted,
        sequences,
        config: *config,
        approximate: !config.guaranteed(),
    })
}

/// `(1/N) sum_i M_i A_i sum_t rho_t grad log theta(y_t | c_t)` over the logits
/// of `theta`. Accumulates in batch order.
pub fn masked_surrogate_gradient(batch: &MaskedBatch, theta: &TabularPolicy) -> Vec<f64> {
    let vocab = theta.tree().vocab_size();
    let mut grad = vec![0.0; theta.tree().num_nodes() * vocab];
    if batch.n_total == 0 {
        return grad;
    }
    let n = batch.n_total as f64;
    for seq in batch.sequences.iter().filter(|s| s.accepted) {
        let traj = &seq.trajectory;
        for ((&c, &y), &rho) in traj.contexts.iter().zip(&traj.tokens).zip(&seq.rho) {
            let w = seq.advantage * rho / n;
            let row = theta.row(c);
            for v in 0..vocab {
                let score = if v == y { 1.0 } else { 0.0 } - row[v];
                grad[c * vocab + v] += w * score;
            }
        }
    }
    grad
}

/// Independent re-check of the exact max criterion: recomputes each accepted
/// sequence's KLs from the policy rows and counts those above `delta`.
pub fn verify_mask_soundness(roll: &TabularPolicy, theta: &TabularPolicy, batch: &MaskedBatch, delta: f64) -> Result<usize> {
    let mut violations = 0;
    for seq in batch.sequences.iter().filter(|s| s.accepted) {
        for &c in &seq.trajectory.contexts {
            let kl = kl_token(roll.row(c), theta.row(c))?;
            if !(kl <= delta) {
                violations += 1;
                break;
            }
        }
    }
    Ok(violations)
}

/// Exact masked surrogate under an exact-KL mask, by enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedSurrogate {
    pub value: f64,
    /// Rollout probability mass of accepted trajectories.
    pub accepted_mass: f64,
    /// Largest per-position KL over accepted trajectories (0 when none).
    pub realized_max_kl: f64,
}

fn leaf_path_stats(roll: &TabularPolicy, theta: &TabularPolicy) -> (Vec<f64>, Vec<f64>) {
    let tree = roll.tree();
    let n = tree.num_nodes();
    let kl: Vec<f64> = (0..n).map(|c| kl_unchecked(roll.row(c), theta.row(c))).collect();
    let mut path_max = vec![0.0; n];
    let mut path_sum = vec![0.0; n];
    for (id, node) in tree.nodes().iter().enumerate() {
        let (m, s) = node.parent.map_or((f64::NEG_INFINITY, 0.0), |p| (path_max[p], path_sum[p]));
        path_max[id] = m.max(kl[id]);
        path_sum[id] = s + kl[id];
    }
    let mut leaf_max = Vec::with_capacity(tree.num_leaves());
    let mut leaf_mean = Vec::with_capacity(tree.num_leaves());
    let horizon = tree.horizon() as f64;
    for &c in tree.depth_nodes(tree.horizon()).expect("horizon >= 1") {
        for _ in 0..tree.vocab_size() {
            leaf_max.push(path_max[c]);
            leaf_mean.push(path_sum[c] / horizon);
        }
    }
    (leaf_max, leaf_mean)
}

/// Max per-context KL along each leaf's path, in leaf order.
pub(crate) fn leaf_path_max(roll: &TabularPolicy, theta: &TabularPolicy) -> Vec<f64> {
    leaf_path_stats(roll, theta).0
}

pub fn masked_surrogate_exact(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    baseline: f64,
    config: &MaskConfig,
) -> Result<MaskedSurrogate> {
    config.validate()?;
    if config.source != KlSource::Exact {
        return Err(LabError::InvalidParameter(
            "the exact masked surrogate is defined only for exact-KL masks".into(),
        ));
    }
    roll.check_same_tree(theta)?;
    rewards.check_policy(roll)?;
    let (leaf_max, leaf_mean) = leaf_path_stats(roll, theta);
    let ratios = leaf_ratio_sums(roll, theta);
    let mut out = MaskedSurrogate {
        value: 0.0,
        accepted_mass: 0.0,
        realized_max_kl: 0.0,
    };
    for (leaf, p) in roll.leaf_distribution().into_iter().enumerate() {
        let accept_max = config.delta.is_none_or(|d| leaf_max[leaf] <= d);
        let accept_avg = config.delta_avg.is_none_or(|d| leaf_mean[leaf] <= d);
        if p > 0.0 && accept_max && accept_avg {
            out.value += p * (rewards.value(leaf) - baseline) * ratios[leaf];
            out.accepted_mass += p;
            out.realized_max_kl = out.realized_max_kl.max(leaf_max[leaf]);
        }
    }
    Ok(out)
}

/// Exact expected masked gradient, enumerating every leaf in score-function form.
pub fn masked_surrogate_gradient_exact(
    roll: &TabularPolicy,
    theta: &TabularPolicy,
    rewards: &RewardTable,
    baseline: f64,
    config: &MaskConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let tree = roll.tree();
    let vocab = tree.vocab_size();
    let (leaf_max, leaf_mean) = leaf_path_stats(roll, theta);
    let mut grad = vec![0.0; tree.num_nodes() * vocab];
    for (leaf, p) in roll.leaf_distribution().into_iter().enumerate() {
        let accept = config.delta.is_none_or(|d| leaf_max[leaf] <= d)
            && config.delta_avg.is_none_or(|d| leaf_mean[leaf] <= d);
        if p == 0.0 || !accept {
            continue;
        }
        let traj = tree.leaf_trajectory(leaf);
        let a = rewards.value(leaf) - baseline;
        for (&c, &y) in traj.contexts.iter().zip(&traj.tokens) {
            let w = p * a * importance_ratio(theta.prob(c, y), roll.prob(c, y));
            let row = theta.row(c);
            for v in 0..vocab {
                let score = if v == y { 1.0 } else { 0.0 } - row[v];
                grad[c * vocab + v] += w * score;
            }
        }
    }
    Ok(grad)
}

/// Plain gradient ascent on logits: `z += lr * grad`.
pub fn sgd_step(logits: &mut [f64], grad: &[f64], learning_rate: f64) {
    for (z, g) in logits.iter_mut().zip(grad) {
        *z += learning_rate * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrmMode {
    Exact,
    SampleAbslogMax,
    SampleK3Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrmConfig {
    pub vocab: usize,
    pub horizon: usize,
    pub prompts: usize,
    /// Logit scale of the random rollout policy.
    pub roll_scale: f64,
    pub delta: Option<f64>,
    pub delta_avg: Option<f64>,
    pub mode: TrmMode,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Mismatch between the rollout policy and the initial training policy.
    pub init_mismatch: Option<PerturbationSpec>,
    /// Copy theta into the rollout policy every this many steps; 0 never.
    pub sync_every: usize,
}

impl Default for TrmConfig {
    fn default() -> Self {
        Self {
            vocab: 2,
            horizon: 4,
            prompts: 1,
            roll_scale: 1.0,
            delta: Some(1e-2),
            delta_avg: None,
            mode: TrmMode::Exact,
            learning_rate: 0.1,
            steps: 100,
            batch_size: 64,
            seed: 0,
            init_mismatch: None,
            sync_every: 0,
        }
    }
}

impl TrmConfig {
    pub fn mask_config(&self) -> MaskConfig {
        match self.mode {
            TrmMode::Exact => MaskConfig {
                source: KlSource::Exact,
                delta: self.delta,
                delta_avg: self.delta_avg,
            },
            TrmMode::SampleAbslogMax => MaskConfig {
                source: KlSource::Sampled,
                delta: self.delta,
                delta_avg: self.delta_avg,
            },
            TrmMode::SampleK3Avg => MaskConfig {
                source: KlSource::Sampled,
                delta: None,
                delta_avg: self.delta_avg,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask_config().validate()?;
        if self.batch_size == 0 {
            return Err(LabError::InvalidParameter("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(LabError::InvalidParameter(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l_masked_sample: f64,
    pub l_masked_exact: f64,
    pub l_exact: f64,
    pub j_theta: f64,
    pub j_roll: f64,
    #[serde(with = "float_json::scalar")]
    pub kl_tok_max: f64,
    #[serde(with = "float_json::scalar")]
    pub seq_kl: f64,
    #[serde(with = "float_json::scalar")]
    pub adaptive_bound: f64,
    /// `l_exact - adaptive_bound`.
    #[serde(with = "float_json::scalar")]
    pub minorizer: f64,
    /// `l_masked_exact - min(PM(delta), Mixed(delta, seq_kl))`.
    #[serde(with = "float_json::scalar")]
    pub masked_minorizer_delta: f64,
    /// Same with the realized max KL of accepted trajectories in place of delta.
    #[serde(with = "float_json::scalar")]
    pub masked_minorizer_realized: f64,
    pub mask_rate: f64,
    pub max_kl_accepted: Option<f64>,
    pub soundness_violations: usize,
    pub approximate: bool,
}

impl TraceRecord {
    /// Positive exact minorizer without an exact improvement.
    pub fn improvement_violation(&self) -> bool {
        self.minorizer > MINORIZER_POSITIVE && !(self.j_theta > self.j_roll)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrmTrace {
    pub records: Vec<TraceRecord>,
    pub minorizer_positive_steps: usize,
    pub improvement_violations: usize,
    pub soundness_violations: usize,
    /// Informational: masked-minorizer variants that were positive without improvement.
    pub masked_delta_violations: usize,
    pub masked_realized_violations: usize,
    pub accepted_sequences: usize,
}

fn thm3_bound(horizon: usize, kl: f64, seq_kl: f64) -> f64 {
    pinsker_marginal_bound(horizon, kl).min(mixed_bound(horizon, kl, seq_kl))
}

/// Rollout policy, rewards and initial theta of a run; seeds follow
/// `derive_seed(seed, k)` with k = 0 (roll), 1 (rewards), 2 (mismatch), 3 (batches).
pub fn trm_setup(config: &TrmConfig) -> Result<(TabularPolicy, RewardTable, TabularPolicy)> {
    let shape = ProblemShape::uniform_prompts(config.vocab, config.horizon, config.prompts)?;
    let tree: Arc<ContextTree> = ContextTree::build(shape)?;
    let roll = random_softmax_policy(tree.clone(), config.roll_scale, derive_seed(config.seed, 0))?;
    let rewards = RewardTable::random(tree, derive_seed(config.seed, 1));
    let theta = match &config.init_mismatch {
        Some(spec) => {
            let spec = PerturbationSpec {
                seed: derive_seed(config.seed, 2),
                ..spec.clone()
            };
            perturb(&roll, &spec, Some(&rewards))?
        }
        None => roll.clone(),
    };
    Ok((roll, rewards, theta))
}

pub fn trm_training_loop(config: &TrmConfig) -> Result<TrmTrace> {
    config.validate()?;
    let (mut roll, rewards, mut theta) = trm_setup(config)?;
    let mut logits = theta
        .logits()
        .ok_or(LabError::MissingLogits("training"))?
        .to_vec();
    let tree = roll.tree().clone();
    let horizon = tree.horizon();
    let mask = config.mask_config();
    let exact_mask = MaskConfig {
        source: KlSource::Exact,
        ..mask
    };
    let batch_root = derive_seed(config.seed, 3);
    let mut j_roll = true_objective(&roll, &rewards)?;

    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let samples = roll.sample_trajectories(config.batch_size, derive_seed(batch_root, step as u64));
        let batch = apply_masks(&roll, &theta, &rewards, j_roll, &samples, &mask)?;
        let grad = masked_surrogate_gradient(&batch, &theta);

        let div = divergence_report(&roll, &theta)?;
        let l_exact = surrogate(&roll, &theta, &rewards, j_roll)?;
        let j_theta = true_objective(&theta, &rewards)?;
        let adaptive = adaptive_bound(horizon, div.kl_tok_max, div.seq_kl);
        let masked = masked_surrogate_exact(&roll, &theta, &rewards, j_roll, &exact_mask)?;
        let (delta_bound, realized_bound) = match mask.delta {
            Some(d) => (
                thm3_bound(horizon, d, div.seq_kl),
                thm3_bound(horizon, masked.realized_max_kl, div.seq_kl),
            ),
            None => (f64::INFINITY, f64::INFINITY),
        };
        let soundness_violations = match (mask.guaranteed(), mask.delta) {
            (true, Some(d)) => verify_mask_soundness(&roll, &theta, &batch, d)?,
            _ => 0,
        };
        records.push(TraceRecord {
            step,
            l_masked_sample: batch.surrogate_estimate(),
            l_masked_exact: masked.value,
            l_exact,
            j_theta,
            j_roll,
            kl_tok_max: div.kl_tok_max,
            seq_kl: div.seq_kl,
            adaptive_bound: adaptive,
            minorizer: l_exact - adaptive,
            masked_minorizer_delta: masked.value - delta_bound,
            masked_minorizer_realized: masked.value - realized_bound,
            mask_rate: batch.mask_rate(),
            max_kl_accepted: batch.max_kl_accepted(),
            soundness_violations,
            approximate: batch.approximate,
        });

        sgd_step(&mut logits, &grad, config.learning_rate);
        theta = TabularPolicy::from_logits(tree.clone(), logits.clone())?;
        if config.sync_every > 0 && (step + 1) % config.sync_every == 0 {
            roll = theta.clone();
            j_roll = true_objective(&roll, &rewards)?;
        }
    }

    let count = |f: &dyn Fn(&TraceRecord) -> bool| records.iter().filter(|r| f(r)).count();
    Ok(TrmTrace {
        minorizer_positive_steps: count(&|r| r.minorizer > MINORIZER_POSITIVE),
        improvement_violations: count(&|r| r.improvement_violation()),
        soundness_violations: records.iter().map(|r| r.soundness_violations).sum(),
        masked_delta_violations: count(&|r| r.masked_minorizer_delta > MINORIZER_POSITIVE && !(r.j_theta > r.j_roll)),
        masked_realized_violations: count(&|r| r.masked_minorizer_realized > MINORIZER_POSITIVE && !(r.j_theta > r.j_roll)),
        accepted_sequences: records
            .iter()
            .map(|r| (r.mask_rate * config.batch_size as f64).round() as usize)
            .sum(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::surrogate_gradient;
    use crate::tabular_mdp::ProblemShape;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn estimator_table_entries() {
        let one = estimator_values(1.0).unwrap();
        assert_eq!((one.k1, one.k3, one.abs_log), (0.0, 0.0, 0.0));
        let two = estimator_values(2.0).unwrap();
        assert!(approx(two.k1, -0.69, 0.005) && approx(two.k3, 0.31, 0.005) && approx(two.abs_log, 0.69, 0.005));
        let hundred = estimator_values(100.0).unwrap();
        assert!(approx(hundred.k1, -4.61, 0.005) && approx(hundred.k3, 94.4, 0.05));
        assert!(approx(estimator_values(0.01).unwrap().k3, 3.6, 0.05));
        assert!(estimator_values(0.0).is_err());
        assert!(estimator_values(-1.0).is_err());
    }

    #[test]
    fn abs_log_symmetric_k3_asymmetric() {
        for rho in [0.01, 0.3, 2.0, 77.0] {
            let a = estimator_values(rho).unwrap();
            let b = estimator_values(1.0 / rho).unwrap();
            assert!(approx(a.abs_log, b.abs_log, 1e-12));
        }
        let ratio = estimator_values(100.0).unwrap().k3 / estimator_values(0.01).unwrap().k3;
        assert!((ratio / 26.0 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn expectations_match_kl() {
        let (r, t) = ([0.5, 0.5], [0.9, 0.1]);
        let kl = kl_token(&r, &t).unwrap();
        assert!(approx(estimator_expectation(&r, &t, Estimator::K3).unwrap(), kl, 1e-12));
        assert!(approx(estimator_expectation(&r, &t, Estimator::K1).unwrap(), kl, 1e-12));
        assert!(estimator_expectation(&r, &t, Estimator::AbsLog).unwrap() >= kl);
        for e in [Estimator::K1, Estimator::K3, Estimator::AbsLog] {
            assert_eq!(estimator_expectation(&r, &r, e).unwrap(), 0.0);
        }
    }

    #[test]
    fn clip_cells() {
        let c = ppo_clip_value_and_grad(1.5, 1.0, 0.2).unwrap();
        assert!(approx(c.value, 1.2, 1e-15));
        assert_eq!((c.grad, c.cell, c.selected), (0.0, ClipCell::HighRatioPositive, Selected::Clipped));
        let c = ppo_clip_value_and_grad(1.5, -1.0, 0.2).unwrap();
        assert_eq!((c.value, c.grad, c.cell, c.selected), (-1.5, -1.0, ClipCell::HighRatioNegative, Selected::Unclipped));
        let c = ppo_clip_value_and_grad(0.5, -1.0, 0.2).unwrap();
        assert_eq!((c.cell, c.selected, c.grad), (ClipCell::LowRatioNegative, Selected::Clipped, 0.0));
        let c = ppo_clip_value_and_grad(0.5, 1.0, 0.2).unwrap();
        assert_eq!((c.cell, c.selected, c.grad), (ClipCell::LowRatioPositive, Selected::Unclipped, 1.0));
        for (a, eps) in [(0.7, 0.1), (-2.0, 0.5)] {
            let c = ppo_clip_value_and_grad(1.0, a, eps).unwrap();
            assert_eq!((c.value, c.grad, c.cell, c.selected), (a, a, ClipCell::Interior, Selected::Unclipped));
        }
        assert!(ppo_clip_value_and_grad(1.0, 1.0, 1.0).is_err());
    }

    fn pair(seed: u64) -> (TabularPolicy, TabularPolicy, RewardTable) {
        let tree = ContextTree::build(ProblemShape::single_prompt(2, 3).unwrap()).unwrap();
        let roll = random_softmax_policy(tree.clone(), 1.0, seed).unwrap();
        let theta = random_softmax_policy(tree.clone(), 1.0, seed + 1).unwrap();
        (roll, theta, RewardTable::random(tree, seed + 2))
    }

    #[test]
    fn masks_follow_the_indicator() {
        let (roll, theta, rewards) = pair(3);
        let samples = roll.sample_trajectories(64, 1);
        let all = apply_masks(&roll, &roll, &rewards, 0.5, &samples, &MaskConfig::exact_max(1e-9)).unwrap();
        assert_eq!(all.n_accepted, 64);
        let batch = apply_masks(&roll, &theta, &rewards, 0.5, &samples, &MaskConfig::exact_max(0.05)).unwrap();
        for s in &batch.sequences {
            let max = s.per_position_kl.iter().cloned().fold(0.0, f64::max);
            assert_eq!(s.mask_max, Some(max <= 0.05));
            assert_eq!(s.accepted, max <= 0.05);
        }
        assert_eq!(verify_mask_soundness(&roll, &theta, &batch, 0.05).unwrap(), 0);
        assert!(batch.n_accepted <= batch.n_total);
        assert!(!batch.approximate);
    }

    #[test]
    fn zero_masks_give_zero_gradient() {
        let (roll, theta, rewards) = pair(4);
        let samples = roll.sample_trajectories(32, 2);
        let batch = apply_masks(&roll, &theta, &rewards, 0.5, &samples, &MaskConfig::exact_max(0.0)).unwrap();
        assert_eq!(batch.n_accepted, 0);
        assert!(masked_surrogate_gradient(&batch, &theta).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn infinite_threshold_recovers_unmasked_gradient() {
        let (roll, theta, rewards) = pair(5);
        let b = 0.4;
        let exact = masked_surrogate_gradient_exact(&roll, &theta, &rewards, b, &MaskConfig::exact_max(f64::INFINITY)).unwrap();
        let reference = surrogate_gradient(&roll, &theta, &rewards, b).unwrap();
        for (a, r) in exact.iter().zip(&reference) {
            assert!(approx(*a, *r, 1e-12));
        }
        let l = masked_surrogate_exact(&roll, &theta, &rewards, b, &MaskConfig::exact_max(f64::INFINITY)).unwrap();
        assert!(approx(l.value, surrogate(&roll, &theta, &rewards, b).unwrap(), 1e-12));
        assert!(approx(l.accepted_mass, 1.0, 1e-12));
    }

    #[test]
    fn sampled_mode_uses_detectors_and_is_approximate() {
        let (roll, theta, rewards) = pair(6);
        let samples = roll.sample_trajectories(16, 3);
        let cfg = MaskConfig { source: KlSource::Sampled, delta: Some(0.3), delta_avg: None };
        let batch = apply_masks(&roll, &theta, &rewards, 0.5, &samples, &cfg).unwrap();
        assert!(batch.approximate);
        for s in &batch.sequences {
            let max = s.rho.iter().map(|r| r.ln().abs()).fold(0.0, f64::max);
            assert_eq!(s.accepted, max <= 0.3);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_theta_at_roll() {
        let cfg = TrmConfig {
            vocab: 2,
            horizon: 3,
            prompts: 1,
            roll_scale: 1.0,
            delta: Some(1e-2),
            delta_avg: None,
            mode: TrmMode::Exact,
            learning_rate: 0.0,
            steps: 5,
            batch_size: 16,
            seed: 1,
            init_mismatch: None,
            sync_every: 0,
        };
        let trace = trm_training_loop(&cfg).unwrap();
        for r in &trace.records {
            assert_eq!(r.mask_rate, 1.0);
            assert_eq!(r.j_theta, trace.records[0].j_theta);
            assert_eq!(r.kl_tok_max, 0.0);
        }
    }

    #[test]
    fn missing_thresholds_rejected() {
        let cfg = MaskConfig { source: KlSource::Exact, delta: None, delta_avg: None };
        assert!(cfg.validate().is_err());
        assert!(MaskConfig::exact_max(-1.0).validate().is_err());
    }
}
