//! Exhaustively enumerable autoregressive process.
//!
//! A [`ContextTree`] materializes every context `(x, y_<t)` for a fixed
//! vocabulary, horizon and prompt set. Nodes are stored prompt-major and, within
//! a prompt, in lexicographic order of their token prefix (a pre-order walk),
//! so every array indexed by node id has a stable layout.
//!
//! Leaves (complete trajectories) are not stored as nodes. Leaf `i` is the pair
//! `(depth-T context, final token)` with
//! `i = depth_rank(context) * V + token`, which is again prompt-major and
//! lexicographic.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seed;
use crate::tolerance::NORMALIZATION;

pub const DEFAULT_TRAJECTORY_BUDGET: u64 = 10_000_000;
/// Environment variable overriding [`DEFAULT_TRAJECTORY_BUDGET`].
pub const BUDGET_ENV: &str = "TRM_LAB_MAX_TRAJECTORIES";

/// Trajectory budget from the environment, or the default when unset.
pub fn trajectory_budget() -> Result<u64> {
    match std::env::var(BUDGET_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| LabError::InvalidParameter(format!("{BUDGET_ENV}={s:?} is not a nonnegative integer"))),
        Err(_) => Ok(DEFAULT_TRAJECTORY_BUDGET),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub vocab_size: usize,
    pub horizon: usize,
    pub prompts: Vec<Prompt>,
}

impl ProblemShape {
    pub fn new(vocab_size: usize, horizon: usize, prompts: Vec<Prompt>) -> Result<Self> {
        let shape = Self {
            vocab_size,
            horizon,
            prompts,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// One prompt with probability 1.
    pub fn single_prompt(vocab_size: usize, horizon: usize) -> Result<Self> {
        Self::new(
            vocab_size,
            horizon,
            vec![Prompt {
                id: "x0".into(),
                prob: 1.0,
            }],
        )
    }

    /// `n` equiprobable prompts named `x0..`.
    pub fn uniform_prompts(vocab_size: usize, horizon: usize, n: usize) -> Result<Self> {
        let prompts = (0..n)
            .map(|i| Prompt {
                id: format!("x{i}"),
                prob: 1.0 / n as f64,
            })
            .collect();
        Self::new(vocab_size, horizon, prompts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(LabError::InvalidShape(format!(
                "vocabulary size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.horizon < 1 {
            return Err(LabError::InvalidShape("horizon must be at least 1".into()));
        }
        if self.prompts.is_empty() {
            return Err(LabError::InvalidShape("prompt set is empty".into()));
        }
        let mut total = 0.0;
        for p in &self.prompts {
            if !(p.prob >= 0.0) || !p.prob.is_finite() {
                return Err(LabError::InvalidShape(format!(
                    "prompt {} has invalid probability {}",
                    p.id, p.prob
                )));
            }
            total += p.prob;
        }
        if (total - 1.0).abs() > NORMALIZATION {
            return Err(LabError::InvalidShape(format!(
                "prompt probabilities sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// `|prompts| * V^T`, saturating.
    pub fn trajectory_count(&self) -> u128 {
        let per_prompt = (self.vocab_size as u128)
            .checked_pow(self.horizon.min(u32::MAX as usize) as u32)
            .unwrap_or(u128::MAX);
        per_prompt.saturating_mul(self.prompts.len() as u128)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextNode {
    pub prompt: usize,
    /// Step index `t` in `1..=T`; prompt roots have depth 1.
    pub depth: usize,
    pub parent: Option<usize>,
    /// Token on the edge from the parent.
    pub token: Option<usize>,
    /// Position among all depth-`t` nodes (prompt-major, lexicographic).
    pub depth_rank: usize,
}

#[derive(Debug)]
pub struct ContextTree {
    shape: ProblemShape,
    nodes: Vec<ContextNode>,
    by_depth: Vec<Vec<usize>>,
    /// `subtree_len[t - 1]`: node count of a subtree rooted at depth `t`.
    subtree_len: Vec<usize>,
    prompt_roots: Vec<usize>,
}

impl ContextTree {
    /// Builds under [`trajectory_budget`].
    pub fn build(shape: ProblemShape) -> Result<Arc<Self>> {
        Self::build_with_budget(shape, trajectory_budget()?)
    }

    pub fn build_with_budget(shape: ProblemShape, budget: u64) -> Result<Arc<Self>> {
        shape.validate()?;
        let size = shape.trajectory_count();
        if size > budget as u128 {
            return Err(LabError::BudgetExceeded { size, budget });
        }
        let v = shape.vocab_size;
        let horizon = shape.horizon;

        let mut subtree_len = vec![1usize; horizon];
        for t in (1..horizon).rev() {
            subtree_len[t - 1] = 1 + v * subtree_len[t];
        }
        let per_prompt = subtree_len[0];
        let mut nodes = Vec::with_capacity(per_prompt * shape.prompts.len());
        let mut by_depth: Vec<Vec<usize>> = (0..horizon)
            .map(|t| Vec::with_capacity(v.pow(t as u32) * shape.prompts.len()))
            .collect();
        let mut prompt_roots = Vec::with_capacity(shape.prompts.len());

        // Explicit pre-order walk; children pushed in reverse so token 0 pops first.
        let mut stack: Vec<(Option<usize>, Option<usize>, usize)> = Vec::new();
        for prompt in 0..shape.prompts.len() {
            stack.push((None, None, 1));
            while let Some((parent, token, depth)) = stack.pop() {
                let id = nodes.len();
                if parent.is_none() {
                    prompt_roots.push(id);
                }
                let depth_rank = by_depth[depth - 1].len();
                by_depth[depth - 1].push(id);
                nodes.push(ContextNode {
                    prompt,
                    depth,
                    parent,
                    token,
                    depth_rank,
                });
                if depth < horizon {
                    for tok in (0..v).rev() {
                        stack.push((Some(id), Some(tok), depth + 1));
                    }
                }
            }
        }

        Ok(Arc::new(Self {
            shape,
            nodes,
            by_depth,
            subtree_len,
            prompt_roots,
        }))
    }

    pub fn shape(&self) -> &ProblemShape {
        &self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.by_depth[self.horizon() - 1].len() * self.vocab_size()
    }

    pub fn nodes(&self) -> &[ContextNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &ContextNode {
        &self.nodes[id]
    }

    pub fn prompt_root(&self, prompt: usize) -> usize {
        self.prompt_roots[prompt]
    }

    /// Node ids at step `t` (1-based), in deterministic order.
    pub fn depth_nodes(&self, t: usize) -> Result<&[usize]> {
        if t == 0 || t > self.horizon() {
            return Err(LabError::StepOutOfRange {
                step: t,
                horizon: self.horizon(),
            });
        }
        Ok(&self.by_depth[t - 1])
    }

    /// Child context reached by emitting `token` at `node`; `None` at depth T.
    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        let depth = self.nodes[node].depth;
        if depth >= self.horizon() {
            return None;
        }
        Some(node + 1 + token * self.subtree_len[depth])
    }

    pub fn leaf_index(&self, last_context: usize, token: usize) -> usize {
        debug_assert_eq!(self.nodes[last_context].depth, self.horizon());
        self.nodes[last_context].depth_rank * self.vocab_size() + token
    }

    /// Depth-T context and final token of a leaf.
    pub fn leaf_parts(&self, leaf: usize) -> (usize, usize) {
        let v = self.vocab_size();
        (self.by_depth[self.horizon() - 1][leaf / v], leaf % v)
    }

    /// Token prefix `y_<t` of a context.
    pub fn prefix(&self, node: usize) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(self.nodes[node].depth - 1);
        let mut cur = node;
        while let (Some(parent), Some(tok)) = (self.nodes[cur].parent, self.nodes[cur].token) {
            tokens.push(tok);
            cur = parent;
        }
        tokens.reverse();
        tokens
    }

    /// Root-to-leaf trajectory for a leaf index.
    pub fn leaf_trajectory(&self, leaf: usize) -> Trajectory {
        let (last, token) = self.leaf_parts(leaf);
        let mut contexts = Vec::with_capacity(self.horizon());
        let mut cur = Some(last);
        while let Some(c) = cur {
            contexts.push(c);
            cur = self.nodes[c].parent;
        }
        contexts.reverse();
        let mut tokens = self.prefix(last);
        tokens.push(token);
        Trajectory {
            prompt: self.nodes[last].prompt,
            tokens,
            contexts,
        }
    }

    pub fn trajectory(&self, prompt: usize, tokens: &[usize]) -> Result<Trajectory> {
        if prompt >= self.shape.prompts.len() {
            return Err(LabError::InvalidParameter(format!("unknown prompt {prompt}")));
        }
        if tokens.len() != self.horizon() {
            return Err(LabError::LengthMismatch {
                left: tokens.len(),
                right: self.horizon(),
            });
        }
        let mut contexts = Vec::with_capacity(tokens.len());
        let mut node = self.prompt_root(prompt);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab_size() {
                return Err(LabError::InvalidParameter(format!("token {tok} out of vocabulary")));
            }
            contexts.push(node);
            if i + 1 < tokens.len() {
                node = self.child(node, tok).expect("interior node has children");
            }
        }
        Ok(Trajectory {
            prompt,
            tokens: tokens.to_vec(),
            contexts,
        })
    }

    /// Checks that a trajectory traces a root-to-leaf path of this tree.
    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        let expected = self.trajectory(traj.prompt, &traj.tokens)?;
        if expected.contexts != traj.contexts {
            return Err(LabError::TreeMismatch);
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ContextTree) -> bool {
        self.shape == other.shape
    }
}

pub fn build_context_tree(shape: ProblemShape) -> Result<Arc<ContextTree>> {
    ContextTree::build(shape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    pub contexts: Vec<usize>,
}

impl Trajectory {
    pub fn leaf_index(&self, tree: &ContextTree) -> usize {
        tree.leaf_index(*self.contexts.last().unwrap(), *self.tokens.last().unwrap())
    }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Inverse-CDF draw; never returns an index with zero mass.
pub(crate) fn sample_index(weights: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Conditional token distributions at every context of a tree.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    tree: Arc<ContextTree>,
    probs: Vec<f64>,
    logits: Option<Vec<f64>>,
}

impl TabularPolicy {
    /// Canonical constructor: row-wise softmax of a node-major logit table.
    pub fn from_logits(tree: Arc<ContextTree>, logits: Vec<f64>) -> Result<Self> {
        let v = tree.vocab_size();
        let expected = tree.num_nodes() * v;
        if logits.len() != expected {
            return Err(LabError::LengthMismatch {
                left: logits.len(),
                right: expected,
            });
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(LabError::InvalidDistribution {
                context: i / v,
                reason: format!("non-finite logit {}", logits[i]),
            });
        }
        let mut probs = vec![0.0; expected];
        for (row, out) in logits.chunks(v).zip(probs.chunks_mut(v)) {
            softmax_into(row, out);
        }
        Ok(Self {
            tree,
            probs,
            logits: Some(logits),
        })
    }

    /// Degenerate constructor: explicit probability rows, zeros allowed.
    pub fn from_probabilities(tree: Arc<ContextTree>, probs: Vec<f64>) -> Result<Self> {
        let v = tree.vocab_size();
        let expected = tree.num_nodes() * v;
        if probs.len() != expected {
            return Err(LabError::LengthMismatch {
                left: probs.len(),
                right: expected,
            });
        }
        for (c, row) in probs.chunks(v).enumerate() {
            validate_row(c, row)?;
        }
        Ok(Self {
            tree,
            probs,
            logits: None,
        })
    }

    /// Probability rows together with logits they were derived from. Rows must
    /// equal `softmax(logits)` within the normalization tolerance.
    pub fn from_parts(tree: Arc<ContextTree>, probs: Vec<f64>, logits: Vec<f64>) -> Result<Self> {
        let policy = Self::from_probabilities(tree, probs)?;
        let reference = Self::from_logits(policy.tree.clone(), logits)?;
        let v = policy.tree.vocab_size();
        for (i, (a, b)) in policy.probs.iter().zip(&reference.probs).enumerate() {
            if (a - b).abs() > NORMALIZATION {
                return Err(LabError::InvalidDistribution {
                    context: i / v,
                    reason: format!("row disagrees with softmax(logits): {a} vs {b}"),
                });
            }
        }
        Ok(Self {
            logits: reference.logits,
            ..policy
        })
    }

    pub fn uniform(tree: Arc<ContextTree>) -> Self {
        let n = tree.num_nodes() * tree.vocab_size();
        Self::from_logits(tree, vec![0.0; n]).expect("zero logits are valid")
    }

    pub fn tree(&self) -> &Arc<ContextTree> {
        &self.tree
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let v = self.tree.vocab_size();
        &self.probs[node * v..(node + 1) * v]
    }

    pub fn prob(&self, node: usize, token: usize) -> f64 {
        self.probs[node * self.tree.vocab_size() + token]
    }

    pub fn check_same_tree(&self, other: &TabularPolicy) -> Result<()> {
        if Arc::ptr_eq(&self.tree, &other.tree) || self.tree.same_shape(&other.tree) {
            Ok(())
        } else {
            Err(LabError::TreeMismatch)
        }
    }

    /// `P(y | x)`: product of the conditional probabilities along the path.
    pub fn trajectory_probability(&self, traj: &Trajectory) -> Result<f64> {
        self.tree.check_trajectory(traj)?;
        Ok(traj
            .contexts
            .iter()
            .zip(&traj.tokens)
            .map(|(&c, &y)| self.prob(c, y))
            .product())
    }

    /// Reach probability `d_t(c)` of every node, by forward recursion.
    pub fn visitation(&self) -> Vec<f64> {
        let tree = &self.tree;
        let mut mass = vec![0.0; tree.num_nodes()];
        // Pre-order guarantees parents precede children.
        for (id, node) in tree.nodes().iter().enumerate() {
            mass[id] = match (node.parent, node.token) {
                (Some(p), Some(tok)) => mass[p] * self.prob(p, tok),
                _ => tree.shape().prompts[node.prompt].prob,
            };
        }
        mass
    }

    /// `d_t` over the depth-`t` nodes, in [`ContextTree::depth_nodes`] order.
    pub fn context_visitation(&self, t: usize) -> Result<Vec<f64>> {
        let ids = self.tree.depth_nodes(t)?;
        let mass = self.visitation();
        Ok(ids.iter().map(|&c| mass[c]).collect())
    }

    /// Joint `P(x) P(y | x)` for every leaf.
    pub fn leaf_distribution(&self) -> Vec<f64> {
        let mass = self.visitation();
        self.leaf_distribution_from(&mass)
    }

    pub(crate) fn leaf_distribution_from(&self, mass: &[f64]) -> Vec<f64> {
        let tree = &self.tree;
        let v = tree.vocab_size();
        let mut out = Vec::with_capacity(tree.num_leaves());
        for &c in tree.depth_nodes(tree.horizon()).expect("horizon >= 1") {
            for tok in 0..v {
                out.push(mass[c] * self.prob(c, tok));
            }
        }
        out
    }

    /// I.i.d. ancestral samples; deterministic in `(policy, n, seed)`.
    pub fn sample_trajectories(&self, n: usize, seed: u64) -> Vec<Trajectory> {
        let tree = &self.tree;
        let prompt_probs: Vec<f64> = tree.shape().prompts.iter().map(|p| p.prob).collect();
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let prompt = sample_index(&prompt_probs, rng.random());
                let mut node = tree.prompt_root(prompt);
                let mut tokens = Vec::with_capacity(tree.horizon());
                let mut contexts = Vec::with_capacity(tree.horizon());
                for _ in 0..tree.horizon() {
                    let tok = sample_index(self.row(node), rng.random());
                    contexts.push(node);
                    tokens.push(tok);
                    if let Some(next) = tree.child(node, tok) {
                        node = next;
                    }
                }
                Trajectory {
                    prompt,
                    tokens,
                    contexts,
                }
            })
            .collect()
    }
}

fn validate_row(context: usize, row: &[f64]) -> Result<()> {
    let mut total = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(LabError::InvalidDistribution {
                context,
                reason: format!("entry {p} is not a probability"),
            });
        }
        total += p;
    }
    if (total - 1.0).abs() > NORMALIZATION {
        return Err(LabError::InvalidDistribution {
            context,
            reason: format!("row sums to {total}"),
        });
    }
    Ok(())
}

/// Softmax policy with i.i.d. `N(0, scale^2)` logits.
pub fn random_softmax_policy(tree: Arc<ContextTree>, scale: f64, seed: u64) -> Result<TabularPolicy> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(LabError::InvalidParameter(format!(
            "logit scale must be finite and nonnegative, got {scale}"
        )));
    }
    let mut rng = seed::rng(seed);
    let n = tree.num_nodes() * tree.vocab_size();
    let logits = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    TabularPolicy::from_logits(tree, logits)
}

/// Terminal rewards `R(x, y) in [0, 1]` plus the surrogate baseline `b`.
#[derive(Debug, Clone)]
pub struct RewardTable {
    tree: Arc<ContextTree>,
    values: Vec<f64>,
    pub baseline: f64,
}

impl RewardTable {
    pub fn new(tree: Arc<ContextTree>, values: Vec<f64>, baseline: f64) -> Result<Self> {
        if values.len() != tree.num_leaves() {
            return Err(LabError::LengthMismatch {
                left: values.len(),
                right: tree.num_leaves(),
            });
        }
        if let Some(bad) = values.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(LabError::InvalidParameter(format!(
                "reward {bad} outside [0, 1]"
            )));
        }
        if !baseline.is_finite() {
            return Err(LabError::InvalidParameter("baseline must be finite".into()));
        }
        Ok(Self {
            tree,
            values,
            baseline,
        })
    }

    pub fn constant(tree: Arc<ContextTree>, value: f64) -> Result<Self> {
        let n = tree.num_leaves();
        Self::new(tree, vec![value; n], 0.0)
    }

    /// Uniform `[0, 1)` rewards per leaf.
    pub fn random(tree: Arc<ContextTree>, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let values = (0..tree.num_leaves()).map(|_| rng.random::<f64>()).collect();
        Self::new(tree, values, 0.0).expect("uniform draws lie in [0, 1)")
    }

    pub fn tree(&self) -> &Arc<ContextTree> {
        &self.tree
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, leaf: usize) -> f64 {
        self.values[leaf]
    }

    pub fn with_baseline(&self, baseline: f64) -> Self {
        Self {
            baseline,
            ..self.clone()
        }
    }

    pub fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if Arc::ptr_eq(&self.tree, policy.tree()) || self.tree.same_shape(policy.tree()) {
            Ok(())
        } else {
            Err(LabError::TreeMismatch)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(v: usize, t: usize, prompts: usize) -> Arc<ContextTree> {
        ContextTree::build(ProblemShape::uniform_prompts(v, t, prompts).unwrap()).unwrap()
    }

    #[test]
    fn counts_match_enumeration() {
        let small = tree(2, 2, 1);
        assert_eq!(small.num_nodes(), 3);
        assert_eq!(small.num_leaves(), 4);

        let bigger = tree(3, 3, 2);
        assert_eq!(bigger.num_nodes(), 26);
        assert_eq!(bigger.num_leaves(), 54);
        for t in 1..=3 {
            assert_eq!(bigger.depth_nodes(t).unwrap().len(), 2 * 3usize.pow(t as u32 - 1));
        }
    }

    #[test]
    fn budget_gate_names_the_size() {
        let err = ContextTree::build(ProblemShape::single_prompt(2, 25).unwrap()).unwrap_err();
        match err {
            LabError::BudgetExceeded { size, budget } => {
                assert_eq!(size, 1 << 25);
                assert_eq!(budget, DEFAULT_TRAJECTORY_BUDGET);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(ProblemShape::single_prompt(1, 3).is_err());
        assert!(ProblemShape::single_prompt(2, 0).is_err());
        let bad = vec![
            Prompt { id: "a".into(), prob: 0.5 },
            Prompt { id: "b".into(), prob: 0.6 },
        ];
        assert!(ProblemShape::new(2, 2, bad).is_err());
    }

    #[test]
    fn ordering_is_prompt_major_lexicographic() {
        let tr = tree(2, 3, 2);
        let prefixes: Vec<(usize, Vec<usize>)> = (0..tr.num_nodes())
            .map(|i| (tr.node(i).prompt, tr.prefix(i)))
            .collect();
        let mut sorted = prefixes.clone();
        sorted.sort();
        assert_eq!(prefixes, sorted);
        for (id, node) in tr.nodes().iter().enumerate() {
            if let Some(p) = node.parent {
                assert_eq!(node.depth, tr.node(p).depth + 1);
                assert_eq!(tr.child(p, node.token.unwrap()), Some(id));
            }
        }
    }

    #[test]
    fn leaf_indices_round_trip() {
        let tr = tree(3, 3, 2);
        for leaf in 0..tr.num_leaves() {
            let traj = tr.leaf_trajectory(leaf);
            assert_eq!(traj.leaf_index(&tr), leaf);
            tr.check_trajectory(&traj).unwrap();
        }
    }

    #[test]
    fn uniform_trajectories_are_equiprobable() {
        let tr = tree(2, 3, 1);
        let pi = TabularPolicy::uniform(tr.clone());
        for leaf in 0..tr.num_leaves() {
            let p = pi.trajectory_probability(&tr.leaf_trajectory(leaf)).unwrap();
            assert!((p - 0.125).abs() < 1e-15);
        }
        let d3 = pi.context_visitation(3).unwrap();
        assert_eq!(d3.len(), 4);
        assert!(d3.iter().all(|m| (m - 0.25).abs() < 1e-15));
    }

    #[test]
    fn deterministic_policy_concentrates() {
        let tr = tree(2, 3, 1);
        let mut probs = vec![0.0; tr.num_nodes() * 2];
        for c in 0..tr.num_nodes() {
            probs[c * 2 + 1] = 1.0;
        }
        let pi = TabularPolicy::from_probabilities(tr.clone(), probs).unwrap();
        let path = tr.trajectory(0, &[1, 1, 1]).unwrap();
        assert_eq!(pi.trajectory_probability(&path).unwrap(), 1.0);
        let other = tr.trajectory(0, &[1, 0, 1]).unwrap();
        assert_eq!(pi.trajectory_probability(&other).unwrap(), 0.0);
        for s in pi.sample_trajectories(50, 3) {
            assert_eq!(s.tokens, vec![1, 1, 1]);
        }
    }

    #[test]
    fn first_step_visitation_is_prompt_distribution() {
        let shape = ProblemShape::new(
            2,
            2,
            vec![
                Prompt { id: "a".into(), prob: 0.3 },
                Prompt { id: "b".into(), prob: 0.7 },
            ],
        )
        .unwrap();
        let tr = ContextTree::build(shape).unwrap();
        let pi = random_softmax_policy(tr, 1.0, 5).unwrap();
        assert_eq!(pi.context_visitation(1).unwrap(), vec![0.3, 0.7]);
        assert!(pi.context_visitation(0).is_err());
        assert!(pi.context_visitation(3).is_err());
    }

    #[test]
    fn rows_validated() {
        let tr = tree(2, 1, 1);
        assert!(TabularPolicy::from_probabilities(tr.clone(), vec![0.5, 0.6]).is_err());
        assert!(TabularPolicy::from_probabilities(tr.clone(), vec![-0.1, 1.1]).is_err());
        assert!(TabularPolicy::from_logits(tr.clone(), vec![0.0, f64::NAN]).is_err());
        assert!(TabularPolicy::from_logits(tr, vec![0.0]).is_err());
    }

    #[test]
    fn softmax_constructor_has_full_support() {
        let tr = tree(3, 3, 1);
        let pi = random_softmax_policy(tr, 3.0, 11).unwrap();
        assert!(pi.probabilities().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn zero_scale_is_uniform_and_seeds_differ() {
        let tr = tree(3, 2, 1);
        let flat = random_softmax_policy(tr.clone(), 0.0, 9).unwrap();
        assert!(flat.probabilities().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let a = random_softmax_policy(tr.clone(), 1.0, 1).unwrap();
        let b = random_softmax_policy(tr, 1.0, 2).unwrap();
        assert_ne!(a.probabilities(), b.probabilities());
    }

    #[test]
    fn sampling_is_reproducible() {
        let tr = tree(3, 3, 2);
        let pi = random_softmax_policy(tr, 1.0, 4).unwrap();
        assert_eq!(pi.sample_trajectories(200, 8), pi.sample_trajectories(200, 8));
        assert_ne!(pi.sample_trajectories(200, 8), pi.sample_trajectories(200, 9));
    }

    #[test]
    fn uniform_sampling_frequency_within_three_standard_errors() {
        let tr = tree(2, 1, 1);
        let pi = TabularPolicy::uniform(tr);
        let n = 100_000;
        let ones = pi
            .sample_trajectories(n, 2024)
            .iter()
            .filter(|s| s.tokens[0] == 1)
            .count();
        let freq = ones as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn rewards_must_lie_in_unit_interval() {
        let tr = tree(2, 1, 1);
        assert!(RewardTable::new(tr.clone(), vec![0.0, 1.5], 0.0).is_err());
        assert!(RewardTable::new(tr.clone(), vec![0.0], 0.0).is_err());
        assert!(RewardTable::new(tr, vec![0.0, 1.0], 0.5).is_ok());
    }

    #[test]
    fn tree_mismatch_detected() {
        let a = TabularPolicy::uniform(tree(2, 2, 1));
        let b = TabularPolicy::uniform(tree(2, 3, 1));
        assert!(matches!(a.check_same_tree(&b), Err(LabError::TreeMismatch)));
        let foreign = b.tree().leaf_trajectory(0);
        assert!(a.trajectory_probability(&foreign).is_err());
    }
}
