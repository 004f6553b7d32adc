//! Versioned JSON documents for policies, reward tables and policy pairs.
//!
//! Probability and logit rows are listed in node order
//! (`prompt-major-lexicographic`, see [`crate::tabular_mdp`]); reward values in
//! leaf order. Floats are written in shortest round-trip form, so a document
//! reloads bit-for-bit.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tabular_mdp::{ContextTree, ProblemShape, RewardTable, TabularPolicy};

pub const DOCUMENT_VERSION: u32 = 1;
pub const NODE_ORDER: &str = "prompt-major-lexicographic";

const POLICY_FORMAT: &str = "trm-lab/policy";
const REWARDS_FORMAT: &str = "trm-lab/rewards";
const PAIR_FORMAT: &str = "trm-lab/pair";

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected || version != DOCUMENT_VERSION {
        return Err(LabError::DocumentFormat {
            expected: format!("{expected} v{DOCUMENT_VERSION}"),
            found: format!("{format} v{version}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub format: String,
    pub version: u32,
    pub shape: ProblemShape,
    pub node_order: String,
    pub probabilities: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

impl PolicyDocument {
    pub fn from_policy(policy: &TabularPolicy) -> Self {
        let v = policy.tree().vocab_size();
        Self {
            format: POLICY_FORMAT.into(),
            version: DOCUMENT_VERSION,
            shape: policy.tree().shape().clone(),
            node_order: NODE_ORDER.into(),
            probabilities: policy.probabilities().chunks(v).map(<[f64]>::to_vec).collect(),
            logits: policy
                .logits()
                .map(|z| z.chunks(v).map(<[f64]>::to_vec).collect()),
        }
    }

    pub fn to_policy(&self, tree: Arc<ContextTree>) -> Result<TabularPolicy> {
        check_header(&self.format, self.version, POLICY_FORMAT)?;
        if self.node_order != NODE_ORDER {
            return Err(LabError::DocumentFormat {
                expected: NODE_ORDER.into(),
                found: self.node_order.clone(),
            });
        }
        if self.shape != *tree.shape() {
            return Err(LabError::TreeMismatch);
        }
        let flat = flatten(&self.probabilities, tree.vocab_size())?;
        match &self.logits {
            Some(z) => TabularPolicy::from_parts(tree.clone(), flat, flatten(z, tree.vocab_size())?),
            None => TabularPolicy::from_probabilities(tree, flat),
        }
    }

    pub fn load(&self) -> Result<TabularPolicy> {
        self.to_policy(ContextTree::build(self.shape.clone())?)
    }
}

fn flatten(rows: &[Vec<f64>], width: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(LabError::LengthMismatch {
                left: row.len(),
                right: width,
            });
        }
        out.extend_from_slice(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardDocument {
    pub format: String,
    pub version: u32,
    pub shape: ProblemShape,
    pub values: Vec<f64>,
    pub baseline: f64,
}

impl RewardDocument {
    pub fn from_table(table: &RewardTable) -> Self {
        Self {
            format: REWARDS_FORMAT.into(),
            version: DOCUMENT_VERSION,
            shape: table.tree().shape().clone(),
            values: table.values().to_vec(),
            baseline: table.baseline,
        }
    }

    pub fn to_table(&self, tree: Arc<ContextTree>) -> Result<RewardTable> {
        check_header(&self.format, self.version, REWARDS_FORMAT)?;
        if self.shape != *tree.shape() {
            return Err(LabError::TreeMismatch);
        }
        RewardTable::new(tree, self.values.clone(), self.baseline)
    }
}

/// A rollout policy, a training policy and the rewards they are scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairBundle {
    pub format: String,
    pub version: u32,
    pub roll: PolicyDocument,
    pub theta: PolicyDocument,
    pub rewards: RewardDocument,
}

impl PairBundle {
    pub fn new(roll: &TabularPolicy, theta: &TabularPolicy, rewards: &RewardTable) -> Self {
        Self {
            format: PAIR_FORMAT.into(),
            version: DOCUMENT_VERSION,
            roll: PolicyDocument::from_policy(roll),
            theta: PolicyDocument::from_policy(theta),
            rewards: RewardDocument::from_table(rewards),
        }
    }

    /// Rebuilds all three objects over one shared tree.
    pub fn materialize(&self) -> Result<(TabularPolicy, TabularPolicy, RewardTable)> {
        check_header(&self.format, self.version, PAIR_FORMAT)?;
        let tree = ContextTree::build(self.roll.shape.clone())?;
        Ok((
            self.roll.to_policy(tree.clone())?,
            self.theta.to_policy(tree.clone())?,
            self.rewards.to_table(tree)?,
        ))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular_mdp::random_softmax_policy;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pair_round_trips_bit_exact(seed in any::<u64>(), v in 2usize..4, t in 1usize..4, scale in 0.0f64..3.0) {
            let tree = ContextTree::build(ProblemShape::uniform_prompts(v, t, 2).unwrap()).unwrap();
            let roll = random_softmax_policy(tree.clone(), scale, seed).unwrap();
            let theta = random_softmax_policy(tree.clone(), scale, seed ^ 1).unwrap();
            let rewards = RewardTable::random(tree, seed ^ 2).with_baseline(0.3);
            let bundle = PairBundle::new(&roll, &theta, &rewards);
            let text = serde_json::to_string(&bundle).unwrap();
            let back = PairBundle::from_json(&text).unwrap();
            let (r2, t2, w2) = back.materialize().unwrap();
            prop_assert_eq!(r2.probabilities(), roll.probabilities());
            prop_assert_eq!(t2.logits(), theta.logits());
            prop_assert_eq!(w2.values(), rewards.values());
            prop_assert_eq!(w2.baseline, 0.3);
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let tree = ContextTree::build(ProblemShape::single_prompt(2, 1).unwrap()).unwrap();
        let mut doc = PolicyDocument::from_policy(&TabularPolicy::uniform(tree));
        doc.version = 9;
        assert!(matches!(doc.load(), Err(LabError::DocumentFormat { .. })));
    }

    #[test]
    fn unknown_fields_are_located() {
        let err = serde_json::from_str::<PairBundle>("{\n  \"format\": \"trm-lab/pair\",\n  \"extra\": 1\n}")
            .unwrap_err();
        assert_eq!(err.line(), 3);
    }

    #[test]
    fn inconsistent_logits_rejected() {
        let tree = ContextTree::build(ProblemShape::single_prompt(2, 1).unwrap()).unwrap();
        let mut doc = PolicyDocument::from_policy(&TabularPolicy::uniform(tree));
        doc.logits = Some(vec![vec![0.0, 1.0]]);
        assert!(doc.load().is_err());
    }
}
