//! Committed test pairs.
//!
//! `pair_a` is a V=2, T=2 single-prompt pair. Its JSON lives in
//! `fixtures/pair_a.json` and is regenerated by [`generate_pair_a`].

use crate::document::PairBundle;
use crate::objectives::true_objective;
use crate::tabular_mdp::{random_softmax_policy, ContextTree, ProblemShape, RewardTable, TabularPolicy};

const PAIR_A_JSON: &str = include_str!("../fixtures/pair_a.json");

/// Roll and theta are softmax policies with unit-scale logits (seeds 42 and
/// 43), rewards are uniform draws (seed 44), baseline `J(roll)`.
pub fn generate_pair_a() -> PairBundle {
    let tree = ContextTree::build(ProblemShape::single_prompt(2, 2).expect("valid shape")).expect("tiny tree");
    let roll = random_softmax_policy(tree.clone(), 1.0, 42).expect("valid scale");
    let theta = random_softmax_policy(tree.clone(), 1.0, 43).expect("valid scale");
    let rewards = RewardTable::random(tree, 44);
    let j = true_objective(&roll, &rewards).expect("same tree");
    PairBundle::new(&roll, &theta, &rewards.with_baseline(j))
}

pub fn pair_a_bundle() -> PairBundle {
    PairBundle::from_json(PAIR_A_JSON).expect("committed fixture parses")
}

pub fn pair_a() -> (TabularPolicy, TabularPolicy, RewardTable) {
    pair_a_bundle().materialize().expect("committed fixture is valid")
}
