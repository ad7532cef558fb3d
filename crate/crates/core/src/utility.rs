//! Per-step utility from matching a rollout against a stored segment.
//!
//! `U_t = c · r̂ · ρ · s` where `s` is the transition similarity, `ρ` the
//! Jaccard overlap of entity–phase tokens, and `c`, `r̂` the node's
//! confidence and estimated reward. The rollout's tail is aligned one-to-one
//! with the segment; every other step gets exactly zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, Entity, PhaseVerb, Pos, SubgoalPhase};
use crate::memgraph::{NodeId, TrajectoryNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("cannot compare a tabular transition with an oriented one")]
    MixedFamilies,
    #[error("goal alignment needs nonempty token sets")]
    EmptyTokens,
    #[error("no recognizable entity or verb in {0:?}")]
    Unrecognized(String),
    #[error("memory segment is empty")]
    EmptySegment,
}

pub const HIGH_SIM: f64 = 1.0;
pub const MOD_SIM: f64 = 0.7;
pub const LOW_SIM: f64 = 0.4;

/// One step of a rollout or stored segment. `dir` is `None` exactly on
/// tabular environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotatedTransition {
    pub pos: Pos,
    pub dir: Option<u8>,
    pub action: Action,
    pub phase: SubgoalPhase,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtilityVector {
    pub values: Vec<f64>,
    /// Set when at least one step received positive utility.
    pub matched_node: Option<NodeId>,
}

impl UtilityVector {
    pub fn zeros(len: usize) -> Self {
        UtilityVector { values: vec![0.0; len], matched_node: None }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Similarity score between an agent transition and a memory transition.
pub fn similarity(agent: &AnnotatedTransition, mem: &AnnotatedTransition) -> Result<f64, UtilityError> {
    let same_pos_action = agent.pos == mem.pos && agent.action == mem.action;
    match (agent.dir, mem.dir) {
        (None, None) => Ok(if same_pos_action { HIGH_SIM } else { 0.0 }),
        (Some(da), Some(dm)) => {
            if same_pos_action && da == dm {
                Ok(HIGH_SIM)
            } else if same_pos_action {
                Ok(MOD_SIM)
            } else if (da + 1) % 4 == dm || (da + 3) % 4 == dm {
                Ok(LOW_SIM)
            } else {
                Ok(0.0)
            }
        }
        _ => Err(UtilityError::MixedFamilies),
    }
}

/// Jaccard similarity of the two token sets.
pub fn goal_alignment(a: &SubgoalPhase, b: &SubgoalPhase) -> Result<f64, UtilityError> {
    let ta = a.tokens();
    let tb = b.tokens();
    if ta.is_empty() || tb.is_empty() {
        return Err(UtilityError::EmptyTokens);
    }
    let inter = ta.iter().filter(|t| tb.contains(t)).count();
    let union = ta.len() + tb.len() - inter;
    Ok(inter as f64 / union as f64)
}

fn entity_word(w: &str) -> Option<Entity> {
    Some(match w {
        "key" | "keys" => Entity::Key,
        "door" | "doors" => Entity::Door,
        "goal" | "goals" | "exit" => Entity::Goal,
        "ball" | "balls" => Entity::Ball,
        "box" | "boxes" => Entity::Box,
        "lava" => Entity::Lava,
        _ => return None,
    })
}

fn verb_word(w: &str) -> Option<PhaseVerb> {
    Some(match w {
        "go" | "goto" | "reach" | "move" | "navigate" | "walk" | "head" | "approach" => PhaseVerb::Navigate,
        "pick" | "pickup" | "grab" | "take" | "acquire" | "collect" | "fetch" | "get" => PhaseVerb::Acquire,
        "open" | "toggle" | "unlock" => PhaseVerb::Toggle,
        _ => return None,
    })
}

/// Rule-based entity–phase extraction: first vocabulary noun, first verb
/// class; other words are ignored.
pub fn tokenize_subgoal(description: &str) -> Result<SubgoalPhase, UtilityError> {
    let lower = description.to_ascii_lowercase();
    let words = lower.split(|c: char| !c.is_ascii_alphabetic()).filter(|w| !w.is_empty());
    let mut entity = None;
    let mut verb = None;
    for w in words {
        if entity.is_none() {
            entity = entity_word(w);
        }
        if verb.is_none() {
            verb = verb_word(w);
        }
    }
    if entity.is_none() && verb.is_none() {
        return Err(UtilityError::Unrecognized(description.to_string()));
    }
    Ok(SubgoalPhase { entity, verb })
}

/// Which token pair the memory node's goal term is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalReference {
    /// The phase of each agent transition (per-step alignment).
    #[default]
    AgentPhase,
    /// A fixed target goal for the whole rollout.
    TargetGoal(SubgoalPhase),
}

/// Per-step factors of the utility, for debugging dumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityTerm {
    pub t: usize,
    pub similarity: f64,
    pub alignment: f64,
    pub utility: f64,
}

/// Factors for every aligned step, in rollout order.
pub fn utility_terms(
    rollout: &[AnnotatedTransition],
    node: &TrajectoryNode,
    node_tokens: &SubgoalPhase,
    reference: GoalReference,
) -> Result<Vec<UtilityTerm>, UtilityError> {
    let seg = &node.segment.transitions;
    if seg.is_empty() {
        return Err(UtilityError::EmptySegment);
    }
    let overlap = rollout.len().min(seg.len());
    let r0 = rollout.len() - overlap;
    let m0 = seg.len() - overlap;
    let weight = node.confidence * node.r_hat;
    let mut out = Vec::with_capacity(overlap);
    for i in 0..overlap {
        let agent = &rollout[r0 + i];
        let mem = &seg[m0 + i];
        let s = similarity(agent, mem)?;
        let zeta = match reference {
            GoalReference::AgentPhase => agent.phase,
            GoalReference::TargetGoal(g) => g,
        };
        let rho = goal_alignment(&zeta, node_tokens)?;
        out.push(UtilityTerm { t: r0 + i, similarity: s, alignment: rho, utility: weight * rho * s });
    }
    Ok(out)
}

/// Tail-aligned utility of `rollout` against `node`. When the rollout is
/// shorter than the segment only the overlapping suffixes are compared.
pub fn compute_utility(
    rollout: &[AnnotatedTransition],
    node: &TrajectoryNode,
    node_tokens: &SubgoalPhase,
    reference: GoalReference,
) -> Result<UtilityVector, UtilityError> {
    let mut out = UtilityVector::zeros(rollout.len());
    for term in utility_terms(rollout, node, node_tokens, reference)? {
        out.values[term.t] = term.utility;
    }
    if out.values.iter().any(|&u| u > 0.0) {
        out.matched_node = Some(node.id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Pose;
    use crate::memgraph::{Segment, Source};

    fn tr(r: usize, c: usize, dir: Option<u8>, a: u8) -> AnnotatedTransition {
        AnnotatedTransition { pos: Pos::new(r, c), dir, action: Action(a), phase: SubgoalPhase::KEY_NAVIGATE }
    }

    fn node(seg: Vec<AnnotatedTransition>, c: f64, r_hat: f64) -> TrajectoryNode {
        let end = Pose { pos: seg.last().unwrap().pos, dir: seg.last().unwrap().dir };
        TrajectoryNode {
            id: 9,
            segment: Segment { transitions: seg, end },
            zeta: "k1".into(),
            r_hat,
            confidence: c,
            source: Source::OfflineLlm,
            access_count: 0,
            last_access_episode: None,
            created_episode: 0,
            layout_id: 1,
        }
    }

    #[test]
    fn similarity_branches() {
        let a = tr(1, 1, Some(0), 2);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&a, &tr(1, 1, Some(2), 2)).unwrap(), 0.7);
        assert_eq!(similarity(&tr(0, 0, Some(1), 0), &tr(3, 3, Some(2), 5)).unwrap(), 0.4);
        assert_eq!(similarity(&tr(0, 0, Some(1), 0), &tr(3, 3, Some(3), 5)).unwrap(), 0.0);
        assert_eq!(similarity(&tr(1, 1, None, 2), &tr(1, 1, None, 2)).unwrap(), 1.0);
        assert_eq!(similarity(&tr(1, 1, None, 2), &tr(1, 1, None, 1)).unwrap(), 0.0);
        assert_eq!(similarity(&tr(1, 1, None, 2), &a), Err(UtilityError::MixedFamilies));
    }

    #[test]
    fn jaccard_examples() {
        let kn = SubgoalPhase::KEY_NAVIGATE;
        let dn = SubgoalPhase::new(Entity::Door, PhaseVerb::Navigate);
        assert_eq!(goal_alignment(&kn, &kn).unwrap(), 1.0);
        assert!((goal_alignment(&kn, &dn).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(goal_alignment(&kn, &SubgoalPhase::DOOR_TOGGLE).unwrap(), 0.0);
        let empty = SubgoalPhase { entity: None, verb: None };
        assert_eq!(goal_alignment(&kn, &empty), Err(UtilityError::EmptyTokens));
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_subgoal("Go to key").unwrap(), SubgoalPhase::KEY_NAVIGATE);
        assert_eq!(tokenize_subgoal("Toggle door").unwrap(), SubgoalPhase::DOOR_TOGGLE);
        assert_eq!(tokenize_subgoal("Pick up the yellow key").unwrap(), SubgoalPhase::new(Entity::Key, PhaseVerb::Acquire));
        assert!(matches!(tokenize_subgoal("Dance wildly"), Err(UtilityError::Unrecognized(_))));
        assert_eq!(
            tokenize_subgoal("the door").unwrap(),
            SubgoalPhase { entity: Some(Entity::Door), verb: None }
        );
    }

    #[test]
    fn identical_rollout_gets_constant_utility() {
        let seg = vec![tr(1, 1, Some(0), 2), tr(1, 2, Some(0), 1), tr(1, 2, Some(1), 3)];
        let n = node(seg.clone(), 0.8, 0.5);
        let u = compute_utility(&seg, &n, &SubgoalPhase::KEY_NAVIGATE, GoalReference::AgentPhase).unwrap();
        for v in &u.values {
            assert!((v - 0.4).abs() < 1e-12);
        }
        assert_eq!(u.matched_node, Some(9));
    }

    #[test]
    fn disjoint_rollout_gets_zero() {
        let n = node(vec![tr(1, 1, None, 2), tr(1, 2, None, 1)], 1.0, 1.0);
        let rollout = vec![tr(5, 5, None, 0), tr(4, 4, None, 3), tr(3, 3, None, 3)];
        let u = compute_utility(&rollout, &n, &SubgoalPhase::GOAL_NAVIGATE, GoalReference::AgentPhase).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
        assert_eq!(u.matched_node, None);
        let empty = compute_utility(&[], &n, &SubgoalPhase::GOAL_NAVIGATE, GoalReference::AgentPhase).unwrap();
        assert!(empty.values.is_empty());
    }

    #[test]
    fn partial_alignment_product() {
        // one aligned pair with s = 0.7 and ρ = 1/3
        let n = node(vec![tr(2, 2, Some(0), 2)], 1.0, 1.0);
        let rollout = vec![tr(0, 0, Some(0), 0), tr(2, 2, Some(2), 2)];
        let mem_tokens = SubgoalPhase::new(Entity::Door, PhaseVerb::Navigate);
        let u = compute_utility(&rollout, &n, &mem_tokens, GoalReference::AgentPhase).unwrap();
        assert_eq!(u.values[0], 0.0);
        assert!((u.values[1] - 0.7 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn target_goal_reference_overrides_phase() {
        let seg = vec![tr(1, 1, Some(0), 2)];
        let n = node(seg.clone(), 1.0, 1.0);
        let u = compute_utility(
            &seg,
            &n,
            &SubgoalPhase::KEY_NAVIGATE,
            GoalReference::TargetGoal(SubgoalPhase::DOOR_TOGGLE),
        )
        .unwrap();
        assert_eq!(u.values, vec![0.0]);
    }
}
