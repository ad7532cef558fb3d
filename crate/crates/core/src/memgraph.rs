//! The evolving memory graph: trajectory segments grouped under subgoal and
//! final-goal terms, with confidence maintenance, access tracking, pruning
//! and JSON persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, EnvState, Pos, Pose, SubgoalPhase};
use crate::utility::{goal_alignment, tokenize_subgoal, AnnotatedTransition};

pub type NodeId = u64;

pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown goal term {0:?}")]
    UnknownZeta(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{field} = {value} is outside [0, 1]")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("segment is empty")]
    EmptySegment,
    #[error("subgoal description {0:?} has no recognizable tokens")]
    BadDescription(String),
    #[error("graph file is malformed: {0}")]
    Malformed(String),
    #[error("graph file version {found} is not supported (expected {GRAPH_VERSION})")]
    Version { found: u32 },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Agent,
    OfflineLlm,
    OnlineLlm,
}

/// An ordered run of annotated transitions plus the pose reached after the
/// last action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub transitions: Vec<AnnotatedTransition>,
    pub end: Pose,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn same_path(&self, other: &Segment) -> bool {
        self.end == other.end
            && self.transitions.len() == other.transitions.len()
            && self
                .transitions
                .iter()
                .zip(&other.transitions)
                .all(|(a, b)| a.pos == b.pos && a.dir == b.dir && a.action == b.action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNode {
    pub id: NodeId,
    pub segment: Segment,
    /// Id of a subgoal or final goal.
    pub zeta: String,
    pub r_hat: f64,
    pub confidence: f64,
    pub source: Source,
    pub access_count: u64,
    pub last_access_episode: Option<u64>,
    pub created_episode: u64,
    pub layout_id: u64,
}

impl TrajectoryNode {
    /// Episode from which the prune window is measured.
    pub fn last_reference(&self) -> u64 {
        self.last_access_episode.unwrap_or(self.created_episode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalNode {
    pub id: String,
    pub description: String,
    pub tokens: SubgoalPhase,
    pub parent_goal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalGoalNode {
    pub id: String,
    pub description: String,
    pub tokens: SubgoalPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSettings {
    /// Episodes without access after which a non-final-goal node is pruned.
    pub prune_window: u64,
    /// Confidence bump on agent validation.
    pub confidence_bump: f64,
    /// Maximum stored segments per (layout, goal term).
    pub per_key_capacity: usize,
}

impl Default for GraphSettings {
    fn default() -> Self {
        GraphSettings { prune_window: 100, confidence_bump: 0.1, per_key_capacity: 4 }
    }
}

/// A candidate segment for [`MemoryGraph::insert_or_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    pub segment: Segment,
    pub zeta: String,
    pub r_hat: f64,
    pub confidence: f64,
    pub source: Source,
    pub screened: bool,
    pub layout_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphDelta {
    /// Unscreened online suggestion; nothing changed.
    Discarded,
    Inserted(NodeId),
    /// The best node for the key was kept or replaced, and possibly had its
    /// confidence raised.
    Updated { node: NodeId, replaced: bool, bumped: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryGraph {
    pub settings: GraphSettings,
    pub final_goals: Vec<FinalGoalNode>,
    pub subgoals: Vec<SubgoalNode>,
    nodes: BTreeMap<NodeId, TrajectoryNode>,
    next_id: NodeId,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: u32,
    #[serde(default)]
    settings: GraphSettings,
    final_goals: Vec<FinalGoalNode>,
    subgoals: Vec<SubgoalNode>,
    trajectory_nodes: Vec<TrajectoryNode>,
}

impl MemoryGraph {
    /// A graph with a single final goal parsed from `description`.
    pub fn new(settings: GraphSettings, goal_id: &str, description: &str) -> Result<Self, GraphError> {
        let tokens = tokenize_subgoal(description).map_err(|_| GraphError::BadDescription(description.into()))?;
        Ok(MemoryGraph {
            settings,
            final_goals: vec![FinalGoalNode { id: goal_id.into(), description: description.into(), tokens }],
            subgoals: Vec::new(),
            nodes: BTreeMap::new(),
            next_id: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TrajectoryNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&TrajectoryNode> {
        self.nodes.get(&id)
    }

    /// Adds (or finds) a subgoal whose tokens match `description`.
    pub fn add_subgoal(&mut self, description: &str, parent_goal: &str) -> Result<String, GraphError> {
        if !self.final_goals.iter().any(|g| g.id == parent_goal) {
            return Err(GraphError::UnknownZeta(parent_goal.into()));
        }
        let tokens = tokenize_subgoal(description).map_err(|_| GraphError::BadDescription(description.into()))?;
        if let Some(s) = self.subgoals.iter().find(|s| s.tokens == tokens && s.parent_goal == parent_goal) {
            return Ok(s.id.clone());
        }
        let id = format!("k{}", self.subgoals.len() + 1);
        self.subgoals.push(SubgoalNode {
            id: id.clone(),
            description: description.into(),
            tokens,
            parent_goal: parent_goal.into(),
        });
        Ok(id)
    }

    pub fn is_final_goal(&self, zeta: &str) -> bool {
        self.final_goals.iter().any(|g| g.id == zeta)
    }

    pub fn zeta_tokens(&self, zeta: &str) -> Option<SubgoalPhase> {
        self.final_goals
            .iter()
            .find(|g| g.id == zeta)
            .map(|g| g.tokens)
            .or_else(|| self.subgoals.iter().find(|s| s.id == zeta).map(|s| s.tokens))
    }

    /// Goal term whose tokens equal `phase`, preferring final goals;
    /// creates a subgoal under the first final goal when none exists.
    pub fn zeta_for_phase(&mut self, phase: &SubgoalPhase) -> Result<String, GraphError> {
        if let Some(g) = self.final_goals.iter().find(|g| g.tokens == *phase) {
            return Ok(g.id.clone());
        }
        if let Some(s) = self.subgoals.iter().find(|s| s.tokens == *phase) {
            return Ok(s.id.clone());
        }
        let parent = self.final_goals[0].id.clone();
        self.add_subgoal(&phase.describe(), &parent)
    }

    fn check_unit(field: &'static str, value: f64) -> Result<(), GraphError> {
        if (0.0..=1.0).contains(&value) {
            Ok(())
        } else {
            Err(GraphError::OutOfRange { field, value })
        }
    }

    fn push_node(&mut self, ins: Insertion, episode: u64) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(
            id,
            TrajectoryNode {
                id,
                segment: ins.segment,
                zeta: ins.zeta,
                r_hat: ins.r_hat,
                confidence: ins.confidence,
                source: ins.source,
                access_count: 0,
                last_access_episode: None,
                created_episode: episode,
                layout_id: ins.layout_id,
            },
        );
        id
    }

    /// Adds a segment or improves the stored one for its (layout, goal
    /// term) key.
    pub fn insert_or_update(&mut self, ins: Insertion, episode: u64) -> Result<GraphDelta, GraphError> {
        if ins.source == Source::OnlineLlm && !ins.screened {
            return Ok(GraphDelta::Discarded);
        }
        if self.zeta_tokens(&ins.zeta).is_none() {
            return Err(GraphError::UnknownZeta(ins.zeta));
        }
        Self::check_unit("r_hat", ins.r_hat)?;
        Self::check_unit("confidence", ins.confidence)?;
        if ins.segment.is_empty() {
            return Err(GraphError::EmptySegment);
        }

        let same_key: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| n.zeta == ins.zeta && n.layout_id == ins.layout_id)
            .map(|n| n.id)
            .collect();
        if same_key.is_empty() {
            return Ok(GraphDelta::Inserted(self.push_node(ins, episode)));
        }

        let best = *same_key
            .iter()
            .max_by(|a, b| {
                let (ra, rb) = (self.nodes[a].r_hat, self.nodes[b].r_hat);
                ra.total_cmp(&rb).then(b.cmp(a))
            })
            .expect("nonempty");
        let source = ins.source;
        let bump = self.settings.confidence_bump;
        let mut replaced = false;
        if ins.r_hat > self.nodes[&best].r_hat {
            let m = self.nodes.get_mut(&best).expect("best exists");
            m.segment = ins.segment;
            m.r_hat = ins.r_hat;
            m.confidence = ins.confidence;
            m.source = ins.source;
            replaced = true;
        } else if same_key.len() < self.settings.per_key_capacity
            && !same_key.iter().any(|id| self.nodes[id].segment.same_path(&ins.segment))
        {
            self.push_node(ins, episode);
            if source == Source::Agent {
                let m = self.nodes.get_mut(&best).expect("best exists");
                m.confidence = (m.confidence + bump).min(1.0);
            }
            return Ok(GraphDelta::Updated { node: best, replaced: false, bumped: source == Source::Agent });
        }
        let bumped = source == Source::Agent;
        if bumped {
            let m = self.nodes.get_mut(&best).expect("best exists");
            m.confidence = (m.confidence + bump).min(1.0);
        }
        Ok(GraphDelta::Updated { node: best, replaced, bumped })
    }

    pub fn record_access(&mut self, id: NodeId, episode: u64) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        node.access_count += 1;
        node.last_access_episode = Some(episode);
        Ok(())
    }

    /// Removes nodes idle for at least the prune window, except those whose
    /// goal term is a final goal. Returns the removed ids in ascending order.
    pub fn prune(&mut self, current_episode: u64) -> Vec<NodeId> {
        let window = self.settings.prune_window;
        let doomed: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| !self.is_final_goal(&n.zeta))
            .filter(|n| current_episode >= n.last_reference().saturating_add(window))
            .map(|n| n.id)
            .collect();
        for id in &doomed {
            self.nodes.remove(id);
        }
        doomed
    }

    /// Nodes of `layout_id` whose goal term aligns best (ρ > 0) with `phase`.
    pub fn candidates(&self, layout_id: u64, phase: &SubgoalPhase) -> Vec<&TrajectoryNode> {
        let mut best = 0.0;
        let mut out = Vec::new();
        for n in self.nodes.values().filter(|n| n.layout_id == layout_id) {
            let Some(tokens) = self.zeta_tokens(&n.zeta) else { continue };
            let rho = goal_alignment(phase, &tokens).unwrap_or(0.0);
            if rho <= 0.0 {
                continue;
            }
            if rho > best {
                best = rho;
                out.clear();
            }
            if rho == best {
                out.push(n);
            }
        }
        out
    }

    /// Best-aligned node maximizing `confidence · r̂` (ties: lowest id).
    pub fn lookup(&self, layout_id: u64, phase: &SubgoalPhase) -> Option<&TrajectoryNode> {
        self.candidates(layout_id, phase).into_iter().fold(None, |acc: Option<&TrajectoryNode>, n| match acc {
            Some(a) if a.confidence * a.r_hat >= n.confidence * n.r_hat => Some(a),
            _ => Some(n),
        })
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            version: GRAPH_VERSION,
            settings: self.settings,
            final_goals: self.final_goals.clone(),
            subgoals: self.subgoals.clone(),
            trajectory_nodes: self.nodes.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        #[derive(Deserialize)]
        struct VersionProbe {
            version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        if probe.version != GRAPH_VERSION {
            return Err(GraphError::Version { found: probe.version });
        }
        let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        if file.final_goals.is_empty() {
            return Err(GraphError::Malformed("graph has no final goal".into()));
        }
        let mut graph = MemoryGraph {
            settings: file.settings,
            final_goals: file.final_goals,
            subgoals: file.subgoals,
            nodes: BTreeMap::new(),
            next_id: 0,
        };
        for n in file.trajectory_nodes {
            if graph.zeta_tokens(&n.zeta).is_none() {
                return Err(GraphError::Malformed(format!("node {} references unknown goal term {:?}", n.id, n.zeta)));
            }
            graph.next_id = graph.next_id.max(n.id + 1);
            graph.nodes.insert(n.id, n);
        }
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        fs::write(path, self.to_json()).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text =
            fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Human-readable node table.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for g in &self.final_goals {
            out.push_str(&format!("goal {:<6} {} {}\n", g.id, g.tokens, g.description));
        }
        for s in &self.subgoals {
            out.push_str(&format!("subgoal {:<4} {} {} (-> {})\n", s.id, s.tokens, s.description, s.parent_goal));
        }
        out.push_str(&format!(
            "{:>5} {:<6} {:>5} {:>6} {:>6} {:<11} {:>7} {:>8} {:>18}\n",
            "id", "zeta", "len", "r_hat", "conf", "source", "access", "last_ep", "layout"
        ));
        for n in self.nodes.values() {
            let source = match n.source {
                Source::Agent => "agent",
                Source::OfflineLlm => "offline-llm",
                Source::OnlineLlm => "online-llm",
            };
            out.push_str(&format!(
                "{:>5} {:<6} {:>5} {:>6.3} {:>6.3} {:<11} {:>7} {:>8} {:>18x}\n",
                n.id,
                n.zeta,
                n.segment.len(),
                n.r_hat,
                n.confidence,
                source,
                n.access_count,
                n.last_access_episode.map_or("-".to_string(), |e| e.to_string()),
                n.layout_id
            ));
        }
        out
    }
}

/// Progress of `segment` toward `target`: `1 − d_end/d_start` clipped to
/// `[0, 1]`, with distances from BFS under `env`'s passability. A segment
/// that ends on the target, or ends by picking up or toggling it, scores 1.
pub fn estimate_subgoal_reward(env: &EnvState, segment: &Segment, target: Pos) -> Result<f64, GraphError> {
    let first = segment.transitions.first().ok_or(GraphError::EmptySegment)?;
    let last = segment.transitions.last().expect("nonempty");
    let interacted = matches!(last.action, Action::PICKUP | Action::TOGGLE)
        && !env.family.is_tabular()
        && last.dir.is_some_and(|d| {
            let mut probe = env.clone();
            probe.agent_pos = last.pos;
            probe.agent_dir = d;
            probe.front() == Some(target)
        });
    let d_end = if segment.end.pos == target || interacted {
        Some(0)
    } else {
        env.distance_between(segment.end.pos, target)
    };
    let d_start = env.distance_between(first.pos, target);
    Ok(match (d_start, d_end) {
        (_, Some(0)) => 1.0,
        (Some(s), Some(e)) if s > 0 => (1.0 - e as f64 / s as f64).clamp(0.0, 1.0),
        _ => 0.0,
    })
}
