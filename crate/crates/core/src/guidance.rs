//! Guidance boundary: providers, completion parsing, screening, the
//! zero-utility trigger, grafting into the memory graph, and query budgets.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{view_code, Action, Entity, EnvState, Family, Observation, PhaseVerb, SubgoalPhase, Task};
use crate::gridworld::{Fnv, Pose};
use crate::memgraph::{estimate_subgoal_reward, GraphDelta, GraphError, Insertion, MemoryGraph, Segment, Source};
use crate::ppo::{ControlSignal, LogitPenalty};
use crate::utility::{tokenize_subgoal, AnnotatedTransition};

pub const LIKELIHOOD_THRESHOLD: f64 = 0.65;
pub const CONSISTENCY_THRESHOLD: f64 = 2.0 / 3.0;
const THRESHOLD_EPS: f64 = 1e-12;
pub const API_KEY_VAR: &str = "MIRA_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("completion has no per-token log-probabilities")]
    MissingLogprobs,
    #[error("consistency screening needs at least 2 completions, got {0}")]
    TooFewCompletions(usize),
    #[error("unparseable completion: {0}")]
    Parse(String),
    #[error("transport failure (retriable): {0}")]
    Transport(String),
    #[error("online query budget exhausted ({used}/{cap})")]
    BudgetExhausted { used: u64, cap: u64 },
    #[error("no recorded completion for context hash {0}")]
    FixtureMiss(String),
    #[error("fixture file {path}: {msg}")]
    Fixture { path: String, msg: String },
    #[error("plan step {step} is invalid: {msg}")]
    InvalidPlan { step: usize, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One subgoal and the actions that accomplish it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSegment {
    pub subgoal: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuggestionKind {
    Plan(Vec<PlanSegment>),
    /// Down-weight this action until the current phase ends.
    Control(Action),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSuggestion {
    pub kind: SuggestionKind,
    pub raw_text: String,
    pub logprobs: Option<Vec<f64>>,
    pub provider_id: String,
}

impl GuidanceSuggestion {
    /// Key under which completions are considered to agree.
    pub fn canonical_key(&self) -> String {
        match &self.kind {
            SuggestionKind::Plan(segs) => {
                let acts: Vec<String> =
                    segs.iter().flat_map(|s| s.actions.iter().map(|a| a.0.to_string())).collect();
                format!("plan:{}", acts.join(","))
            }
            SuggestionKind::Control(a) => format!("control:{}", a.0),
        }
    }
}

/// A raw provider completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

/// Parses the line grammar `subgoal: …` / `plan: a, b, …` / `control: a`.
/// Other lines are ignored.
pub fn parse_completion(c: &Completion, family: Family, provider_id: &str) -> Result<GuidanceSuggestion, GuidanceError> {
    let mut segments: Vec<PlanSegment> = Vec::new();
    let mut control = None;
    for line in c.text.lines() {
        let Some((head, body)) = line.split_once(':') else { continue };
        match head.trim().to_ascii_lowercase().as_str() {
            "subgoal" => segments.push(PlanSegment { subgoal: body.trim().to_string(), actions: Vec::new() }),
            "plan" => {
                let actions = body
                    .split(',')
                    .map(|n| family.parse_action(n).ok_or_else(|| GuidanceError::Parse(format!("unknown action {:?}", n.trim()))))
                    .collect::<Result<Vec<_>, _>>()?;
                match segments.last_mut() {
                    Some(s) if s.actions.is_empty() => s.actions = actions,
                    _ => segments.push(PlanSegment { subgoal: String::new(), actions }),
                }
            }
            "control" => {
                let a = family
                    .parse_action(body)
                    .ok_or_else(|| GuidanceError::Parse(format!("unknown action {:?}", body.trim())))?;
                control = Some(a);
            }
            _ => {}
        }
    }
    segments.retain(|s| !s.actions.is_empty());
    let kind = match (segments.is_empty(), control) {
        (false, _) => SuggestionKind::Plan(segments),
        (true, Some(a)) => SuggestionKind::Control(a),
        (true, None) => return Err(GuidanceError::Parse("no plan or control line".into())),
    };
    Ok(GuidanceSuggestion {
        kind,
        raw_text: c.text.clone(),
        logprobs: c.logprobs.clone(),
        provider_id: provider_id.to_string(),
    })
}

pub fn format_plan(family: Family, segments: &[PlanSegment]) -> String {
    let mut out = String::new();
    for s in segments {
        let names: Vec<&str> = s.actions.iter().map(|&a| family.action_name(a)).collect();
        out.push_str(&format!("subgoal: {}\nplan: {}\n", s.subgoal, names.join(", ")));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreenMethod {
    Likelihood,
    Consistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub accepted: bool,
    pub method: ScreenMethod,
    pub score: f64,
}

/// Accepts when the geometric-mean token probability reaches the threshold.
pub fn screen_by_likelihood(s: &GuidanceSuggestion) -> Result<ScreeningResult, GuidanceError> {
    let lps = s.logprobs.as_ref().filter(|l| !l.is_empty()).ok_or(GuidanceError::MissingLogprobs)?;
    let score = (lps.iter().sum::<f64>() / lps.len() as f64).exp();
    Ok(ScreeningResult {
        accepted: score >= LIKELIHOOD_THRESHOLD - THRESHOLD_EPS,
        method: ScreenMethod::Likelihood,
        score,
    })
}

/// Majority agreement among `completions` (`None` = unparseable). Returns
/// the verdict and, when any completion parsed, the representative of the
/// largest class. Ties go to the smallest canonical key, and the
/// representative is the class member with the smallest raw text, so the
/// result does not depend on completion order.
pub fn screen_by_consistency(
    completions: &[Option<GuidanceSuggestion>],
) -> Result<(ScreeningResult, Option<GuidanceSuggestion>), GuidanceError> {
    if completions.len() < 2 {
        return Err(GuidanceError::TooFewCompletions(completions.len()));
    }
    let mut classes: BTreeMap<String, Vec<&GuidanceSuggestion>> = BTreeMap::new();
    for s in completions.iter().flatten() {
        classes.entry(s.canonical_key()).or_default().push(s);
    }
    let best = classes.iter().fold(None::<(&String, &Vec<&GuidanceSuggestion>)>, |acc, (k, v)| match acc {
        Some((_, bv)) if bv.len() >= v.len() => acc,
        _ => Some((k, v)),
    });
    let Some((_, members)) = best else {
        return Ok((ScreeningResult { accepted: false, method: ScreenMethod::Consistency, score: 0.0 }, None));
    };
    let score = members.len() as f64 / completions.len() as f64;
    let rep = members.iter().min_by(|a, b| a.raw_text.cmp(&b.raw_text)).map(|s| (*s).clone());
    Ok((
        ScreeningResult {
            accepted: score >= CONSISTENCY_THRESHOLD - THRESHOLD_EPS,
            method: ScreenMethod::Consistency,
            score,
        },
        rep,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreeningMode {
    /// Likelihood when the first completion carries log-probs, otherwise
    /// consistency.
    #[default]
    Auto,
    Likelihood,
    Consistency,
    /// Accept the first parseable completion unscreened.
    Disabled,
}

/// Outcome of screening a batch of completions.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    /// The accepted suggestion, if any.
    pub suggestion: Option<GuidanceSuggestion>,
    /// Confidence assigned to grafted nodes.
    pub confidence: f64,
    pub screening: Option<ScreeningResult>,
}

pub fn screen(
    completions: &[Completion],
    family: Family,
    provider_id: &str,
    mode: ScreeningMode,
) -> Result<Verdict, GuidanceError> {
    let parsed: Vec<Option<GuidanceSuggestion>> =
        completions.iter().map(|c| parse_completion(c, family, provider_id).ok()).collect();
    let has_logprobs = completions.first().is_some_and(|c| c.logprobs.as_ref().is_some_and(|l| !l.is_empty()));
    let mode = match mode {
        ScreeningMode::Auto if has_logprobs => ScreeningMode::Likelihood,
        ScreeningMode::Auto => ScreeningMode::Consistency,
        m => m,
    };
    match mode {
        ScreeningMode::Disabled => {
            let first = parsed.into_iter().flatten().next();
            Ok(Verdict { confidence: if first.is_some() { 1.0 } else { 0.0 }, suggestion: first, screening: None })
        }
        ScreeningMode::Likelihood => {
            let Some(Some(first)) = parsed.into_iter().next() else {
                return Ok(Verdict { suggestion: None, confidence: 0.0, screening: None });
            };
            let r = screen_by_likelihood(&first)?;
            Ok(Verdict { suggestion: r.accepted.then_some(first), confidence: r.score, screening: Some(r) })
        }
        ScreeningMode::Consistency | ScreeningMode::Auto => {
            let (r, rep) = screen_by_consistency(&parsed)?;
            Ok(Verdict {
                suggestion: if r.accepted { rep } else { None },
                confidence: r.score,
                screening: Some(r),
            })
        }
    }
}

/// Counts consecutive episodes with zero total utility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerState {
    pub consecutive_zero: u32,
    pub threshold: u32,
}

impl TriggerState {
    pub fn new(threshold: u32) -> Self {
        TriggerState { consecutive_zero: 0, threshold }
    }

    /// Feeds one episode; returns true (and resets) when the threshold is hit.
    pub fn check(&mut self, episode_utility_sum: f64) -> bool {
        if episode_utility_sum != 0.0 {
            self.consecutive_zero = 0;
            return false;
        }
        self.consecutive_zero += 1;
        if self.consecutive_zero >= self.threshold {
            self.consecutive_zero = 0;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryBudget {
    pub offline_used: u64,
    pub online_used: u64,
    pub online_cap: Option<u64>,
}

impl QueryBudget {
    pub fn new(online_cap: Option<u64>) -> Self {
        QueryBudget { offline_used: 0, online_used: 0, online_cap }
    }

    pub fn can_query_online(&self) -> bool {
        self.online_cap.is_none_or(|cap| self.online_used < cap)
    }

    pub fn check_online(&self) -> Result<(), GuidanceError> {
        match self.online_cap {
            Some(cap) if self.online_used >= cap => Err(GuidanceError::BudgetExhausted { used: self.online_used, cap }),
            _ => Ok(()),
        }
    }

    pub fn charge_online(&mut self) -> Result<(), GuidanceError> {
        self.check_online()?;
        self.online_used += 1;
        Ok(())
    }
}

/// What a provider sees. Built only from egocentric windows and a task
/// description, so nothing outside the agent's view leaks into prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub family: Family,
    pub task: Task,
    pub env_description: String,
    /// Recent windows, oldest first, with the agent cell blanked.
    pub observations: Vec<Observation>,
    pub phase: SubgoalPhase,
    pub offline: bool,
}

fn blank_agent_cell(obs: &Observation) -> Observation {
    match obs {
        Observation::Egocentric { view, dir, size } => {
            let mut view = view.clone();
            view[(size - 1) * size + size / 2] = view_code::EMPTY;
            Observation::Egocentric { view, dir: *dir, size: *size }
        }
        o => o.clone(),
    }
}

/// Task text for online prompts; lake prompts include the (public) map.
pub fn task_description(env: &EnvState) -> String {
    match env.family {
        Family::Lake => env.describe(),
        Family::Grid => {
            let task = match env.task {
                Task::ReachGoal => "reach the goal square",
                Task::Fetch(_) => "pick up the red ball",
                Task::DoorKey => "pick up the key, unlock the door and reach the goal square",
            };
            format!(
                "{}x{} grid world seen through a {v}x{v} egocentric window; task: {task}",
                env.width,
                env.height,
                v = env.view_size
            )
        }
    }
}

impl QueryContext {
    pub fn online(env_description: String, family: Family, task: Task, recent: &[Observation], phase: SubgoalPhase) -> Self {
        QueryContext {
            family,
            task,
            env_description,
            observations: recent.iter().map(blank_agent_cell).collect(),
            phase,
            offline: false,
        }
    }

    /// Offline context: the layout description at episode start.
    pub fn offline(env: &EnvState) -> Self {
        QueryContext {
            family: env.family,
            task: env.task,
            env_description: env.describe(),
            observations: Vec::new(),
            phase: env.subgoal_phase(),
            offline: true,
        }
    }
}

pub const ONLINE_TEMPLATE: &str = "You are guiding an agent in a gridworld.\n{env_description}\n\
Recent observations (agent at bottom centre facing up; '?' unseen):\n{observations}\n\
Current subgoal: {phase}.\nReply with lines `subgoal: <text>` and `plan: <comma-separated actions>`, \
or `control: <action to avoid>`.\n";

pub const OFFLINE_TEMPLATE: &str = "You are planning for an agent in a gridworld.\n{env_description}\n\
Decompose the task into subgoals. For each, reply with `subgoal: <text>` followed by \
`plan: <comma-separated actions>`.\n";

pub fn render_prompt(template: &str, ctx: &QueryContext) -> String {
    let obs: Vec<String> = ctx
        .observations
        .iter()
        .enumerate()
        .map(|(i, o)| format!("[t-{}]\n{}", ctx.observations.len() - 1 - i, o.render()))
        .collect();
    template
        .replace("{env_description}", &ctx.env_description)
        .replace("{observations}", &obs.join("\n"))
        .replace("{phase}", &ctx.phase.describe())
}

pub fn context_hash(prompt: &str) -> String {
    let mut h = Fnv::new();
    h.write(prompt.as_bytes());
    format!("{:016x}", h.finish())
}

pub trait GuidanceProvider {
    fn id(&self) -> &str;
    fn prompt(&self, ctx: &QueryContext) -> String {
        render_prompt(if ctx.offline { OFFLINE_TEMPLATE } else { ONLINE_TEMPLATE }, ctx)
    }
    /// Up to `k` completions for the context.
    fn complete(&mut self, ctx: &QueryContext, k: usize) -> Result<Vec<Completion>, GuidanceError>;
    /// Adjusts plan corruption, where supported.
    fn set_corruption(&mut self, _rate: f64) {}
}

// ---------------------------------------------------------------------------
// scripted oracle

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlanCell {
    Free,
    Blocked,
    Hazard,
    Key,
    Door { open: bool },
    Goal,
    Ball,
}

struct PlanGrid {
    width: usize,
    height: usize,
    cells: Vec<PlanCell>,
}

const DIRS: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

impl PlanGrid {
    fn at(&self, r: i64, c: i64) -> Option<PlanCell> {
        (r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width)
            .then(|| self.cells[r as usize * self.width + c as usize])
    }

    fn set(&mut self, r: usize, c: usize, cell: PlanCell) {
        self.cells[r * self.width + c] = cell;
    }

    fn from_text(rows: &[&str]) -> Option<(PlanGrid, (usize, usize))> {
        let height = rows.len();
        let width = rows.first()?.chars().count();
        let mut cells = Vec::with_capacity(width * height);
        let mut start = None;
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                cells.push(match ch {
                    'S' => {
                        start = Some((r, c));
                        PlanCell::Free
                    }
                    'F' | '.' => PlanCell::Free,
                    'H' | 'L' => PlanCell::Hazard,
                    'G' => PlanCell::Goal,
                    'K' => PlanCell::Key,
                    'D' => PlanCell::Door { open: false },
                    'B' => PlanCell::Ball,
                    _ => PlanCell::Blocked,
                });
            }
        }
        Some((PlanGrid { width, height, cells }, start?))
    }

    fn from_window(view: &[u8], size: usize) -> PlanGrid {
        let cells = view
            .iter()
            .map(|&code| match code {
                view_code::EMPTY => PlanCell::Free,
                view_code::KEY => PlanCell::Key,
                view_code::DOOR_LOCKED | view_code::DOOR_CLOSED => PlanCell::Door { open: false },
                view_code::DOOR_OPEN => PlanCell::Door { open: true },
                view_code::GOAL => PlanCell::Goal,
                view_code::BALL_RED => PlanCell::Ball,
                view_code::LAVA | view_code::HOLE => PlanCell::Hazard,
                _ => PlanCell::Blocked,
            })
            .collect();
        PlanGrid { width: size, height: size, cells }
    }

    fn walkable(&self, r: i64, c: i64, goal_ok: bool) -> bool {
        match self.at(r, c) {
            Some(PlanCell::Free | PlanCell::Door { open: true }) => true,
            Some(PlanCell::Goal) => goal_ok,
            _ => false,
        }
    }

    /// Shortest turn/forward sequence from `start` to a pose satisfying `done`.
    fn pose_plan(
        &self,
        start: (usize, usize, u8),
        goal_ok: bool,
        done: impl Fn(i64, i64, u8) -> bool,
    ) -> Option<Vec<Action>> {
        let key = |r: i64, c: i64, d: u8| (r as usize * self.width + c as usize) * 4 + d as usize;
        let mut prev: HashMap<usize, (usize, Action)> = HashMap::new();
        let s = (start.0 as i64, start.1 as i64, start.2);
        let mut queue = VecDeque::from([s]);
        let mut seen = vec![false; self.width * self.height * 4];
        seen[key(s.0, s.1, s.2)] = true;
        while let Some((r, c, d)) = queue.pop_front() {
            if done(r, c, d) {
                let mut actions = Vec::new();
                let mut k = key(r, c, d);
                while let Some(&(p, a)) = prev.get(&k) {
                    actions.push(a);
                    k = p;
                }
                actions.reverse();
                return Some(actions);
            }
            let (dr, dc) = DIRS[d as usize];
            let moves = [
                (r, c, (d + 3) % 4, Action::TURN_LEFT),
                (r, c, (d + 1) % 4, Action::TURN_RIGHT),
                (r + dr, c + dc, d, Action::FORWARD),
            ];
            for (nr, nc, nd, a) in moves {
                if a == Action::FORWARD && !self.walkable(nr, nc, goal_ok) {
                    continue;
                }
                let nk = key(nr, nc, nd);
                if !seen[nk] {
                    seen[nk] = true;
                    prev.insert(nk, (key(r, c, d), a));
                    queue.push_back((nr, nc, nd));
                }
            }
        }
        None
    }

    /// Shortest four-way path (lake actions) avoiding hazards and `banned`
    /// cells; returns the visited cells including both ends.
    fn cell_path(&self, from: (usize, usize), banned: &[(usize, usize)], banned_edge: Option<((usize, usize), (usize, usize))>) -> Option<Vec<(usize, usize)>> {
        let mut prev: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = vec![false; self.width * self.height];
        seen[from.0 * self.width + from.1] = true;
        while let Some((r, c)) = queue.pop_front() {
            if self.at(r as i64, c as i64) == Some(PlanCell::Goal) {
                let mut path = vec![(r, c)];
                let mut cur = (r, c);
                while let Some(&p) = prev.get(&cur) {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            for a in LAKE_ORDER {
                let (dr, dc) = lake_delta(a);
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if !matches!(self.at(nr, nc), Some(PlanCell::Free | PlanCell::Goal)) {
                    continue;
                }
                let n = (nr as usize, nc as usize);
                if banned.contains(&n) || banned_edge == Some(((r, c), n)) || seen[n.0 * self.width + n.1] {
                    continue;
                }
                seen[n.0 * self.width + n.1] = true;
                prev.insert(n, (r, c));
                queue.push_back(n);
            }
        }
        None
    }
}

const LAKE_ORDER: [Action; 4] = [Action::LAKE_RIGHT, Action::LAKE_DOWN, Action::LAKE_LEFT, Action::LAKE_UP];

fn lake_delta(a: Action) -> (i64, i64) {
    match a.0 {
        0 => (0, -1),
        1 => (1, 0),
        2 => (0, 1),
        _ => (-1, 0),
    }
}

fn lake_actions(path: &[(usize, usize)]) -> Vec<Action> {
    path.windows(2)
        .map(|w| {
            let d = (w[1].0 as i64 - w[0].0 as i64, w[1].1 as i64 - w[0].1 as i64);
            *LAKE_ORDER.iter().find(|&&a| lake_delta(a) == d).expect("adjacent cells")
        })
        .collect()
}

/// Best and second-best safe lake paths from `start` (second-best: the
/// shortest path that deviates from the best one at some step).
fn lake_paths(grid: &PlanGrid, start: (usize, usize)) -> Vec<Vec<(usize, usize)>> {
    let Some(best) = grid.cell_path(start, &[], None) else { return Vec::new() };
    let mut second: Option<Vec<(usize, usize)>> = None;
    for i in 0..best.len() - 1 {
        let prefix = &best[..i];
        let edge = (best[i], best[i + 1]);
        if let Some(rest) = grid.cell_path(best[i], prefix, Some(edge)) {
            let mut cand = prefix.to_vec();
            cand.extend(rest);
            if second.as_ref().is_none_or(|s| cand.len() < s.len()) {
                second = Some(cand);
            }
        }
    }
    std::iter::once(best).chain(second).collect()
}

fn target_matches(cell: Option<PlanCell>, entity: Entity) -> bool {
    matches!(
        (cell, entity),
        (Some(PlanCell::Key), Entity::Key)
            | (Some(PlanCell::Door { .. }), Entity::Door)
            | (Some(PlanCell::Goal), Entity::Goal)
            | (Some(PlanCell::Ball), Entity::Ball | Entity::Goal)
    )
}

/// Plan for one phase on `grid` from `pose`; updates grid and pose as if
/// executed.
fn phase_plan(grid: &mut PlanGrid, pose: &mut (usize, usize, u8), phase: SubgoalPhase, task: Task) -> Option<Vec<Action>> {
    let entity = phase.entity?;
    let fetch = matches!(task, Task::Fetch(_));
    let interact = match entity {
        Entity::Key => Some(Action::PICKUP),
        Entity::Door => Some(Action::TOGGLE),
        Entity::Goal | Entity::Ball if fetch => Some(Action::PICKUP),
        _ => None,
    };
    let entity = if fetch && entity == Entity::Goal { Entity::Ball } else { entity };
    let mut plan = match interact {
        Some(_) => grid.pose_plan(*pose, false, |r, c, d| {
            let (dr, dc) = DIRS[d as usize];
            target_matches(grid.at(r + dr, c + dc), entity)
        })?,
        None => grid.pose_plan(*pose, true, |r, c, _| target_matches(grid.at(r, c), entity))?,
    };
    // replay to find the final pose
    for &a in &plan {
        let (r, c, d) = *pose;
        *pose = match a {
            Action::TURN_LEFT => (r, c, (d + 3) % 4),
            Action::TURN_RIGHT => (r, c, (d + 1) % 4),
            _ => {
                let (dr, dc) = DIRS[d as usize];
                ((r as i64 + dr) as usize, (c as i64 + dc) as usize, d)
            }
        };
    }
    if let Some(a) = interact {
        let (dr, dc) = DIRS[pose.2 as usize];
        let (fr, fc) = ((pose.0 as i64 + dr) as usize, (pose.1 as i64 + dc) as usize);
        grid.set(fr, fc, if a == Action::TOGGLE { PlanCell::Door { open: true } } else { PlanCell::Free });
        plan.push(a);
    }
    Some(plan)
}

/// What to down-weight when no plan can be formed.
fn fallback_control(family: Family, phase: SubgoalPhase) -> Action {
    match (family, phase.verb) {
        (Family::Lake, _) => Action::LAKE_UP,
        (_, Some(PhaseVerb::Toggle)) => Action::DROP,
        (_, _) if phase.entity == Some(Entity::Key) => Action::TOGGLE,
        _ => Action::DONE,
    }
}

/// Deterministic stand-in for a language model: shortest-path planning over
/// whatever the context exposes, with an optional corruption rate.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    pub corruption_rate: f64,
    rng: ChaCha8Rng,
}

const CLEAN_TOKEN_PROB: f64 = 0.9;

impl ScriptedOracle {
    pub fn new(corruption_rate: f64, seed: u64) -> Self {
        ScriptedOracle { corruption_rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn parse_map(description: &str) -> Option<(PlanGrid, (usize, usize), u8)> {
        let rows: Vec<&str> = description.lines().skip(1).filter(|l| !l.trim().is_empty()).collect();
        let (grid, start) = PlanGrid::from_text(&rows)?;
        let dir = ["east", "south", "west", "north"]
            .iter()
            .position(|d| description.contains(&format!("start facing {d}")))
            .unwrap_or(0) as u8;
        Some((grid, start, dir))
    }

    /// Clean plans for a context.
    pub fn plans(&self, ctx: &QueryContext) -> Vec<Vec<PlanSegment>> {
        match (ctx.family, ctx.offline) {
            (Family::Lake, _) => {
                let Some((grid, start, _)) = Self::parse_map(&ctx.env_description) else { return Vec::new() };
                let from = match ctx.observations.last() {
                    Some(Observation::Tabular { index, .. }) if !ctx.offline => (index / grid.width, index % grid.width),
                    _ => start,
                };
                let paths = if ctx.offline {
                    lake_paths(&grid, from)
                } else {
                    grid.cell_path(from, &[], None).into_iter().collect()
                };
                paths
                    .iter()
                    .filter(|p| p.len() > 1)
                    .map(|p| vec![PlanSegment { subgoal: SubgoalPhase::GOAL_NAVIGATE.describe(), actions: lake_actions(p) }])
                    .collect()
            }
            (Family::Grid, true) => {
                let Some((mut grid, start, dir)) = Self::parse_map(&ctx.env_description) else { return Vec::new() };
                let phases: &[SubgoalPhase] = if ctx.task == Task::DoorKey {
                    &[SubgoalPhase::KEY_NAVIGATE, SubgoalPhase::DOOR_TOGGLE, SubgoalPhase::GOAL_NAVIGATE]
                } else {
                    &[SubgoalPhase::GOAL_NAVIGATE]
                };
                let mut pose = (start.0, start.1, dir);
                let mut segs = Vec::new();
                for &ph in phases {
                    match phase_plan(&mut grid, &mut pose, ph, ctx.task) {
                        Some(actions) if !actions.is_empty() => segs.push(PlanSegment { subgoal: ph.describe(), actions }),
                        _ => break,
                    }
                }
                if segs.is_empty() { Vec::new() } else { vec![segs] }
            }
            (Family::Grid, false) => {
                let Some(Observation::Egocentric { view, size, .. }) = ctx.observations.last() else {
                    return Vec::new();
                };
                let mut grid = PlanGrid::from_window(view, *size);
                let mut pose = (size - 1, size / 2, 3u8);
                match phase_plan(&mut grid, &mut pose, ctx.phase, ctx.task) {
                    Some(actions) if !actions.is_empty() => {
                        vec![vec![PlanSegment { subgoal: ctx.phase.describe(), actions }]]
                    }
                    _ => Vec::new(),
                }
            }
        }
    }

    fn corrupted(&mut self, ctx: &QueryContext, len: usize) -> Completion {
        let n = ctx.family.n_actions();
        let actions: Vec<Action> = (0..len.max(1)).map(|_| Action(self.rng.gen_range(0..n) as u8)).collect();
        let seg = PlanSegment { subgoal: ctx.phase.describe(), actions };
        let tokens = seg.actions.len() + 1;
        Completion { text: format_plan(ctx.family, &[seg]), logprobs: Some(vec![(1.0 / n as f64).ln(); tokens]) }
    }
}

impl GuidanceProvider for ScriptedOracle {
    fn id(&self) -> &str {
        "oracle"
    }

    fn set_corruption(&mut self, rate: f64) {
        self.corruption_rate = rate;
    }

    fn complete(&mut self, ctx: &QueryContext, k: usize) -> Result<Vec<Completion>, GuidanceError> {
        let plans = self.plans(ctx);
        if ctx.offline {
            return Ok(plans
                .iter()
                .map(|segs| {
                    let tokens = segs.iter().map(|s| s.actions.len() + 1).sum();
                    Completion { text: format_plan(ctx.family, segs), logprobs: Some(vec![CLEAN_TOKEN_PROB.ln(); tokens]) }
                })
                .collect());
        }
        let clean = match plans.first() {
            Some(segs) => {
                let tokens = segs.iter().map(|s| s.actions.len() + 1).sum();
                Completion { text: format_plan(ctx.family, segs), logprobs: Some(vec![CLEAN_TOKEN_PROB.ln(); tokens]) }
            }
            None => Completion {
                text: format!("control: {}\n", ctx.family.action_name(fallback_control(ctx.family, ctx.phase))),
                logprobs: Some(vec![CLEAN_TOKEN_PROB.ln(); 2]),
            },
        };
        let clean_len = plans.first().map_or(4, |s| s.iter().map(|x| x.actions.len()).sum());
        let mut out = Vec::with_capacity(k);
        for _ in 0..k.max(1) {
            if self.corruption_rate > 0.0 && self.rng.gen_bool(self.corruption_rate.min(1.0)) {
                out.push(self.corrupted(ctx, clean_len));
            } else {
                out.push(clean.clone());
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// recorded fixtures

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub context_hash: String,
    pub completions: Vec<Completion>,
}

/// Replays completions recorded per context hash.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    entries: HashMap<String, Vec<Completion>>,
}

impl FixtureProvider {
    pub fn from_entries(entries: Vec<FixtureEntry>) -> Self {
        FixtureProvider { entries: entries.into_iter().map(|e| (e.context_hash, e.completions)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, GuidanceError> {
        let err = |msg: String| GuidanceError::Fixture { path: path.display().to_string(), msg };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let entries: Vec<FixtureEntry> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self::from_entries(entries))
    }
}

impl GuidanceProvider for FixtureProvider {
    fn id(&self) -> &str {
        "fixture"
    }

    fn complete(&mut self, ctx: &QueryContext, k: usize) -> Result<Vec<Completion>, GuidanceError> {
        let hash = context_hash(&self.prompt(ctx));
        let found = self.entries.get(&hash).ok_or(GuidanceError::FixtureMiss(hash))?;
        Ok(if ctx.offline { found.clone() } else { found.iter().take(k.max(1)).cloned().collect() })
    }
}

/// Wraps a provider and records every exchange as fixture entries.
pub struct Recorder<P> {
    pub inner: P,
    pub entries: Vec<FixtureEntry>,
}

impl<P: GuidanceProvider> Recorder<P> {
    pub fn new(inner: P) -> Self {
        Recorder { inner, entries: Vec::new() }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.entries).expect("fixtures serialize"))
    }
}

impl<P: GuidanceProvider> GuidanceProvider for Recorder<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn set_corruption(&mut self, rate: f64) {
        self.inner.set_corruption(rate);
    }

    fn complete(&mut self, ctx: &QueryContext, k: usize) -> Result<Vec<Completion>, GuidanceError> {
        let out = self.inner.complete(ctx, k)?;
        self.entries.push(FixtureEntry { context_hash: context_hash(&self.inner.prompt(ctx)), completions: out.clone() });
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// HTTP chat completions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Optional prompt template files overriding the built-in ones.
    pub online_template: Option<PathBuf>,
    pub offline_template: Option<PathBuf>,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.7,
            timeout_secs: 60,
            max_retries: 2,
            online_template: None,
            offline_template: None,
        }
    }
}

pub struct HttpProvider {
    settings: HttpSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
    online_template: String,
    offline_template: String,
}

impl HttpProvider {
    pub fn new(settings: HttpSettings) -> Result<Self, GuidanceError> {
        let read = |p: &Option<PathBuf>, default: &str| -> Result<String, GuidanceError> {
            match p {
                Some(path) => fs::read_to_string(path)
                    .map_err(|e| GuidanceError::Fixture { path: path.display().to_string(), msg: e.to_string() }),
                None => Ok(default.to_string()),
            }
        };
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(HttpProvider {
            online_template: read(&settings.online_template, ONLINE_TEMPLATE)?,
            offline_template: read(&settings.offline_template, OFFLINE_TEMPLATE)?,
            api_key: std::env::var(API_KEY_VAR).ok(),
            agent: config.into(),
            settings,
        })
    }

    fn request(&self, prompt: &str, k: usize) -> Result<Vec<Completion>, GuidanceError> {
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.settings.model,
            "messages": [{"role": "user", "content": prompt}],
            "n": k.max(1),
            "temperature": self.settings.temperature,
            "logprobs": true,
        });
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| GuidanceError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(GuidanceError::Transport(format!("{url} answered HTTP {status}")));
        }
        let v: serde_json::Value =
            resp.body_mut().read_json().map_err(|e| GuidanceError::Transport(format!("bad response body: {e}")))?;
        let choices = v["choices"].as_array().ok_or_else(|| GuidanceError::Transport("response has no choices".into()))?;
        Ok(choices
            .iter()
            .map(|c| {
                let text = c["message"]["content"].as_str().unwrap_or_default().to_string();
                let logprobs = c["logprobs"]["content"]
                    .as_array()
                    .map(|toks| toks.iter().filter_map(|t| t["logprob"].as_f64()).collect::<Vec<f64>>())
                    .filter(|l| !l.is_empty());
                Completion { text, logprobs }
            })
            .collect())
    }
}

impl GuidanceProvider for HttpProvider {
    fn id(&self) -> &str {
        "http"
    }

    fn prompt(&self, ctx: &QueryContext) -> String {
        render_prompt(if ctx.offline { &self.offline_template } else { &self.online_template }, ctx)
    }

    fn complete(&mut self, ctx: &QueryContext, k: usize) -> Result<Vec<Completion>, GuidanceError> {
        let prompt = self.prompt(ctx);
        let mut last = None;
        for attempt in 0..=self.settings.max_retries {
            match self.request(&prompt, k) {
                Ok(c) => return Ok(c),
                Err(e) => {
                    last = Some(e);
                    if attempt < self.settings.max_retries {
                        std::thread::sleep(Duration::from_millis(200 * (attempt as u64 + 1)));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

// ---------------------------------------------------------------------------
// grafting

/// Executes `segments` from `env` (without slipping) and inserts each as a
/// trajectory node. Returns the graph deltas in order.
#[allow(clippy::too_many_arguments)]
pub fn graft_plan(
    segments: &[PlanSegment],
    env: &EnvState,
    fallback_phase: SubgoalPhase,
    graph: &mut MemoryGraph,
    confidence: f64,
    source: Source,
    screened: bool,
    episode: u64,
) -> Result<Vec<GraphDelta>, GuidanceError> {
    let mut sim = env.clone();
    sim.slip_prob = 0.0;
    sim.max_steps = usize::MAX;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pending = Vec::new();
    let mut step_no = 0;
    for seg in segments {
        let tokens = tokenize_subgoal(&seg.subgoal).unwrap_or(fallback_phase);
        let start_env = sim.clone();
        let mut transitions = Vec::with_capacity(seg.actions.len());
        for &a in &seg.actions {
            if sim.done {
                break;
            }
            let pose = sim.pose();
            let phase = sim.subgoal_phase();
            sim.step(a, &mut rng).map_err(|e| GuidanceError::InvalidPlan { step: step_no, msg: e.to_string() })?;
            transitions.push(AnnotatedTransition { pos: pose.pos, dir: pose.dir, action: a, phase });
            step_no += 1;
        }
        if transitions.is_empty() {
            break;
        }
        let segment = Segment { transitions, end: Pose { pos: sim.agent_pos, dir: sim.pose().dir } };
        let r_hat = match start_env.phase_target(&tokens) {
            Some(t) => estimate_subgoal_reward(&start_env, &segment, t)?,
            None => 0.0,
        };
        pending.push((tokens, segment, r_hat));
    }
    let mut deltas = Vec::new();
    for (tokens, segment, r_hat) in pending {
        let zeta = graph.zeta_for_phase(&tokens)?;
        deltas.push(graph.insert_or_update(
            Insertion { segment, zeta, r_hat, confidence, source, screened, layout_id: env.layout_id },
            episode,
        )?);
    }
    Ok(deltas)
}

/// What applying an accepted suggestion did.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Grafted(Vec<GraphDelta>),
    Control(ControlSignal),
    Rejected,
}

/// Grafts an accepted plan or turns a control suggestion into a penalty.
pub fn apply_suggestion(
    verdict: &Verdict,
    env: &EnvState,
    phase: SubgoalPhase,
    graph: &mut MemoryGraph,
    penalty_cap: f64,
    control_steps: usize,
    episode: u64,
) -> Result<Effect, GuidanceError> {
    let Some(s) = &verdict.suggestion else { return Ok(Effect::Rejected) };
    match &s.kind {
        SuggestionKind::Plan(segs) => Ok(Effect::Grafted(graft_plan(
            segs,
            env,
            phase,
            graph,
            verdict.confidence.clamp(0.0, 1.0),
            Source::OnlineLlm,
            true,
            episode,
        )?)),
        SuggestionKind::Control(a) => Ok(Effect::Control(ControlSignal {
            penalty: LogitPenalty { action: *a, magnitude: penalty_cap * verdict.confidence.clamp(0.0, 1.0) },
            phase,
            max_steps: control_steps,
        })),
    }
}

/// Queries `provider` once per layout for an offline prior and grafts every
/// accepted completion.
pub fn build_offline_prior(
    provider: &mut dyn GuidanceProvider,
    envs: &[EnvState],
    graph: &mut MemoryGraph,
    budget: &mut QueryBudget,
    mode: ScreeningMode,
) -> Result<usize, GuidanceError> {
    let mut grafted = 0;
    for env in envs {
        let ctx = QueryContext::offline(env);
        let completions = provider.complete(&ctx, 1)?;
        budget.offline_used += 1;
        for c in &completions {
            let verdict = screen(std::slice::from_ref(c), env.family, provider.id(), match mode {
                ScreeningMode::Consistency => ScreeningMode::Disabled,
                m => m,
            })
            .or_else(|_| screen(std::slice::from_ref(c), env.family, provider.id(), ScreeningMode::Disabled))?;
            if let Some(SuggestionKind::Plan(segs)) = verdict.suggestion.as_ref().map(|s| &s.kind) {
                let conf = verdict.confidence.clamp(0.0, 1.0);
                graft_plan(segs, env, env.subgoal_phase(), graph, conf, Source::OfflineLlm, true, 0)?;
                grafted += 1;
            }
        }
    }
    Ok(grafted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{reset, GridSpec, Pos};
    use crate::memgraph::GraphSettings;

    fn sugg(text: &str, lps: Option<Vec<f64>>) -> GuidanceSuggestion {
        parse_completion(&Completion { text: text.into(), logprobs: lps }, Family::Grid, "t").unwrap()
    }

    #[test]
    fn likelihood_fixtures() {
        let s = |p: &[f64]| sugg("plan: forward", Some(p.iter().map(|x| x.ln()).collect()));
        let r = screen_by_likelihood(&s(&[1.0, 1.0])).unwrap();
        assert!(r.accepted && (r.score - 1.0).abs() < 1e-15);
        let r = screen_by_likelihood(&s(&[0.5, 0.5])).unwrap();
        assert!(!r.accepted && (r.score - 0.5).abs() < 1e-12);
        let r = screen_by_likelihood(&s(&[0.9, 0.9, 0.9])).unwrap();
        assert!(r.accepted && (r.score - 0.9).abs() < 1e-12);
        assert!(matches!(screen_by_likelihood(&sugg("plan: forward", None)), Err(GuidanceError::MissingLogprobs)));
    }

    #[test]
    fn consistency_fixtures() {
        let a = Some(sugg("plan: forward, toggle", None));
        let b = Some(sugg("plan: turn-left", None));
        let c = Some(sugg("control: toggle", None));
        let (r, rep) = screen_by_consistency(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(r.accepted && r.score == 1.0 && rep == a);
        let (r, rep) = screen_by_consistency(&[a.clone(), b.clone(), a.clone()]).unwrap();
        assert!(r.accepted && (r.score - 2.0 / 3.0).abs() < 1e-15 && rep == a);
        let (r, _) = screen_by_consistency(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert!(!r.accepted && (r.score - 1.0 / 3.0).abs() < 1e-15);
        let (r, _) = screen_by_consistency(&[a.clone(), None, None]).unwrap();
        assert!(!r.accepted);
        assert!(screen_by_consistency(&[a]).is_err());
    }

    #[test]
    fn completion_grammar() {
        let s = sugg("Sure!\nsubgoal: go to key\nplan: forward, forward, pickup\nsubgoal: toggle door\nplan: toggle", None);
        let SuggestionKind::Plan(segs) = &s.kind else { panic!() };
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].actions, vec![Action::FORWARD, Action::FORWARD, Action::PICKUP]);
        assert_eq!(sugg("control: toggle", None).kind, SuggestionKind::Control(Action::TOGGLE));
        let bad = Completion { text: "plan: fly".into(), logprobs: None };
        assert!(parse_completion(&bad, Family::Grid, "t").is_err());
        let none = Completion { text: "hello".into(), logprobs: None };
        assert!(parse_completion(&none, Family::Grid, "t").is_err());
    }

    #[test]
    fn trigger_counts_and_resets() {
        let mut t = TriggerState::new(3);
        assert_eq!([0.0, 0.0, 0.0].map(|u| t.check(u)), [false, false, true]);
        assert_eq!(t.consecutive_zero, 0);
        assert!(!t.check(0.0));
        assert_eq!(t.consecutive_zero, 1);
        let mut t = TriggerState::new(3);
        assert_eq!([0.0, 0.2, 0.0, 0.0].map(|u| t.check(u)), [false; 4]);
    }

    #[test]
    fn budget_caps_online_queries() {
        let mut b = QueryBudget::new(Some(2));
        b.charge_online().unwrap();
        b.charge_online().unwrap();
        assert!(matches!(b.charge_online(), Err(GuidanceError::BudgetExhausted { used: 2, cap: 2 })));
        assert_eq!(b.online_used, 2);
        assert!(QueryBudget::new(None).can_query_online());
    }

    fn doorkey_text() -> &'static str {
        "WWWWWW\nWSWGGW\nW.D..W\nWK...W\nWWWWWW"
    }

    #[test]
    fn oracle_plans_toggle_for_visible_door() {
        let text = "WWWWWWW\nWK.W..W\nW..D.GW\nW.SW..W\nWWWWWWW";
        let (mut env, _) = reset(&GridSpec::from_text(text).unwrap(), 0).unwrap();
        env.carrying = Some(crate::gridworld::Cell::Key(crate::gridworld::Color::Yellow));
        env.progress = 1;
        assert_eq!(env.subgoal_phase(), SubgoalPhase::DOOR_TOGGLE);
        let ctx = QueryContext::online(task_description(&env), env.family, env.task, &[env.observe()], env.subgoal_phase());
        let mut oracle = ScriptedOracle::new(0.0, 0);
        let out = oracle.complete(&ctx, 3).unwrap();
        assert_eq!(out.len(), 3);
        let v = screen(&out, Family::Grid, "oracle", ScreeningMode::Auto).unwrap();
        let s = v.suggestion.unwrap();
        let SuggestionKind::Plan(segs) = &s.kind else { panic!("{:?}", s.kind) };
        assert_eq!(*segs[0].actions.last().unwrap(), Action::TOGGLE);
        // executing the plan opens the door
        let mut g = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal").unwrap();
        let deltas = graft_plan(segs, &env, env.subgoal_phase(), &mut g, v.confidence, Source::OnlineLlm, true, 0).unwrap();
        assert_eq!(deltas.len(), 1);
        let node = g.nodes().next().unwrap();
        assert_eq!(node.r_hat, 1.0);
    }

    #[test]
    fn plan_to_key_grafts_full_reward() {
        let (env, _) = reset(&GridSpec::from_text(doorkey_text()).unwrap(), 0).unwrap();
        let segs = vec![PlanSegment {
            subgoal: "go to key".into(),
            actions: vec![Action::TURN_RIGHT, Action::FORWARD, Action::PICKUP],
        }];
        let mut g = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal").unwrap();
        let v = Verdict { suggestion: Some(sugg(&format_plan(Family::Grid, &segs), None)), confidence: 0.9, screening: None };
        let eff = apply_suggestion(&v, &env, SubgoalPhase::KEY_NAVIGATE, &mut g, 2.0, 50, 0).unwrap();
        assert!(matches!(eff, Effect::Grafted(ref d) if d.len() == 1));
        let node = g.nodes().next().unwrap();
        assert_eq!(node.r_hat, 1.0);
        assert_eq!(g.zeta_tokens(&node.zeta), Some(SubgoalPhase::KEY_NAVIGATE));
        let rejected = Verdict { suggestion: None, confidence: 0.3, screening: None };
        let before = g.clone();
        assert_eq!(apply_suggestion(&rejected, &env, SubgoalPhase::KEY_NAVIGATE, &mut g, 2.0, 50, 1).unwrap(), Effect::Rejected);
        assert_eq!(g, before);
    }

    #[test]
    fn control_suggestion_registers_penalty() {
        let (env, _) = reset(&GridSpec::from_text(doorkey_text()).unwrap(), 0).unwrap();
        let mut g = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal").unwrap();
        let v = Verdict { suggestion: Some(sugg("control: toggle", None)), confidence: 1.0, screening: None };
        let Effect::Control(sig) = apply_suggestion(&v, &env, SubgoalPhase::KEY_NAVIGATE, &mut g, 2.0, 50, 0).unwrap() else {
            panic!()
        };
        assert_eq!(sig.penalty.action, Action::TOGGLE);
        assert_eq!(sig.phase, SubgoalPhase::KEY_NAVIGATE);
        assert!(g.is_empty());
    }

    #[test]
    fn invalid_plan_is_dropped() {
        let (env, _) = reset(&GridSpec::lake8x8(), 0).unwrap();
        let segs = vec![PlanSegment { subgoal: "reach goal".into(), actions: vec![Action(6)] }];
        let mut g = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal").unwrap();
        assert!(matches!(
            graft_plan(&segs, &env, SubgoalPhase::GOAL_NAVIGATE, &mut g, 1.0, Source::OnlineLlm, true, 0),
            Err(GuidanceError::InvalidPlan { .. })
        ));
        assert!(g.is_empty());
    }

    #[test]
    fn offline_lake_prior_has_two_safe_paths() {
        let (env, _) = reset(&GridSpec::lake8x8(), 0).unwrap();
        let mut g = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal").unwrap();
        let mut budget = QueryBudget::new(Some(0));
        let mut oracle = ScriptedOracle::new(0.0, 0);
        let n = build_offline_prior(&mut oracle, std::slice::from_ref(&env), &mut g, &mut budget, ScreeningMode::Auto).unwrap();
        assert_eq!((n, budget.offline_used, g.len()), (2, 1, 2));
        for node in g.nodes() {
            assert_eq!(node.r_hat, 1.0);
            assert_eq!(node.segment.end.pos, Pos::new(7, 7));
            assert!((node.confidence - 0.9).abs() < 1e-12);
        }
        let lens: Vec<usize> = g.nodes().map(|n| n.segment.len()).collect();
        assert_eq!(lens[0], 14);
        assert!(lens[1] >= 14);
    }

    #[test]
    fn offline_doorkey_prior_covers_each_phase() {
        let (env, _) = reset(&GridSpec::doorkey(6), 3).unwrap();
        let mut g = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal").unwrap();
        let mut budget = QueryBudget::default();
        build_offline_prior(&mut ScriptedOracle::new(0.0, 0), &[env], &mut g, &mut budget, ScreeningMode::Auto).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.nodes().all(|n| n.r_hat == 1.0));
    }

    #[test]
    fn corrupted_oracle_is_rejected_by_screening() {
        let (env, _) = reset(&GridSpec::doorkey(6), 3).unwrap();
        let ctx = QueryContext::online(task_description(&env), env.family, env.task, &[env.observe()], env.subgoal_phase());
        let mut oracle = ScriptedOracle::new(1.0, 7);
        let out = oracle.complete(&ctx, 3).unwrap();
        assert!(screen(&out, Family::Grid, "oracle", ScreeningMode::Likelihood).unwrap().suggestion.is_none());
        let v = screen(&out, Family::Grid, "oracle", ScreeningMode::Disabled).unwrap();
        assert!(v.suggestion.is_some());
    }

    #[test]
    fn context_hides_agent_cell_and_outside_world() {
        let (mut env, _) = reset(&GridSpec::doorkey(8), 1).unwrap();
        env.carrying = Some(crate::gridworld::Cell::Key(crate::gridworld::Color::Yellow));
        let ctx = QueryContext::online(task_description(&env), env.family, env.task, &[env.observe()], env.subgoal_phase());
        let Observation::Egocentric { view, size, .. } = &ctx.observations[0] else { panic!() };
        assert_eq!(view[(size - 1) * size + size / 2], view_code::EMPTY);
        let prompt = render_prompt(ONLINE_TEMPLATE, &ctx);
        assert!(!prompt.contains(&env.describe()));
    }

    #[test]
    fn fixture_replays_recorded_completions() {
        let (env, _) = reset(&GridSpec::doorkey(6), 2).unwrap();
        let ctx = QueryContext::online(task_description(&env), env.family, env.task, &[env.observe()], env.subgoal_phase());
        let mut rec = Recorder::new(ScriptedOracle::new(0.5, 3));
        let first = rec.complete(&ctx, 3).unwrap();
        let mut fx = FixtureProvider::from_entries(rec.entries.clone());
        assert_eq!(fx.complete(&ctx, 3).unwrap(), first);
        let other = QueryContext { phase: SubgoalPhase::DOOR_TOGGLE, ..ctx };
        assert!(matches!(fx.complete(&other, 3), Err(GuidanceError::FixtureMiss(_))));
    }
}
