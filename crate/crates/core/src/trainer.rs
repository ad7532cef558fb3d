//! End-to-end training: rollouts, utility, shaping, PPO updates, graph
//! maintenance, guidance queries, metrics and checkpoints.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{reset, EnvError, EnvState, GridSpec, LayoutKind, Pose};
use crate::guidance::{
    apply_suggestion, build_offline_prior, screen, task_description, Effect, FixtureProvider, GuidanceError,
    GuidanceProvider, HttpProvider, HttpSettings, QueryBudget, QueryContext, ScreeningMode, ScriptedOracle,
    TriggerState,
};
use crate::memgraph::{estimate_subgoal_reward, GraphError, GraphSettings, Insertion, MemoryGraph, Segment, Source};
use crate::plot::{line_chart, Series};
use crate::ppo::{
    collect_rollouts, ppo_update, Adam, ControlSignal, EnvPool, Episode, Policy, PolicyKind, PpoError, PpoSettings,
    RolloutBatch,
};
use crate::shaping::{gae, rate_for_half_life, shaped_advantage, Decay, ShapingError, ShapingSchedule, DEFAULT_ADV_FLOOR};
use crate::utility::{compute_utility, GoalReference, UtilityError};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const FINAL_GOAL_ID: &str = "goal";
const FINAL_GOAL_TEXT: &str = "reach the goal";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("iteration {iteration}: {source}")]
    Ppo { iteration: u64, source: PpoError },
    #[error("iteration {iteration}: {source}")]
    Shaping { iteration: u64, source: ShapingError },
    #[error("iteration {iteration}: {source}")]
    Utility { iteration: u64, source: UtilityError },
    #[error("iteration {iteration}: {source}")]
    Graph { iteration: u64, source: GraphError },
    #[error("guidance: {0}")]
    Guidance(#[from] GuidanceError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Lake8x8,
    Lake4x4,
    Doorkey,
    DistractedDoorkey,
    Redball,
    Lavacrossing,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    /// Tabular on the lake, network elsewhere.
    #[default]
    Auto,
    Tabular,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub size: usize,
    pub slip_prob: Option<f64>,
    pub max_steps: Option<usize>,
    pub view_size: usize,
    /// Inline fixture grid for `kind = "text"`.
    pub layout: Option<String>,
    /// Fixture grid file for `kind = "text"`.
    pub layout_file: Option<PathBuf>,
    /// Layout seeds cycled during training.
    pub train_seeds: Vec<u64>,
    /// Held-out layout seeds for evaluation.
    pub eval_seeds: Vec<u64>,
    pub policy: PolicyChoice,
    pub hidden: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            kind: EnvKind::Doorkey,
            size: 6,
            slip_prob: None,
            max_steps: None,
            view_size: 7,
            layout: None,
            layout_file: None,
            train_seeds: vec![0],
            eval_seeds: vec![1000, 1001, 1002, 1003],
            policy: PolicyChoice::Auto,
            hidden: 64,
        }
    }
}

impl EnvConfig {
    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        let mut spec = match self.kind {
            EnvKind::Lake8x8 => GridSpec::lake8x8(),
            EnvKind::Lake4x4 => GridSpec { kind: LayoutKind::Lake4x4, width: 4, height: 4, max_steps: 100, ..GridSpec::lake8x8() },
            EnvKind::Doorkey => GridSpec::generated(LayoutKind::DoorKey, self.size),
            EnvKind::DistractedDoorkey => GridSpec::generated(LayoutKind::DistractedDoorKey, self.size),
            EnvKind::Redball => GridSpec::generated(LayoutKind::RedBall, self.size),
            EnvKind::Lavacrossing => GridSpec::generated(LayoutKind::LavaCrossing, self.size),
            EnvKind::Text => {
                let text = match (&self.layout, &self.layout_file) {
                    (Some(t), None) => t.clone(),
                    (None, Some(p)) => fs::read_to_string(p)
                        .map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?,
                    _ => return Err(ConfigError::Invalid("env.kind = \"text\" needs exactly one of env.layout, env.layout_file".into())),
                };
                GridSpec::from_text(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
        };
        if let Some(s) = self.slip_prob {
            spec.slip_prob = s;
        }
        if let Some(m) = self.max_steps {
            spec.max_steps = m;
        }
        spec.view_size = self.view_size;
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    pub fn policy_kind(&self, spec: &GridSpec) -> PolicyKind {
        match (self.policy, spec.family().is_tabular()) {
            (PolicyChoice::Tabular, _) | (PolicyChoice::Auto, true) => PolicyKind::Tabular,
            _ => PolicyKind::Mlp { hidden: self.hidden },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XiSpec {
    One(f64),
    Levels(Vec<f64>),
}

impl XiSpec {
    pub fn levels(&self) -> Vec<f64> {
        match self {
            XiSpec::One(x) => vec![*x],
            XiSpec::Levels(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayKind {
    Linear,
    #[default]
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    /// `false` runs the plain PPO path: no utility, graph or guidance.
    pub enabled: bool,
    pub eta0: f64,
    pub xi0: XiSpec,
    pub delta: f64,
    pub decay: DecayKind,
    /// Iteration at which `(η, ξ) = (1, 0)`; defaults to the final iteration.
    pub horizon: Option<u64>,
    /// Exponential rate; defaults to the one giving `half_life`.
    pub rate: Option<f64>,
    /// ξ half-life as a fraction of the run.
    pub half_life: f64,
    /// η ramp length as a fraction of the run (exponential decay).
    pub eta_ramp: f64,
    /// Iterations per ξ level as a fraction of the run.
    pub level_span: f64,
    pub adv_floor: f64,
    pub goal_reference: GoalReferenceChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalReferenceChoice {
    #[default]
    AgentPhase,
    /// Compare node goal terms against the final goal.
    TargetGoal,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            enabled: true,
            eta0: 0.8,
            xi0: XiSpec::One(0.25),
            delta: 0.5,
            decay: DecayKind::Exponential,
            horizon: None,
            rate: None,
            half_life: 0.15,
            eta_ramp: 0.25,
            level_span: 0.1,
            adv_floor: DEFAULT_ADV_FLOOR,
            goal_reference: GoalReferenceChoice::AgentPhase,
        }
    }
}

impl ShapingConfig {
    pub fn schedule(&self, iterations: u64) -> Result<ShapingSchedule, ConfigError> {
        let frac = |f: f64| ((f * iterations as f64).round() as u64).max(1);
        let horizon = self.horizon.unwrap_or(iterations.saturating_sub(1).max(1));
        let decay = match self.decay {
            DecayKind::Linear => Decay::Linear,
            DecayKind::Exponential => Decay::Exponential {
                rate: self.rate.unwrap_or_else(|| rate_for_half_life(self.half_life * iterations as f64)),
            },
        };
        let s = ShapingSchedule {
            eta0: self.eta0,
            xi_levels: self.xi0.levels(),
            delta: self.delta,
            decay,
            horizon,
            eta_ramp: match self.decay {
                DecayKind::Linear => horizon,
                DecayKind::Exponential => frac(self.eta_ramp),
            },
            level_span: frac(self.level_span),
        };
        s.validate().map_err(|e| ConfigError::Invalid(format!("shaping: {e}")))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemgraphConfig {
    pub prune_window: u64,
    pub confidence_bump: f64,
    pub per_key_capacity: usize,
    /// Offer high-return agent segments to the graph.
    pub insert_agent_segments: bool,
    pub agent_confidence: f64,
    /// Episodes must beat this quantile of recent returns to be inserted.
    pub insert_quantile: f64,
    pub return_window: usize,
    /// Longest stored agent segment (tail of a phase run).
    pub max_segment_len: usize,
}

impl Default for MemgraphConfig {
    fn default() -> Self {
        MemgraphConfig {
            prune_window: 100,
            confidence_bump: 0.1,
            per_key_capacity: 4,
            insert_agent_segments: true,
            agent_confidence: 0.5,
            insert_quantile: 0.9,
            return_window: 100,
            max_segment_len: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderChoice {
    #[default]
    None,
    Oracle,
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub provider: ProviderChoice,
    /// Query the provider once per training layout before training.
    pub offline_prior: bool,
    /// Number of training layouts (from the front of env.train_seeds)
    /// covered by the offline prior; absent means all.
    pub offline_layouts: Option<usize>,
    /// Graph file loaded as the initial memory.
    pub priors_file: Option<PathBuf>,
    /// Online query cap; absent means unlimited.
    pub online_cap: Option<u64>,
    pub trigger_threshold: u32,
    pub completions: usize,
    pub screening: ScreeningMode,
    pub corruption_rate: f64,
    /// Fraction of the run after which corruption applies.
    pub corruption_after: f64,
    /// Screening used once corruption applies.
    pub screening_after_corruption: Option<ScreeningMode>,
    pub control_steps: usize,
    pub fixture_file: Option<PathBuf>,
    pub http: HttpSettings,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            provider: ProviderChoice::None,
            offline_prior: false,
            offline_layouts: None,
            priors_file: None,
            online_cap: Some(0),
            trigger_threshold: 10,
            completions: 3,
            screening: ScreeningMode::Auto,
            corruption_rate: 0.0,
            corruption_after: 0.0,
            screening_after_corruption: None,
            control_steps: 50,
            fixture_file: None,
            http: HttpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: u64,
    pub seed: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { iterations: 100, seed: 0, eval_interval: 10, eval_episodes: 5, checkpoint_interval: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub ppo: PpoSettings,
    pub shaping: ShapingConfig,
    pub memgraph: MemgraphConfig,
    pub guidance: GuidanceConfig,
    pub run: RunConfig,
}

/// Every config key with a short description, for `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("env.kind", "lake8x8 | lake4x4 | doorkey | distracted-doorkey | redball | lavacrossing | text"),
    ("env.size", "side length of generated layouts"),
    ("env.slip_prob", "lake slip probability (default 2/3)"),
    ("env.max_steps", "episode horizon"),
    ("env.view_size", "egocentric window side (odd)"),
    ("env.layout", "inline fixture grid for kind = text"),
    ("env.layout_file", "fixture grid file for kind = text"),
    ("env.train_seeds", "layout seeds used for training"),
    ("env.eval_seeds", "held-out layout seeds for evaluation"),
    ("env.policy", "auto | tabular | mlp"),
    ("env.hidden", "hidden units per layer of the network"),
    ("ppo.lr", "Adam learning rate"),
    ("ppo.batch_size", "steps per iteration (complete episodes)"),
    ("ppo.minibatch_size", "minibatch size"),
    ("ppo.epochs", "passes per iteration"),
    ("ppo.entropy_coef", "entropy bonus"),
    ("ppo.vf_coef", "value-loss weight"),
    ("ppo.gamma", "discount"),
    ("ppo.lambda", "GAE lambda"),
    ("ppo.clip", "ratio clip epsilon"),
    ("ppo.max_grad_norm", "global gradient-norm clip"),
    ("ppo.normalize_advantages", "per-minibatch advantage normalization"),
    ("ppo.penalty_cap", "largest logit penalty"),
    ("shaping.enabled", "false runs plain PPO"),
    ("shaping.eta0", "initial advantage weight"),
    ("shaping.xi0", "initial utility weight, or a list of levels"),
    ("shaping.delta", "cap on xi/eta"),
    ("shaping.decay", "linear | exponential"),
    ("shaping.horizon", "iteration at which (eta, xi) = (1, 0)"),
    ("shaping.rate", "exponential xi decay rate"),
    ("shaping.half_life", "xi half-life as a fraction of the run"),
    ("shaping.eta_ramp", "eta ramp length as a fraction of the run"),
    ("shaping.level_span", "iterations per xi level as a fraction of the run"),
    ("shaping.adv_floor", "floor on the batch advantage scale"),
    ("shaping.goal_reference", "agent-phase | target-goal"),
    ("memgraph.prune_window", "episodes without access before pruning"),
    ("memgraph.confidence_bump", "confidence added on agent validation"),
    ("memgraph.per_key_capacity", "segments kept per (layout, goal term)"),
    ("memgraph.insert_agent_segments", "offer high-return episodes to the graph"),
    ("memgraph.agent_confidence", "confidence of agent segments"),
    ("memgraph.insert_quantile", "return quantile an episode must beat"),
    ("memgraph.return_window", "episodes in the running return window"),
    ("memgraph.max_segment_len", "longest stored agent segment"),
    ("guidance.provider", "none | oracle | fixture | http"),
    ("guidance.offline_prior", "query once per training layout before training"),
    ("guidance.offline_layouts", "training layouts covered by the offline prior (default all)"),
    ("guidance.priors_file", "graph file loaded as the initial memory"),
    ("guidance.online_cap", "online query cap (omit for unlimited)"),
    ("guidance.trigger_threshold", "zero-utility episodes before a query"),
    ("guidance.completions", "completions requested per query"),
    ("guidance.screening", "auto | likelihood | consistency | disabled"),
    ("guidance.corruption_rate", "oracle plan corruption probability"),
    ("guidance.corruption_after", "fraction of the run before corruption starts"),
    ("guidance.screening_after_corruption", "screening once corruption starts"),
    ("guidance.control_steps", "step bound on control penalties"),
    ("guidance.fixture_file", "recorded completions for the fixture provider"),
    ("guidance.http.base_url", "chat-completions endpoint base URL"),
    ("guidance.http.model", "model name"),
    ("guidance.http.temperature", "sampling temperature"),
    ("guidance.http.timeout_secs", "request timeout"),
    ("guidance.http.max_retries", "retries on transport failure"),
    ("guidance.http.online_template", "online prompt template file"),
    ("guidance.http.offline_template", "offline prompt template file"),
    ("run.iterations", "training iterations"),
    ("run.seed", "policy and rollout seed"),
    ("run.eval_interval", "iterations between evaluations"),
    ("run.eval_episodes", "greedy episodes per evaluation seed"),
    ("run.checkpoint_interval", "iterations between checkpoints (0: final only)"),
];

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.env.layout_file);
        rebase(&mut cfg.guidance.priors_file);
        rebase(&mut cfg.guidance.fixture_file);
        rebase(&mut cfg.guidance.http.online_template);
        rebase(&mut cfg.guidance.http.offline_template);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.env.grid_spec()?;
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.shaping.enabled {
            self.shaping.schedule(self.run.iterations)?;
        }
        if self.run.iterations == 0 {
            return bad("run.iterations must be positive".into());
        }
        if self.env.train_seeds.is_empty() {
            return bad("env.train_seeds needs at least one seed".into());
        }
        if self.env.eval_seeds.iter().any(|s| self.env.train_seeds.contains(s)) && !self.env.kind.is_fixed() {
            return bad("env.eval_seeds must be disjoint from env.train_seeds".into());
        }
        if !(0.0..=1.0).contains(&self.guidance.corruption_rate) || !(0.0..=1.0).contains(&self.guidance.corruption_after) {
            return bad("guidance.corruption_rate and guidance.corruption_after must lie in [0, 1]".into());
        }
        if self.guidance.trigger_threshold == 0 {
            return bad("guidance.trigger_threshold must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.memgraph.agent_confidence) || !(0.0..=1.0).contains(&self.memgraph.insert_quantile) {
            return bad("memgraph.agent_confidence and memgraph.insert_quantile must lie in [0, 1]".into());
        }
        if self.guidance.provider == ProviderChoice::Fixture && self.guidance.fixture_file.is_none() {
            return bad("guidance.provider = \"fixture\" needs guidance.fixture_file".into());
        }
        if self.guidance.offline_prior && self.guidance.provider == ProviderChoice::None {
            return bad("guidance.offline_prior needs a guidance.provider".into());
        }
        Ok(())
    }
}

impl EnvKind {
    fn is_fixed(self) -> bool {
        matches!(self, EnvKind::Lake8x8 | EnvKind::Lake4x4 | EnvKind::Text)
    }
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_abs_adv: f64,
    pub mean_utility: f64,
    pub eta: f64,
    pub xi: f64,
    pub delta: f64,
    pub graph_size: usize,
    pub online_queries_used: u64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

pub const METRICS_HEADER: &str = "iteration,env_steps,mean_return,success_rate,mean_abs_adv,mean_utility,eta,xi,delta,graph_size,online_queries_used,clip_fraction,approx_kl";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.mean_return,
            self.success_rate,
            self.mean_abs_adv,
            self.mean_utility,
            self.eta,
            self.xi,
            self.delta,
            self.graph_size,
            self.online_queries_used,
            self.clip_fraction,
            self.approx_kl
        )
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return None;
        }
        let n = |i: usize| f[i].parse::<f64>().ok();
        Some(MetricsRow {
            iteration: f[0].parse().ok()?,
            env_steps: f[1].parse().ok()?,
            mean_return: n(2)?,
            success_rate: n(3)?,
            mean_abs_adv: n(4)?,
            mean_utility: n(5)?,
            eta: n(6)?,
            xi: n(7)?,
            delta: n(8)?,
            graph_size: f[9].parse().ok()?,
            online_queries_used: f[10].parse().ok()?,
            clip_fraction: n(11)?,
            approx_kl: n(12)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(TrainError::Checkpoint { path: path.display().to_string(), msg: "not a metrics file".into() });
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            MetricsRow::parse_csv(l).ok_or_else(|| TrainError::Checkpoint {
                path: path.display().to_string(),
                msg: format!("malformed row {}", i + 2),
            })
        })
        .collect()
}

/// Mean return at the first row whose success rate strictly exceeds 0.9.
pub fn sr90_return(metrics: &[MetricsRow]) -> Option<f64> {
    metrics.iter().find(|m| m.success_rate > 0.9).map(|m| m.mean_return)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub std_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: u64,
    pub result: EvalResult,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Greedy evaluation (ties broken uniformly) over `episodes` per layout
/// seed; std is across seeds.
pub fn evaluate(policy: &Policy, spec: &GridSpec, seeds: &[u64], episodes: usize) -> Result<EvalResult, TrainError> {
    let mut per_seed_ret = Vec::new();
    let mut per_seed_succ = Vec::new();
    for &seed in seeds {
        let mut ret = 0.0;
        let mut succ = 0.0;
        for ep in 0..episodes.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(ep as u64));
            let (mut env, mut obs) = reset(spec, seed)?;
            loop {
                let features = obs.features();
                let (logits, _) = policy
                    .evaluate(&features)
                    .map_err(|source| TrainError::Ppo { iteration: 0, source })?;
                let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ties: Vec<usize> = (0..logits.len()).filter(|&a| logits[a] == best).collect();
                let a = ties[if ties.len() > 1 { rng.gen_range(0..ties.len()) } else { 0 }];
                let out = env.step(crate::gridworld::Action(a as u8), &mut rng)?;
                ret += out.reward;
                obs = out.obs;
                if out.done {
                    if out.success {
                        succ += 1.0;
                    }
                    break;
                }
            }
        }
        per_seed_ret.push(ret / episodes.max(1) as f64);
        per_seed_succ.push(succ / episodes.max(1) as f64);
    }
    let (mean_return, std_return) = mean_std(&per_seed_ret);
    let (success_rate, std_success) = mean_std(&per_seed_succ);
    Ok(EvalResult { mean_return, std_return, success_rate, std_success })
}

// ---------------------------------------------------------------------------
// trainer

/// Everything a run produces, kept in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    pub graph: Option<MemoryGraph>,
    pub policy: Policy,
    pub budget: QueryBudget,
    /// Iterations at which a query was charged.
    pub query_iterations: Vec<u64>,
    /// Iterations at which the trigger fired.
    pub trigger_iterations: Vec<u64>,
    pub log: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub config: TrainConfig,
    pub policy: Policy,
    pub adam: Adam,
    pub graph: Option<serde_json::Value>,
    pub budget: QueryBudget,
    pub trigger: TriggerState,
    pub recent_returns: Vec<f64>,
    pub episodes_seen: u64,
    pub env_steps: u64,
    pub pool_cursor: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, serde_json::to_string(self).expect("checkpoint serializes")).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| TrainError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint {
                path: path.display().to_string(),
                msg: format!("version {} is not supported", ck.version),
            });
        }
        Ok(ck)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub spec: GridSpec,
    pub policy: Policy,
    adam: Adam,
    pool: EnvPool,
    rng: ChaCha8Rng,
    schedule: Option<ShapingSchedule>,
    pub graph: Option<MemoryGraph>,
    provider: Option<Box<dyn GuidanceProvider>>,
    pub budget: QueryBudget,
    trigger: TriggerState,
    pending_control: Option<ControlSignal>,
    recent_returns: VecDeque<f64>,
    episodes_seen: u64,
    env_steps: u64,
    next_iteration: u64,
    pub result: RunResult,
    budget_logged: bool,
}

fn graph_settings(m: &MemgraphConfig) -> GraphSettings {
    GraphSettings { prune_window: m.prune_window, confidence_bump: m.confidence_bump, per_key_capacity: m.per_key_capacity }
}

fn quantile(values: &VecDeque<f64>, q: f64) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx.min(v.len() - 1)]
}

/// Contiguous runs of equal phase within one episode, as index ranges.
pub fn phase_runs(batch: &RolloutBatch, e: &Episode) -> Vec<std::ops::Range<usize>> {
    let steps = batch.episode_steps(e);
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=steps.len() {
        if t == steps.len() || steps[t].transition.phase != steps[start].transition.phase {
            runs.push(start..t);
            start = t;
        }
    }
    runs
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        Self::with_provider(config, None)
    }

    /// Builds a trainer; `provider` overrides the configured one.
    pub fn with_provider(config: TrainConfig, provider: Option<Box<dyn GuidanceProvider>>) -> Result<Self, TrainError> {
        config.validate()?;
        let spec = config.env.grid_spec()?;
        let (probe, obs) = reset(&spec, config.env.train_seeds[0])?;
        let kind = config.env.policy_kind(&spec);
        let policy = Policy::for_observation(kind, &obs, probe.family.n_actions(), config.run.seed);
        let adam = Adam::new(policy.n_params());
        let pool = EnvPool::new(spec.clone(), config.env.train_seeds.clone())
            .map_err(|source| TrainError::Ppo { iteration: 0, source })?;
        let shaped = config.shaping.enabled;
        let schedule = if shaped { Some(config.shaping.schedule(config.run.iterations)?) } else { None };
        let mut graph = None;
        if shaped {
            graph = Some(match &config.guidance.priors_file {
                Some(p) => {
                    let mut g = MemoryGraph::load(p).map_err(|source| TrainError::Graph { iteration: 0, source })?;
                    g.settings = graph_settings(&config.memgraph);
                    g
                }
                None => MemoryGraph::new(graph_settings(&config.memgraph), FINAL_GOAL_ID, FINAL_GOAL_TEXT)
                    .map_err(|source| TrainError::Graph { iteration: 0, source })?,
            });
        }
        let provider: Option<Box<dyn GuidanceProvider>> = match provider {
            Some(p) => Some(p),
            None if !shaped => None,
            None => match config.guidance.provider {
                ProviderChoice::None => None,
                ProviderChoice::Oracle => {
                    Some(Box::new(ScriptedOracle::new(0.0, config.run.seed ^ 0x6f72_6163_6c65)))
                }
                ProviderChoice::Fixture => Some(Box::new(FixtureProvider::load(
                    config.guidance.fixture_file.as_deref().expect("validated"),
                )?)),
                ProviderChoice::Http => Some(Box::new(HttpProvider::new(config.guidance.http.clone())?)),
            },
        };
        let budget = QueryBudget::new(config.guidance.online_cap);
        let trigger = TriggerState::new(config.guidance.trigger_threshold);
        let rng = ChaCha8Rng::seed_from_u64(config.run.seed);
        let mut t = Trainer {
            spec,
            policy: policy.clone(),
            adam,
            pool,
            rng,
            schedule,
            graph,
            provider,
            budget,
            trigger,
            pending_control: None,
            recent_returns: VecDeque::new(),
            episodes_seen: 0,
            env_steps: 0,
            next_iteration: 0,
            result: RunResult {
                metrics: Vec::new(),
                evals: Vec::new(),
                graph: None,
                policy,
                budget,
                query_iterations: Vec::new(),
                trigger_iterations: Vec::new(),
                log: Vec::new(),
            },
            budget_logged: false,
            config,
        };
        if t.config.guidance.offline_prior {
            t.offline_prior()?;
        }
        Ok(t)
    }

    fn offline_prior(&mut self) -> Result<(), TrainError> {
        let (Some(graph), Some(provider)) = (self.graph.as_mut(), self.provider.as_mut()) else { return Ok(()) };
        let covered = self.config.guidance.offline_layouts.unwrap_or(usize::MAX);
        let envs = self
            .config
            .env
            .train_seeds
            .iter()
            .take(covered)
            .map(|&s| reset(&self.spec, s).map(|(e, _)| e))
            .collect::<Result<Vec<EnvState>, _>>()?;
        let n = build_offline_prior(provider.as_mut(), &envs, graph, &mut self.budget, self.config.guidance.screening)?;
        self.result.log.push(format!("offline prior: {n} plans grafted from {} layouts", envs.len()));
        Ok(())
    }

    /// Restores optimizer, graph and counters from a checkpoint.
    pub fn resume(&mut self, ck: Checkpoint) -> Result<(), TrainError> {
        if ck.policy.n_params() != self.policy.n_params() {
            return Err(TrainError::Checkpoint { path: String::new(), msg: "policy shape does not match the config".into() });
        }
        self.policy = ck.policy;
        self.adam = ck.adam;
        if let Some(g) = ck.graph {
            let g = MemoryGraph::from_json(&g.to_string()).map_err(|source| TrainError::Graph { iteration: ck.iteration, source })?;
            self.graph = Some(g);
        }
        self.budget = ck.budget;
        self.trigger = ck.trigger;
        self.recent_returns = ck.recent_returns.into();
        self.episodes_seen = ck.episodes_seen;
        self.env_steps = ck.env_steps;
        self.pool.set_cursor(ck.pool_cursor);
        self.next_iteration = ck.iteration + 1;
        // the rollout stream restarts from a seed derived from the iteration
        self.rng = ChaCha8Rng::seed_from_u64(self.config.run.seed ^ (ck.iteration + 1).wrapping_mul(0x2545_f491_4f6c_dd1d));
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration: self.next_iteration.saturating_sub(1),
            config: self.config.clone(),
            policy: self.policy.clone(),
            adam: self.adam.clone(),
            graph: self.graph.as_ref().map(|g| serde_json::from_str(&g.to_json()).expect("graph json")),
            budget: self.budget,
            trigger: self.trigger,
            recent_returns: self.recent_returns.iter().copied().collect(),
            episodes_seen: self.episodes_seen,
            env_steps: self.env_steps,
            pool_cursor: self.pool.cursor(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.next_iteration >= self.config.run.iterations
    }

    /// Runs one iteration and returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow, TrainError> {
        let k = self.next_iteration;
        let total = self.config.run.iterations;
        let (eta, xi) = match &self.schedule {
            Some(s) => s.at(k).map_err(|source| TrainError::Shaping { iteration: k, source })?,
            None => (1.0, 0.0),
        };
        let corrupt_from = (self.config.guidance.corruption_after * total as f64).ceil() as u64;
        let corrupted = self.config.guidance.corruption_rate > 0.0 && k >= corrupt_from;
        if let Some(p) = self.provider.as_mut() {
            p.set_corruption(if corrupted { self.config.guidance.corruption_rate } else { 0.0 });
        }
        let control = self.pending_control.take();
        let track_queries = self.provider.is_some() && self.graph.is_some();
        let batch = collect_rollouts(
            &self.policy,
            &mut self.pool,
            self.config.ppo.batch_size,
            control.as_ref(),
            track_queries,
            &mut self.rng,
        )
        .map_err(|source| TrainError::Ppo { iteration: k, source })?;

        let (advantages, returns) = self.advantages(&batch, k)?;
        let (utilities, episode_utility) = match &self.graph {
            Some(_) => self.utilities(&batch, k)?,
            None => (Vec::new(), Vec::new()),
        };
        let policy_adv = if self.graph.is_some() {
            shaped_advantage(&advantages, &utilities, eta, xi, self.config.shaping.adv_floor)
                .map_err(|source| TrainError::Shaping { iteration: k, source })?
                .shaped
        } else {
            advantages.clone()
        };
        let diag = ppo_update(&mut self.policy, &mut self.adam, &batch, &policy_adv, &returns, &self.config.ppo, &mut self.rng)
            .map_err(|source| TrainError::Ppo { iteration: k, source })?;

        let first_episode = self.episodes_seen;
        if self.graph.is_some() {
            self.insert_agent_segments(&batch, first_episode, k)?;
        }
        for e in &batch.episodes {
            if self.recent_returns.len() == self.config.memgraph.return_window.max(1) {
                self.recent_returns.pop_front();
            }
            self.recent_returns.push_back(e.ret);
        }
        self.episodes_seen += batch.episodes.len() as u64;
        self.env_steps += batch.len() as u64;
        if let Some(g) = self.graph.as_mut() {
            g.prune(self.episodes_seen);
        }
        if self.graph.is_some() {
            self.guidance_step(&batch, &episode_utility, first_episode, k, corrupted)?;
        }

        let n_ep = batch.episodes.len() as f64;
        let row = MetricsRow {
            iteration: k,
            env_steps: self.env_steps,
            mean_return: batch.episodes.iter().map(|e| e.ret).sum::<f64>() / n_ep,
            success_rate: batch.episodes.iter().filter(|e| e.success).count() as f64 / n_ep,
            mean_abs_adv: crate::shaping::mean_abs(&advantages),
            mean_utility: if utilities.is_empty() { 0.0 } else { utilities.iter().sum::<f64>() / utilities.len() as f64 },
            eta,
            xi,
            delta: xi / eta,
            graph_size: self.graph.as_ref().map_or(0, |g| g.len()),
            online_queries_used: self.budget.online_used,
            clip_fraction: diag.clip_fraction,
            approx_kl: diag.approx_kl,
        };
        self.result.metrics.push(row.clone());
        let interval = self.config.run.eval_interval;
        if interval > 0 && ((k + 1).is_multiple_of(interval) || k + 1 == total) {
            let result = evaluate(&self.policy, &self.spec, &self.config.env.eval_seeds, self.config.run.eval_episodes)?;
            self.result.evals.push(EvalRow { iteration: k, result });
        }
        self.next_iteration += 1;
        Ok(row)
    }

    fn advantages(&self, batch: &RolloutBatch, k: u64) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let mut adv = Vec::with_capacity(batch.len());
        for e in &batch.episodes {
            let steps = batch.episode_steps(e);
            let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
            let mut values: Vec<f64> = steps.iter().map(|s| s.value).collect();
            // complete episodes: terminal and horizon-truncated alike bootstrap 0
            values.push(0.0);
            adv.extend(
                gae(&rewards, &values, self.config.ppo.gamma, self.config.ppo.lambda)
                    .map_err(|source| TrainError::Shaping { iteration: k, source })?,
            );
        }
        let returns = adv.iter().zip(&batch.steps).map(|(a, s)| a + s.value).collect();
        Ok((adv, returns))
    }

    /// Per-step utilities and per-episode sums. Each phase run is matched
    /// against the candidate node giving it the largest total utility.
    fn utilities(&mut self, batch: &RolloutBatch, k: u64) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let graph = self.graph.as_ref().expect("shaped path");
        let reference = self.config.shaping.goal_reference;
        let mut u = vec![0.0; batch.len()];
        let mut sums = Vec::with_capacity(batch.episodes.len());
        let mut accessed = Vec::new();
        for (i, e) in batch.episodes.iter().enumerate() {
            let episode_no = self.episodes_seen + i as u64;
            let mut sum = 0.0;
            for run in phase_runs(batch, e) {
                let steps = &batch.episode_steps(e)[run.clone()];
                let phase = steps[0].transition.phase;
                let transitions: Vec<_> = steps.iter().map(|s| s.transition).collect();
                let mut best: Option<(f64, Vec<f64>, u64)> = None;
                for node in graph.candidates(e.layout_id, &phase) {
                    let tokens = graph.zeta_tokens(&node.zeta).expect("node goal term exists");
                    let r = match reference {
                        GoalReferenceChoice::AgentPhase => GoalReference::AgentPhase,
                        GoalReferenceChoice::TargetGoal => GoalReference::TargetGoal(graph.final_goals[0].tokens),
                    };
                    let uv = compute_utility(&transitions, node, &tokens, r)
                        .map_err(|source| TrainError::Utility { iteration: k, source })?;
                    let total = uv.sum();
                    if total > 0.0 && best.as_ref().is_none_or(|(b, _, _)| total > *b) {
                        best = Some((total, uv.values, node.id));
                    }
                }
                if let Some((total, values, id)) = best {
                    for (j, v) in values.into_iter().enumerate() {
                        u[e.start + run.start + j] = v;
                    }
                    sum += total;
                    accessed.push((id, episode_no));
                }
            }
            sums.push(sum);
        }
        let graph = self.graph.as_mut().expect("shaped path");
        for (id, ep) in accessed {
            graph.record_access(id, ep).map_err(|source| TrainError::Graph { iteration: k, source })?;
        }
        Ok((u, sums))
    }

    fn insert_agent_segments(&mut self, batch: &RolloutBatch, first_episode: u64, k: u64) -> Result<(), TrainError> {
        if !self.config.memgraph.insert_agent_segments {
            return Ok(());
        }
        let threshold = quantile(&self.recent_returns, self.config.memgraph.insert_quantile);
        let max_len = self.config.memgraph.max_segment_len.max(1);
        let conf = self.config.memgraph.agent_confidence;
        let graph = self.graph.as_mut().expect("shaped path");
        for (i, e) in batch.episodes.iter().enumerate() {
            if !(e.ret > threshold && e.ret > 0.0) {
                continue;
            }
            let steps = batch.episode_steps(e);
            let runs = phase_runs(batch, e);
            for (ri, run) in runs.iter().enumerate() {
                let phase = steps[run.start].transition.phase;
                let start_env = e
                    .phase_starts
                    .iter()
                    .rev()
                    .find(|(t, _)| *t <= run.start)
                    .map(|(_, env)| env)
                    .expect("episode start snapshot");
                let Some(target) = start_env.phase_target(&phase) else { continue };
                let tail = run.end.saturating_sub(max_len).max(run.start)..run.end;
                let transitions: Vec<_> = steps[tail].iter().map(|s| s.transition).collect();
                let end = match runs.get(ri + 1) {
                    Some(next) => Pose { pos: steps[next.start].transition.pos, dir: steps[next.start].transition.dir },
                    None => e.final_pose,
                };
                let segment = Segment { transitions, end };
                let r_hat = estimate_subgoal_reward(start_env, &segment, target)
                    .map_err(|source| TrainError::Graph { iteration: k, source })?;
                let zeta = graph.zeta_for_phase(&phase).map_err(|source| TrainError::Graph { iteration: k, source })?;
                graph
                    .insert_or_update(
                        Insertion { segment, zeta, r_hat, confidence: conf, source: Source::Agent, screened: true, layout_id: e.layout_id },
                        first_episode + i as u64,
                    )
                    .map_err(|source| TrainError::Graph { iteration: k, source })?;
            }
        }
        Ok(())
    }

    fn guidance_step(
        &mut self,
        batch: &RolloutBatch,
        episode_utility: &[f64],
        first_episode: u64,
        k: u64,
        corrupted: bool,
    ) -> Result<(), TrainError> {
        let mut fired_at = None;
        for (i, &sum) in episode_utility.iter().enumerate() {
            if self.trigger.check(sum) && fired_at.is_none() {
                fired_at = Some(i);
            }
        }
        let Some(i) = fired_at else { return Ok(()) };
        self.result.trigger_iterations.push(k);
        let Some(provider) = self.provider.as_mut() else { return Ok(()) };
        if !self.budget.can_query_online() {
            if !self.budget_logged {
                self.result.log.push(format!("iteration {k}: trigger fired but the online budget is exhausted; continuing"));
                self.budget_logged = true;
            }
            return Ok(());
        }
        // most recent zero-utility episode up to the firing one
        let e = (0..=i).rev().find(|&j| episode_utility[j] == 0.0).map(|j| &batch.episodes[j]).expect("firing episode");
        let Some(qp) = &e.query_point else { return Ok(()) };
        let phase = qp.env.subgoal_phase();
        let ctx = QueryContext::online(task_description(&qp.env), qp.env.family, qp.env.task, &qp.recent, phase);
        let completions = match provider.complete(&ctx, self.config.guidance.completions) {
            Ok(c) => c,
            Err(GuidanceError::Transport(msg)) => {
                self.result.log.push(format!("iteration {k}: query failed, not charged: {msg}"));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        self.budget.charge_online()?;
        self.result.query_iterations.push(k);
        let mode = match (corrupted, self.config.guidance.screening_after_corruption) {
            (true, Some(m)) => m,
            _ => self.config.guidance.screening,
        };
        let verdict = screen(&completions, qp.env.family, provider.id(), mode)?;
        let graph = self.graph.as_mut().expect("shaped path");
        let effect = match apply_suggestion(
            &verdict,
            &qp.env,
            phase,
            graph,
            self.config.ppo.penalty_cap,
            self.config.guidance.control_steps,
            first_episode + i as u64,
        ) {
            Ok(eff) => eff,
            Err(GuidanceError::InvalidPlan { step, msg }) => {
                self.result.log.push(format!("iteration {k}: suggestion dropped at plan step {step}: {msg}"));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let what = match &effect {
            Effect::Grafted(d) => format!("grafted {} segment(s)", d.len()),
            Effect::Control(c) => format!("control penalty on action {}", c.penalty.action.0),
            Effect::Rejected => "rejected by screening".into(),
        };
        self.result.log.push(format!("iteration {k}: query {} for {}: {what}", self.budget.online_used, phase));
        if let Effect::Control(sig) = effect {
            self.pending_control = Some(sig);
        }
        Ok(())
    }

    /// Runs the remaining iterations, calling `on_row` after each.
    pub fn run_with(&mut self, mut on_row: impl FnMut(&Trainer, &MetricsRow) -> Result<(), TrainError>) -> Result<RunResult, TrainError> {
        while !self.is_done() {
            let row = self.step()?;
            on_row(self, &row)?;
        }
        self.result.graph = self.graph.clone();
        self.result.policy = self.policy.clone();
        self.result.budget = self.budget;
        Ok(self.result.clone())
    }

    pub fn run(&mut self) -> Result<RunResult, TrainError> {
        self.run_with(|_, _| Ok(()))
    }
}

/// Trains in memory.
pub fn train_in_memory(config: TrainConfig) -> Result<RunResult, TrainError> {
    Trainer::new(config)?.run()
}

fn write(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub fn learning_curve_svg(rows: &[MetricsRow], evals: &[EvalRow], title: &str) -> String {
    let xs: Vec<f64> = rows.iter().map(|r| r.iteration as f64).collect();
    let mut series = vec![Series::new("train return", xs.clone(), rows.iter().map(|r| r.mean_return).collect())];
    if !evals.is_empty() {
        let mut s = Series::new(
            "eval return",
            evals.iter().map(|e| e.iteration as f64).collect(),
            evals.iter().map(|e| e.result.mean_return).collect(),
        );
        s.band = Some(evals.iter().map(|e| e.result.std_return).collect());
        series.push(s);
    }
    series.push(Series::new("delta", xs, rows.iter().map(|r| r.delta).collect()));
    line_chart(&series, title, "iteration", "value")
}

/// Trains and writes the run directory: `config.toml`, `metrics.csv`,
/// `eval.csv`, `checkpoints/ckpt_<iter>.json`, `graph_final.json`,
/// `learning_curve.svg` and `log.txt`.
pub fn train_to_dir(config: TrainConfig, out: &Path, resume: Option<Checkpoint>) -> Result<RunResult, TrainError> {
    let mut trainer = Trainer::new(config)?;
    let mut prior_rows = Vec::new();
    if let Some(ck) = resume {
        let metrics_path = out.join("metrics.csv");
        if metrics_path.exists() {
            prior_rows = read_metrics(&metrics_path)?.into_iter().filter(|r| r.iteration <= ck.iteration).collect();
        }
        trainer.resume(ck)?;
    }
    let ckdir = out.join("checkpoints");
    fs::create_dir_all(&ckdir).map_err(io_err(&ckdir))?;
    write(&out.join("config.toml"), &trainer.config.to_toml())?;
    let metrics_path = out.join("metrics.csv");
    let mut csv = metrics_csv(&prior_rows);
    write(&metrics_path, &csv)?;
    let interval = trainer.config.run.checkpoint_interval;
    let result = trainer.run_with(|t, row| {
        csv.push_str(&row.csv());
        csv.push('\n');
        write(&metrics_path, &csv)?;
        if interval > 0 && (row.iteration + 1) % interval == 0 {
            t.checkpoint().save(&ckdir.join(format!("ckpt_{}.json", row.iteration)))?;
        }
        Ok(())
    })?;
    let last = result.metrics.last().map_or(0, |r| r.iteration);
    trainer.checkpoint().save(&ckdir.join(format!("ckpt_{last}.json")))?;
    if let Some(g) = &result.graph {
        g.save(&out.join("graph_final.json")).map_err(|source| TrainError::Graph { iteration: last, source })?;
    }
    let mut eval_csv = String::from("iteration,mean_return,std_return,success_rate,std_success\n");
    for e in &result.evals {
        let _ = writeln!(
            eval_csv,
            "{},{},{},{},{}",
            e.iteration, e.result.mean_return, e.result.std_return, e.result.success_rate, e.result.std_success
        );
    }
    write(&out.join("eval.csv"), &eval_csv)?;
    let mut all_rows = prior_rows;
    all_rows.extend(result.metrics.iter().cloned());
    write(&out.join("learning_curve.svg"), &learning_curve_svg(&all_rows, &result.evals, "learning curve"))?;
    let mut log = result.log.join("\n");
    log.push('\n');
    write(&out.join("log.txt"), &log)?;
    Ok(result)
}

/// One row of a per-step utility dump.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub t: usize,
    pub phase: String,
    pub node: Option<u64>,
    pub similarity: f64,
    pub alignment: f64,
    pub utility: f64,
}

/// Rolls out one episode of `policy` on `layout_seed` and reports the
/// utility factors of every step against the node each phase run matches.
pub fn utility_dump(
    policy: &Policy,
    graph: &MemoryGraph,
    spec: &GridSpec,
    layout_seed: u64,
    rollout_seed: u64,
    reference: GoalReferenceChoice,
) -> Result<Vec<UtilityRow>, TrainError> {
    let mut pool = EnvPool::new(spec.clone(), vec![layout_seed]).map_err(|source| TrainError::Ppo { iteration: 0, source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
    let batch =
        collect_rollouts(policy, &mut pool, 1, None, false, &mut rng).map_err(|source| TrainError::Ppo { iteration: 0, source })?;
    let e = &batch.episodes[0];
    let steps = batch.episode_steps(e);
    let mut rows = Vec::with_capacity(steps.len());
    for run in phase_runs(&batch, e) {
        let phase = steps[run.start].transition.phase;
        let transitions: Vec<_> = steps[run.clone()].iter().map(|s| s.transition).collect();
        let r = match reference {
            GoalReferenceChoice::AgentPhase => GoalReference::AgentPhase,
            GoalReferenceChoice::TargetGoal => GoalReference::TargetGoal(graph.final_goals[0].tokens),
        };
        let mut best: Option<(f64, u64, Vec<crate::utility::UtilityTerm>)> = None;
        for node in graph.candidates(e.layout_id, &phase) {
            let tokens = graph.zeta_tokens(&node.zeta).expect("node goal term exists");
            let terms = crate::utility::utility_terms(&transitions, node, &tokens, r)
                .map_err(|source| TrainError::Utility { iteration: 0, source })?;
            let total: f64 = terms.iter().map(|t| t.utility).sum();
            if total > 0.0 && best.as_ref().is_none_or(|(b, _, _)| total > *b) {
                best = Some((total, node.id, terms));
            }
        }
        let (node, terms) = match best {
            Some((_, id, terms)) => (Some(id), terms),
            None => (None, Vec::new()),
        };
        for t in 0..run.len() {
            let term = terms.iter().find(|x| x.t == t);
            rows.push(UtilityRow {
                t: run.start + t,
                phase: phase.describe(),
                node: node.filter(|_| term.is_some()),
                similarity: term.map_or(0.0, |x| x.similarity),
                alignment: term.map_or(0.0, |x| x.alignment),
                utility: term.map_or(0.0, |x| x.utility),
            });
        }
    }
    Ok(rows)
}

/// Mean and std of one metric across seeds, per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveGroup {
    pub name: String,
    pub iterations: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn aggregate_returns(name: &str, runs: &[Vec<MetricsRow>]) -> CurveGroup {
    let n = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut g = CurveGroup { name: name.to_string(), iterations: Vec::new(), mean: Vec::new(), std: Vec::new() };
    for i in 0..n {
        let xs: Vec<f64> = runs.iter().map(|r| r[i].mean_return).collect();
        let (m, s) = mean_std(&xs);
        g.iterations.push(runs[0][i].iteration);
        g.mean.push(m);
        g.std.push(s);
    }
    g
}

pub fn overlay_svg(groups: &[CurveGroup], title: &str) -> String {
    let series: Vec<Series> = groups
        .iter()
        .map(|g| {
            let mut s = Series::new(&g.name, g.iterations.iter().map(|&i| i as f64).collect(), g.mean.clone());
            s.band = Some(g.std.clone());
            s
        })
        .collect();
    line_chart(&series, title, "iteration", "mean return")
}

/// Trains every config on seeds `0..seeds` and writes `compare.csv`
/// (per run and iteration), `compare_summary.csv` (mean and std across
/// seeds) and `compare.svg` (one curve group per config) under `out`.
pub fn compare(configs: &[(String, TrainConfig)], seeds: u64, out: &Path) -> Result<Vec<CurveGroup>, TrainError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut raw = String::from("config,seed,iteration,env_steps,mean_return,success_rate,delta\n");
    let mut summary = String::from("config,iteration,mean_return,std_return\n");
    let mut groups = Vec::new();
    for (name, cfg) in configs {
        let mut runs = Vec::new();
        for seed in 0..seeds {
            let mut c = cfg.clone();
            c.run.seed = seed;
            let r = train_in_memory(c)?;
            for m in &r.metrics {
                let _ = writeln!(raw, "{name},{seed},{},{},{},{},{}", m.iteration, m.env_steps, m.mean_return, m.success_rate, m.delta);
            }
            runs.push(r.metrics);
        }
        let g = aggregate_returns(name, &runs);
        for i in 0..g.iterations.len() {
            let _ = writeln!(summary, "{name},{},{},{}", g.iterations[i], g.mean[i], g.std[i]);
        }
        groups.push(g);
    }
    write(&out.join("compare.csv"), &raw)?;
    write(&out.join("compare_summary.csv"), &summary)?;
    write(&out.join("compare.svg"), &overlay_svg(&groups, "mean return across seeds"))?;
    Ok(groups)
}
