//! Actor-critic policies, rollout collection with soft logit penalties, and
//! the clipped surrogate update.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{reset, Action, EnvError, EnvState, GridSpec, Observation, SubgoalPhase};
use crate::utility::AnnotatedTransition;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("observation has feature index {index} but the policy expects < {dim}")]
    ShapeMismatch { index: u32, dim: usize },
    #[error("tabular policies need exactly one active feature, got {0}")]
    NotOneHot(usize),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("non-finite gradient in epoch {epoch}, minibatch {minibatch}")]
    NonFinite { epoch: usize, minibatch: usize },
    #[error("environment fault in episode {episode} (layout seed {seed}): {source}")]
    Env { episode: usize, seed: u64, source: EnvError },
    #[error("invalid PPO settings: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Per-state logits and value.
    Tabular,
    /// Shared trunk of two tanh layers over one-hot inputs.
    Mlp { hidden: usize },
}

/// Parameters live in one flat vector so the optimizer and checkpoints can
/// treat every representation alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub n_inputs: usize,
    pub n_actions: usize,
    pub params: Vec<f64>,
}

struct MlpLayout {
    h: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
    len: usize,
}

impl MlpLayout {
    fn new(n_inputs: usize, n_actions: usize, h: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + n_inputs * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wp = b2 + h;
        let bp = wp + n_actions * h;
        let wv = bp + n_actions;
        let bv = wv + h;
        MlpLayout { h, w1, b1, w2, b2, wp, bp, wv, bv, len: bv + 1 }
    }
}

/// Intermediate activations kept for the backward pass.
struct Forward {
    logits: Vec<f64>,
    value: f64,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl Policy {
    /// Deterministic initialization. `active_inputs` is the typical number
    /// of nonzero features, used to scale the first layer.
    pub fn new(kind: PolicyKind, n_inputs: usize, n_actions: usize, active_inputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match kind {
            PolicyKind::Tabular => vec![0.0; n_inputs * n_actions + n_inputs],
            PolicyKind::Mlp { hidden } => {
                let l = MlpLayout::new(n_inputs, n_actions, hidden);
                let mut p = vec![0.0; l.len];
                let mut fill = |range: std::ops::Range<usize>, std: f64| {
                    let a = std * 3f64.sqrt();
                    for x in &mut p[range] {
                        *x = rng.gen_range(-a..a);
                    }
                };
                fill(l.w1..l.b1, 1.0 / (active_inputs.max(1) as f64).sqrt());
                fill(l.w2..l.b2, 1.0 / (hidden as f64).sqrt());
                fill(l.wp..l.bp, 0.01 / (hidden as f64).sqrt());
                fill(l.wv..l.bv, 1.0 / (hidden as f64).sqrt());
                p
            }
        };
        Policy { kind, n_inputs, n_actions, params }
    }

    /// Policy matching an environment's observation space.
    pub fn for_observation(kind: PolicyKind, obs: &Observation, n_actions: usize, seed: u64) -> Self {
        Policy::new(kind, obs.feature_dim(), n_actions, obs.features().len(), seed)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check(&self, features: &[u32]) -> Result<(), PpoError> {
        if let Some(&bad) = features.iter().find(|&&i| i as usize >= self.n_inputs) {
            return Err(PpoError::ShapeMismatch { index: bad, dim: self.n_inputs });
        }
        if self.kind == PolicyKind::Tabular && features.len() != 1 {
            return Err(PpoError::NotOneHot(features.len()));
        }
        Ok(())
    }

    fn forward_with(&self, params: &[f64], features: &[u32]) -> Forward {
        match self.kind {
            PolicyKind::Tabular => {
                let s = features[0] as usize;
                let a = self.n_actions;
                Forward {
                    logits: params[s * a..(s + 1) * a].to_vec(),
                    value: params[self.n_inputs * a + s],
                    h1: Vec::new(),
                    h2: Vec::new(),
                }
            }
            PolicyKind::Mlp { hidden } => {
                let l = MlpLayout::new(self.n_inputs, self.n_actions, hidden);
                let h = l.h;
                let mut h1 = params[l.b1..l.b1 + h].to_vec();
                for &i in features {
                    let row = &params[l.w1 + i as usize * h..l.w1 + (i as usize + 1) * h];
                    for (z, w) in h1.iter_mut().zip(row) {
                        *z += w;
                    }
                }
                h1.iter_mut().for_each(|z| *z = z.tanh());
                let mut h2 = params[l.b2..l.b2 + h].to_vec();
                for (j, z) in h2.iter_mut().enumerate() {
                    let row = &params[l.w2 + j * h..l.w2 + (j + 1) * h];
                    *z += row.iter().zip(&h1).map(|(w, x)| w * x).sum::<f64>();
                    *z = z.tanh();
                }
                let logits = (0..self.n_actions)
                    .map(|a| {
                        let row = &params[l.wp + a * h..l.wp + (a + 1) * h];
                        params[l.bp + a] + row.iter().zip(&h2).map(|(w, x)| w * x).sum::<f64>()
                    })
                    .collect();
                let value =
                    params[l.bv] + params[l.wv..l.wv + h].iter().zip(&h2).map(|(w, x)| w * x).sum::<f64>();
                Forward { logits, value, h1, h2 }
            }
        }
    }

    /// Accumulates the gradient of `dlogits·logits + dvalue·value`.
    fn backward(&self, params: &[f64], fwd: &Forward, features: &[u32], dlogits: &[f64], dvalue: f64, grad: &mut [f64]) {
        match self.kind {
            PolicyKind::Tabular => {
                let s = features[0] as usize;
                let a = self.n_actions;
                for (g, d) in grad[s * a..(s + 1) * a].iter_mut().zip(dlogits) {
                    *g += d;
                }
                grad[self.n_inputs * a + s] += dvalue;
            }
            PolicyKind::Mlp { hidden } => {
                let l = MlpLayout::new(self.n_inputs, self.n_actions, hidden);
                let h = l.h;
                let p = params;
                let mut dh2 = vec![0.0; h];
                for (a, &d) in dlogits.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    grad[l.bp + a] += d;
                    for j in 0..h {
                        grad[l.wp + a * h + j] += d * fwd.h2[j];
                        dh2[j] += d * p[l.wp + a * h + j];
                    }
                }
                grad[l.bv] += dvalue;
                for j in 0..h {
                    grad[l.wv + j] += dvalue * fwd.h2[j];
                    dh2[j] += dvalue * p[l.wv + j];
                }
                let dz2: Vec<f64> = dh2.iter().zip(&fwd.h2).map(|(d, y)| d * (1.0 - y * y)).collect();
                let mut dh1 = vec![0.0; h];
                for (j, &d) in dz2.iter().enumerate() {
                    grad[l.b2 + j] += d;
                    for k in 0..h {
                        grad[l.w2 + j * h + k] += d * fwd.h1[k];
                        dh1[k] += d * p[l.w2 + j * h + k];
                    }
                }
                let dz1: Vec<f64> = dh1.iter().zip(&fwd.h1).map(|(d, y)| d * (1.0 - y * y)).collect();
                for (g, d) in grad[l.b1..l.b1 + h].iter_mut().zip(&dz1) {
                    *g += d;
                }
                for &i in features {
                    let base = l.w1 + i as usize * h;
                    for (g, d) in grad[base..base + h].iter_mut().zip(&dz1) {
                        *g += d;
                    }
                }
            }
        }
    }

    /// Raw logits and value.
    pub fn evaluate(&self, features: &[u32]) -> Result<(Vec<f64>, f64), PpoError> {
        self.check(features)?;
        let f = self.forward_with(&self.params, features);
        Ok((f.logits, f.value))
    }

    /// Action probabilities after subtracting `penalty` from one logit.
    pub fn probabilities(&self, features: &[u32], penalty: Option<LogitPenalty>) -> Result<Vec<f64>, PpoError> {
        let (mut logits, _) = self.evaluate(features)?;
        apply_penalty(&mut logits, penalty);
        Ok(softmax(&logits))
    }

    /// Samples an action; returns `(action, log_prob, value)`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        features: &[u32],
        penalty: Option<LogitPenalty>,
        rng: &mut R,
    ) -> Result<(Action, f64, f64), PpoError> {
        let (mut logits, value) = self.evaluate(features)?;
        apply_penalty(&mut logits, penalty);
        let logp = log_softmax(&logits);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.n_actions - 1;
        for (a, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                chosen = a;
                break;
            }
        }
        Ok((Action(chosen as u8), logp[chosen], value))
    }

    /// Argmax action (lowest index on ties).
    pub fn greedy(&self, features: &[u32]) -> Result<Action, PpoError> {
        let (logits, _) = self.evaluate(features)?;
        let mut best = 0;
        for (a, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = a;
            }
        }
        Ok(Action(best as u8))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// A bounded pre-softmax penalty on one action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitPenalty {
    pub action: Action,
    pub magnitude: f64,
}

fn apply_penalty(logits: &mut [f64], penalty: Option<LogitPenalty>) {
    if let Some(p) = penalty {
        if let Some(z) = logits.get_mut(p.action.index()) {
            *z -= p.magnitude;
        }
    }
}

/// Smallest probability a penalized action can have relative to its
/// unpenalized probability: `p' ≥ p·e^{−cap}`. Under uniform logits the
/// absolute floor is `e^{−cap}/(e^{−cap} + n − 1)`.
pub fn penalized_floor(cap: f64, n_actions: usize) -> f64 {
    let w = (-cap).exp();
    w / (w + (n_actions as f64 - 1.0))
}

/// A registered control suggestion waiting for, or applied in, rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub penalty: LogitPenalty,
    /// The penalty lapses once the agent leaves this phase.
    pub phase: SubgoalPhase,
    /// And after this many steps into an episode.
    pub max_steps: usize,
}

impl ControlSignal {
    fn active_at(&self, phase: &SubgoalPhase, step: usize, lapsed: bool) -> bool {
        !lapsed && step < self.max_steps && *phase == self.phase
    }
}

/// Environment factory cycling over a fixed list of layout seeds.
#[derive(Debug, Clone)]
pub struct EnvPool {
    pub spec: GridSpec,
    pub layout_seeds: Vec<u64>,
    cursor: usize,
}

impl EnvPool {
    pub fn new(spec: GridSpec, layout_seeds: Vec<u64>) -> Result<Self, PpoError> {
        if layout_seeds.is_empty() {
            return Err(PpoError::Invalid("environment pool needs at least one layout seed".into()));
        }
        Ok(EnvPool { spec, layout_seeds, cursor: 0 })
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: usize) {
        self.cursor = cursor;
    }

    fn next(&mut self) -> Result<(u64, EnvState, Observation), EnvError> {
        let seed = self.layout_seeds[self.cursor % self.layout_seeds.len()];
        self.cursor += 1;
        let (env, obs) = reset(&self.spec, seed)?;
        Ok((seed, env, obs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub features: Vec<u32>,
    pub action: Action,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
    pub done: bool,
    /// The chosen action with the pose and phase it was taken from.
    pub transition: AnnotatedTransition,
    pub episode: usize,
    pub penalty: Option<LogitPenalty>,
}

/// Number of recent windows kept for query contexts.
pub const RECENT_WINDOWS: usize = 3;

/// A pre-action state from which a guidance query can be posed: the latest
/// one whose window shows the phase target, else the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    pub step: usize,
    pub env: EnvState,
    /// Recent windows, oldest first, ending with this step's.
    pub recent: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub start: usize,
    pub len: usize,
    pub ret: f64,
    pub success: bool,
    pub layout_seed: u64,
    pub layout_id: u64,
    /// Environment snapshots at each phase change, keyed by step index
    /// within the episode.
    pub phase_starts: Vec<(usize, EnvState)>,
    /// Pose after the final action.
    pub final_pose: crate::gridworld::Pose,
    /// Where a guidance query for this episode would be posed; tracked
    /// only when requested.
    pub query_point: Option<QueryPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub steps: Vec<Step>,
    pub episodes: Vec<Episode>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn episode_steps(&self, e: &Episode) -> &[Step] {
        &self.steps[e.start..e.start + e.len]
    }

    pub fn transitions(&self, e: &Episode) -> Vec<AnnotatedTransition> {
        self.episode_steps(e).iter().map(|s| s.transition).collect()
    }
}

/// Runs complete episodes until at least `batch_size` steps are gathered.
/// `track_queries` records a [`QueryPoint`] per episode.
pub fn collect_rollouts<R: Rng + ?Sized>(
    policy: &Policy,
    pool: &mut EnvPool,
    batch_size: usize,
    control: Option<&ControlSignal>,
    track_queries: bool,
    rng: &mut R,
) -> Result<RolloutBatch, PpoError> {
    if batch_size == 0 {
        return Err(PpoError::Invalid("batch_size must be positive".into()));
    }
    let mut batch = RolloutBatch::default();
    while batch.steps.len() < batch_size {
        let episode = batch.episodes.len();
        let (seed, mut env, mut obs) =
            pool.next().map_err(|source| PpoError::Env { episode, seed: u64::MAX, source })?;
        let start = batch.steps.len();
        let mut ret = 0.0;
        let mut phase = env.subgoal_phase();
        let mut phase_starts = vec![(0, env.clone())];
        let mut recent: VecDeque<Observation> = VecDeque::new();
        let mut query_point = None;
        let mut lapsed = false;
        let success;
        loop {
            let t = batch.steps.len() - start;
            let current = env.subgoal_phase();
            if current != phase {
                phase = current;
                phase_starts.push((t, env.clone()));
            }
            let penalty = control.and_then(|c| {
                if c.active_at(&phase, t, lapsed) {
                    Some(c.penalty)
                } else {
                    lapsed = true;
                    None
                }
            });
            let features = obs.features();
            let (action, log_prob, value) = policy.act(&features, penalty, rng)?;
            let pose = env.pose();
            let snapshot = track_queries.then(|| env.clone());
            let out = env.step(action, rng).map_err(|source| PpoError::Env { episode, seed, source })?;
            if track_queries {
                if recent.len() == RECENT_WINDOWS {
                    recent.pop_front();
                }
                recent.push_back(obs.clone());
            }
            ret += out.reward;
            batch.steps.push(Step {
                features,
                action,
                reward: out.reward,
                log_prob,
                value,
                done: out.done,
                transition: AnnotatedTransition { pos: pose.pos, dir: pose.dir, action, phase },
                episode,
                penalty,
            });
            if let Some(snap) = snapshot {
                let visible = snap.phase_target(&phase).is_some_and(|t| snap.target_visible(t));
                if visible || out.done && query_point.is_none() {
                    query_point = Some(QueryPoint { step: t, env: snap, recent: recent.iter().cloned().collect() });
                }
            }
            obs = out.obs;
            if out.done {
                success = out.success;
                break;
            }
        }
        batch.episodes.push(Episode {
            start,
            len: batch.steps.len() - start,
            ret,
            success,
            layout_seed: seed,
            layout_id: env.layout_id,
            phase_starts,
            final_pose: env.pose(),
            query_point,
        });
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub vf_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub penalty_cap: f64,
}

impl Default for PpoSettings {
    fn default() -> Self {
        PpoSettings {
            lr: 2.5e-4,
            batch_size: 1024,
            minibatch_size: 64,
            epochs: 4,
            entropy_coef: 0.01,
            vf_coef: 0.5,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            penalty_cap: 2.0,
        }
    }
}

impl PpoSettings {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Invalid(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("ppo.lr must be positive");
        }
        if self.batch_size == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("ppo.batch_size, ppo.minibatch_size and ppo.epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("ppo.gamma and ppo.lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("ppo.clip must lie in (0, 1)");
        }
        if self.entropy_coef < 0.0 || self.vf_coef < 0.0 || self.max_grad_norm <= 0.0 || self.penalty_cap < 0.0 {
            return bad("ppo coefficients must be nonnegative (max_grad_norm positive)");
        }
        Ok(())
    }
}

/// Adam moments, kept across updates and in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 && self.m[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Per-sample inputs of the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossCoefs {
    pub clip: f64,
    pub entropy_coef: f64,
    pub vf_coef: f64,
}

#[derive(Default)]
struct LossParts {
    total: f64,
    policy: f64,
    value: f64,
    entropy: f64,
    ratio: f64,
}

/// Loss of one sample; when `grad` is given, adds `scale ·` its gradient.
#[allow(clippy::too_many_arguments)]
fn sample_loss(
    policy: &Policy,
    params: &[f64],
    step: &Step,
    adv: f64,
    ret: f64,
    coefs: LossCoefs,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> LossParts {
    let fwd = policy.forward_with(params, &step.features);
    let mut logits = fwd.logits.clone();
    apply_penalty(&mut logits, step.penalty);
    let logp = log_softmax(&logits);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let a = step.action.index();
    let ratio = (logp[a] - step.log_prob).exp();
    let clipped_ratio = ratio.clamp(1.0 - coefs.clip, 1.0 + coefs.clip);
    let surr = (ratio * adv).min(clipped_ratio * adv);
    let clipped = (adv > 0.0 && ratio > 1.0 + coefs.clip) || (adv < 0.0 && ratio < 1.0 - coefs.clip);
    let entropy = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
    let verr = fwd.value - ret;
    let value_loss = 0.5 * verr * verr;
    let total = -surr - coefs.entropy_coef * entropy + coefs.vf_coef * value_loss;
    if let Some(grad) = grad {
        let dlogp_a = if clipped { 0.0 } else { -adv * ratio };
        let dlogits: Vec<f64> = (0..probs.len())
            .map(|j| {
                let ind = if j == a { 1.0 } else { 0.0 };
                let d_pol = dlogp_a * (ind - probs[j]);
                let d_ent = coefs.entropy_coef * probs[j] * (logp[j] + entropy);
                scale * (d_pol + d_ent)
            })
            .collect();
        let dvalue = scale * coefs.vf_coef * verr;
        policy.backward(params, &fwd, &step.features, &dlogits, dvalue, grad);
    }
    LossParts { total, policy: -surr, value: value_loss, entropy, ratio }
}

/// Mean loss and gradient over `indices`.
pub fn loss_and_grad(
    policy: &Policy,
    steps: &[Step],
    advantages: &[f64],
    returns: &[f64],
    indices: &[usize],
    coefs: LossCoefs,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; policy.n_params()];
    let scale = 1.0 / indices.len().max(1) as f64;
    let mut total = 0.0;
    for &i in indices {
        total += sample_loss(policy, &policy.params, &steps[i], advantages[i], returns[i], coefs, scale, Some(&mut grad))
            .total;
    }
    (total * scale, grad)
}

fn loss_only(policy: &Policy, params: &[f64], steps: &[Step], adv: &[f64], ret: &[f64], idx: &[usize], coefs: LossCoefs) -> f64 {
    let scale = 1.0 / idx.len().max(1) as f64;
    idx.iter().map(|&i| sample_loss(policy, params, &steps[i], adv[i], ret[i], coefs, scale, None).total).sum::<f64>()
        * scale
}

/// Surrogate policy gradient at the behavior policy (ratio 1, no clipping,
/// no entropy or value terms) for advantage weights `weights`.
pub fn policy_gradient(policy: &Policy, steps: &[Step], weights: &[f64]) -> Vec<f64> {
    let coefs = LossCoefs { clip: 0.2, entropy_coef: 0.0, vf_coef: 0.0 };
    let idx: Vec<usize> = (0..steps.len()).collect();
    let fresh: Vec<Step> = steps
        .iter()
        .map(|s| {
            let mut s = s.clone();
            let mut logits = policy.forward_with(&policy.params, &s.features).logits;
            apply_penalty(&mut logits, s.penalty);
            s.log_prob = log_softmax(&logits)[s.action.index()];
            s
        })
        .collect();
    let zeros = vec![0.0; steps.len()];
    loss_and_grad(policy, &fresh, weights, &zeros, &idx, coefs).1
}

fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) / (std + 1e-8);
    }
}

/// Clipped-surrogate update over `epochs` passes of shuffled minibatches.
/// `advantages` drive the policy term; `returns` are the value targets.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &RolloutBatch,
    advantages: &[f64],
    returns: &[f64],
    settings: &PpoSettings,
    rng: &mut R,
) -> Result<UpdateDiagnostics, PpoError> {
    let n = batch.len();
    for (what, got) in [("advantages", advantages.len()), ("returns", returns.len())] {
        if got != n {
            return Err(PpoError::LengthMismatch { what, got, expected: n });
        }
    }
    if adam.m.len() != policy.n_params() {
        return Err(PpoError::LengthMismatch { what: "optimizer state", got: adam.m.len(), expected: policy.n_params() });
    }
    let coefs = LossCoefs { clip: settings.clip, entropy_coef: settings.entropy_coef, vf_coef: settings.vf_coef };
    let mut order: Vec<usize> = (0..n).collect();
    let mut diag = UpdateDiagnostics::default();
    let mut samples = 0usize;
    for epoch in 0..settings.epochs {
        order.shuffle(rng);
        for (mb_idx, mb) in order.chunks(settings.minibatch_size).enumerate() {
            let mut adv: Vec<f64> = mb.iter().map(|&i| advantages[i]).collect();
            if settings.normalize_advantages {
                normalize(&mut adv);
            }
            let mut grad = vec![0.0; policy.n_params()];
            let scale = 1.0 / mb.len() as f64;
            for (k, &i) in mb.iter().enumerate() {
                let step = &batch.steps[i];
                let parts = sample_loss(policy, &policy.params, step, adv[k], returns[i], coefs, scale, Some(&mut grad));
                diag.mean_ratio += parts.ratio;
                diag.clip_fraction += if (parts.ratio - 1.0).abs() > settings.clip { 1.0 } else { 0.0 };
                diag.approx_kl += (parts.ratio - 1.0) - parts.ratio.ln();
                diag.policy_loss += parts.policy;
                diag.value_loss += parts.value;
                diag.entropy += parts.entropy;
                samples += 1;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::NonFinite { epoch, minibatch: mb_idx });
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > settings.max_grad_norm {
                let s = settings.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(&mut policy.params, &grad, settings.lr);
        }
    }
    let s = samples.max(1) as f64;
    diag.mean_ratio /= s;
    diag.clip_fraction /= s;
    diag.approx_kl /= s;
    diag.policy_loss /= s;
    diag.value_loss /= s;
    diag.entropy /= s;
    Ok(diag)
}

/// Maximum relative error between the analytic loss gradient and central
/// finite differences (`h = 1e-5`) over sampled parameters. Half the
/// probes are the largest analytic components, half uniform draws.
pub fn gradient_check(
    policy: &Policy,
    steps: &[Step],
    advantages: &[f64],
    returns: &[f64],
    coefs: LossCoefs,
    probes: usize,
    seed: u64,
) -> f64 {
    const H: f64 = 1e-5;
    let idx: Vec<usize> = (0..steps.len()).collect();
    let (_, grad) = loss_and_grad(policy, steps, advantages, returns, &idx, coefs);
    let mut by_size: Vec<usize> = (0..grad.len()).collect();
    by_size.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = by_size.into_iter().take(probes / 2).collect();
    while picks.len() < probes.min(grad.len()) {
        picks.push(rng.gen_range(0..grad.len()));
    }
    let mut params = policy.params.clone();
    let mut worst: f64 = 0.0;
    for &p in &picks {
        let orig = params[p];
        params[p] = orig + H;
        let up = loss_only(policy, &params, steps, advantages, returns, &idx, coefs);
        params[p] = orig - H;
        let down = loss_only(policy, &params, steps, advantages, returns, &idx, coefs);
        params[p] = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = grad[p];
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}
