//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N: PASS|FAIL ...` line each; the process fails if any fails.
//!
//! Numeric arguments restrict the run, e.g.
//! `cargo test --test acceptance -- 2 4 7`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memshape::gridworld::{reset, Action, Entity, GridSpec, PhaseVerb, Pos, Pose, SubgoalPhase};
use memshape::guidance::{screen, Completion, ScreeningMode, SuggestionKind, CONSISTENCY_THRESHOLD, LIKELIHOOD_THRESHOLD};
use memshape::memgraph::{GraphDelta, GraphSettings, Insertion, MemoryGraph, NodeId, Segment, Source, TrajectoryNode};
use memshape::ppo::{collect_rollouts, gradient_check, policy_gradient, EnvPool, LossCoefs, Policy, PolicyKind, Step};
use memshape::shaping::{shaped_advantage, Decay, ShapingSchedule, DEFAULT_ADV_FLOOR};
use memshape::trainer::{train_in_memory, EnvKind, MetricsRow, ProviderChoice, TrainConfig, XiSpec};
use memshape::utility::{compute_utility, goal_alignment, similarity, AnnotatedTransition, GoalReference};

type Outcome = Result<String, String>;
type Criterion = fn(&mut Runs) -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(rel)
}

fn load(rel: &str) -> TrainConfig {
    TrainConfig::load(&config_path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// Memoized multi-seed training runs, keyed by name.
#[derive(Default)]
struct Runs {
    done: BTreeMap<String, Vec<Vec<MetricsRow>>>,
}

impl Runs {
    fn get(&mut self, name: &str, cfg: &TrainConfig, seeds: u64) -> &Vec<Vec<MetricsRow>> {
        if !self.done.contains_key(name) {
            let t = Instant::now();
            let mut runs = Vec::new();
            for seed in 0..seeds {
                let mut c = cfg.clone();
                c.run.seed = seed;
                runs.push(train_in_memory(c).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}")).metrics);
            }
            eprintln!("  trained {name} x{seeds} in {:.0}s", t.elapsed().as_secs_f64());
            self.done.insert(name.to_string(), runs);
        }
        &self.done[name]
    }
}

fn seed_mean(runs: &[Vec<MetricsRow>]) -> Vec<f64> {
    let n = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..n).map(|i| runs.iter().map(|r| r[i].mean_return).sum::<f64>() / runs.len() as f64).collect()
}

/// Mean over the last tenth of a curve.
fn final_value(curve: &[f64]) -> f64 {
    let tail = (curve.len() / 10).max(1);
    curve[curve.len() - tail..].iter().sum::<f64>() / tail as f64
}

fn trailing_mean(curve: &[f64], window: usize) -> Vec<f64> {
    (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            curve[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

// ---------------------------------------------------------------- 1

fn reduction_config(enabled: bool) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.env.kind = EnvKind::Doorkey;
    c.env.size = 6;
    c.env.train_seeds = vec![0, 1, 2, 3];
    c.env.eval_seeds = vec![100];
    c.ppo.batch_size = 256;
    c.run.iterations = 12;
    c.run.eval_interval = 4;
    c.run.seed = 11;
    if enabled {
        c.shaping.eta0 = 1.0;
        c.shaping.xi0 = XiSpec::One(0.0);
        c.shaping.delta = 0.0;
        c.guidance.provider = ProviderChoice::Oracle;
        c.guidance.offline_prior = true;
        c.guidance.online_cap = Some(0);
    } else {
        c.shaping.enabled = false;
    }
    c
}

fn policy_facing(r: &MetricsRow) -> (u64, u64, u64, u64, u64, u64, u64, u64) {
    (
        r.iteration,
        r.env_steps,
        r.mean_return.to_bits(),
        r.success_rate.to_bits(),
        r.mean_abs_adv.to_bits(),
        r.online_queries_used,
        r.clip_fraction.to_bits(),
        r.approx_kl.to_bits(),
    )
}

fn criterion_1(_: &mut Runs) -> Outcome {
    let shaped = train_in_memory(reduction_config(true)).map_err(|e| e.to_string())?;
    let plain = train_in_memory(reduction_config(false)).map_err(|e| e.to_string())?;
    let rows_equal = shaped.metrics.len() == plain.metrics.len()
        && shaped.metrics.iter().zip(&plain.metrics).all(|(a, b)| policy_facing(a) == policy_facing(b));
    let params_equal = shaped.policy.params.iter().map(|x| x.to_bits()).eq(plain.policy.params.iter().map(|x| x.to_bits()));
    let evals_equal = shaped.evals == plain.evals;
    let graph_used = shaped.graph.as_ref().is_some_and(|g| !g.is_empty());
    check(
        rows_equal && params_equal && evals_equal && graph_used,
        format!(
            "{} metric rows equal: {rows_equal}, policy bits equal: {params_equal}, evals equal: {evals_equal}, shaped run kept a graph: {graph_used}",
            shaped.metrics.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn oracle_similarity(a: &AnnotatedTransition, m: &AnnotatedTransition) -> f64 {
    let same = a.pos == m.pos && a.action == m.action;
    match (a.dir, m.dir) {
        (None, None) => {
            if same {
                1.0
            } else {
                0.0
            }
        }
        (Some(x), Some(y)) => {
            let turn = (4 + y as i32 - x as i32) % 4;
            match (same, turn) {
                (true, 0) => 1.0,
                (true, _) => 0.7,
                (false, 1) | (false, 3) => 0.4,
                _ => 0.0,
            }
        }
        _ => panic!("mixed families"),
    }
}

fn oracle_jaccard(a: &SubgoalPhase, b: &SubgoalPhase) -> f64 {
    let set = |p: &SubgoalPhase| -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        if let Some(e) = p.entity {
            s.insert(format!("{e:?}").to_lowercase());
        }
        if let Some(v) = p.verb {
            s.insert(format!("{v:?}").to_lowercase());
        }
        s
    };
    let (sa, sb) = (set(a), set(b));
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

const ENTITIES: [Entity; 6] = [Entity::Key, Entity::Door, Entity::Goal, Entity::Ball, Entity::Box, Entity::Lava];
const VERBS: [PhaseVerb; 3] = [PhaseVerb::Navigate, PhaseVerb::Acquire, PhaseVerb::Toggle];

fn all_phases() -> Vec<SubgoalPhase> {
    let ents: Vec<Option<Entity>> = std::iter::once(None).chain(ENTITIES.iter().copied().map(Some)).collect();
    let verbs: Vec<Option<PhaseVerb>> = std::iter::once(None).chain(VERBS.iter().copied().map(Some)).collect();
    let mut out = Vec::new();
    for &entity in &ents {
        for &verb in &verbs {
            if entity.is_some() || verb.is_some() {
                out.push(SubgoalPhase { entity, verb });
            }
        }
    }
    out
}

fn random_transition(rng: &mut ChaCha8Rng, oriented: bool, phases: &[SubgoalPhase]) -> AnnotatedTransition {
    // small action and phase alphabets so exact matches are common
    AnnotatedTransition {
        pos: Pos::new(rng.gen_range(0..5), rng.gen_range(0..5)),
        dir: oriented.then(|| rng.gen_range(0..4)),
        action: Action(rng.gen_range(0..if oriented { 7 } else { 4 })),
        phase: phases[rng.gen_range(0..phases.len())],
    }
}

fn oracle_utility(rollout: &[AnnotatedTransition], node: &TrajectoryNode, tokens: &SubgoalPhase) -> Vec<f64> {
    let mut u = vec![0.0; rollout.len()];
    let aligned = rollout.iter().enumerate().rev().zip(node.segment.transitions.iter().rev());
    for ((t, a), m) in aligned {
        u[t] = node.confidence * node.r_hat * oracle_jaccard(&a.phase, tokens) * oracle_similarity(a, m);
    }
    u
}

fn criterion_2(_: &mut Runs) -> Outcome {
    let mut sim_pairs = 0usize;
    for oriented in [false, true] {
        let dirs: Vec<Option<u8>> = if oriented { (0..4).map(Some).collect() } else { vec![None] };
        let n_act = if oriented { 7 } else { 4 };
        let mut all = Vec::new();
        for r in 0..5 {
            for c in 0..5 {
                for &dir in &dirs {
                    for a in 0..n_act {
                        all.push(AnnotatedTransition {
                            pos: Pos::new(r, c),
                            dir,
                            action: Action(a),
                            phase: SubgoalPhase::KEY_NAVIGATE,
                        });
                    }
                }
            }
        }
        for x in &all {
            for y in &all {
                let got = similarity(x, y).map_err(|e| e.to_string())?;
                if got != oracle_similarity(x, y) {
                    return Err(format!("similarity mismatch for {x:?} vs {y:?}"));
                }
                sim_pairs += 1;
            }
        }
    }

    let phases = all_phases();
    for a in &phases {
        for b in &phases {
            let got = goal_alignment(a, b).map_err(|e| e.to_string())?;
            if got != oracle_jaccard(a, b) {
                return Err(format!("jaccard mismatch for {a} vs {b}"));
            }
        }
    }

    let env_phases = [SubgoalPhase::KEY_NAVIGATE, SubgoalPhase::DOOR_TOGGLE, SubgoalPhase::GOAL_NAVIGATE];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0usize;
    for seg_len in 1..=6 {
        for roll_len in 0..=10 {
            for k in 0..400 {
                let oriented = k % 2 == 0;
                let seg: Vec<AnnotatedTransition> =
                    (0..seg_len).map(|_| random_transition(&mut rng, oriented, &env_phases)).collect();
                let mut rollout: Vec<AnnotatedTransition> =
                    (0..roll_len).map(|_| random_transition(&mut rng, oriented, &env_phases)).collect();
                // copy part of the segment into the rollout tail to exercise high-similarity branches
                if k % 3 == 0 {
                    for (r, s) in rollout.iter_mut().rev().zip(seg.iter().rev()) {
                        if rng.gen_bool(0.7) {
                            *r = *s;
                        }
                    }
                }
                let last = *seg.last().expect("nonempty");
                let node = TrajectoryNode {
                    id: k as NodeId,
                    segment: Segment { transitions: seg, end: Pose { pos: last.pos, dir: last.dir } },
                    zeta: "k1".into(),
                    r_hat: rng.gen_range(0.0..=1.0),
                    confidence: rng.gen_range(0.0..=1.0),
                    source: Source::OfflineLlm,
                    access_count: 0,
                    last_access_episode: None,
                    created_episode: 0,
                    layout_id: 0,
                };
                let tokens = phases[rng.gen_range(0..phases.len())];
                let got = compute_utility(&rollout, &node, &tokens, GoalReference::AgentPhase).map_err(|e| e.to_string())?;
                let want = oracle_utility(&rollout, &node, &tokens);
                if got.values != want {
                    return Err(format!("utility mismatch: segment {seg_len}, rollout {roll_len}: {:?} vs {want:?}", got.values));
                }
                let any_positive = want.iter().any(|&u| u > 0.0);
                if got.matched_node.is_some() != any_positive {
                    return Err("matched node flag disagrees with the utility values".into());
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{sim_pairs} similarity pairs, {} phase pairs, {cases} tail-alignment cases match", phases.len().pow(2)))
}

// ---------------------------------------------------------------- 3

fn synthetic_steps(rng: &mut ChaCha8Rng, n: usize, n_inputs: usize, active: usize, n_actions: usize) -> Vec<Step> {
    (0..n)
        .map(|_| {
            let mut features: Vec<u32> = Vec::new();
            while features.len() < active {
                let f = rng.gen_range(0..n_inputs as u32);
                if !features.contains(&f) {
                    features.push(f);
                }
            }
            features.sort_unstable();
            let a = rng.gen_range(0..n_actions as u8);
            Step {
                features,
                action: Action(a),
                reward: 0.0,
                log_prob: 0.0,
                value: 0.0,
                done: false,
                transition: AnnotatedTransition {
                    pos: Pos::new(0, 0),
                    dir: Some(0),
                    action: Action(a),
                    phase: SubgoalPhase::KEY_NAVIGATE,
                },
                episode: 0,
                penalty: None,
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn criterion_3(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::INFINITY;
    for b in 0..200 {
        let tabular = b % 4 == 0;
        let (policy, steps) = if tabular {
            let p = Policy::new(PolicyKind::Tabular, 12, 4, 1, b);
            let s = synthetic_steps(&mut rng, 40, 12, 1, 4);
            (p, s)
        } else {
            let p = Policy::new(PolicyKind::Mlp { hidden: 16 }, 30, 7, 3, b);
            let s = synthetic_steps(&mut rng, 40, 30, 3, 7);
            (p, s)
        };
        let n = steps.len();
        let mut u: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.0..=1.0) } else { 0.0 }).collect();
        u[rng.gen_range(0..n)] = rng.gen_range(0.1..=1.0);
        let eta0 = rng.gen_range(0.05..=1.0);
        let delta = rng.gen_range(0.05..0.999);
        let sched = ShapingSchedule::exponential(eta0, rng.gen_range(0.01..=1.0) * delta * eta0, delta, 0.97, 30, 200);
        let (eta, xi) = sched.at(rng.gen_range(0..150)).map_err(|e| e.to_string())?;
        let batch = shaped_advantage(&vec![0.0; n], &u, eta, xi, DEFAULT_ADV_FLOOR).map_err(|e| e.to_string())?;
        let g_shaped = policy_gradient(&policy, &steps, &batch.shaped);
        let scaled_u: Vec<f64> = u.iter().map(|x| batch.adv_scale * x).collect();
        let g_u = policy_gradient(&policy, &steps, &scaled_u);
        let margin = norm(&g_shaped) - (xi * norm(&g_u) - 1e-9);
        if margin < 0.0 {
            return Err(format!("batch {b}: |g| = {} < xi |g_U| = {}", norm(&g_shaped), xi * norm(&g_u)));
        }
        if norm(&g_u) > 0.0 {
            worst = worst.min(norm(&g_shaped) / (xi * norm(&g_u)));
        }
    }
    Ok(format!("200 batches with A = 0; min |g| / (xi |g_U|) = {worst:.6}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tightest: f64 = 0.0;
    for b in 0..10_000 {
        let n = rng.gen_range(1..200);
        let scale = 10f64.powf(rng.gen_range(-4.0..1.0));
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let u: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..=1.0) } else { 0.0 }).collect();
        let eta0 = rng.gen_range(0.05..=1.0);
        let delta = rng.gen_range(0.0..0.999);
        let xi0 = rng.gen_range(0.0..=1.0) * delta * eta0;
        let horizon = rng.gen_range(1..500);
        let sched = if rng.gen_bool(0.5) {
            ShapingSchedule::linear(eta0, xi0, delta, horizon)
        } else {
            ShapingSchedule { decay: Decay::Exponential { rate: rng.gen_range(0.9..1.0) }, ..ShapingSchedule::linear(eta0, xi0, delta, horizon) }
        };
        let (eta, xi) = sched.at(rng.gen_range(0..horizon + 10)).map_err(|e| e.to_string())?;
        let batch = shaped_advantage(&a, &u, eta, xi, DEFAULT_ADV_FLOOR).map_err(|e| e.to_string())?;
        let a_max = a.iter().fold(DEFAULT_ADV_FLOOR, |m, x| m.max(x.abs()));
        let got = batch.shaped.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let bound = (1.0 + delta) * a_max;
        if got > bound + 1e-12 {
            return Err(format!("batch {b}: max |shaped| = {got} > (1 + delta) A_max = {bound}"));
        }
        tightest = tightest.max(got / bound);
    }
    Ok(format!("10000 batches; max |shaped| / ((1 + delta) A_max) = {tightest:.4}"))
}

// ---------------------------------------------------------------- 5

fn rollout_steps(spec: GridSpec, kind: PolicyKind, n_actions: usize, seed: u64) -> (Policy, Vec<Step>) {
    let (_, obs) = reset(&spec, 0).expect("layout");
    let mut policy = Policy::for_observation(kind, &obs, n_actions, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move away from the initialization so the check is not at a symmetric point
    for p in policy.params.iter_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    let mut pool = EnvPool::new(spec, vec![0, 1, 2]).expect("pool");
    let batch = collect_rollouts(&policy, &mut pool, 64, None, false, &mut rng).expect("rollouts");
    // keep the behaviour log-probs slightly stale so ratios differ from one
    let steps = batch
        .steps
        .into_iter()
        .map(|mut s| {
            s.log_prob += rng.gen_range(-0.1..0.1);
            s
        })
        .collect();
    (policy, steps)
}

fn criterion_5(_: &mut Runs) -> Outcome {
    let coefs = LossCoefs { clip: 0.2, entropy_coef: 0.01, vf_coef: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_mlp: f64 = 0.0;
    let mut worst_tab: f64 = 0.0;
    for seed in 0..4 {
        for (spec, kind, n_actions) in [
            (GridSpec::doorkey(6), PolicyKind::Mlp { hidden: 64 }, 7),
            (GridSpec::lake8x8(), PolicyKind::Mlp { hidden: 64 }, 4),
            (GridSpec::lake8x8(), PolicyKind::Tabular, 4),
        ] {
            let (policy, steps) = rollout_steps(spec, kind, n_actions, seed);
            let adv: Vec<f64> = steps.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ret: Vec<f64> = steps.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
            let err = gradient_check(&policy, &steps, &adv, &ret, coefs, 60, seed);
            match kind {
                PolicyKind::Tabular => worst_tab = worst_tab.max(err),
                PolicyKind::Mlp { .. } => worst_mlp = worst_mlp.max(err),
            }
        }
    }
    check(
        worst_mlp < 1e-4 && worst_tab < 1e-6,
        format!("max relative error: network {worst_mlp:.2e} (< 1e-4), tabular {worst_tab:.2e} (< 1e-6)"),
    )
}

// ---------------------------------------------------------------- 6

/// Plain list-based restatement of the graph maintenance rules.
struct NaiveGraph {
    settings: GraphSettings,
    finals: Vec<String>,
    nodes: Vec<TrajectoryNode>,
    next: NodeId,
}

fn same_steps(a: &Segment, b: &Segment) -> bool {
    a.end == b.end
        && a.transitions.len() == b.transitions.len()
        && (0..a.transitions.len()).all(|i| {
            let (x, y) = (&a.transitions[i], &b.transitions[i]);
            (x.pos, x.dir, x.action) == (y.pos, y.dir, y.action)
        })
}

impl NaiveGraph {
    fn add(&mut self, ins: &Insertion, episode: u64) -> NodeId {
        let id = self.next;
        self.next += 1;
        self.nodes.push(TrajectoryNode {
            id,
            segment: ins.segment.clone(),
            zeta: ins.zeta.clone(),
            r_hat: ins.r_hat,
            confidence: ins.confidence,
            source: ins.source,
            access_count: 0,
            last_access_episode: None,
            created_episode: episode,
            layout_id: ins.layout_id,
        });
        id
    }

    fn insert(&mut self, ins: &Insertion, episode: u64) -> GraphDelta {
        if ins.source == Source::OnlineLlm && !ins.screened {
            return GraphDelta::Discarded;
        }
        let peers: Vec<usize> =
            (0..self.nodes.len()).filter(|&i| self.nodes[i].zeta == ins.zeta && self.nodes[i].layout_id == ins.layout_id).collect();
        if peers.is_empty() {
            return GraphDelta::Inserted(self.add(ins, episode));
        }
        // highest r_hat, earliest id on ties
        let mut best = peers[0];
        for &i in &peers[1..] {
            if self.nodes[i].r_hat > self.nodes[best].r_hat {
                best = i;
            }
        }
        let best_id = self.nodes[best].id;
        let agent = ins.source == Source::Agent;
        let bump = |n: &mut TrajectoryNode, by: f64| n.confidence = (n.confidence + by).min(1.0);
        if ins.r_hat > self.nodes[best].r_hat {
            let n = &mut self.nodes[best];
            n.segment = ins.segment.clone();
            n.r_hat = ins.r_hat;
            n.confidence = ins.confidence;
            n.source = ins.source;
            if agent {
                bump(n, self.settings.confidence_bump);
            }
            return GraphDelta::Updated { node: best_id, replaced: true, bumped: agent };
        }
        let novel = peers.iter().all(|&i| !same_steps(&self.nodes[i].segment, &ins.segment));
        if peers.len() < self.settings.per_key_capacity && novel {
            self.add(ins, episode);
        }
        if agent {
            bump(&mut self.nodes[best], self.settings.confidence_bump);
        }
        GraphDelta::Updated { node: best_id, replaced: false, bumped: agent }
    }

    fn access(&mut self, id: NodeId, episode: u64) -> bool {
        match self.nodes.iter_mut().find(|n| n.id == id) {
            Some(n) => {
                n.access_count += 1;
                n.last_access_episode = Some(episode);
                true
            }
            None => false,
        }
    }

    fn prune(&mut self, episode: u64) -> Vec<NodeId> {
        let window = self.settings.prune_window;
        let finals = self.finals.clone();
        let mut gone = Vec::new();
        self.nodes.retain(|n| {
            let since = n.last_access_episode.unwrap_or(n.created_episode);
            let stale = episode >= since + window;
            if stale && !finals.contains(&n.zeta) {
                gone.push(n.id);
                false
            } else {
                true
            }
        });
        gone.sort_unstable();
        gone
    }
}

fn random_segment(rng: &mut ChaCha8Rng) -> Segment {
    // a tiny path alphabet so duplicate paths occur often
    let len = rng.gen_range(1..=3);
    let transitions: Vec<AnnotatedTransition> = (0..len)
        .map(|_| AnnotatedTransition {
            pos: Pos::new(rng.gen_range(0..2), rng.gen_range(0..2)),
            dir: Some(rng.gen_range(0..2)),
            action: Action(rng.gen_range(0..2)),
            phase: SubgoalPhase::KEY_NAVIGATE,
        })
        .collect();
    let last = transitions[len - 1];
    Segment { transitions, end: Pose { pos: last.pos, dir: last.dir } }
}

fn criterion_6(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ops_total = 0usize;
    let mut pruned_total = 0usize;
    let mut exempt_seen = 0usize;
    for log in 0..10_000 {
        let settings = GraphSettings {
            prune_window: rng.gen_range(1..12),
            confidence_bump: [0.0, 0.1, 0.25][rng.gen_range(0..3)],
            per_key_capacity: rng.gen_range(1..4),
        };
        let mut g = MemoryGraph::new(settings, "g", "reach the goal").map_err(|e| e.to_string())?;
        let k1 = g.add_subgoal("go to key", "g").map_err(|e| e.to_string())?;
        let k2 = g.add_subgoal("toggle door", "g").map_err(|e| e.to_string())?;
        let zetas = ["g".to_string(), k1, k2];
        let mut naive = NaiveGraph { settings, finals: vec!["g".into()], nodes: Vec::new(), next: 0 };
        let mut episode = 0u64;
        for op in 0..rng.gen_range(5..40) {
            episode += rng.gen_range(0..4);
            match rng.gen_range(0..10) {
                0..=5 => {
                    let ins = Insertion {
                        segment: random_segment(&mut rng),
                        zeta: zetas[rng.gen_range(0..3)].clone(),
                        r_hat: [0.2, 0.5, 0.5, 0.9, 1.0][rng.gen_range(0..5)],
                        confidence: [0.3, 0.5, 0.95][rng.gen_range(0..3)],
                        source: [Source::Agent, Source::OfflineLlm, Source::OnlineLlm][rng.gen_range(0..3)],
                        screened: rng.gen_bool(0.7),
                        layout_id: rng.gen_range(0..2),
                    };
                    let want = naive.insert(&ins, episode);
                    let got = g.insert_or_update(ins, episode).map_err(|e| e.to_string())?;
                    if got != want {
                        return Err(format!("log {log} op {op}: insert gave {got:?}, oracle {want:?}"));
                    }
                }
                6 | 7 => {
                    let id = rng.gen_range(0..naive.next.max(1) + 1);
                    let want = naive.access(id, episode);
                    let got = g.record_access(id, episode).is_ok();
                    if got != want {
                        return Err(format!("log {log} op {op}: access to {id} ok={got}, oracle ok={want}"));
                    }
                }
                _ => {
                    exempt_seen += naive
                        .nodes
                        .iter()
                        .filter(|n| n.zeta == "g" && episode >= n.last_access_episode.unwrap_or(n.created_episode) + settings.prune_window)
                        .count();
                    let want = naive.prune(episode);
                    let got = g.prune(episode);
                    if got != want {
                        return Err(format!("log {log} op {op}: prune removed {got:?}, oracle {want:?}"));
                    }
                    pruned_total += got.len();
                }
            }
            ops_total += 1;
        }
        let got: Vec<TrajectoryNode> = g.nodes().cloned().collect();
        let mut want = naive.nodes.clone();
        want.sort_by_key(|n| n.id);
        if got != want {
            return Err(format!("log {log}: final graphs differ ({} vs {} nodes)", got.len(), want.len()));
        }
    }
    check(
        exempt_seen > 0 && pruned_total > 0,
        format!("10000 logs, {ops_total} operations, {pruned_total} prunes, {exempt_seen} stale final-goal nodes kept"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(_: &mut Runs) -> Outcome {
    use memshape::gridworld::Family;
    let with_probs = |p: &[f64]| Completion { text: "plan: forward".into(), logprobs: Some(p.iter().map(|x| x.ln()).collect()) };
    let plain = |t: &str| Completion { text: t.into(), logprobs: None };
    let (a, b, c) = ("plan: forward, forward", "plan: turn-left", "plan: toggle");

    let v1 = screen(&[with_probs(&[0.5, 0.5])], Family::Grid, "t", ScreeningMode::Auto).map_err(|e| e.to_string())?;
    let v2 = screen(&[with_probs(&[0.9, 0.9, 0.9])], Family::Grid, "t", ScreeningMode::Auto).map_err(|e| e.to_string())?;
    let v3 = screen(&[plain(a), plain(a), plain(b)], Family::Grid, "t", ScreeningMode::Auto).map_err(|e| e.to_string())?;
    let v4 = screen(&[plain(a), plain(b), plain(c)], Family::Grid, "t", ScreeningMode::Auto).map_err(|e| e.to_string())?;

    let accepted_a = match v3.suggestion.as_ref().map(|s| &s.kind) {
        Some(SuggestionKind::Plan(segs)) => segs[0].actions == vec![Action::FORWARD, Action::FORWARD],
        _ => false,
    };
    let results = [
        ("[0.5, 0.5] rejected", v1.suggestion.is_none()),
        ("[0.9, 0.9, 0.9] accepted", v2.suggestion.is_some()),
        ("[A, A, B] accepts A", accepted_a),
        ("[A, B, C] rejected", v4.suggestion.is_none()),
        ("thresholds 0.65 and 2/3", LIKELIHOOD_THRESHOLD == 0.65 && CONSISTENCY_THRESHOLD == 2.0 / 3.0),
    ];
    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    check(failed.is_empty(), if failed.is_empty() { "4 fixtures and both thresholds".into() } else { format!("failed: {}", failed.join("; ")) })
}

// ---------------------------------------------------------------- 8

const LAKE_ITERATIONS: u64 = 1000;
const LAKE_SEEDS: u64 = 4;
const LAKE_CHECKPOINT: usize = 25;

fn lake_configs() -> (TrainConfig, TrainConfig) {
    let mut shaped = load("lake.toml");
    shaped.run.iterations = LAKE_ITERATIONS;
    shaped.run.eval_interval = 0;
    let mut ppo = shaped.clone();
    ppo.shaping.enabled = false;
    ppo.guidance.provider = ProviderChoice::None;
    ppo.guidance.offline_prior = false;
    (shaped, ppo)
}

fn criterion_8(runs: &mut Runs) -> Outcome {
    let (shaped, ppo) = lake_configs();
    let s = seed_mean(runs.get("lake-offline", &shaped, LAKE_SEEDS));
    let p = seed_mean(runs.get("lake-ppo", &ppo, LAKE_SEEDS));
    let (s_smooth, p_smooth) = (trailing_mean(&s, LAKE_CHECKPOINT), trailing_mean(&p, LAKE_CHECKPOINT));
    let checkpoints: Vec<usize> = (LAKE_CHECKPOINT - 1..s.len()).step_by(LAKE_CHECKPOINT).collect();
    let wins = checkpoints.iter().filter(|&&i| s_smooth[i] > p_smooth[i]).count();
    let dominance = wins as f64 / checkpoints.len() as f64;
    let (auc_s, auc_p) = (s.iter().sum::<f64>(), p.iter().sum::<f64>());
    let auc_gain = auc_s / auc_p - 1.0;
    let (fs, fp) = (final_value(&s), final_value(&p));
    check(
        dominance >= 0.7 && auc_gain >= 0.2 && (fs - fp).abs() <= 0.05,
        format!(
            "{LAKE_SEEDS} seeds x {LAKE_ITERATIONS} iterations: dominance {dominance:.3} (>= 0.70), AUC gain {:+.1}% (>= +20%), final {fs:.3} vs PPO {fp:.3} (|diff| {:.3} <= 0.05)",
            100.0 * auc_gain,
            (fs - fp).abs()
        ),
    )
}

// ---------------------------------------------------------------- 10-12

const DESK_SEEDS: u64 = 8;
const DIVERGENCE_SEEDS: u64 = 4;
const DIVERGENCE_THRESHOLD: f64 = 0.1;
const DIVERGENCE_WINDOW: usize = 10;

fn desk_final(runs: &mut Runs, name: &str) -> f64 {
    let cfg = load(&format!("desk/{name}.toml"));
    final_value(&seed_mean(runs.get(name, &cfg, DESK_SEEDS)))
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let on20 = desk_final(runs, "doorkey_online20");
    let on10 = desk_final(runs, "doorkey_online10");
    let off = desk_final(runs, "doorkey_offline");
    let ppo = desk_final(runs, "doorkey_ppo");
    let queries: Vec<u64> = ["doorkey_online10", "doorkey_online20"]
        .iter()
        .map(|n| runs.done[*n].iter().map(|r| r.last().map_or(0, |m| m.online_queries_used)).max().unwrap_or(0))
        .collect();
    check(
        on20 >= on10 && on10 >= off && off >= ppo && off >= 3.0 * ppo,
        format!(
            "{DESK_SEEDS} seeds: online20 {on20:.3} >= online10 {on10:.3} >= offline {off:.3} >= PPO {ppo:.3}; offline/PPO {:.2} (>= 3); max queries used {} / {}",
            off / ppo.max(1e-12),
            queries[0],
            queries[1]
        ),
    )
}

/// First iteration at which the smoothed curves spread by more than the
/// threshold; the run length when they never do.
fn divergence_iteration(curves: &[Vec<f64>]) -> usize {
    let smooth: Vec<Vec<f64>> = curves.iter().map(|c| trailing_mean(c, DIVERGENCE_WINDOW)).collect();
    let n = smooth.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .find(|&i| {
            let hi = smooth.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
            let lo = smooth.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
            hi - lo > DIVERGENCE_THRESHOLD
        })
        .unwrap_or(n)
}

fn criterion_11(runs: &mut Runs) -> Outcome {
    let mut mean_div = Vec::new();
    for xi in ["0.25", "0.0"] {
        let mut per_eta = Vec::new();
        for eta in ["0.6", "0.8", "1.0"] {
            let name = format!("divergence_eta{eta}_xi{xi}");
            let cfg = load(&format!("desk/{name}.toml"));
            per_eta.push(runs.get(&name, &cfg, DIVERGENCE_SEEDS).clone());
        }
        let iters: Vec<usize> = (0..DIVERGENCE_SEEDS as usize)
            .map(|s| divergence_iteration(&per_eta.iter().map(|r| r[s].iter().map(|m| m.mean_return).collect()).collect::<Vec<_>>()))
            .collect();
        mean_div.push((iters.iter().sum::<usize>() as f64 / iters.len() as f64, iters));
    }
    let (with, without) = (&mean_div[0], &mean_div[1]);
    check(
        with.0 < without.0,
        format!(
            "spread > {DIVERGENCE_THRESHOLD} ({DIVERGENCE_WINDOW}-iteration mean) first at {:.1} {:?} with xi0 = 0.25 vs {:.1} {:?} with xi0 = 0",
            with.0, with.1, without.0, without.1
        ),
    )
}

fn criterion_12(runs: &mut Runs) -> Outcome {
    let clean = desk_final(runs, "doorkey_online20");
    let corrupted = desk_final(runs, "doorkey_corrupted");
    let degradation = (clean - corrupted) / clean.max(1e-12);
    let late_queries: u64 = runs.done["doorkey_corrupted"]
        .iter()
        .map(|r| {
            let cut = (0.6 * r.len() as f64) as usize;
            r.last().map_or(0, |m| m.online_queries_used) - r.get(cut.saturating_sub(1)).map_or(0, |m| m.online_queries_used)
        })
        .sum();
    check(
        degradation < 0.25,
        format!(
            "{DESK_SEEDS} seeds: final {corrupted:.3} corrupted vs {clean:.3} clean, degradation {:.1}% (< 25%); {late_queries} queries after corruption began",
            100.0 * degradation
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9(runs: &mut Runs) -> Outcome {
    // short runs of every shipped config, plus whatever the suite trained
    for name in ["lake", "doorkey", "distracted-doorkey", "lavacrossing", "redball"] {
        let mut cfg = load(&format!("{name}.toml"));
        cfg.run.iterations = 15;
        cfg.run.eval_interval = 0;
        cfg.ppo.batch_size = cfg.ppo.batch_size.min(256);
        runs.get(&format!("short-{name}"), &cfg, 1);
    }
    let mut total = 0usize;
    for (name, group) in &runs.done {
        for (seed, rows) in group.iter().enumerate() {
            let nonincreasing = rows.windows(2).all(|w| w[1].delta <= w[0].delta);
            let last = rows.last().map_or(f64::INFINITY, |r| r.delta);
            if !nonincreasing || last >= 1e-3 {
                return Err(format!("{name} seed {seed}: nonincreasing {nonincreasing}, final delta {last}"));
            }
            total += 1;
        }
    }
    Ok(format!("{total} runs: delta nonincreasing, final < 1e-3"))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, Criterion); 12] = [
        (1, "PPO reduction", criterion_1),
        (2, "utility oracle", criterion_2),
        (3, "non-vanishing update", criterion_3),
        (4, "shaped advantage bound", criterion_4),
        (5, "gradient check", criterion_5),
        (6, "graph maintenance oracle", criterion_6),
        (7, "screening fixtures", criterion_7),
        (8, "lake early acceleration", criterion_8),
        (10, "query budget ordering", criterion_10),
        (11, "early divergence shift", criterion_11),
        (12, "corrupted guidance", criterion_12),
        // last, so it covers every run above
        (9, "delta decay", criterion_9),
    ];
    let mut runs = Runs::default();
    let mut failed = Vec::new();
    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(&mut runs))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                println!("criterion {n:>2} {name}: FAIL ({secs:.1}s) {d}");
                failed.push(n);
            }
        }
    }
    panic::set_hook(default_hook);
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
