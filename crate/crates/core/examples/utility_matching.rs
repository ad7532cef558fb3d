//! Matches DoorKey rollouts against a planned key segment and prints the
//! per-step similarity, goal alignment and utility.

use memshape::gridworld::{reset, Action, EnvState, GridSpec, SubgoalPhase};
use memshape::guidance::{build_offline_prior, QueryBudget, ScreeningMode, ScriptedOracle};
use memshape::memgraph::{GraphSettings, MemoryGraph, TrajectoryNode};
use memshape::utility::{compute_utility, utility_terms, AnnotatedTransition, GoalReference};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn play(env: &EnvState, actions: &[Action]) -> Result<Vec<AnnotatedTransition>, Box<dyn std::error::Error>> {
    let mut sim = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for &a in actions {
        let pose = sim.pose();
        let phase = sim.subgoal_phase();
        sim.step(a, &mut rng)?;
        out.push(AnnotatedTransition { pos: pose.pos, dir: pose.dir, action: a, phase });
    }
    Ok(out)
}

fn show(label: &str, rollout: &[AnnotatedTransition], node: &TrajectoryNode, tokens: &SubgoalPhase) -> Result<(), Box<dyn std::error::Error>> {
    println!("\n{label}");
    println!("t   similarity  alignment  utility");
    for t in utility_terms(rollout, node, tokens, GoalReference::AgentPhase)? {
        println!("{:<3} {:<11.2} {:<10.3} {:.4}", t.t, t.similarity, t.alignment, t.utility);
    }
    let u = compute_utility(rollout, node, tokens, GoalReference::AgentPhase)?;
    println!("total {:.4}, matched node {:?}", u.sum(), u.matched_node);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GridSpec::doorkey(6);
    let (env, _) = reset(&spec, 3)?;
    println!("{}", env.describe());
    let mut graph = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal")?;
    build_offline_prior(&mut ScriptedOracle::new(0.0, 0), std::slice::from_ref(&env), &mut graph, &mut QueryBudget::new(Some(0)), ScreeningMode::Auto)?;
    let node = graph.lookup(env.layout_id, &SubgoalPhase::KEY_NAVIGATE).expect("a plan to the key").clone();
    let tokens = graph.zeta_tokens(&node.zeta).expect("known goal term");
    let planned: Vec<Action> = node.segment.transitions.iter().map(|t| t.action).collect();
    println!("node {} ({}): {} steps, r_hat {:.3}, confidence {:.2}", node.id, tokens.describe(), planned.len(), node.r_hat, node.confidence);

    // a detour that returns to the start pose, then the planned actions
    let mut detour = vec![Action::TURN_LEFT, Action::TURN_RIGHT];
    detour.extend(&planned);
    show("detour then plan", &play(&env, &detour)?, &node, &tokens)?;

    // the plan with its first action swapped for a turn
    let mut off = planned.clone();
    off[0] = if off[0] == Action::TURN_LEFT { Action::TURN_RIGHT } else { Action::TURN_LEFT };
    show("plan with a wrong first move", &play(&env, &off)?, &node, &tokens)?;
    Ok(())
}
