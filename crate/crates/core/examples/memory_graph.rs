//! Inserts, validates, accesses and prunes trajectory nodes, then prints
//! the graph and its JSON form.

use memshape::gridworld::{Action, Pos, Pose, SubgoalPhase};
use memshape::memgraph::{GraphSettings, Insertion, MemoryGraph, Segment, Source};
use memshape::utility::AnnotatedTransition;

fn segment(cells: &[(usize, usize)], phase: SubgoalPhase) -> Segment {
    let transitions: Vec<AnnotatedTransition> = cells
        .iter()
        .map(|&(r, c)| AnnotatedTransition { pos: Pos::new(r, c), dir: Some(0), action: Action::FORWARD, phase })
        .collect();
    let &(r, c) = cells.last().expect("nonempty");
    Segment { transitions, end: Pose { pos: Pos::new(r, c + 1), dir: Some(0) } }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let settings = GraphSettings { prune_window: 20, ..Default::default() };
    let mut g = MemoryGraph::new(settings, "g", "reach the goal")?;
    let key = g.add_subgoal("go to key", "g")?;
    let ins = |seg, zeta: &str, r_hat, source| Insertion {
        segment: seg,
        zeta: zeta.to_string(),
        r_hat,
        confidence: 0.8,
        source,
        screened: true,
        layout_id: 7,
    };

    let a = g.insert_or_update(ins(segment(&[(1, 1), (1, 2)], SubgoalPhase::KEY_NAVIGATE), &key, 0.6, Source::OfflineLlm), 0)?;
    println!("offline plan to key: {a:?}");
    let b = g.insert_or_update(ins(segment(&[(2, 1), (2, 2)], SubgoalPhase::KEY_NAVIGATE), &key, 0.6, Source::Agent), 3)?;
    println!("agent path, same reward: {b:?}");
    let c = g.insert_or_update(ins(segment(&[(1, 1)], SubgoalPhase::KEY_NAVIGATE), &key, 0.9, Source::Agent), 5)?;
    println!("agent path, higher reward: {c:?}");
    let d = g.insert_or_update(ins(segment(&[(3, 3), (3, 4)], SubgoalPhase::GOAL_NAVIGATE), "g", 1.0, Source::OfflineLlm), 5)?;
    println!("plan to the final goal: {d:?}");

    g.record_access(0, 12)?;
    let pruned = g.prune(30);
    println!("pruned at episode 30 (window 20): {pruned:?}");
    println!("\n{}", g.describe());
    println!("{}", g.to_json());
    Ok(())
}
