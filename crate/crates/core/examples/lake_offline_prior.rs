//! Builds the scripted offline prior for the 8x8 lake, then trains shaped
//! and plain PPO side by side.
//!
//! `cargo run --release --example lake_offline_prior -- 300`

use std::path::PathBuf;

use memshape::gridworld::reset;
use memshape::guidance::{build_offline_prior, QueryBudget, ScreeningMode, ScriptedOracle};
use memshape::memgraph::{GraphSettings, MemoryGraph};
use memshape::trainer::{train_in_memory, ProviderChoice, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/lake.toml"))?;

    let spec = cfg.env.grid_spec()?;
    let (env, _) = reset(&spec, 0)?;
    let mut graph = MemoryGraph::new(GraphSettings::default(), "g", "reach the goal")?;
    let mut budget = QueryBudget::new(Some(0));
    let mut oracle = ScriptedOracle::new(0.0, 0);
    build_offline_prior(&mut oracle, &[env], &mut graph, &mut budget, ScreeningMode::Auto)?;
    println!("offline prior ({} offline queries):\n{}", budget.offline_used, graph.describe());

    let mut shaped = cfg.clone();
    shaped.run.iterations = iterations;
    shaped.run.eval_interval = 0;
    let mut ppo = shaped.clone();
    ppo.shaping.enabled = false;
    ppo.guidance.provider = ProviderChoice::None;
    ppo.guidance.offline_prior = false;
    let s = train_in_memory(shaped)?;
    let p = train_in_memory(ppo)?;
    println!("iteration  shaped  ppo     xi");
    let step = (iterations as usize / 10).max(1);
    for i in (0..s.metrics.len()).step_by(step) {
        let window = |rows: &[memshape::trainer::MetricsRow]| {
            let lo = i.saturating_sub(step - 1);
            rows[lo..=i].iter().map(|r| r.mean_return).sum::<f64>() / (i + 1 - lo) as f64
        };
        println!("{:<10} {:<7.3} {:<7.3} {:.4}", i, window(&s.metrics), window(&p.metrics), s.metrics[i].xi);
    }
    Ok(())
}
