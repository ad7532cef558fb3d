//! Trains the desk DoorKey configs with 0, 10 and 20 online queries and
//! reports the queries used and the final return.
//!
//! `cargo run --release --example doorkey_query_budget -- 60 2`

use std::path::PathBuf;

use memshape::trainer::{train_in_memory, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let iterations = args.next().flatten().unwrap_or(60);
    let seeds = args.next().flatten().unwrap_or(2);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk");
    for name in ["doorkey_ppo", "doorkey_offline", "doorkey_online10", "doorkey_online20"] {
        let mut cfg = TrainConfig::load(&dir.join(format!("{name}.toml")))?;
        cfg.run.iterations = iterations;
        let mut finals = Vec::new();
        let mut queries = Vec::new();
        for seed in 0..seeds {
            cfg.run.seed = seed;
            let r = train_in_memory(cfg.clone())?;
            let tail = (r.metrics.len() / 10).max(1);
            finals.push(r.metrics[r.metrics.len() - tail..].iter().map(|m| m.mean_return).sum::<f64>() / tail as f64);
            queries.push(r.budget.online_used);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("{name:<18} final return {mean:.3}  per seed {finals:.2?}  online queries {queries:?}");
    }
    Ok(())
}
