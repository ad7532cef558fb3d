//! Prints the (eta, xi, delta) schedule of a config and one shaped batch.
//!
//! `cargo run --example shaping_schedule -- crates/core/configs/doorkey.toml`

use std::path::PathBuf;

use memshape::shaping::{shaped_advantage, DEFAULT_ADV_FLOOR};
use memshape::trainer::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/doorkey.toml"));
    let cfg = TrainConfig::load(&path)?;
    let iterations = cfg.run.iterations;
    let schedule = cfg.shaping.schedule(iterations)?;
    println!("{}: {} iterations", path.display(), iterations);
    println!("iteration  eta     xi        delta");
    for step in 0..=10 {
        let k = (iterations.saturating_sub(1) * step) / 10;
        let (eta, xi) = schedule.at(k)?;
        println!("{k:<10} {eta:<7.4} {xi:<9.6} {:.6}", xi / eta);
    }

    let (eta, xi) = schedule.at(0)?;
    let adv = [0.0, 0.0, 0.02, -0.01, 0.0];
    let util = [0.0, 0.5, 0.9, 0.0, 0.3];
    let b = shaped_advantage(&adv, &util, eta, xi, DEFAULT_ADV_FLOOR)?;
    println!("\nfirst iteration, sparse batch: scale {:.3}", b.adv_scale);
    for i in 0..adv.len() {
        println!("  A {:>6.3}  U {:.2}  shaped {:>8.5}", adv[i], util[i], b.shaped[i]);
    }
    Ok(())
}
