//! Trains DoorKey for eta0 in {0.6, 0.8, 1.0} with and without the
//! utility term and reports when the return curves first separate.
//!
//! `cargo run --release --example early_divergence -- 80 2`

use std::path::PathBuf;

use memshape::trainer::{train_in_memory, TrainConfig};

const THRESHOLD: f64 = 0.1;
const WINDOW: usize = 10;

fn smoothed(xs: &[f64]) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(WINDOW);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let iterations = args.next().flatten().unwrap_or(80);
    let seeds = args.next().flatten().unwrap_or(2);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk");
    for xi in ["0.25", "0.0"] {
        let mut firsts = Vec::new();
        for seed in 0..seeds {
            let mut curves = Vec::new();
            for eta in ["0.6", "0.8", "1.0"] {
                let mut cfg = TrainConfig::load(&dir.join(format!("divergence_eta{eta}_xi{xi}.toml")))?;
                cfg.run.iterations = iterations;
                cfg.run.seed = seed;
                let r = train_in_memory(cfg)?;
                curves.push(smoothed(&r.metrics.iter().map(|m| m.mean_return).collect::<Vec<_>>()));
            }
            let n = curves.iter().map(Vec::len).min().unwrap_or(0);
            let first = (0..n)
                .find(|&i| {
                    let vals: Vec<f64> = curves.iter().map(|c| c[i]).collect();
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    hi - lo > THRESHOLD
                })
                .unwrap_or(n);
            firsts.push(first);
        }
        let mean = firsts.iter().sum::<usize>() as f64 / firsts.len() as f64;
        println!("xi0 = {xi:<5} first spread > {THRESHOLD} at iteration {mean:.1} (per seed {firsts:?})");
    }
    Ok(())
}
