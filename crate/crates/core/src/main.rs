use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use memshape::gridworld::reset;
use memshape::memgraph::MemoryGraph;
use memshape::plot::{line_chart, Series};
use memshape::trainer::{
    compare, evaluate, read_metrics, train_to_dir, utility_dump, Checkpoint, ConfigError, EnvKind, ProviderChoice,
    TrainConfig, TrainError, CONFIG_KEYS,
};

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (TOML tables [env] [ppo] [shaping] [memgraph] [guidance] [guidance.http] [run]):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<40} {d}\n"));
    }
    s.push_str("\nThe http provider reads its API key from MIRA_LLM_API_KEY.\nExit codes: 0 success, 2 config error, 3 runtime failure.");
    s
}

#[derive(Parser)]
#[command(name = "memshape", version, about = "PPO with memory-graph advantage shaping on gridworlds", after_long_help = config_keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    None,
    Oracle,
    Fixture,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its run directory.
    #[command(after_long_help = config_keys_help())]
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Graph file loaded as the initial memory.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
        #[arg(long)]
        online_cap: Option<u64>,
        /// Output directory (default ./runs/<timestamp>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train on a fixture grid file instead of the configured layout.
        #[arg(long)]
        layout_file: Option<PathBuf>,
        /// Continue from a checkpoint; its config is used.
        #[arg(long, conflicts_with_all = ["config", "priors"])]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated layout seeds (default: the config's eval seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Train several configs over seeds and overlay their mean curves.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        /// Number of seeds, 0..N.
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a memory graph as a table.
    InspectGraph {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Per-step utility CSV (t, phase, node, s, rho, U) for one rollout of a checkpoint.
    InspectUtility {
        #[arg(long)]
        ckpt: PathBuf,
        /// Graph to match against (default: the checkpoint's graph).
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        layout_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        rollout_seed: u64,
    },
    /// Render a metrics CSV to SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Output SVG (default: next to the metrics file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn default_out(prefix: &str) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    PathBuf::from("runs").join(format!("{prefix}{secs}"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    require_file(path, "checkpoint")?;
    Checkpoint::load(path).map_err(|e| Failure::Config(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    priors: Option<PathBuf>,
    provider: Option<ProviderArg>,
    online_cap: Option<u64>,
    out: Option<PathBuf>,
    layout_file: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<(), Failure> {
    let (mut cfg, ck) = match (&config, &resume) {
        (_, Some(p)) => {
            let ck = load_checkpoint(p)?;
            (ck.config.clone(), Some(ck))
        }
        (Some(c), None) => {
            require_file(c, "config")?;
            (TrainConfig::load(c)?, None)
        }
        (None, None) => return Err(Failure::Config("train needs --config or --resume".into())),
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(p) = priors {
        require_file(&p, "priors file")?;
        cfg.guidance.priors_file = Some(p);
    }
    if let Some(p) = provider {
        cfg.guidance.provider = match p {
            ProviderArg::None => ProviderChoice::None,
            ProviderArg::Oracle => ProviderChoice::Oracle,
            ProviderArg::Fixture => ProviderChoice::Fixture,
            ProviderArg::Http => ProviderChoice::Http,
        };
    }
    if let Some(n) = online_cap {
        cfg.guidance.online_cap = Some(n);
    }
    if let Some(p) = layout_file {
        require_file(&p, "layout file")?;
        cfg.env.kind = EnvKind::Text;
        cfg.env.layout = None;
        cfg.env.layout_file = Some(p);
    }
    cfg.validate()?;
    // resuming defaults to the checkpoint's own run directory
    let resume_dir = resume.as_deref().and_then(Path::parent).and_then(Path::parent).map(Path::to_path_buf);
    let out = out.or(resume_dir).unwrap_or_else(|| default_out("train-"));
    let result = train_to_dir(cfg, &out, ck)?;
    if let Some(last) = result.metrics.last() {
        println!(
            "iteration {} env_steps {} mean_return {} success_rate {}",
            last.iteration, last.env_steps, last.mean_return, last.success_rate
        );
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, seed, priors, provider, online_cap, out, layout_file, resume } => {
            train(config, seed, priors, provider, online_cap, out, layout_file, resume)
        }
        Command::Eval { ckpt, seeds, episodes } => {
            let ck = load_checkpoint(&ckpt)?;
            let spec = ck.config.env.grid_spec()?;
            let seeds = seeds.unwrap_or_else(|| ck.config.env.eval_seeds.clone());
            let r = evaluate(&ck.policy, &spec, &seeds, episodes)?;
            println!("seeds,mean_return,std_return,success_rate,std_success");
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            println!("{},{},{},{},{}", list.join(" "), r.mean_return, r.std_return, r.success_rate, r.std_success);
            Ok(())
        }
        Command::Compare { configs, seeds, out } => {
            if seeds == 0 {
                return Err(Failure::Config("--seeds must be at least 1".into()));
            }
            let mut named = Vec::new();
            for p in &configs {
                require_file(p, "config")?;
                let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                named.push((name, TrainConfig::load(p)?));
            }
            let out = out.unwrap_or_else(|| default_out("compare-"));
            let groups = compare(&named, seeds, &out)?;
            for g in &groups {
                println!("{}: final mean return {} (std {})", g.name, g.mean.last().unwrap_or(&0.0), g.std.last().unwrap_or(&0.0));
            }
            println!("output: {}", out.display());
            Ok(())
        }
        Command::InspectGraph { graph } => {
            require_file(&graph, "graph")?;
            let g = MemoryGraph::load(&graph).map_err(|e| Failure::Config(format!("{}: {e}", graph.display())))?;
            print!("{}", g.describe());
            Ok(())
        }
        Command::InspectUtility { ckpt, graph, layout_seed, rollout_seed } => {
            let ck = load_checkpoint(&ckpt)?;
            let g = match graph {
                Some(p) => {
                    require_file(&p, "graph")?;
                    MemoryGraph::load(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
                }
                None => match &ck.graph {
                    Some(v) => MemoryGraph::from_json(&v.to_string()).map_err(|e| Failure::Runtime(e.to_string()))?,
                    None => return Err(Failure::Config("checkpoint has no memory graph; pass --graph".into())),
                },
            };
            let spec = ck.config.env.grid_spec()?;
            let seed = layout_seed.unwrap_or(ck.config.env.train_seeds[0]);
            reset(&spec, seed).map_err(|e| Failure::Config(e.to_string()))?;
            let rows = utility_dump(&ck.policy, &g, &spec, seed, rollout_seed, ck.config.shaping.goal_reference)?;
            println!("t,phase,node,s,rho,U");
            for r in rows {
                let node = r.node.map_or(String::new(), |n| n.to_string());
                println!("{},{},{},{},{},{}", r.t, r.phase, node, r.similarity, r.alignment, r.utility);
            }
            Ok(())
        }
        Command::Plot { metrics, out } => {
            require_file(&metrics, "metrics file")?;
            let rows = read_metrics(&metrics).map_err(|e| Failure::Config(e.to_string()))?;
            let xs: Vec<f64> = rows.iter().map(|r| r.iteration as f64).collect();
            let series = vec![
                Series::new("mean return", xs.clone(), rows.iter().map(|r| r.mean_return).collect()),
                Series::new("success rate", xs.clone(), rows.iter().map(|r| r.success_rate).collect()),
                Series::new("delta", xs, rows.iter().map(|r| r.delta).collect()),
            ];
            let svg = line_chart(&series, "training curves", "iteration", "value");
            let out = out.unwrap_or_else(|| metrics.with_extension("svg"));
            std::fs::write(&out, svg).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", out.display())))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
