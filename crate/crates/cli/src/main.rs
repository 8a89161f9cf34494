use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mmdpcn_cli::commands::{self, parse_methods, ClusterEngine, RunContext, Solver};
use mmdpcn_cli::config::{parse_grid, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mmdpcn", version, about = "MM deep predictive coding networks")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated methods: mm,ista,fista,adam for bench; mm,fista for cluster.
    #[arg(long, global = true)]
    methods: Option<String>,
    /// Convert colour frames to luminance.
    #[arg(long, global = true)]
    grayscale: bool,
    /// Patch grid, RxC.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Number of K-Means clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic shapes video.
    GenShapes,
    /// Compare state solvers on synthetic data or on frame patches.
    Bench {
        /// Frame file or directory; synthetic data when omitted.
        patches: Option<PathBuf>,
    },
    /// Train a network on a frame sequence.
    Train { frames: PathBuf },
    /// Cluster the top-layer causes of a frame sequence.
    Cluster {
        model: PathBuf,
        frames: PathBuf,
        labels: PathBuf,
    },
    /// Reconstruct frames through a trained network.
    Reconstruct { model: PathBuf, frames: PathBuf },
}

fn context(cli: &Cli) -> Result<RunContext> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.grayscale {
        config.grayscale = true;
    }
    if let Some(grid) = &cli.grid {
        parse_grid(grid)?;
        config.grid = grid.clone();
    }
    if let Some(k) = cli.k {
        config.cluster.k = k;
    }
    Ok(RunContext::new(config, cli.config.clone(), cli.out.clone()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = context(&cli)?;
    let methods = cli.methods.as_deref();
    match &cli.command {
        Cmd::GenShapes => {
            let video = commands::gen_shapes(&ctx)?;
            println!("wrote {} frames to {}", video.frames.len(), ctx.out.display());
        }
        Cmd::Bench { patches } => {
            let solvers: Vec<Solver> = parse_methods(methods.unwrap_or("mm,adam,fista,ista"))?;
            for r in commands::bench(&ctx, patches.as_deref(), &solvers)? {
                println!("{:>6}: E_x {:.6e}  SPA {:.2}", r.solver.name(), r.mean_ex(), r.mean_spa());
            }
        }
        Cmd::Train { frames } => {
            let network = commands::train(&ctx, frames)?;
            println!("trained {} layers into {}", network.depth(), ctx.out.join("model.dpcn").display());
        }
        Cmd::Cluster { model, frames, labels } => {
            let engines: Vec<ClusterEngine> = parse_methods(methods.unwrap_or("mm"))?;
            for run in commands::cluster(&ctx, model, frames, labels, &engines)? {
                let r = &run.report;
                println!(
                    "{:>6}: ACC {:.4}  ARI {:.4}  SPA {:.2}  LCT {:.5} s/frame",
                    run.engine.name(),
                    r.acc,
                    r.ari,
                    r.spa,
                    run.lct_per_frame
                );
            }
        }
        Cmd::Reconstruct { model, frames } => {
            let errors = commands::reconstruct(&ctx, model, frames)?;
            let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
            println!("reconstructed {} frames, mean MSE {mean:.6e}", errors.len());
        }
    }
    Ok(())
}
