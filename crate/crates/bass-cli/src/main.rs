//! `bass`: broadcast-based subgraph sampling experiments for decentralized
//! SGD. Verbs: `partition`, `optimize`, `train`, `compare`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use bass_cli::config::{parse_config, ExperimentConfig};
use bass_cli::experiment::{
    build_graph, build_partition, build_scheduler, compare_runs, load_trace, out_path,
    run_experiment, trace_name, write_partition_artifacts,
};

#[derive(Parser)]
#[command(
    name = "bass",
    about = "Broadcast-based subgraph sampling for decentralized SGD over wireless networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the topology into collision-free broadcast subsets.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize the scheduling policy and write the lookup table.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full experiment: partition, optimize, simulate, write traces.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare trace CSVs on a common transmission-slot grid.
    Compare {
        /// Two or more trace CSV paths.
        #[arg(required = true, num_args = 2..)]
        traces: Vec<PathBuf>,
        /// Output CSV path for the interpolated comparison table.
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Partition { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_path(&cfg, out.as_deref());
            let (graph, partition) = write_partition_artifacts(&cfg, &dir)?;
            println!(
                "n = {}, edges = {}, density = {:.4}",
                graph.node_count(),
                graph.edge_count(),
                graph.density()
            );
            println!("q = {} collision-free subsets:", partition.len());
            for (k, subset) in partition.subsets().iter().enumerate() {
                println!("  subset {k}: {subset:?}");
            }
            println!("artifacts in {}", dir.display());
        }
        Command::Optimize { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_path(&cfg, out.as_deref());
            let graph = build_graph(&cfg)?;
            let partition = build_partition(&cfg, &graph);
            let (scheduler, policy_json) = build_scheduler(&cfg, &graph, &partition)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("policy.json"), policy_json)?;
            println!(
                "scheduler = {}, q = {}, budget = {:.2} slots/iteration, rho = {:.6}",
                scheduler.id(),
                partition.len(),
                scheduler.budget_slots(),
                scheduler.rho()
            );
            println!(
                "lookup table written to {}",
                dir.join("policy.json").display()
            );
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_path(&cfg, out.as_deref());
            let summary = run_experiment(&cfg, &dir)?;
            println!(
                "{}: rho = {:.6}, {} iterations, {} slots, final loss {:.6e}, final grad {:.6e}",
                summary.scheduler,
                summary.rho,
                summary.iters,
                summary.total_slots,
                summary.final_loss,
                summary.final_grad_norm
            );
            println!("artifacts in {}", dir.display());
        }
        Command::Compare { traces, out } => {
            let mut named = Vec::new();
            for path in &traces {
                named.push((trace_name(path), load_trace(path)?));
            }
            let cmp = compare_runs(&named)?;
            fs::write(&out, cmp.to_csv())
                .with_context(|| format!("cannot write {}", out.display()))?;
            println!(
                "slot grid [{:.0}, {:.0}] with {} points",
                cmp.grid[0],
                cmp.grid[cmp.grid.len() - 1],
                cmp.grid.len()
            );
            for (name, auc) in cmp.names.iter().zip(&cmp.auc) {
                println!("AUC {name}: {auc:.6e}");
            }
            println!("comparison table written to {}", out.display());
        }
    }
    Ok(())
}
