//! End-to-end orchestration: partition -> candidates -> optimize -> train,
//! artifact output, and trace comparison.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bass_core::graph::{
    auxiliary_graph, collision_free_partition, generate_topology, Graph, Partition,
};
use bass_core::optimizer::{build_heuristic_policy, optimize_policy, SolveOptions};
use bass_core::sampler::{enumerate_candidates, prune_candidates};
use bass_core::simulator::{
    derive_seed, full_comm_scheduler, make_task, matching_baseline, run_dsgd, RunOptions,
    Scheduler, Task, TraceRecord, TrainTrace,
};

use crate::config::{ExperimentConfig, SchedulerKind, TopologySpec};

/// Summary of one run, written as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scheduler: String,
    pub seed: u64,
    pub q: usize,
    pub budget_slots: f64,
    pub candidates: Option<usize>,
    pub rho: f64,
    pub total_slots: u64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub iters: usize,
}

/// Build the base topology from the configuration.
pub fn build_graph(cfg: &ExperimentConfig) -> Result<Graph> {
    match &cfg.topology {
        TopologySpec::Generated { kind, n, param } => {
            generate_topology(*kind, *n, *param, derive_seed(cfg.seed, "topology"))
                .context("topology generation failed")
        }
        TopologySpec::File(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read topology file '{path}'"))?;
            Graph::from_text(&text).context("malformed topology file")
        }
    }
}

/// Partition the topology into collision-free subsets per the configuration.
pub fn build_partition(cfg: &ExperimentConfig, graph: &Graph) -> Partition {
    collision_free_partition(graph, cfg.coloring_order)
}

/// Assemble the configured scheduler. Returns the scheduler plus an optional
/// policy JSON artifact (the lookup table for sampled-candidate scheduling,
/// design parameters otherwise).
pub fn build_scheduler(
    cfg: &ExperimentConfig,
    graph: &Graph,
    partition: &Partition,
) -> Result<(Scheduler, String)> {
    let q = partition.len();
    let budget = cfg.budget.resolve(q)?;
    let opts = SolveOptions {
        tol: cfg.tol,
        max_iters: cfg.max_iters,
    };
    match cfg.scheduler {
        SchedulerKind::BassOptimized => {
            let mut pool =
                enumerate_candidates(graph, partition, budget).context("candidate enumeration")?;
            if cfg.keep_candidates > 0 && cfg.keep_candidates < pool.len() {
                pool = prune_candidates(&pool, cfg.keep_candidates, derive_seed(cfg.seed, "prune"))
                    .context("candidate pruning")?;
            }
            let report = optimize_policy(&pool, &cfg.init.kinds(), cfg.outer_iters, &opts)
                .context("policy optimization")?;
            let json = report.policy.to_json();
            Ok((Scheduler::Policy(report.policy), json))
        }
        SchedulerKind::BassHeuristic => {
            let policy = build_heuristic_policy(graph, partition, budget)
                .context("heuristic policy construction")?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "subset_probs": policy.subset_probs,
                "epsilon": policy.epsilon,
                "rho": policy.rho,
                "budget": budget,
            }))?;
            Ok((
                Scheduler::Heuristic {
                    policy,
                    graph: graph.clone(),
                    partition: partition.clone(),
                },
                json,
            ))
        }
        SchedulerKind::Matching => {
            // Equal slot accounting: one broadcast slot per subset versus two
            // slots per link.
            let scheduler =
                matching_baseline(graph, budget as f64 / 2.0).context("matching baseline")?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "matchings": scheduler.matchings,
                "probs": scheduler.probs,
                "epsilon": scheduler.epsilon,
                "rho": scheduler.rho,
                "budget_links": budget as f64 / 2.0,
            }))?;
            Ok((Scheduler::Matching(scheduler), json))
        }
        SchedulerKind::FullComm => {
            let scheduler = full_comm_scheduler(graph, partition);
            let (eps, rho) = match &scheduler {
                Scheduler::FullComm { epsilon, rho, .. } => (*epsilon, *rho),
                _ => unreachable!(),
            };
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "epsilon": eps,
                "rho": rho,
                "subsets": q,
            }))?;
            Ok((scheduler, json))
        }
    }
}

/// Synthetic task sized to the given network.
pub fn build_task(cfg: &ExperimentConfig, n_nodes: usize) -> Result<Task> {
    make_task(
        cfg.task_kind,
        n_nodes,
        cfg.dim,
        cfg.samples_per_node,
        cfg.heterogeneity,
        cfg.seed,
    )
    .context("task generation")
}

/// Run the full experiment and write the four artifacts to `out_dir`:
/// config echo, policy JSON, trace CSV, and summary JSON.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let graph = build_graph(cfg)?;
    let partition = build_partition(cfg, &graph);
    let (scheduler, policy_json) = build_scheduler(cfg, &graph, &partition)?;
    let task = build_task(cfg, graph.node_count())?;
    let opts = RunOptions {
        iters: cfg.iters,
        lr: cfg.lr_schedule(),
        batch_size: cfg.batch_size,
        fail_prob: cfg.fail_prob,
        seed: cfg.seed,
        threads: cfg.threads,
    };
    let trace = run_dsgd(&task, &scheduler, &opts).context("training run")?;
    let last = trace.final_record();
    let summary = RunSummary {
        scheduler: scheduler.id().to_string(),
        seed: cfg.seed,
        q: partition.len(),
        budget_slots: scheduler.budget_slots(),
        candidates: match &scheduler {
            Scheduler::Policy(p) => Some(p.candidates.len()),
            _ => None,
        },
        rho: scheduler.rho(),
        total_slots: last.slots,
        final_loss: last.loss,
        final_grad_norm: last.grad_norm,
        iters: cfg.iters,
    };

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    fs::write(out_dir.join("config.txt"), cfg.write())?;
    fs::write(out_dir.join("policy.json"), policy_json)?;
    fs::write(out_dir.join("trace.csv"), trace.to_csv())?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Partition artifact: subsets plus auxiliary-graph statistics.
pub fn write_partition_artifacts(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(Graph, Partition)> {
    let graph = build_graph(cfg)?;
    let partition = build_partition(cfg, &graph);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("graph.txt"), graph.to_text())?;
    let aux = auxiliary_graph(&graph);
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "n": graph.node_count(),
        "edges": graph.edge_count(),
        "density": graph.density(),
        "aux_edges": aux.edge_count(),
        "q": partition.len(),
        "subsets": partition.subsets(),
    }))?;
    fs::write(out_dir.join("partition.json"), json)?;
    Ok((graph, partition))
}

/// Loss curves of several runs interpolated onto a shared slot grid, plus
/// the area under each curve.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub names: Vec<String>,
    pub grid: Vec<f64>,
    /// One interpolated loss column per run, indexed like `names`.
    pub losses: Vec<Vec<f64>>,
    pub auc: Vec<f64>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slots");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (k, &s) in self.grid.iter().enumerate() {
            out.push_str(&format!("{s:.6}"));
            for col in &self.losses {
                out.push_str(&format!(",{:.16e}", col[k]));
            }
            out.push('\n');
        }
        out
    }
}

const COMPARE_GRID_POINTS: usize = 200;

/// Compare traces on a common slot grid. Requires at least two traces with
/// an overlapping slot range.
pub fn compare_runs(named_traces: &[(String, Vec<TraceRecord>)]) -> Result<Comparison> {
    if named_traces.len() < 2 {
        bail!("need at least two traces to compare");
    }
    let mut lo: f64 = 0.0;
    let mut hi = f64::INFINITY;
    for (name, records) in named_traces {
        if records.is_empty() {
            bail!("trace '{name}' is empty");
        }
        lo = lo.max(records.first().unwrap().slots as f64);
        hi = hi.min(records.last().unwrap().slots as f64);
    }
    if hi <= lo {
        bail!("traces have no overlapping slot range");
    }
    let grid: Vec<f64> = (0..COMPARE_GRID_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (COMPARE_GRID_POINTS - 1) as f64)
        .collect();
    let mut losses = Vec::new();
    let mut auc = Vec::new();
    for (_, records) in named_traces {
        // Collapse repeated slot values (zero-cost iterations) to the last
        // recorded loss at that slot count.
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(records.len());
        for r in records {
            let s = r.slots as f64;
            match pts.last_mut() {
                Some(last) if last.0 == s => last.1 = r.loss,
                _ => pts.push((s, r.loss)),
            }
        }
        let col: Vec<f64> = grid.iter().map(|&s| interpolate(&pts, s)).collect();
        let mut area = 0.0;
        for k in 1..grid.len() {
            area += 0.5 * (col[k] + col[k - 1]) * (grid[k] - grid[k - 1]);
        }
        losses.push(col);
        auc.push(area);
    }
    Ok(Comparison {
        names: named_traces.iter().map(|(n, _)| n.clone()).collect(),
        grid,
        losses,
        auc,
    })
}

fn interpolate(pts: &[(f64, f64)], s: f64) -> f64 {
    match pts.binary_search_by(|p| p.0.total_cmp(&s)) {
        Ok(i) => pts[i].1,
        Err(0) => pts[0].1,
        Err(i) if i == pts.len() => pts[pts.len() - 1].1,
        Err(i) => {
            let (s0, l0) = pts[i - 1];
            let (s1, l1) = pts[i];
            l0 + (l1 - l0) * (s - s0) / (s1 - s0)
        }
    }
}

/// Load a trace CSV with file context attached to parse failures.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read trace {}", path.display()))?;
    TrainTrace::parse_csv(&text).with_context(|| format!("malformed trace {}", path.display()))
}

/// Run name for the comparison table: the trace file stem, disambiguated by
/// its parent directory when stems repeat.
pub fn trace_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) => format!("{}/{stem}", parent.to_string_lossy()),
        None => stem,
    }
}

pub fn out_path(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
}
