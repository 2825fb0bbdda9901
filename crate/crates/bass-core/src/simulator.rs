//! Slot-accounting decentralized SGD simulation.
//!
//! Each iteration runs a local stochastic gradient step at every node, draws
//! a communication schedule from one shared randomness stream, optionally
//! applies independent bi-directional link failures with self-weight
//! compensation, and mixes the models with the sampled matrix. Progress is
//! measured against cumulative transmission slots rather than iterations:
//! one slot per scheduled broadcast subset, two slots per scheduled link for
//! the matching baseline.
//!
//! Runs are bitwise deterministic for a fixed seed regardless of the thread
//! count: the master seed is split into labeled sub-streams (schedule,
//! failures, one per node) and per-node gradients are reduced in node order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Graph, Partition};
use crate::optimizer::{heuristic_epsilon, heuristic_rho, HeuristicPolicy, MixingPolicy};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("task needs positive {0}")]
    BadTaskParameter(&'static str),
    #[error("batch size {batch} exceeds node {node} dataset size {size}")]
    BatchTooLarge {
        batch: usize,
        node: usize,
        size: usize,
    },
    #[error("scheduler spectral objective {0} >= 1; training would not contract")]
    UnstablePolicy(f64),
    #[error("link budget {0} must be at least 1")]
    BadLinkBudget(f64),
    #[error("failure probability {0} outside [0, 1)")]
    BadFailureProbability(f64),
    #[error("loss diverged to {loss:.3e} at iteration {iter}; lower the learning rate")]
    Diverged { iter: usize, loss: f64 },
    #[error("trace parse error, row {row}: {reason}")]
    BadTrace { row: usize, reason: String },
}

/// Derive a labeled 256-bit sub-seed from a master seed.
pub fn derive_rng(master: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derive a labeled 64-bit sub-seed from a master seed, for APIs that take
/// plain integer seeds.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

// ---------------------------------------------------------------------------
// Synthetic convex tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    LeastSquares,
    Logistic,
}

/// One node's local dataset: feature rows with matching targets.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
}

impl NodeData {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exact global minimizer, available in closed form for least squares.
#[derive(Debug, Clone)]
pub struct TaskOptimum {
    pub x_star: DVector<f64>,
    pub f_star: f64,
}

/// A synthetic decentralized learning task with per-node datasets.
///
/// Least squares: all nodes share one standard-normal feature matrix; each
/// node labels it with its own generating model `w_i = w0 + heterogeneity *
/// u_i` (no label noise), so heterogeneity lives entirely in the targets and
/// local gradients disagree while local Hessians coincide. A block of anchor
/// rows `sqrt(lambda) e_k` targeting `sqrt(lambda) w_i` is appended to every
/// node's data; it acts as a ridge term pulling toward the node's own model,
/// makes every local objective strongly convex, and keeps all local optima
/// exactly at `w_i` (so with zero heterogeneity every node optimum coincides
/// with the global one).
///
/// Logistic: per-node feature draws, labels in {-1, +1} sampled through the
/// node model's logit, and an explicit ridge term in the per-sample loss.
#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub nodes: Vec<NodeData>,
    pub dim: usize,
    /// Per-sample ridge coefficient (zero for least squares, where the
    /// anchor rows supply the regularization).
    pub ridge: f64,
    pub optimum: Option<TaskOptimum>,
}

/// Weight of the anchor block in the least-squares task.
const ANCHOR_WEIGHT: f64 = 1.0;
/// Ridge coefficient of the logistic task.
const LOGISTIC_RIDGE: f64 = 1e-2;

/// Generate a synthetic task. `heterogeneity` scales the per-node shift of
/// the generating models, inducing non-iid local gradients.
pub fn make_task(
    kind: TaskKind,
    n_nodes: usize,
    dim: usize,
    samples_per_node: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<Task, SimError> {
    if n_nodes == 0 {
        return Err(SimError::BadTaskParameter("node count"));
    }
    if dim == 0 {
        return Err(SimError::BadTaskParameter("dimension"));
    }
    if samples_per_node == 0 {
        return Err(SimError::BadTaskParameter("samples per node"));
    }
    let mut rng = derive_rng(seed, "task");
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller keeps the dependency surface small and deterministic.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let w0 = DVector::from_fn(dim, |_, _| normal(&mut rng));
    // Shared feature block for least squares (samples plus anchor rows).
    let shared_features = {
        let rows = samples_per_node + dim;
        let mut f = DMatrix::zeros(rows, dim);
        for s in 0..samples_per_node {
            for k in 0..dim {
                f[(s, k)] = normal(&mut rng);
            }
        }
        let root = ANCHOR_WEIGHT.sqrt();
        for k in 0..dim {
            f[(samples_per_node + k, k)] = root;
        }
        f
    };
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let shift = DVector::from_fn(dim, |_, _| normal(&mut rng));
        let w_i = &w0 + shift * heterogeneity;
        match kind {
            TaskKind::LeastSquares => {
                let features = shared_features.clone();
                let targets = &features * &w_i;
                nodes.push(NodeData { features, targets });
            }
            TaskKind::Logistic => {
                let mut features = DMatrix::zeros(samples_per_node, dim);
                let mut targets = DVector::zeros(samples_per_node);
                for s in 0..samples_per_node {
                    for k in 0..dim {
                        features[(s, k)] = normal(&mut rng);
                    }
                    let logit = features.row(s).transpose().dot(&w_i);
                    let p = 1.0 / (1.0 + (-logit).exp());
                    targets[s] = if rng.gen::<f64>() < p { 1.0 } else { -1.0 };
                }
                nodes.push(NodeData { features, targets });
            }
        }
    }
    let ridge = match kind {
        TaskKind::LeastSquares => 0.0,
        TaskKind::Logistic => LOGISTIC_RIDGE,
    };
    let mut task = Task {
        kind,
        nodes,
        dim,
        ridge,
        optimum: None,
    };
    if kind == TaskKind::LeastSquares {
        task.optimum = Some(least_squares_optimum(&task));
    }
    Ok(task)
}

/// Global minimizer of the least-squares task via the normal equations.
fn least_squares_optimum(task: &Task) -> TaskOptimum {
    let d = task.dim;
    let mut lhs = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for node in &task.nodes {
        let scale = 1.0 / node.len() as f64;
        lhs += node.features.transpose() * &node.features * scale;
        rhs += node.features.transpose() * &node.targets * scale;
    }
    let x_star = lhs
        .clone()
        .cholesky()
        .expect("anchored least squares is positive definite")
        .solve(&rhs);
    let f_star = global_loss_impl(task, &x_star);
    TaskOptimum { x_star, f_star }
}

fn sample_loss(task: &Task, a: nalgebra::RowDVector<f64>, y: f64, x: &DVector<f64>) -> f64 {
    let z = a.transpose().dot(x);
    let data = match task.kind {
        TaskKind::LeastSquares => 0.5 * (z - y) * (z - y),
        TaskKind::Logistic => {
            let margin = y * z;
            if margin > 0.0 {
                (1.0 + (-margin).exp()).ln()
            } else {
                -margin + (1.0 + margin.exp()).ln()
            }
        }
    };
    data + 0.5 * task.ridge * x.norm_squared()
}

fn sample_grad_into(
    task: &Task,
    node: &NodeData,
    row: usize,
    x: &DVector<f64>,
    out: &mut DVector<f64>,
) {
    let a = node.features.row(row);
    let y = node.targets[row];
    let z = a.transpose().dot(x);
    match task.kind {
        TaskKind::LeastSquares => {
            let coeff = z - y;
            for k in 0..task.dim {
                out[k] += coeff * a[k];
            }
        }
        TaskKind::Logistic => {
            let margin = y * z;
            let sigma = 1.0 / (1.0 + margin.exp());
            let coeff = -y * sigma;
            for k in 0..task.dim {
                out[k] += coeff * a[k];
            }
        }
    }
    if task.ridge > 0.0 {
        out.axpy(task.ridge, x, 1.0);
    }
}

impl Task {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Local objective of one node at `x` (average per-sample loss).
    pub fn local_loss(&self, node: usize, x: &DVector<f64>) -> f64 {
        let data = &self.nodes[node];
        let mut total = 0.0;
        for s in 0..data.len() {
            total += sample_loss(self, data.features.row(s).into_owned(), data.targets[s], x);
        }
        total / data.len() as f64
    }

    /// Exact local gradient of one node at `x`.
    pub fn local_gradient_full(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        let data = &self.nodes[node];
        let mut grad = DVector::zeros(self.dim);
        for s in 0..data.len() {
            sample_grad_into(self, data, s, x, &mut grad);
        }
        grad / data.len() as f64
    }

    /// Global objective: average of the local objectives.
    pub fn global_loss(&self, x: &DVector<f64>) -> f64 {
        global_loss_impl(self, x)
    }

    /// Exact global gradient: average of the local gradients.
    pub fn global_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.dim);
        for node in 0..self.node_count() {
            grad += self.local_gradient_full(node, x);
        }
        grad / self.node_count() as f64
    }
}

fn global_loss_impl(task: &Task, x: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for node in 0..task.node_count() {
        total += task.local_loss(node, x);
    }
    total / task.node_count() as f64
}

/// Mini-batch stochastic gradient at one node: `batch_size` samples drawn
/// uniformly without replacement. A batch covering the whole dataset (or
/// `batch_size = 0`) computes the exact local gradient in a fixed order
/// without consuming randomness.
pub fn local_gradient(
    task: &Task,
    node: usize,
    x: &DVector<f64>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>, SimError> {
    let data = &task.nodes[node];
    let size = data.len();
    if batch_size > size {
        return Err(SimError::BatchTooLarge {
            batch: batch_size,
            node,
            size,
        });
    }
    if batch_size == 0 || batch_size == size {
        return Ok(task.local_gradient_full(node, x));
    }
    let picks = rand::seq::index::sample(rng, size, batch_size);
    let mut grad = DVector::zeros(task.dim);
    for row in picks {
        sample_grad_into(task, data, row, x, &mut grad);
    }
    Ok(grad / batch_size as f64)
}

// ---------------------------------------------------------------------------
// Schedules and schedulers
// ---------------------------------------------------------------------------

/// What a sampled schedule activated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleDecision {
    /// Indices of activated collision-free subsets (broadcast scheduling).
    Subsets(Vec<usize>),
    /// Indices of activated edges (link scheduling).
    Links(Vec<usize>),
}

/// One iteration's communication round: the scheduling decision, the mixing
/// matrix it induces, and its cost in transmission slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub decision: ScheduleDecision,
    pub mixing: DMatrix<f64>,
    pub slots: usize,
}

/// Slot cost of a schedule: one slot per broadcast subset, two per link.
pub fn slot_cost(schedule: &Schedule) -> usize {
    match &schedule.decision {
        ScheduleDecision::Subsets(s) => s.len(),
        ScheduleDecision::Links(e) => 2 * e.len(),
    }
}

/// Link-scheduling baseline: the edge set is decomposed into matchings by
/// greedy edge coloring and each matching activates independently, with a
/// common activation probability scaled so the expected number of active
/// links matches the budget. Every active link costs two transmission slots.
#[derive(Debug, Clone)]
pub struct MatchingScheduler {
    pub edges: Vec<(usize, usize)>,
    /// Edge indices per matching class.
    pub matchings: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
    pub epsilon: f64,
    pub rho: f64,
    n: usize,
}

/// Build the matching baseline for an average link budget per iteration.
pub fn matching_baseline(g: &Graph, budget_links: f64) -> Result<MatchingScheduler, SimError> {
    if budget_links < 1.0 {
        return Err(SimError::BadLinkBudget(budget_links));
    }
    let n = g.node_count();
    let edges = g.edges().to_vec();
    // Greedy edge coloring: smallest class free at both endpoints.
    let mut color_of = vec![usize::MAX; edges.len()];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (e, &(i, j)) in edges.iter().enumerate() {
        let used: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|&(f, &(a, b))| {
                color_of[f] != usize::MAX && (a == i || b == i || a == j || b == j)
            })
            .map(|(f, _)| color_of[f])
            .collect();
        let c = (0..).find(|c| !used.contains(c)).unwrap();
        if c == classes.len() {
            classes.push(Vec::new());
        }
        color_of[e] = c;
        classes[c].push(e);
    }
    let activation = (budget_links / edges.len() as f64).min(1.0);
    let probs = vec![activation; classes.len()];
    // Expected Laplacian statistics of the random union of matchings.
    let lap_of = |class: &[usize]| {
        let mut l = DMatrix::zeros(n, n);
        for &e in class {
            let (i, j) = edges[e];
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
            l[(i, j)] -= 1.0;
            l[(j, i)] -= 1.0;
        }
        l
    };
    let laps: Vec<DMatrix<f64>> = classes.iter().map(|c| lap_of(c)).collect();
    let mut e1 = DMatrix::zeros(n, n);
    let mut e2 = DMatrix::zeros(n, n);
    for (k, lk) in laps.iter().enumerate() {
        e1 += lk * probs[k];
        for (l, ll) in laps.iter().enumerate() {
            let joint = if k == l {
                probs[k]
            } else {
                probs[k] * probs[l]
            };
            e2 += lk * ll * joint;
        }
    }
    let epsilon = heuristic_epsilon(&e1, &e2);
    let rho = heuristic_rho(&e1, &e2, epsilon);
    Ok(MatchingScheduler {
        edges,
        matchings: classes,
        probs,
        epsilon,
        rho,
        n,
    })
}

impl MatchingScheduler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Schedule {
        let mut active_edges = Vec::new();
        for (k, class) in self.matchings.iter().enumerate() {
            if rng.gen::<f64>() < self.probs[k] {
                active_edges.extend_from_slice(class);
            }
        }
        active_edges.sort_unstable();
        let mut w = DMatrix::identity(self.n, self.n);
        for &e in &active_edges {
            let (i, j) = self.edges[e];
            w[(i, i)] -= self.epsilon;
            w[(j, j)] -= self.epsilon;
            w[(i, j)] += self.epsilon;
            w[(j, i)] += self.epsilon;
        }
        let slots = 2 * active_edges.len();
        Schedule {
            decision: ScheduleDecision::Links(active_edges),
            mixing: w,
            slots,
        }
    }
}

/// Communication scheduler driving one simulation run.
#[derive(Debug, Clone)]
pub enum Scheduler {
    /// Sample one subgraph candidate per iteration from an optimized policy.
    Policy(MixingPolicy),
    /// Activate each collision-free subset independently per iteration.
    Heuristic {
        policy: HeuristicPolicy,
        graph: Graph,
        partition: Partition,
    },
    /// Activate matchings of links independently per iteration.
    Matching(MatchingScheduler),
    /// Schedule every collision-free subset every iteration.
    FullComm {
        mixing: DMatrix<f64>,
        subsets: usize,
        epsilon: f64,
        rho: f64,
    },
}

/// Full-communication scheduler: the whole topology with the optimal static
/// link weight; every subset broadcasts, costing one slot each.
pub fn full_comm_scheduler(g: &Graph, partition: &Partition) -> Scheduler {
    let l = crate::graph::laplacian(g);
    let l2 = &l * &l;
    let epsilon = heuristic_epsilon(&l, &l2);
    let rho = heuristic_rho(&l, &l2, epsilon);
    let n = g.node_count();
    Scheduler::FullComm {
        mixing: DMatrix::identity(n, n) - &l * epsilon,
        subsets: partition.len(),
        epsilon,
        rho,
    }
}

impl Scheduler {
    /// Spectral objective of the induced mixing-matrix distribution.
    pub fn rho(&self) -> f64 {
        match self {
            Scheduler::Policy(p) => p.rho,
            Scheduler::Heuristic { policy, .. } => policy.rho,
            Scheduler::Matching(m) => m.rho,
            Scheduler::FullComm { rho, .. } => *rho,
        }
    }

    /// Short identifier used in trace metadata and artifact names.
    pub fn id(&self) -> &'static str {
        match self {
            Scheduler::Policy(_) => "bass_optimized",
            Scheduler::Heuristic { .. } => "bass_heuristic",
            Scheduler::Matching(_) => "matching",
            Scheduler::FullComm { .. } => "full_comm",
        }
    }

    /// Average transmission slots per iteration.
    pub fn budget_slots(&self) -> f64 {
        match self {
            Scheduler::Policy(p) => p.candidates.budget as f64,
            Scheduler::Heuristic { policy, .. } => policy.subset_probs.iter().sum(),
            Scheduler::Matching(m) => {
                2.0 * m
                    .matchings
                    .iter()
                    .zip(&m.probs)
                    .map(|(c, &p)| p * c.len() as f64)
                    .sum::<f64>()
            }
            Scheduler::FullComm { subsets, .. } => *subsets as f64,
        }
    }

    /// Draw one iteration's schedule from the shared randomness stream.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Schedule {
        match self {
            Scheduler::Policy(policy) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = policy.probs.len() - 1;
                for (r, &p) in policy.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = r;
                        break;
                    }
                }
                let cand = &policy.candidates.candidates[pick];
                Schedule {
                    decision: ScheduleDecision::Subsets(cand.subset_indices.clone()),
                    mixing: policy.matrices[pick].clone(),
                    slots: cand.cost,
                }
            }
            Scheduler::Heuristic {
                policy,
                graph,
                partition,
            } => {
                let active_subsets: Vec<usize> = policy
                    .subset_probs
                    .iter()
                    .enumerate()
                    .filter(|&(_, &p)| rng.gen::<f64>() < p)
                    .map(|(k, _)| k)
                    .collect();
                let active_nodes: Vec<usize> = active_subsets
                    .iter()
                    .flat_map(|&k| partition.subsets()[k].iter().copied())
                    .collect();
                let n = graph.node_count();
                let mut w = DMatrix::identity(n, n);
                let mut active = vec![false; n];
                for &v in &active_nodes {
                    active[v] = true;
                }
                for &(i, j) in graph.edges() {
                    if active[i] && active[j] {
                        w[(i, i)] -= policy.epsilon;
                        w[(j, j)] -= policy.epsilon;
                        w[(i, j)] += policy.epsilon;
                        w[(j, i)] += policy.epsilon;
                    }
                }
                let slots = active_subsets.len();
                Schedule {
                    decision: ScheduleDecision::Subsets(active_subsets),
                    mixing: w,
                    slots,
                }
            }
            Scheduler::Matching(m) => m.sample(rng),
            Scheduler::FullComm {
                mixing, subsets, ..
            } => Schedule {
                decision: ScheduleDecision::Subsets((0..*subsets).collect()),
                mixing: mixing.clone(),
                slots: *subsets,
            },
        }
    }
}

/// Fail each active link independently and push the lost weight onto both
/// endpoint self-weights, preserving symmetry and unit row sums exactly.
pub fn apply_link_failures(
    schedule: &Schedule,
    fail_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Schedule, SimError> {
    if !(0.0..1.0).contains(&fail_prob) {
        return Err(SimError::BadFailureProbability(fail_prob));
    }
    if fail_prob == 0.0 {
        return Ok(schedule.clone());
    }
    let mut out = schedule.clone();
    let n = out.mixing.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let weight = out.mixing[(i, j)];
            if weight != 0.0 && rng.gen::<f64>() < fail_prob {
                out.mixing[(i, j)] = 0.0;
                out.mixing[(j, i)] = 0.0;
                out.mixing[(i, i)] += weight;
                out.mixing[(j, j)] += weight;
            }
        }
    }
    Ok(out)
}

/// Consensus averaging: every row of the state becomes the weighted average
/// of its neighbors' rows. Unit column sums preserve the network average.
pub fn mixing_step(states: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    w * states
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// Multiply by `factor` every `every` iterations.
    Step {
        initial: f64,
        factor: f64,
        every: usize,
    },
    /// Multiply by `factor` at each listed iteration.
    Milestones {
        initial: f64,
        factor: f64,
        at: Vec<usize>,
    },
}

impl LrSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Step {
                initial,
                factor,
                every,
            } => initial * factor.powi((t / every.max(&1)) as i32),
            LrSchedule::Milestones {
                initial,
                factor,
                at,
            } => initial * factor.powi(at.iter().filter(|&&m| m <= t).count() as i32),
        }
    }
}

/// Simulation options shared by all schedulers.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub iters: usize,
    pub lr: LrSchedule,
    /// Mini-batch size per node; 0 means full batch.
    pub batch_size: usize,
    pub fail_prob: f64,
    pub seed: u64,
    /// Worker threads for per-node gradients; 0 runs sequentially. The
    /// result is identical for any value.
    pub threads: usize,
}

/// Per-iteration metric record (iteration 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub slots: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub consensus_err: f64,
}

/// Run metadata carried next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub scheduler: String,
    pub budget_slots: f64,
    pub fail_prob: f64,
    pub iters: usize,
}

/// Per-iteration metrics for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub meta: RunMeta,
}

const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Run decentralized SGD: local stochastic gradient steps, one shared
/// schedule draw per iteration, optional link failures, consensus mixing.
/// Metrics are evaluated at the exact network-average model.
pub fn run_dsgd(
    task: &Task,
    scheduler: &Scheduler,
    opts: &RunOptions,
) -> Result<TrainTrace, SimError> {
    let rho = scheduler.rho();
    if rho >= 1.0 {
        return Err(SimError::UnstablePolicy(rho));
    }
    if !(0.0..1.0).contains(&opts.fail_prob) {
        return Err(SimError::BadFailureProbability(opts.fail_prob));
    }
    let n = task.node_count();
    let d = task.dim;
    let mut schedule_rng = derive_rng(opts.seed, "schedule");
    let mut failure_rng = derive_rng(opts.seed, "failures");
    let mut node_rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| derive_rng(opts.seed, &format!("node/{i}")))
        .collect();
    let pool = if opts.threads > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .expect("thread pool"),
        )
    } else {
        None
    };

    let mut states = DMatrix::zeros(n, d);
    let mut records = Vec::with_capacity(opts.iters + 1);
    let mut slots: u64 = 0;
    records.push(measure(task, &states, 0, slots));

    for t in 0..opts.iters {
        let eta = opts.lr.at(t);
        let batch = opts.batch_size;
        let grad_of = |(i, rng): (usize, &mut ChaCha8Rng)| -> Result<DVector<f64>, SimError> {
            let x_i = states.row(i).transpose();
            local_gradient(task, i, &x_i, batch, rng)
        };
        let grads: Vec<DVector<f64>> = match &pool {
            Some(p) => p.install(|| {
                node_rngs
                    .par_iter_mut()
                    .enumerate()
                    .map(grad_of)
                    .collect::<Result<Vec<_>, _>>()
            })?,
            None => node_rngs
                .iter_mut()
                .enumerate()
                .map(grad_of)
                .collect::<Result<Vec<_>, _>>()?,
        };
        for (i, g) in grads.iter().enumerate() {
            for k in 0..d {
                states[(i, k)] -= eta * g[k];
            }
        }
        let mut schedule = scheduler.sample(&mut schedule_rng);
        if opts.fail_prob > 0.0 {
            schedule = apply_link_failures(&schedule, opts.fail_prob, &mut failure_rng)?;
        }
        states = mixing_step(&states, &schedule.mixing);
        slots += schedule.slots as u64;
        let record = measure(task, &states, t + 1, slots);
        if !record.loss.is_finite() || record.loss > DIVERGENCE_THRESHOLD {
            return Err(SimError::Diverged {
                iter: t + 1,
                loss: record.loss,
            });
        }
        records.push(record);
    }

    Ok(TrainTrace {
        records,
        meta: RunMeta {
            seed: opts.seed,
            scheduler: scheduler.id().to_string(),
            budget_slots: scheduler.budget_slots(),
            fail_prob: opts.fail_prob,
            iters: opts.iters,
        },
    })
}

fn measure(task: &Task, states: &DMatrix<f64>, iter: usize, slots: u64) -> TraceRecord {
    let n = task.node_count();
    let mean = states.row_mean().transpose();
    let mut consensus = 0.0;
    for i in 0..n {
        let diff = states.row(i).transpose() - &mean;
        consensus += diff.norm_squared();
    }
    consensus /= n as f64;
    TraceRecord {
        iter,
        slots,
        loss: task.global_loss(&mean),
        grad_norm: task.global_gradient(&mean).norm(),
        consensus_err: consensus,
    }
}

impl TrainTrace {
    /// CSV serialization: header plus one row per iteration, floats printed
    /// with 17 significant digits so values round-trip exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,slots,loss,grad_norm,consensus_err\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e}\n",
                r.iter, r.slots, r.loss, r.grad_norm, r.consensus_err
            ));
        }
        out
    }

    /// Parse the CSV format back into records. Errors carry the 1-indexed
    /// row number.
    pub fn parse_csv(text: &str) -> Result<Vec<TraceRecord>, SimError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(SimError::BadTrace {
            row: 1,
            reason: "empty trace".into(),
        })?;
        if header.trim() != "iter,slots,loss,grad_norm,consensus_err" {
            return Err(SimError::BadTrace {
                row: 1,
                reason: format!("unexpected header '{header}'"),
            });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let row = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(SimError::BadTrace {
                    row,
                    reason: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let parse_u = |s: &str| -> Result<u64, SimError> {
                s.trim().parse().map_err(|_| SimError::BadTrace {
                    row,
                    reason: format!("invalid integer '{s}'"),
                })
            };
            let parse_f = |s: &str| -> Result<f64, SimError> {
                s.trim().parse().map_err(|_| SimError::BadTrace {
                    row,
                    reason: format!("invalid float '{s}'"),
                })
            };
            records.push(TraceRecord {
                iter: parse_u(fields[0])? as usize,
                slots: parse_u(fields[1])?,
                loss: parse_f(fields[2])?,
                grad_norm: parse_f(fields[3])?,
                consensus_err: parse_f(fields[4])?,
            });
        }
        Ok(records)
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("meta serializes")
    }

    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace has at least the origin")
    }

    /// First iteration where the gradient norm drops below the threshold,
    /// with its cumulative slot count.
    pub fn first_crossing(&self, grad_threshold: f64) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.grad_norm < grad_threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        collision_free_partition, generate_topology, ColoringOrder, Graph, TopologyKind,
    };
    use crate::optimizer::{build_heuristic_policy, init_policy, InitKind, SolveOptions};
    use crate::sampler::enumerate_candidates;
    use crate::spectral;
    use approx::assert_abs_diff_eq;

    fn two_stars9() -> Graph {
        generate_topology(TopologyKind::TwoStars, 9, 0.0, 0).unwrap()
    }

    fn small_policy() -> (Graph, Partition, MixingPolicy) {
        let g = two_stars9();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let pool = enumerate_candidates(&g, &part, 3).unwrap();
        let opts = SolveOptions {
            tol: 1e-6,
            max_iters: 600,
        };
        let policy = init_policy(&pool, InitKind::ConnectivityEpsilon, &opts).unwrap();
        (g, part, policy)
    }

    #[test]
    fn task_zero_heterogeneity_shares_optimum() {
        let task = make_task(TaskKind::LeastSquares, 5, 6, 30, 0.0, 3).unwrap();
        let opt = task.optimum.as_ref().unwrap();
        // Every local gradient vanishes at the shared optimum.
        for node in 0..task.node_count() {
            let g = task.local_gradient_full(node, &opt.x_star);
            assert!(g.norm() <= 1e-9, "node {node} gradient {}", g.norm());
        }
        assert!(task.global_gradient(&opt.x_star).norm() <= 1e-10);
    }

    #[test]
    fn task_heterogeneous_has_exact_normal_equations_optimum() {
        let task = make_task(TaskKind::LeastSquares, 9, 10, 40, 0.8, 7).unwrap();
        let opt = task.optimum.as_ref().unwrap();
        assert!(task.global_gradient(&opt.x_star).norm() <= 1e-10);
        // Heterogeneity shows up as disagreeing local gradients.
        let g0 = task.local_gradient_full(0, &opt.x_star);
        assert!(g0.norm() > 1e-3);
    }

    #[test]
    fn task_seeds_differ_but_shapes_match() {
        let a = make_task(TaskKind::LeastSquares, 3, 4, 10, 0.5, 1).unwrap();
        let b = make_task(TaskKind::LeastSquares, 3, 4, 10, 0.5, 2).unwrap();
        assert_eq!(a.nodes[0].features.shape(), b.nodes[0].features.shape());
        assert!((&a.nodes[0].features - &b.nodes[0].features).amax() > 0.0);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let task = make_task(TaskKind::Logistic, 2, 5, 20, 0.3, 11).unwrap();
        let x = DVector::from_fn(5, |k, _| 0.1 * (k as f64 + 1.0));
        let grad = task.local_gradient_full(0, &x);
        let h = 1e-6;
        for k in 0..5 {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (task.local_loss(0, &xp) - task.local_loss(0, &xm)) / (2.0 * h);
            assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn full_batch_gradient_is_exact_and_deterministic() {
        let task = make_task(TaskKind::LeastSquares, 2, 4, 12, 0.5, 5).unwrap();
        let x = DVector::from_element(4, 0.3);
        let mut rng = derive_rng(0, "test");
        let size = task.nodes[0].len();
        let g1 = local_gradient(&task, 0, &x, size, &mut rng).unwrap();
        let g2 = task.local_gradient_full(0, &x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn minibatch_gradient_is_unbiased() {
        let task = make_task(TaskKind::LeastSquares, 2, 4, 20, 0.5, 9).unwrap();
        let x = DVector::from_element(4, -0.2);
        let exact = task.local_gradient_full(0, &x);
        let mut rng = derive_rng(1, "mc");
        let trials = 10_000;
        let mut sum = DVector::zeros(4);
        let mut sum_sq = DVector::zeros(4);
        for _ in 0..trials {
            let g = local_gradient(&task, 0, &x, 5, &mut rng).unwrap();
            sum += &g;
            sum_sq += g.component_mul(&g);
        }
        let mean = &sum / trials as f64;
        for k in 0..4 {
            let var = (sum_sq[k] / trials as f64 - mean[k] * mean[k]).max(0.0);
            let se = (var / trials as f64).sqrt();
            assert!(
                (mean[k] - exact[k]).abs() <= 3.0 * se + 1e-12,
                "coordinate {k}: mean {} exact {} se {se}",
                mean[k],
                exact[k]
            );
        }
    }

    #[test]
    fn minibatch_rejects_oversized_batch() {
        let task = make_task(TaskKind::LeastSquares, 1, 3, 5, 0.0, 0).unwrap();
        let x = DVector::zeros(3);
        let mut rng = derive_rng(0, "x");
        let size = task.nodes[0].len();
        assert!(local_gradient(&task, 0, &x, size + 1, &mut rng).is_err());
    }

    #[test]
    fn policy_sampling_matches_probabilities() {
        let (_, _, mut policy) = small_policy();
        let r = policy.probs.len();
        policy.probs = vec![0.0; r];
        policy.probs[0] = 0.5;
        policy.probs[1] = 0.5;
        let sched = Scheduler::Policy(policy.clone());
        let mut rng = derive_rng(3, "freq");
        let draws = 100_000;
        let mut count0 = 0usize;
        for _ in 0..draws {
            let s = sched.sample(&mut rng);
            assert_eq!(s.slots, 3);
            if let ScheduleDecision::Subsets(ids) = &s.decision {
                if ids == &policy.candidates.candidates[0].subset_indices {
                    count0 += 1;
                }
            }
        }
        let freq = count0 as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn policy_single_candidate_always_drawn() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let pool = enumerate_candidates(&g, &part, 2).unwrap();
        let policy = init_policy(
            &pool,
            InitKind::ConnectivityEpsilon,
            &SolveOptions::default(),
        )
        .unwrap();
        let sched = Scheduler::Policy(policy);
        let mut rng = derive_rng(0, "one");
        for _ in 0..100 {
            let s = sched.sample(&mut rng);
            assert_eq!(s.decision, ScheduleDecision::Subsets(vec![0, 1]));
        }
    }

    #[test]
    fn heuristic_full_probability_is_deterministic_full_graph() {
        let g = two_stars9();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let policy = build_heuristic_policy(&g, &part, part.len()).unwrap();
        assert!(policy.subset_probs.iter().all(|&p| p == 1.0));
        let sched = Scheduler::Heuristic {
            policy: policy.clone(),
            graph: g.clone(),
            partition: part.clone(),
        };
        let mut rng = derive_rng(0, "h");
        let expected = DMatrix::identity(9, 9) - crate::graph::laplacian(&g) * policy.epsilon;
        for _ in 0..10 {
            let s = sched.sample(&mut rng);
            assert!((&s.mixing - &expected).amax() <= 1e-12);
            assert_eq!(s.slots, part.len());
        }
    }

    #[test]
    fn heuristic_mean_slots_tracks_budget() {
        let g = two_stars9();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let policy = build_heuristic_policy(&g, &part, 3).unwrap();
        let sched = Scheduler::Heuristic {
            policy,
            graph: g.clone(),
            partition: part.clone(),
        };
        let mut rng = derive_rng(7, "slots");
        let draws = 10_000;
        let total: usize = (0..draws).map(|_| sched.sample(&mut rng).slots).sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 3.0).abs() <= 0.02 * 3.0, "mean slots {mean}");
    }

    #[test]
    fn heuristic_empirical_laplacian_matches_expectation() {
        let g = two_stars9();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let policy = build_heuristic_policy(&g, &part, 3).unwrap();
        let nodep = crate::optimizer::node_probabilities(&part, &policy.subset_probs);
        let expected = crate::optimizer::expected_laplacian(&g, &part, &nodep).unwrap();
        let sched = Scheduler::Heuristic {
            policy: policy.clone(),
            graph: g.clone(),
            partition: part.clone(),
        };
        let mut rng = derive_rng(11, "mc-lap");
        let draws = 100_000usize;
        let n = g.node_count();
        let mut mean = DMatrix::zeros(n, n);
        let mut mean_sq = DMatrix::zeros(n, n);
        for _ in 0..draws {
            let s = sched.sample(&mut rng);
            // Recover L~ from W = I - eps L~.
            let lt = (DMatrix::identity(n, n) - &s.mixing) / policy.epsilon;
            mean += &lt;
            mean_sq += lt.component_mul(&lt);
        }
        mean /= draws as f64;
        mean_sq /= draws as f64;
        for i in 0..n {
            for j in 0..n {
                let var = (mean_sq[(i, j)] - mean[(i, j)] * mean[(i, j)]).max(0.0);
                let se = (var / draws as f64).sqrt();
                let gap = (mean[(i, j)] - expected[(i, j)]).abs();
                assert!(
                    gap <= 3.0 * se + 1e-9,
                    "entry ({i},{j}): gap {gap:.3e}, se {se:.3e}"
                );
            }
        }
    }

    #[test]
    fn matching_single_edge_always_active() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let m = matching_baseline(&g, 1.0).unwrap();
        let sched = Scheduler::Matching(m);
        let mut rng = derive_rng(0, "m");
        let s = sched.sample(&mut rng);
        assert_eq!(s.slots, 2);
        assert_eq!(s.decision, ScheduleDecision::Links(vec![0]));
    }

    #[test]
    fn matching_slots_always_even() {
        let g = two_stars9();
        let m = matching_baseline(&g, 2.0).unwrap();
        let sched = Scheduler::Matching(m);
        let mut rng = derive_rng(5, "m2");
        for _ in 0..200 {
            let s = sched.sample(&mut rng);
            assert_eq!(s.slots % 2, 0);
            assert_eq!(slot_cost(&s), s.slots);
        }
    }

    #[test]
    fn matching_rejects_sub_unit_budget() {
        let g = two_stars9();
        assert!(matching_baseline(&g, 0.5).is_err());
    }

    #[test]
    fn slot_cost_by_decision_kind() {
        let schedule = |decision| Schedule {
            decision,
            mixing: DMatrix::identity(2, 2),
            slots: 0,
        };
        assert_eq!(
            slot_cost(&schedule(ScheduleDecision::Subsets(vec![0, 1, 2, 3]))),
            4
        );
        assert_eq!(
            slot_cost(&schedule(ScheduleDecision::Links(vec![0, 1, 2]))),
            6
        );
    }

    #[test]
    fn link_failures_identity_at_zero() {
        let (_, _, policy) = small_policy();
        let sched = Scheduler::Policy(policy);
        let mut rng = derive_rng(0, "lf");
        let s = sched.sample(&mut rng);
        let mut frng = derive_rng(0, "lf2");
        assert_eq!(apply_link_failures(&s, 0.0, &mut frng).unwrap(), s);
    }

    #[test]
    fn link_failures_preserve_structure() {
        let (_, _, policy) = small_policy();
        let sched = Scheduler::Policy(policy);
        let mut rng = derive_rng(1, "lf3");
        let mut frng = derive_rng(2, "lf4");
        let mut xrng = derive_rng(3, "lf-state");
        let x = DMatrix::from_fn(9, 4, |_, _| xrng.gen_range(-1.0..1.0));
        for _ in 0..100 {
            let s = sched.sample(&mut rng);
            let failed = apply_link_failures(&s, 0.3, &mut frng).unwrap();
            assert!(spectral::asymmetry(&failed.mixing) <= 1e-12);
            assert!(spectral::row_sum_error(&failed.mixing, 1.0) <= 1e-12);
            // Average preservation survives the compensation.
            let mixed = mixing_step(&x, &failed.mixing);
            for k in 0..4 {
                assert!((mixed.column(k).sum() - x.column(k).sum()).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn link_failures_all_fail_collapses_to_identity() {
        let (_, _, policy) = small_policy();
        let sched = Scheduler::Policy(policy);
        let mut rng = derive_rng(3, "lf5");
        let s = sched.sample(&mut rng);
        // Failure probability within a hair of 1: every draw fails.
        let mut frng = derive_rng(4, "lf6");
        let failed = apply_link_failures(&s, 1.0 - 1e-12, &mut frng).unwrap();
        assert_eq!(failed.mixing, DMatrix::identity(9, 9));
    }

    #[test]
    fn mixing_preserves_average() {
        let n = 6;
        let d = 3;
        let mut rng = derive_rng(9, "mix");
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let eye = DMatrix::identity(n, n);
        assert_eq!(mixing_step(&x, &eye), x);
        let j = spectral::averaging_matrix(n);
        let averaged = mixing_step(&x, &j);
        let mean = x.row_mean();
        for i in 0..n {
            for k in 0..d {
                assert_abs_diff_eq!(averaged[(i, k)], mean[k], epsilon = 1e-12);
            }
        }
        // Column means preserved by any unit-column-sum matrix.
        let (_, _, policy) = small_policy();
        let w = &policy.matrices[0];
        let x9 = DMatrix::from_fn(9, d, |_, _| rng.gen_range(-1.0..1.0));
        let mixed = mixing_step(&x9, w);
        for k in 0..d {
            assert_abs_diff_eq!(mixed.column(k).sum(), x9.column(k).sum(), epsilon = 1e-12);
        }
    }

    #[test]
    fn consensus_contracts_without_gradients() {
        let (_, _, policy) = small_policy();
        assert!(policy.rho < 1.0);
        let sched = Scheduler::Policy(policy);
        let n = 9;
        let d = 4;
        let mut ratio_sum = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = derive_rng(seed, "consensus");
            let mut x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
            let deviation = |m: &DMatrix<f64>| {
                let mean = m.row_mean();
                let mut dev = 0.0;
                for i in 0..n {
                    for k in 0..d {
                        dev += (m[(i, k)] - mean[k]).powi(2);
                    }
                }
                dev.sqrt()
            };
            let initial = deviation(&x);
            for _ in 0..500 {
                let s = sched.sample(&mut rng);
                x = mixing_step(&x, &s.mixing);
            }
            ratio_sum += deviation(&x) / initial;
        }
        let mean_ratio = ratio_sum / seeds as f64;
        assert!(mean_ratio < 1e-6, "mean deviation ratio {mean_ratio:.3e}");
    }

    #[test]
    fn lr_schedules() {
        let c = LrSchedule::Constant(0.1);
        assert_eq!(c.at(0), 0.1);
        assert_eq!(c.at(999), 0.1);
        let s = LrSchedule::Step {
            initial: 1.0,
            factor: 0.5,
            every: 10,
        };
        assert_eq!(s.at(9), 1.0);
        assert_eq!(s.at(10), 0.5);
        assert_eq!(s.at(25), 0.25);
        let m = LrSchedule::Milestones {
            initial: 1.0,
            factor: 0.1,
            at: vec![100, 150, 200],
        };
        assert_eq!(m.at(99), 1.0);
        assert_abs_diff_eq!(m.at(150), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(m.at(250), 0.001, epsilon = 1e-15);
    }

    #[test]
    fn single_node_network_reduces_to_sgd() {
        let g = Graph::new(1, &[]).unwrap();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let sched = full_comm_scheduler(&g, &part);
        let task = make_task(TaskKind::LeastSquares, 1, 3, 20, 0.0, 2).unwrap();
        let opts = RunOptions {
            iters: 200,
            lr: LrSchedule::Constant(0.3),
            batch_size: 0,
            fail_prob: 0.0,
            seed: 4,
            threads: 0,
        };
        let trace = run_dsgd(&task, &sched, &opts).unwrap();
        assert_eq!(trace.records.len(), 201);
        assert!(trace.final_record().grad_norm < 1e-8);
        assert_eq!(trace.final_record().consensus_err, 0.0);
    }

    #[test]
    fn full_comm_converges_on_least_squares() {
        let g = two_stars9();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let sched = full_comm_scheduler(&g, &part);
        let task = make_task(TaskKind::LeastSquares, 9, 6, 30, 0.5, 6).unwrap();
        let opts = RunOptions {
            iters: 600,
            lr: LrSchedule::Step {
                initial: 0.25,
                factor: 0.5,
                every: 150,
            },
            batch_size: 0,
            fail_prob: 0.0,
            seed: 1,
            threads: 0,
        };
        let trace = run_dsgd(&task, &sched, &opts).unwrap();
        assert!(
            trace.final_record().grad_norm < 1e-6,
            "grad norm {}",
            trace.final_record().grad_norm
        );
        // Slot accounting: q slots per iteration.
        assert_eq!(trace.final_record().slots, (part.len() * opts.iters) as u64);
    }

    #[test]
    fn divergence_guard_triggers() {
        let g = two_stars9();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let sched = full_comm_scheduler(&g, &part);
        let task = make_task(TaskKind::LeastSquares, 9, 6, 30, 0.5, 6).unwrap();
        let opts = RunOptions {
            iters: 500,
            lr: LrSchedule::Constant(50.0),
            batch_size: 0,
            fail_prob: 0.0,
            seed: 1,
            threads: 0,
        };
        assert!(matches!(
            run_dsgd(&task, &sched, &opts),
            Err(SimError::Diverged { .. })
        ));
    }

    #[test]
    fn traces_bitwise_identical_across_thread_counts() {
        let (g, part, policy) = small_policy();
        let _ = (g, part);
        let sched = Scheduler::Policy(policy);
        let task = make_task(TaskKind::LeastSquares, 9, 5, 20, 0.5, 8).unwrap();
        let make_opts = |threads: usize| RunOptions {
            iters: 120,
            lr: LrSchedule::Step {
                initial: 0.15,
                factor: 0.5,
                every: 30,
            },
            batch_size: 8,
            fail_prob: 0.1,
            seed: 12,
            threads,
        };
        let a = run_dsgd(&task, &sched, &make_opts(0)).unwrap();
        let b = run_dsgd(&task, &sched, &make_opts(1)).unwrap();
        let c = run_dsgd(&task, &sched, &make_opts(4)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn trace_csv_roundtrip_and_errors() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let sched = full_comm_scheduler(&g, &part);
        let task = make_task(TaskKind::LeastSquares, 2, 3, 10, 0.2, 1).unwrap();
        let opts = RunOptions {
            iters: 5,
            lr: LrSchedule::Constant(0.1),
            batch_size: 0,
            fail_prob: 0.0,
            seed: 0,
            threads: 0,
        };
        let trace = run_dsgd(&task, &sched, &opts).unwrap();
        assert_eq!(trace.records.len(), opts.iters + 1);
        assert!(trace
            .records
            .windows(2)
            .all(|pair| pair[1].slots >= pair[0].slots));
        let csv = trace.to_csv();
        let parsed = TrainTrace::parse_csv(&csv).unwrap();
        assert_eq!(parsed, trace.records);

        let truncated = "iter,slots,loss,grad_norm,consensus_err\n0,0,1.0\n";
        match TrainTrace::parse_csv(truncated) {
            Err(SimError::BadTrace { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unstable_scheduler_rejected() {
        // A policy that never mixes has rho = 1.
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let pool = enumerate_candidates(&g, &part, 2).unwrap();
        let policy = MixingPolicy::new(pool, vec![DMatrix::identity(2, 2)], vec![1.0]).unwrap();
        let task = make_task(TaskKind::LeastSquares, 2, 3, 10, 0.2, 1).unwrap();
        let opts = RunOptions {
            iters: 5,
            lr: LrSchedule::Constant(0.1),
            batch_size: 0,
            fail_prob: 0.0,
            seed: 0,
            threads: 0,
        };
        assert!(matches!(
            run_dsgd(&task, &Scheduler::Policy(policy), &opts),
            Err(SimError::UnstablePolicy(_))
        ));
    }
}
