//! Mixing-matrix and sampling-probability optimization.
//!
//! The convergence speed of decentralized SGD with i.i.d. random mixing
//! matrices is governed by the spectral objective
//! `rho = || E[W^T W] - J ||_2` with `J = (1/n) 1 1^T`. This module owns
//! everything that shapes that quantity: the candidate-wise convex
//! subproblems, the alternating scheme that minimizes rho over mixing
//! weights and sampling probabilities jointly, two initialization routes,
//! and a cheaper centrality-driven heuristic with closed-form expectations
//! for independently activated subsets.
//!
//! All feasible mixing matrices here are symmetric with unit row sums and
//! respect a per-candidate sparsity mask; under those constraints
//! `E[W^T W] - J` is positive semidefinite, so the spectral norm equals the
//! largest eigenvalue and every subproblem is a convex spectral program.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Partition};
use crate::sampler::CandidateSet;
use crate::spectral::{
    self, averaging_matrix, lambda_max, minimize_convex_scalar, spectral_norm_sym, sym_eig,
};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("start point is not feasible (distance {0:.3e} from the feasible set)")]
    InfeasibleStart(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least one mixing matrix candidate")]
    NoCandidates,
    #[error("initial policy violates the spectral condition: rho = {0} >= 1")]
    UnstableInit(f64),
    #[error("invalid mixing policy: {0}")]
    InvalidPolicy(String),
    #[error("budget {budget} out of range [1, {q}]")]
    BudgetOutOfRange { budget: usize, q: usize },
    #[error("node probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("candidate index {index} out of range for {r} candidates")]
    CandidateOutOfRange { index: usize, r: usize },
    #[error("policy serialization: {0}")]
    Serialization(String),
}

// ---------------------------------------------------------------------------
// Spectral objective
// ---------------------------------------------------------------------------

/// Spectral objective `|| sum_r p_r W_r^T W_r - J ||_2`.
pub fn rho(matrices: &[DMatrix<f64>], probs: &[f64]) -> f64 {
    assert_eq!(matrices.len(), probs.len(), "one probability per matrix");
    assert!(!matrices.is_empty(), "need at least one matrix");
    let n = matrices[0].nrows();
    let mut m = -averaging_matrix(n);
    for (w, &p) in matrices.iter().zip(probs) {
        m += (w.transpose() * w) * p;
    }
    spectral_norm_sym(&m)
}

// ---------------------------------------------------------------------------
// Generic convex spectral program and its solver
// ---------------------------------------------------------------------------

/// Symmetric matrix-valued map of the decision variables.
pub type MatrixMap<'a> = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + 'a>;
/// Gradient of `u^T M(x) u` with respect to x at a fixed vector u.
pub type EigenGradient<'a> = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + 'a>;
/// Euclidean projection onto the feasible set.
pub type Projection<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>;

/// A convex program: minimize the largest eigenvalue of a symmetric
/// matrix-valued map over a closed convex set given by its Euclidean
/// projection.
///
/// `eig_grad(x, u)` must return the gradient of `u^T M(x) u` with respect to
/// `x` for a fixed vector `u`; for affine maps this is exact, for the
/// quadratic Gram maps used here it follows from first-order eigenvalue
/// perturbation.
pub struct SpectralProblem<'a> {
    pub dim: usize,
    pub matrix: MatrixMap<'a>,
    pub eig_grad: EigenGradient<'a>,
    pub project: Projection<'a>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Objective tolerance for declaring a stage converged.
    pub tol: f64,
    /// Total evaluation budget per solve.
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub point: DVector<f64>,
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Minimize a [`SpectralProblem`] from a feasible start.
///
/// Smoothed spectral descent: the max eigenvalue is approximated by a
/// soft-max over the whole spectrum with a decreasing temperature, and each
/// stage runs projected gradient steps with backtracking. Every evaluated
/// point is feasible, and the best true objective seen (including the start)
/// is returned, so the result is never worse than the start. Deterministic
/// for identical inputs.
pub fn solve_spectral(
    problem: &SpectralProblem,
    start: DVector<f64>,
    opts: &SolveOptions,
) -> Result<SolveResult, OptimizerError> {
    if start.len() != problem.dim {
        return Err(OptimizerError::DimensionMismatch(format!(
            "start has {} entries, problem has {}",
            start.len(),
            problem.dim
        )));
    }
    let projected = (problem.project)(&start);
    let drift = (&projected - &start).amax();
    if drift > 1e-8 {
        return Err(OptimizerError::InfeasibleStart(drift));
    }
    let start = projected;

    let mut best_x = start.clone();
    let mut best_f = lambda_max(&(problem.matrix)(&start));
    let mut evals = 1usize;

    if problem.dim == 0 || opts.max_iters == 0 {
        return Ok(SolveResult {
            point: best_x,
            value: best_f,
            converged: true,
            evaluations: evals,
        });
    }

    // Smoothed objective, its gradient, and the true objective at x.
    let smooth_eval = |x: &DVector<f64>, mu: f64| -> (f64, DVector<f64>, f64) {
        let m = (problem.matrix)(x);
        let eig = sym_eig(&m);
        let top = eig.lambda_max();
        let mut weight_sum = 0.0;
        let mut weights = Vec::with_capacity(eig.values.len());
        for &v in &eig.values {
            let w = ((v - top) / mu).exp();
            weights.push(w);
            weight_sum += w;
        }
        let f_mu = mu * weight_sum.ln() + top;
        let mut grad = DVector::zeros(problem.dim);
        for (k, &w) in weights.iter().enumerate() {
            let sigma = w / weight_sum;
            if sigma < 1e-14 {
                continue;
            }
            let u = eig.vectors.column(k).clone_owned();
            grad += (problem.eig_grad)(x, &u) * sigma;
        }
        (f_mu, grad, top)
    };

    let stages: [f64; 8] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
    let stage_budget = (opts.max_iters / stages.len()).max(8);
    let mut step = 1.0f64;
    let mut exhausted = false;

    let mut x = start;
    'stages: for &mu in &stages {
        let (mut f_mu, mut grad, _) = smooth_eval(&x, mu);
        evals += 1;
        for _ in 0..stage_budget {
            if evals >= opts.max_iters {
                exhausted = true;
                break 'stages;
            }
            if grad.norm() < 1e-15 {
                break;
            }
            // Backtracking along the projection arc.
            let mut accepted = false;
            for _ in 0..40 {
                let trial = (problem.project)(&(&x - &grad * step));
                let movement = (&trial - &x).norm_squared();
                if movement < 1e-30 {
                    break;
                }
                let (f_trial, g_trial, f_true) = smooth_eval(&trial, mu);
                evals += 1;
                if f_true < best_f {
                    best_f = f_true;
                    best_x = trial.clone();
                }
                if f_trial <= f_mu - 1e-4 * movement / step {
                    x = trial;
                    f_mu = f_trial;
                    grad = g_trial;
                    step = (step * 1.3).min(1e6);
                    accepted = true;
                    break;
                }
                step *= 0.5;
                if step < 1e-18 {
                    break;
                }
                if evals >= opts.max_iters {
                    exhausted = true;
                    break 'stages;
                }
            }
            if !accepted {
                break;
            }
            if grad.norm() * step < opts.tol * 1e-3 {
                break;
            }
        }
    }

    Ok(SolveResult {
        point: best_x,
        value: best_f,
        converged: !exhausted,
        evaluations: evals,
    })
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    DVector::from_iterator(n, v.iter().map(|&u| (u - theta).max(0.0)))
}

// ---------------------------------------------------------------------------
// Mixing policy
// ---------------------------------------------------------------------------

/// A set of candidate mixing matrices with sampling probabilities and the
/// cached spectral objective.
#[derive(Debug, Clone)]
pub struct MixingPolicy {
    pub candidates: CandidateSet,
    pub matrices: Vec<DMatrix<f64>>,
    pub probs: Vec<f64>,
    pub rho: f64,
}

const POLICY_TOL: f64 = 1e-10;

impl MixingPolicy {
    /// Assemble and validate a policy; computes the spectral objective.
    pub fn new(
        candidates: CandidateSet,
        matrices: Vec<DMatrix<f64>>,
        probs: Vec<f64>,
    ) -> Result<Self, OptimizerError> {
        let value = rho(&matrices, &probs);
        let policy = Self {
            candidates,
            matrices,
            probs,
            rho: value,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Check every structural invariant: per-matrix symmetry, unit row sums,
    /// sparsity-mask compliance (structural zeros are exact zeros, inactive
    /// nodes keep identity rows), and a valid budgeted distribution.
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let r = self.matrices.len();
        if r == 0 {
            return Err(OptimizerError::NoCandidates);
        }
        if r != self.probs.len() || r != self.candidates.len() {
            return Err(OptimizerError::InvalidPolicy(format!(
                "{} matrices, {} probabilities, {} candidates",
                r,
                self.probs.len(),
                self.candidates.len()
            )));
        }
        let n = self.candidates.node_count();
        for (idx, w) in self.matrices.iter().enumerate() {
            if w.nrows() != n || w.ncols() != n {
                return Err(OptimizerError::InvalidPolicy(format!(
                    "matrix {idx} is {}x{}, expected {n}x{n}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            let asym = spectral::asymmetry(w);
            if asym > POLICY_TOL {
                return Err(OptimizerError::InvalidPolicy(format!(
                    "matrix {idx} asymmetric by {asym:.3e}"
                )));
            }
            let row_err = spectral::row_sum_error(w, 1.0);
            if row_err > POLICY_TOL {
                return Err(OptimizerError::InvalidPolicy(format!(
                    "matrix {idx} row sums off by {row_err:.3e}"
                )));
            }
            let a = &self.candidates.candidates[idx].effective_adjacency;
            for i in 0..n {
                for j in 0..n {
                    if i != j && a[(i, j)] == 0.0 && w[(i, j)] != 0.0 {
                        return Err(OptimizerError::InvalidPolicy(format!(
                            "matrix {idx} has weight at masked entry ({i}, {j})"
                        )));
                    }
                }
            }
            for i in 0..n {
                let isolated = (0..n).all(|j| i == j || a[(i, j)] == 0.0);
                if isolated && w[(i, i)] != 1.0 {
                    return Err(OptimizerError::InvalidPolicy(format!(
                        "matrix {idx}: inactive node {i} must keep self-weight 1"
                    )));
                }
            }
        }
        let mut sum = 0.0;
        let mut weighted_cost = 0.0;
        for (&p, c) in self.probs.iter().zip(&self.candidates.candidates) {
            if !(-POLICY_TOL..=1.0 + POLICY_TOL).contains(&p) {
                return Err(OptimizerError::InvalidPolicy(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
            sum += p;
            weighted_cost += p * c.cost as f64;
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(OptimizerError::InvalidPolicy(format!(
                "probabilities sum to {sum}"
            )));
        }
        if weighted_cost > self.candidates.budget as f64 + 1e-8 {
            return Err(OptimizerError::InvalidPolicy(format!(
                "expected slot cost {weighted_cost} exceeds budget {}",
                self.candidates.budget
            )));
        }
        Ok(())
    }

    /// Serialize as the lookup table shared with all nodes: subset-index
    /// lists, dense row-major matrices, probabilities, and rho.
    pub fn to_json(&self) -> String {
        let n = self.candidates.node_count();
        let repr = MixingPolicyRepr {
            n,
            budget: self.candidates.budget,
            candidates: self.candidates.to_index_lists(),
            matrices: self
                .matrices
                .iter()
                .map(|w| {
                    let mut flat = Vec::with_capacity(n * n);
                    for i in 0..n {
                        for j in 0..n {
                            flat.push(w[(i, j)]);
                        }
                    }
                    flat
                })
                .collect(),
            probs: self.probs.clone(),
            rho: self.rho,
        };
        serde_json::to_string_pretty(&repr).expect("policy serializes")
    }

    /// Rebuild a policy from its JSON lookup table plus the graph and
    /// partition it was derived from.
    pub fn from_json(g: &Graph, partition: &Partition, json: &str) -> Result<Self, OptimizerError> {
        let repr: MixingPolicyRepr =
            serde_json::from_str(json).map_err(|e| OptimizerError::Serialization(e.to_string()))?;
        let n = repr.n;
        if n != g.node_count() {
            return Err(OptimizerError::Serialization(format!(
                "policy built for {n} nodes, graph has {}",
                g.node_count()
            )));
        }
        let candidates =
            CandidateSet::from_index_lists(g, partition, repr.budget, &repr.candidates);
        let matrices = repr
            .matrices
            .iter()
            .map(|flat| {
                if flat.len() != n * n {
                    return Err(OptimizerError::Serialization(format!(
                        "matrix has {} entries, expected {}",
                        flat.len(),
                        n * n
                    )));
                }
                Ok(DMatrix::from_row_slice(n, n, flat))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(candidates, matrices, repr.probs)
    }
}

#[derive(Serialize, Deserialize)]
struct MixingPolicyRepr {
    n: usize,
    budget: usize,
    candidates: Vec<Vec<usize>>,
    matrices: Vec<Vec<f64>>,
    probs: Vec<f64>,
    rho: f64,
}

// ---------------------------------------------------------------------------
// Subproblems: probabilities, single matrices, alternating scheme
// ---------------------------------------------------------------------------

/// Optimize sampling probabilities for fixed mixing matrices: minimize
/// `rho` over the probability simplex.
///
/// With candidates that all cost exactly the budget, the average-slot
/// constraint holds with equality for every distribution, so the simplex is
/// the full feasible set. Starts from the uniform distribution; the result
/// is never worse than that start.
pub fn optimize_probabilities(
    matrices: &[DMatrix<f64>],
    budget: usize,
    opts: &SolveOptions,
) -> Result<Vec<f64>, OptimizerError> {
    if matrices.is_empty() {
        return Err(OptimizerError::NoCandidates);
    }
    if budget == 0 {
        return Err(OptimizerError::BudgetOutOfRange { budget, q: 0 });
    }
    let r = matrices.len();
    let uniform = DVector::from_element(r, 1.0 / r as f64);
    optimize_probabilities_from(matrices, uniform, opts)
}

/// Warm-started version of [`optimize_probabilities`].
fn optimize_probabilities_from(
    matrices: &[DMatrix<f64>],
    start: DVector<f64>,
    opts: &SolveOptions,
) -> Result<Vec<f64>, OptimizerError> {
    let n = matrices[0].nrows();
    let r = matrices.len();
    let gram: Vec<DMatrix<f64>> = matrices.iter().map(|w| w.transpose() * w).collect();
    let problem = SpectralProblem {
        dim: r,
        matrix: Box::new(|p: &DVector<f64>| {
            let mut m = -averaging_matrix(n);
            for (g, &pr) in gram.iter().zip(p.iter()) {
                m += g * pr;
            }
            m
        }),
        eig_grad: Box::new(|_p: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_iterator(r, gram.iter().map(|g| (u.transpose() * g * u)[(0, 0)]))
        }),
        project: Box::new(|p: &DVector<f64>| project_simplex(p)),
    };
    let result = solve_spectral(&problem, start, opts)?;
    Ok(result.point.iter().copied().collect())
}

/// Sparsity-respecting parameterization of one mixing matrix: free weight
/// per effective edge, diagonal absorbing the rest of each row. Inactive
/// nodes keep identity rows exactly.
fn matrix_from_weights(n: usize, edges: &[(usize, usize)], w: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::identity(n, n);
    for (k, &(i, j)) in edges.iter().enumerate() {
        let v = w[k];
        m[(i, i)] -= v;
        m[(j, j)] -= v;
        m[(i, j)] += v;
        m[(j, i)] += v;
    }
    m
}

fn weights_from_matrix(edges: &[(usize, usize)], m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(edges.len(), edges.iter().map(|&(i, j)| m[(i, j)]))
}

/// Optimize a single mixing matrix candidate with probabilities and the
/// other candidates fixed: minimize the largest eigenvalue of
/// `Z_r + p_r W_r^T W_r` with `Z_r = sum_{l != r} p_l W_l^T W_l - J`.
///
/// `p_r = 0` makes the objective independent of the candidate, so the input
/// matrix is returned unchanged; likewise for candidates without effective
/// edges, whose only feasible matrix is the identity.
pub fn optimize_matrix(
    policy: &MixingPolicy,
    index: usize,
    opts: &SolveOptions,
) -> Result<DMatrix<f64>, OptimizerError> {
    let r = policy.matrices.len();
    if index >= r {
        return Err(OptimizerError::CandidateOutOfRange { index, r });
    }
    let p_r = policy.probs[index];
    let current = &policy.matrices[index];
    if p_r <= 1e-15 {
        return Ok(current.clone());
    }
    let n = current.nrows();
    let edges = policy.candidates.candidates[index].effective_edges();
    if edges.is_empty() {
        return Ok(current.clone());
    }
    let mut z = -averaging_matrix(n);
    for (l, w) in policy.matrices.iter().enumerate() {
        if l != index {
            z += (w.transpose() * w) * policy.probs[l];
        }
    }
    let edges_ref = &edges;
    let z_ref = &z;
    let problem = SpectralProblem {
        dim: edges.len(),
        matrix: Box::new(move |w: &DVector<f64>| {
            let wm = matrix_from_weights(n, edges_ref, w);
            z_ref + (&wm * &wm) * p_r
        }),
        eig_grad: Box::new(move |w: &DVector<f64>, u: &DVector<f64>| {
            let wm = matrix_from_weights(n, edges_ref, w);
            let y = &wm * u;
            DVector::from_iterator(
                edges_ref.len(),
                edges_ref
                    .iter()
                    .map(|&(i, j)| -2.0 * p_r * (u[i] - u[j]) * (y[i] - y[j])),
            )
        }),
        project: Box::new(|w: &DVector<f64>| w.clone()),
    };
    let start = weights_from_matrix(&edges, current);
    let result = solve_spectral(&problem, start, opts)?;
    Ok(matrix_from_weights(n, &edges, &result.point))
}

/// Outcome of the alternating scheme: the improved policy and the recorded
/// objective value after every sub-step (matrix update or probability
/// update), starting with the initial value.
#[derive(Debug, Clone)]
pub struct AlternatingOutcome {
    pub policy: MixingPolicy,
    pub trace: Vec<f64>,
}

/// Alternate between per-candidate matrix updates and probability updates.
///
/// Each sub-step is warm-started at the incumbent and keeps the best point
/// seen, so the recorded objective trace is non-increasing (up to
/// eigensolver re-evaluation noise). Rejects initial policies with
/// `rho >= 1`.
pub fn alternating_optimize(
    init: MixingPolicy,
    outer_iters: usize,
    opts: &SolveOptions,
) -> Result<AlternatingOutcome, OptimizerError> {
    init.validate()?;
    if init.rho >= 1.0 {
        return Err(OptimizerError::UnstableInit(init.rho));
    }
    let mut policy = init;
    let mut trace = vec![policy.rho];
    let r = policy.matrices.len();
    for _ in 0..outer_iters {
        for idx in 0..r {
            let improved = optimize_matrix(&policy, idx, opts)?;
            policy.matrices[idx] = improved;
            policy.rho = rho(&policy.matrices, &policy.probs);
            trace.push(policy.rho);

            let start = DVector::from_vec(policy.probs.clone());
            let probs = optimize_probabilities_from(&policy.matrices, start, opts)?;
            policy.probs = probs;
            policy.rho = rho(&policy.matrices, &policy.probs);
            trace.push(policy.rho);
        }
    }
    policy.validate()?;
    Ok(AlternatingOutcome { policy, trace })
}

// ---------------------------------------------------------------------------
// Initializations
// ---------------------------------------------------------------------------

/// Choose sampling probabilities that maximize the algebraic connectivity of
/// the expected topology `lambda_2(sum_r p_r L_r)` over the simplex.
///
/// The maximization is rewritten as a spectral minimization by shifting the
/// all-ones kernel: `lambda_2(S) = lambda_min(S + cJ)` for a large enough
/// constant c, so minimizing `lambda_max(-S - cJ)` is equivalent.
pub fn init_probs_connectivity(
    laplacians: &[DMatrix<f64>],
    budget: usize,
    opts: &SolveOptions,
) -> Result<Vec<f64>, OptimizerError> {
    if laplacians.is_empty() {
        return Err(OptimizerError::NoCandidates);
    }
    if budget == 0 {
        return Err(OptimizerError::BudgetOutOfRange { budget, q: 0 });
    }
    let n = laplacians[0].nrows();
    let r = laplacians.len();
    let shift = 1.0 + laplacians.iter().map(lambda_max).fold(0.0, f64::max);
    let shifted_j = averaging_matrix(n) * shift;
    let problem = SpectralProblem {
        dim: r,
        matrix: Box::new(|p: &DVector<f64>| {
            let mut m = -&shifted_j;
            for (l, &pr) in laplacians.iter().zip(p.iter()) {
                m -= l * pr;
            }
            m
        }),
        eig_grad: Box::new(|_p: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_iterator(
                r,
                laplacians.iter().map(|l| -(u.transpose() * l * u)[(0, 0)]),
            )
        }),
        project: Box::new(|p: &DVector<f64>| project_simplex(p)),
    };
    let uniform = DVector::from_element(r, 1.0 / r as f64);
    let result = solve_spectral(&problem, uniform, opts)?;
    Ok(result.point.iter().copied().collect())
}

/// Shared 1-D design: the optimal uniform link weight for expected-topology
/// statistics. Minimizes `lambda_max(I - 2 eps E1 + eps^2 E2 - J)` over
/// `eps > 0` where `E1` is the expected Laplacian and `E2` the expected
/// Laplacian Gram matrix.
fn epsilon_for_expectations(e1: &DMatrix<f64>, e2: &DMatrix<f64>) -> f64 {
    let n = e1.nrows();
    let eye = DMatrix::identity(n, n);
    let j = averaging_matrix(n);
    let objective = |eps: f64| {
        let m = &eye - e1 * (2.0 * eps) + e2 * (eps * eps) - &j;
        lambda_max(&m)
    };
    let top = lambda_max(e1).max(1e-9);
    let (eps, _) = minimize_convex_scalar(objective, 0.0, 2.0 / top, 1e-12, 300);
    eps
}

/// Uniform link weight for Laplacian-based candidates under fixed sampling
/// probabilities: minimizes the spectral objective of `W_r = I - eps L_r`
/// with the quadratic relaxation variable tightened to `eps^2` (the
/// objective is monotone in that variable, so the relaxation is exact).
pub fn init_epsilon(laplacians: &[DMatrix<f64>], probs: &[f64]) -> f64 {
    assert_eq!(laplacians.len(), probs.len());
    assert!(!laplacians.is_empty());
    let n = laplacians[0].nrows();
    let mut e1 = DMatrix::zeros(n, n);
    let mut e2 = DMatrix::zeros(n, n);
    for (l, &p) in laplacians.iter().zip(probs) {
        e1 += l * p;
        e2 += (l * l) * p;
    }
    epsilon_for_expectations(&e1, &e2)
}

/// Per-candidate weighted-Laplacian mixing matrices: for each candidate find
/// nonnegative edge weights `alpha` so that `W_r = I - B_r diag(alpha) B_r^T`
/// minimizes the candidate's own spectral norm `||W_r^T W_r - J||_2`.
///
/// Candidates with inactive nodes are disconnected, so the per-candidate
/// norm bottoms out at 1 and many minimizers exist; any feasible one is
/// acceptable. Starts from Metropolis-style weights
/// `1 / (1 + max(deg_i, deg_j))` on the effective topology.
pub fn init_weighted_matrices(
    candidates: &CandidateSet,
    opts: &SolveOptions,
) -> Result<Vec<DMatrix<f64>>, OptimizerError> {
    let n = candidates.node_count();
    let mut out = Vec::with_capacity(candidates.len());
    for cand in &candidates.candidates {
        let edges = cand.effective_edges();
        if edges.is_empty() {
            out.push(DMatrix::identity(n, n));
            continue;
        }
        let degree = |v: usize| edges.iter().filter(|&&(i, j)| i == v || j == v).count() as f64;
        let alpha0 = DVector::from_iterator(
            edges.len(),
            edges
                .iter()
                .map(|&(i, j)| 1.0 / (1.0 + degree(i).max(degree(j)))),
        );
        let edges_ref = &edges;
        let problem = SpectralProblem {
            dim: edges.len(),
            matrix: Box::new(move |a: &DVector<f64>| {
                let w = matrix_from_weights(n, edges_ref, a);
                &w * &w - averaging_matrix(n)
            }),
            eig_grad: Box::new(move |a: &DVector<f64>, u: &DVector<f64>| {
                let w = matrix_from_weights(n, edges_ref, a);
                let y = &w * u;
                DVector::from_iterator(
                    edges_ref.len(),
                    edges_ref
                        .iter()
                        .map(|&(i, j)| -2.0 * (u[i] - u[j]) * (y[i] - y[j])),
                )
            }),
            project: Box::new(|a: &DVector<f64>| a.map(|v| v.max(0.0))),
        };
        let result = solve_spectral(&problem, alpha0, opts)?;
        out.push(matrix_from_weights(n, &edges, &result.point));
    }
    Ok(out)
}

/// Initialization route for the alternating scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Connectivity-maximizing probabilities plus one shared link weight.
    ConnectivityEpsilon,
    /// Per-candidate weighted-Laplacian matrices plus optimized
    /// probabilities.
    WeightedLaplacian,
}

/// Build an initial policy for a candidate set using the requested route.
pub fn init_policy(
    candidates: &CandidateSet,
    kind: InitKind,
    opts: &SolveOptions,
) -> Result<MixingPolicy, OptimizerError> {
    if candidates.is_empty() {
        return Err(OptimizerError::NoCandidates);
    }
    let (matrices, probs) = match kind {
        InitKind::ConnectivityEpsilon => {
            let laplacians: Vec<DMatrix<f64>> = candidates
                .candidates
                .iter()
                .map(|c| c.laplacian())
                .collect();
            let probs = init_probs_connectivity(&laplacians, candidates.budget, opts)?;
            let eps = init_epsilon(&laplacians, &probs);
            let n = candidates.node_count();
            let matrices: Vec<DMatrix<f64>> = laplacians
                .iter()
                .map(|l| DMatrix::identity(n, n) - l * eps)
                .collect();
            (matrices, probs)
        }
        InitKind::WeightedLaplacian => {
            let matrices = init_weighted_matrices(candidates, opts)?;
            let probs = optimize_probabilities(&matrices, candidates.budget, opts)?;
            (matrices, probs)
        }
    };
    MixingPolicy::new(candidates.clone(), matrices, probs)
}

/// Full optimization report: the kept policy, the initialization it came
/// from, and the objective trace of its alternating run.
#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub policy: MixingPolicy,
    pub init_kind: InitKind,
    pub init_rho: f64,
    pub trace: Vec<f64>,
}

/// Optimize a candidate pool end to end: run the alternating scheme from
/// each requested initialization and keep the lowest-rho result.
pub fn optimize_policy(
    candidates: &CandidateSet,
    inits: &[InitKind],
    outer_iters: usize,
    opts: &SolveOptions,
) -> Result<OptimizeReport, OptimizerError> {
    let mut best: Option<OptimizeReport> = None;
    let mut last_err = None;
    for &kind in inits {
        let init = match init_policy(candidates, kind, opts) {
            Ok(p) => p,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let init_rho = init.rho;
        let outcome = match alternating_optimize(init, outer_iters, opts) {
            Ok(o) => o,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let report = OptimizeReport {
            policy: outcome.policy,
            init_kind: kind,
            init_rho,
            trace: outcome.trace,
        };
        let better = best
            .as_ref()
            .map(|b| report.policy.rho < b.policy.rho)
            .unwrap_or(true);
        if better {
            best = Some(report);
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(OptimizerError::NoCandidates))
}

// ---------------------------------------------------------------------------
// Heuristic design: centrality-driven subset probabilities
// ---------------------------------------------------------------------------

/// Scheduling probabilities per collision-free subset plus the shared link
/// weight, with the closed-form expected Laplacian statistics they induce.
#[derive(Debug, Clone)]
pub struct HeuristicPolicy {
    pub subset_probs: Vec<f64>,
    pub epsilon: f64,
    pub expected_laplacian: DMatrix<f64>,
    pub expected_gram: DMatrix<f64>,
    /// Spectral objective of the induced random mixing matrices.
    pub rho: f64,
}

/// Centrality floor added to every subset score before scaling, so that
/// zero-centrality subsets (e.g. all-leaf subsets) keep a positive
/// scheduling probability and the expected topology stays connected.
fn centrality_floor(q: usize) -> f64 {
    1.0 / q as f64
}

/// Subset scheduling probabilities `p_k = min(1, gamma * (score_k + floor))`
/// with `gamma` chosen by bisection so the probabilities sum to the budget.
/// Subset scores are summed node centralities.
pub fn heuristic_probs(
    partition: &Partition,
    centrality: &[f64],
    budget: usize,
) -> Result<Vec<f64>, OptimizerError> {
    let q = partition.len();
    if budget == 0 || budget > q {
        return Err(OptimizerError::BudgetOutOfRange { budget, q });
    }
    if centrality.len() != partition.node_count() {
        return Err(OptimizerError::DimensionMismatch(format!(
            "{} centrality values for {} nodes",
            centrality.len(),
            partition.node_count()
        )));
    }
    if budget == q {
        return Ok(vec![1.0; q]);
    }
    let floor = centrality_floor(q);
    let scores: Vec<f64> = partition
        .subsets()
        .iter()
        .map(|s| s.iter().map(|&v| centrality[v]).sum::<f64>() + floor)
        .collect();
    let total = |gamma: f64| -> f64 { scores.iter().map(|&s| (gamma * s).min(1.0)).sum() };
    let mut lo = 0.0;
    let mut hi = scores.iter().fold(0.0f64, |acc, &s| acc.max(1.0 / s));
    debug_assert!(total(hi) >= budget as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < budget as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi.max(1.0) {
            break;
        }
    }
    let gamma = 0.5 * (lo + hi);
    Ok(scores.iter().map(|&s| (gamma * s).min(1.0)).collect())
}

/// Expand subset probabilities to per-node probabilities.
pub fn node_probabilities(partition: &Partition, subset_probs: &[f64]) -> Vec<f64> {
    let owner = partition.subset_of();
    owner.iter().map(|&k| subset_probs[k]).collect()
}

fn check_probs(p: &[f64]) -> Result<(), OptimizerError> {
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(OptimizerError::InvalidProbability(v));
        }
    }
    Ok(())
}

/// Closed-form expected Laplacian of the randomly masked topology where each
/// subset activates independently with its probability and an edge survives
/// only when both endpoints are active.
///
/// Off-diagonal entries are `-p_i max(phi(i,j), p_j) A_ij` with `phi = 1`
/// within a subset; the diagonal carries the matching row sums, accumulated
/// together so rows cancel exactly.
pub fn expected_laplacian(
    g: &Graph,
    partition: &Partition,
    node_probs: &[f64],
) -> Result<DMatrix<f64>, OptimizerError> {
    check_probs(node_probs)?;
    let n = g.node_count();
    let owner = partition.subset_of();
    let mut l = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        let both = if owner[i] == owner[j] {
            node_probs[i]
        } else {
            node_probs[i] * node_probs[j]
        };
        l[(i, i)] += both;
        l[(j, j)] += both;
        l[(i, j)] -= both;
        l[(j, i)] -= both;
    }
    Ok(l)
}

/// Closed-form expected Gram matrix `E[L^T L]` of the randomly masked
/// Laplacian: the squared-degree diagonal, the two degree/adjacency cross
/// blocks, and the squared adjacency, each expanding joint subset
/// activations with two- and three-way `max(phi, p)` factors.
pub fn expected_laplacian_gram(
    g: &Graph,
    partition: &Partition,
    node_probs: &[f64],
) -> Result<DMatrix<f64>, OptimizerError> {
    check_probs(node_probs)?;
    let n = g.node_count();
    let owner = partition.subset_of();
    let a = g.adjacency();
    let p = node_probs;
    // Probability that both i's and m's subsets are active.
    let pair = |i: usize, m: usize| if owner[i] == owner[m] { 1.0 } else { p[m] };
    // Activation of k's subset given i's and m's subsets are active.
    let tri = |i: usize, m: usize, k: usize| {
        if owner[i] == owner[k] || owner[m] == owner[k] {
            1.0
        } else {
            p[k]
        }
    };

    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut entry = 0.0;
            if i == j {
                // Squared-degree diagonal.
                for m in 0..n {
                    if a[(i, m)] == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        if a[(i, k)] == 0.0 {
                            continue;
                        }
                        entry += p[i] * pair(i, m) * tri(i, m, k);
                    }
                }
                // Squared-adjacency diagonal.
                for m in 0..n {
                    if a[(i, m)] != 0.0 {
                        entry += p[i] * pair(i, m);
                    }
                }
            } else {
                // Degree/adjacency cross terms (both orders).
                if a[(i, j)] != 0.0 {
                    let base = p[i] * pair(i, j);
                    for m in 0..n {
                        if a[(i, m)] != 0.0 {
                            entry -= base * tri(i, j, m);
                        }
                        if a[(j, m)] != 0.0 {
                            entry -= base * tri(i, j, m);
                        }
                    }
                }
                // Squared adjacency off the diagonal: two-hop paths i-m-j.
                for m in 0..n {
                    if a[(i, m)] != 0.0 && a[(m, j)] != 0.0 {
                        entry += p[i] * pair(i, j) * tri(i, j, m);
                    }
                }
            }
            gram[(i, j)] = entry;
        }
    }
    Ok(gram)
}

/// Optimal shared link weight for the heuristic design given the two
/// expected-topology statistics.
pub fn heuristic_epsilon(expected_laplacian: &DMatrix<f64>, expected_gram: &DMatrix<f64>) -> f64 {
    epsilon_for_expectations(expected_laplacian, expected_gram)
}

/// Spectral objective value of a heuristic design at a given link weight.
pub fn heuristic_rho(
    expected_laplacian: &DMatrix<f64>,
    expected_gram: &DMatrix<f64>,
    eps: f64,
) -> f64 {
    let n = expected_laplacian.nrows();
    let m = DMatrix::identity(n, n) - expected_laplacian * (2.0 * eps)
        + expected_gram * (eps * eps)
        - averaging_matrix(n);
    spectral_norm_sym(&m)
}

/// Build the full heuristic policy: betweenness-driven subset
/// probabilities, closed-form expectations, and the tuned link weight.
pub fn build_heuristic_policy(
    g: &Graph,
    partition: &Partition,
    budget: usize,
) -> Result<HeuristicPolicy, OptimizerError> {
    let centrality =
        crate::graph::betweenness(g).map_err(|e| OptimizerError::InvalidPolicy(e.to_string()))?;
    let subset_probs = heuristic_probs(partition, &centrality, budget)?;
    let nodep = node_probabilities(partition, &subset_probs);
    let e1 = expected_laplacian(g, partition, &nodep)?;
    let e2 = expected_laplacian_gram(g, partition, &nodep)?;
    let epsilon = heuristic_epsilon(&e1, &e2);
    let rho = heuristic_rho(&e1, &e2, epsilon);
    Ok(HeuristicPolicy {
        subset_probs,
        epsilon,
        expected_laplacian: e1,
        expected_gram: e2,
        rho,
    })
}

// ---------------------------------------------------------------------------
// Convexity probe
// ---------------------------------------------------------------------------

/// Axis along which the spectral objective is probed for convexity, holding
/// the complementary block fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeAxis {
    Probabilities,
    Matrices,
}

#[derive(Debug, Clone)]
pub struct ConvexityReport {
    pub trials: usize,
    pub violations: usize,
    pub max_violation: f64,
}

const PROBE_TOL: f64 = 1e-9;

/// Sample random feasible pairs along the chosen axis and check the Jensen
/// inequality of the spectral objective on the segment between them.
/// Violations beyond 1e-9 are counted (none are expected).
pub fn convexity_probe(
    policy: &MixingPolicy,
    axis: ProbeAxis,
    trials: usize,
    seed: u64,
) -> ConvexityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_violation = f64::NEG_INFINITY;
    let r = policy.matrices.len();
    let n = policy.candidates.node_count();
    for _ in 0..trials {
        let theta = rng.gen_range(0.01..0.99);
        let gap = match axis {
            ProbeAxis::Probabilities => {
                let x = random_simplex(r, &mut rng);
                let y = random_simplex(r, &mut rng);
                let mid: Vec<f64> = x
                    .iter()
                    .zip(&y)
                    .map(|(&a, &b)| theta * a + (1.0 - theta) * b)
                    .collect();
                rho(&policy.matrices, &mid)
                    - theta * rho(&policy.matrices, &x)
                    - (1.0 - theta) * rho(&policy.matrices, &y)
            }
            ProbeAxis::Matrices => {
                let sample_tuple = |rng: &mut ChaCha8Rng| -> Vec<DMatrix<f64>> {
                    policy
                        .candidates
                        .candidates
                        .iter()
                        .map(|c| {
                            let edges = c.effective_edges();
                            let w = DVector::from_iterator(
                                edges.len(),
                                (0..edges.len()).map(|_| rng.gen_range(-0.25..0.75)),
                            );
                            matrix_from_weights(n, &edges, &w)
                        })
                        .collect()
                };
                let xs = sample_tuple(&mut rng);
                let ys = sample_tuple(&mut rng);
                let mids: Vec<DMatrix<f64>> = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| x * theta + y * (1.0 - theta))
                    .collect();
                rho(&mids, &policy.probs)
                    - theta * rho(&xs, &policy.probs)
                    - (1.0 - theta) * rho(&ys, &policy.probs)
            }
        };
        max_violation = max_violation.max(gap);
        if gap > PROBE_TOL {
            violations += 1;
        }
    }
    ConvexityReport {
        trials,
        violations,
        max_violation,
    }
}

fn random_simplex(r: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..r).map(|_| -rng.gen::<f64>().ln()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}
