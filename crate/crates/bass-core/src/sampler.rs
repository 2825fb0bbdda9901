//! Budget-constrained subgraph candidates.
//!
//! A candidate is the union of a fixed number of collision-free subsets; its
//! effective communication topology keeps only the base edges whose both
//! endpoints are scheduled (A_r = Q_r A Q_r with Q_r the active-node
//! indicator). Activating a candidate costs one transmission slot per chosen
//! subset.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Graph;
use crate::graph::Partition;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("budget {budget} out of range [1, {q}]")]
    BudgetOutOfRange { budget: usize, q: usize },
    #[error("candidate pool would hold {count} candidates (cap {cap}); lower the budget or the subset count")]
    TooManyCandidates { count: u128, cap: u128 },
    #[error("keep count {keep} out of range [1, {r}]")]
    KeepOutOfRange { keep: usize, r: usize },
    #[error(
        "no connected selection of {keep} candidates found in {attempts} attempts; increase keep"
    )]
    NoConnectedSelection { keep: usize, attempts: usize },
    #[error("negative edge weight {0}")]
    NegativeWeight(f64),
    #[error("active node {node} out of range for {n} nodes")]
    ActiveNodeOutOfRange { node: usize, n: usize },
}

/// One subgraph candidate: a set of collision-free subsets, the nodes they
/// cover, and the effective adjacency of the induced communication topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Indices into the partition's subset list (sorted).
    pub subset_indices: Vec<usize>,
    /// Union of the chosen subsets (sorted node ids).
    pub nodes: Vec<usize>,
    /// A_r = Q_r A Q_r.
    pub effective_adjacency: DMatrix<f64>,
    /// Transmission slots consumed when this candidate is scheduled.
    pub cost: usize,
}

impl Candidate {
    fn new(g: &Graph, partition: &Partition, subset_indices: Vec<usize>) -> Self {
        let mut nodes: Vec<usize> = subset_indices
            .iter()
            .flat_map(|&k| partition.subsets()[k].iter().copied())
            .collect();
        nodes.sort_unstable();
        let effective_adjacency = effective_adjacency(g, &nodes);
        let cost = subset_indices.len();
        Self {
            subset_indices,
            nodes,
            effective_adjacency,
            cost,
        }
    }

    /// Edges of the effective topology as (min, max) pairs in lexicographic
    /// order.
    pub fn effective_edges(&self) -> Vec<(usize, usize)> {
        let n = self.effective_adjacency.nrows();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.effective_adjacency[(i, j)] != 0.0 {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    /// Laplacian of the effective topology (D_r - A_r): positive
    /// semidefinite, zero row sums, all-zero rows for inactive nodes.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.effective_adjacency.nrows();
        let mut l = DMatrix::zeros(n, n);
        for (i, j) in self.effective_edges() {
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
            l[(i, j)] -= 1.0;
            l[(j, i)] -= 1.0;
        }
        l
    }
}

/// The pool of subgraph candidates for one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub budget: usize,
    n: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Candidates as plain subset-index lists (the shared lookup table).
    pub fn to_index_lists(&self) -> Vec<Vec<usize>> {
        self.candidates
            .iter()
            .map(|c| c.subset_indices.clone())
            .collect()
    }

    /// Rebuild a candidate set from subset-index lists.
    pub fn from_index_lists(
        g: &Graph,
        partition: &Partition,
        budget: usize,
        lists: &[Vec<usize>],
    ) -> Self {
        let candidates = lists
            .iter()
            .map(|l| Candidate::new(g, partition, l.clone()))
            .collect();
        Self {
            candidates,
            budget,
            n: g.node_count(),
        }
    }
}

const CANDIDATE_CAP: u128 = 100_000;
const PRUNE_ATTEMPTS: usize = 1000;

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Enumerate all combinations of `budget` collision-free subsets in
/// lexicographic order, with their effective topologies.
pub fn enumerate_candidates(
    g: &Graph,
    partition: &Partition,
    budget: usize,
) -> Result<CandidateSet, SamplerError> {
    let q = partition.len();
    if budget == 0 || budget > q {
        return Err(SamplerError::BudgetOutOfRange { budget, q });
    }
    let count = binomial(q, budget);
    if count > CANDIDATE_CAP {
        return Err(SamplerError::TooManyCandidates {
            count,
            cap: CANDIDATE_CAP,
        });
    }
    let candidates: Vec<Candidate> = (0..q)
        .combinations(budget)
        .map(|combo| Candidate::new(g, partition, combo))
        .collect();
    Ok(CandidateSet {
        candidates,
        budget,
        n: g.node_count(),
    })
}

/// Mask the adjacency matrix to the active node set: entry (i, j) survives
/// only when both endpoints are active.
pub fn effective_adjacency(g: &Graph, active_nodes: &[usize]) -> DMatrix<f64> {
    let n = g.node_count();
    let mut active = vec![false; n];
    for &v in active_nodes {
        assert!(v < n, "active node {v} out of range for {n} nodes");
        active[v] = true;
    }
    let mut a = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        if active[i] && active[j] {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}

/// Laplacian of a candidate's effective topology (see
/// [`Candidate::laplacian`]).
pub fn candidate_laplacian(c: &Candidate) -> DMatrix<f64> {
    c.laplacian()
}

/// Node-edge incidence matrix for an ordered edge list: column j carries +1
/// at the lower-indexed endpoint of edge j and -1 at the higher one.
pub fn incidence_matrix(g: &Graph, edge_subset: &[(usize, usize)]) -> DMatrix<f64> {
    let n = g.node_count();
    let mut b = DMatrix::zeros(n, edge_subset.len());
    for (col, &(i, j)) in edge_subset.iter().enumerate() {
        debug_assert!(g.has_edge(i, j), "edge ({i}, {j}) not in graph");
        let (s, t) = (i.min(j), i.max(j));
        b[(s, col)] = 1.0;
        b[(t, col)] = -1.0;
    }
    b
}

/// Weighted Laplacian B diag(alpha) B^T accumulated column by column, so row
/// sums cancel exactly in floating point. Weights must be nonnegative.
pub fn weighted_laplacian(b: &DMatrix<f64>, alpha: &[f64]) -> Result<DMatrix<f64>, SamplerError> {
    assert_eq!(b.ncols(), alpha.len(), "weight count must match edge count");
    if let Some(&w) = alpha.iter().find(|&&w| w < 0.0) {
        return Err(SamplerError::NegativeWeight(w));
    }
    let n = b.nrows();
    let mut l = DMatrix::zeros(n, n);
    for (col, &w) in alpha.iter().enumerate() {
        let be = b.column(col);
        for i in 0..n {
            if be[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                if be[j] != 0.0 {
                    l[(i, j)] += w * be[i] * be[j];
                }
            }
        }
    }
    Ok(l)
}

/// Keep a uniformly sampled subset of `keep` candidates whose union of
/// effective edges connects all nodes; rejection-sampled, deterministic for
/// a given seed. `keep = len` returns the set unchanged.
pub fn prune_candidates(
    cs: &CandidateSet,
    keep: usize,
    seed: u64,
) -> Result<CandidateSet, SamplerError> {
    let r = cs.len();
    if keep == 0 || keep > r {
        return Err(SamplerError::KeepOutOfRange { keep, r });
    }
    if keep == r {
        return Ok(cs.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..r).collect();
    for _ in 0..PRUNE_ATTEMPTS {
        indices.shuffle(&mut rng);
        let mut chosen: Vec<usize> = indices[..keep].to_vec();
        chosen.sort_unstable();
        if union_spans_graph(cs, &chosen) {
            let candidates = chosen.iter().map(|&i| cs.candidates[i].clone()).collect();
            return Ok(CandidateSet {
                candidates,
                budget: cs.budget,
                n: cs.n,
            });
        }
    }
    Err(SamplerError::NoConnectedSelection {
        keep,
        attempts: PRUNE_ATTEMPTS,
    })
}

/// Whether the union of the chosen candidates' effective edges forms a
/// connected graph on all nodes.
fn union_spans_graph(cs: &CandidateSet, chosen: &[usize]) -> bool {
    let n = cs.n;
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &idx in chosen {
        for (i, j) in cs.candidates[idx].effective_edges() {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
    }
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &nbrs[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{collision_free_partition, laplacian, ColoringOrder, Graph};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p3() -> Graph {
        Graph::new(3, &[(0, 1), (1, 2)]).unwrap()
    }

    fn complete(n: usize) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        Graph::new(n, &edges).unwrap()
    }

    #[test]
    fn candidate_count_eight_choose_four() {
        let g = complete(8);
        let part = collision_free_partition(&g, ColoringOrder::default());
        assert_eq!(part.len(), 8);
        let cs = enumerate_candidates(&g, &part, 4).unwrap();
        assert_eq!(cs.len(), 70);
    }

    #[test]
    fn full_budget_single_candidate() {
        let g = p3();
        let part = collision_free_partition(&g, ColoringOrder::default());
        let cs = enumerate_candidates(&g, &part, 3).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.candidates[0].nodes, vec![0, 1, 2]);
        assert_eq!(cs.candidates[0].effective_adjacency, g.adjacency());
    }

    #[test]
    fn candidate_masks_by_active_union() {
        let g = p3();
        let part = collision_free_partition(&g, ColoringOrder::Index);
        assert_eq!(part.subsets(), &[vec![0], vec![1], vec![2]]);
        let cs = enumerate_candidates(&g, &part, 2).unwrap();
        assert_eq!(cs.len(), 3);
        // Candidate {subset 0, subset 1} = nodes {0, 1}: only edge (0, 1).
        let c = &cs.candidates[0];
        assert_eq!(c.subset_indices, vec![0, 1]);
        assert_eq!(c.effective_edges(), vec![(0, 1)]);
        assert_eq!(c.cost, 2);
    }

    #[test]
    fn budget_out_of_range_rejected() {
        let g = p3();
        let part = collision_free_partition(&g, ColoringOrder::default());
        assert!(enumerate_candidates(&g, &part, 0).is_err());
        assert!(enumerate_candidates(&g, &part, 4).is_err());
    }

    #[test]
    fn candidate_count_matches_binomial() {
        for q in 2..=12usize {
            let g = complete(q);
            let part = collision_free_partition(&g, ColoringOrder::default());
            for b in 1..=q {
                let cs = enumerate_candidates(&g, &part, b).unwrap();
                assert_eq!(cs.len() as u128, binomial(q, b), "q={q} b={b}");
            }
        }
    }

    #[test]
    fn oversized_pool_rejected() {
        // A complete graph partitions into singletons; the middle budget
        // blows past the candidate cap.
        let g = complete(40);
        let part = collision_free_partition(&g, ColoringOrder::default());
        assert!(matches!(
            enumerate_candidates(&g, &part, 20),
            Err(SamplerError::TooManyCandidates { .. })
        ));
    }

    #[test]
    fn effective_adjacency_cases() {
        let k2 = Graph::new(2, &[(0, 1)]).unwrap();
        assert_eq!(effective_adjacency(&k2, &[0, 1]), k2.adjacency());
        assert_eq!(effective_adjacency(&k2, &[0]), DMatrix::zeros(2, 2));
        let masked = effective_adjacency(&p3(), &[0, 1]);
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 0., 0., 0., 0.]);
        assert_eq!(masked, expected);
    }

    #[test]
    fn candidate_laplacian_cases() {
        let k2 = Graph::new(2, &[(0, 1)]).unwrap();
        let part = collision_free_partition(&k2, ColoringOrder::default());
        let cs = enumerate_candidates(&k2, &part, 2).unwrap();
        assert_eq!(
            cs.candidates[0].laplacian(),
            DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.])
        );

        let g = p3();
        let part = collision_free_partition(&g, ColoringOrder::Index);
        let cs = enumerate_candidates(&g, &part, 2).unwrap();
        // Nodes {0, 1} active.
        let l = cs.candidates[0].laplacian();
        let expected = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 1., 0., 0., 0., 0.]);
        assert_eq!(l, expected);
        // Nodes {0, 2} active: no internal edge, zero matrix.
        assert_eq!(cs.candidates[1].laplacian(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn incidence_matrix_cases() {
        let k2 = Graph::new(2, &[(0, 1)]).unwrap();
        let b = incidence_matrix(&k2, &[(0, 1)]);
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[1., -1.]));
        assert_eq!(&b * b.transpose(), laplacian(&k2));

        let g = p3();
        let b = incidence_matrix(&g, g.edges());
        assert_eq!(&b * b.transpose(), laplacian(&g));

        let empty = incidence_matrix(&g, &[]);
        assert_eq!(empty.ncols(), 0);
        assert_eq!(&empty * empty.transpose(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn weighted_laplacian_cases() {
        let k2 = Graph::new(2, &[(0, 1)]).unwrap();
        let b = incidence_matrix(&k2, &[(0, 1)]);
        assert_eq!(weighted_laplacian(&b, &[1.0]).unwrap(), laplacian(&k2));
        assert_eq!(
            weighted_laplacian(&b, &[0.0]).unwrap(),
            DMatrix::zeros(2, 2)
        );

        let g = p3();
        let b = incidence_matrix(&g, g.edges());
        let lw = weighted_laplacian(&b, &[2.0, 3.0]).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[2., -2., 0., -2., 5., -3., 0., -3., 3.]);
        assert_eq!(lw, expected);
        let ones = nalgebra::DVector::from_element(3, 1.0);
        assert_eq!((&lw * ones).amax(), 0.0);

        assert!(weighted_laplacian(&b, &[1.0, -0.5]).is_err());
    }

    #[test]
    fn prune_identity_and_connected_pair() {
        let g = p3();
        let part = collision_free_partition(&g, ColoringOrder::Index);
        let cs = enumerate_candidates(&g, &part, 2).unwrap();
        let same = prune_candidates(&cs, cs.len(), 0).unwrap();
        assert_eq!(same, cs);

        // Candidates {0,1} and {1,2} jointly cover both edges.
        let pair = CandidateSet {
            candidates: vec![cs.candidates[0].clone(), cs.candidates[2].clone()],
            budget: 2,
            n: 3,
        };
        let kept = prune_candidates(&pair, 2, 5).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn prune_rejects_unspannable() {
        let g = p3();
        let part = collision_free_partition(&g, ColoringOrder::Index);
        let cs = enumerate_candidates(&g, &part, 2).unwrap();
        // No single candidate connects all three nodes.
        assert!(matches!(
            prune_candidates(&cs, 1, 0),
            Err(SamplerError::NoConnectedSelection { .. })
        ));
    }

    #[test]
    fn prune_is_deterministic() {
        let g = complete(6);
        let part = collision_free_partition(&g, ColoringOrder::default());
        let cs = enumerate_candidates(&g, &part, 3).unwrap();
        let a = prune_candidates(&cs, 8, 42).unwrap();
        let b = prune_candidates(&cs, 8, 42).unwrap();
        assert_eq!(a, b);
    }

    fn arb_connected_graph(max_n: usize) -> impl Strategy<Value = Graph> {
        (2..=max_n, any::<u64>()).prop_map(|(n, seed)| {
            crate::graph::generate_topology(crate::graph::TopologyKind::ErdosRenyi, n, 0.5, seed)
                .unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn masking_invariant(g in arb_connected_graph(9), budget in 1usize..4) {
            let part = collision_free_partition(&g, ColoringOrder::default());
            prop_assume!(budget <= part.len());
            let cs = enumerate_candidates(&g, &part, budget).unwrap();
            let a = g.adjacency();
            for c in &cs.candidates {
                let mut active = vec![false; g.node_count()];
                for &v in &c.nodes {
                    active[v] = true;
                }
                for i in 0..g.node_count() {
                    for j in 0..g.node_count() {
                        let val = c.effective_adjacency[(i, j)];
                        if val != 0.0 {
                            prop_assert!(active[i] && active[j]);
                            prop_assert_eq!(a[(i, j)], 1.0);
                        }
                    }
                }
                prop_assert_eq!(c.cost, budget);
            }
        }

        #[test]
        fn incidence_gram_equals_laplacian(g in arb_connected_graph(8)) {
            let b = incidence_matrix(&g, g.edges());
            prop_assert_eq!(&b * b.transpose(), laplacian(&g));
        }

        #[test]
        fn weighted_laplacian_is_psd(
            g in arb_connected_graph(7),
            raw in proptest::collection::vec(0.0f64..3.0, 0..24),
        ) {
            let edges = g.edges().to_vec();
            prop_assume!(!edges.is_empty());
            let alpha: Vec<f64> = (0..edges.len())
                .map(|i| raw.get(i).copied().unwrap_or(1.0))
                .collect();
            let b = incidence_matrix(&g, &edges);
            let lw = weighted_laplacian(&b, &alpha).unwrap();
            let min_eig = crate::spectral::sym_eig(&lw).lambda_min();
            prop_assert!(min_eig >= -1e-10);
            let ones = nalgebra::DVector::from_element(g.node_count(), 1.0);
            prop_assert!((&lw * ones).amax() <= 1e-12);
        }
    }

    #[test]
    fn k2_optimal_weight_reaches_consensus() {
        // Scalar check used across the optimizer: alpha = 0.5 on a single
        // edge turns I - L_w into the averaging matrix.
        let k2 = Graph::new(2, &[(0, 1)]).unwrap();
        let b = incidence_matrix(&k2, &[(0, 1)]);
        let lw = weighted_laplacian(&b, &[0.5]).unwrap();
        let w = DMatrix::identity(2, 2) - lw;
        assert_abs_diff_eq!(w[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(0, 1)], 0.5, epsilon = 1e-15);
    }
}
