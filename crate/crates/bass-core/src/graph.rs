//! Undirected simple graphs: construction, random topology generation,
//! collision-free partitioning via auxiliary-graph coloring, betweenness
//! centrality, and Laplacian / density utilities.
//!
//! A set of nodes may broadcast in the same transmission slot only if no two
//! of them are adjacent or share a common neighbor; partitions produced here
//! guarantee that condition by greedy vertex coloring of the auxiliary graph
//! (base edges plus an edge between every pair with a common neighbor).

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::spectral;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop at node {0} is not allowed")]
    SelfLoop(usize),
    #[error("graph must have at least {min} nodes, got {got}")]
    TooFewNodes { min: usize, got: usize },
    #[error("no connected graph produced within {0} attempts")]
    ConnectivityRetriesExhausted(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("matrix is not symmetric (max deviation {0:.3e})")]
    NotSymmetric(f64),
    #[error("order must be a permutation of 0..{0}")]
    BadOrder(usize),
    #[error("invalid graph file, line {line}: {reason}")]
    BadFile { line: usize, reason: String },
}

/// Undirected simple graph with 0-indexed nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Deduplicated edges, each stored as (min, max), sorted lexicographically.
    edges: Vec<(usize, usize)>,
    /// Sorted neighbor lists.
    nbrs: Vec<Vec<usize>>,
}

impl Graph {
    /// Build a graph from an edge list. Duplicate edges (in either
    /// orientation) collapse; self-loops and out-of-range endpoints are
    /// rejected.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut normalized: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if i >= n || j >= n {
                return Err(GraphError::EdgeOutOfRange(i, j, n));
            }
            normalized.push((i.min(j), i.max(j)));
        }
        normalized.sort_unstable();
        normalized.dedup();
        let mut nbrs = vec![Vec::new(); n];
        for &(i, j) in &normalized {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
        for list in &mut nbrs {
            list.sort_unstable();
        }
        Ok(Self {
            n,
            edges: normalized,
            nbrs,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as (min, max) pairs in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbrs[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.nbrs[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.nbrs[i].binary_search(&j).is_ok()
    }

    /// Dense 0/1 adjacency matrix (symmetric, zero diagonal).
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    /// Whether the graph is connected (BFS from node 0; the empty graph and
    /// single nodes count as connected).
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.nbrs[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    /// Network density, `1^T A 1 / (n (n-1))` = fraction of possible
    /// (directed) adjacency entries present.
    pub fn density(&self) -> f64 {
        assert!(self.n >= 2, "density needs at least two nodes");
        (2 * self.edges.len()) as f64 / (self.n * (self.n - 1)) as f64
    }

    /// Plain-text serialization: first line `n`, then one `i j` line per
    /// edge, sorted lexicographically.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.n);
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{} {}", i, j);
        }
        out
    }

    /// Parse the plain-text format. Blank lines and `#` comments ignored.
    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut n: Option<usize> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            if n.is_none() {
                if fields.len() != 1 {
                    return Err(GraphError::BadFile {
                        line,
                        reason: "expected node count on first data line".into(),
                    });
                }
                n = Some(fields[0].parse().map_err(|_| GraphError::BadFile {
                    line,
                    reason: format!("invalid node count '{}'", fields[0]),
                })?);
            } else {
                if fields.len() != 2 {
                    return Err(GraphError::BadFile {
                        line,
                        reason: "expected 'i j' edge line".into(),
                    });
                }
                let parse = |s: &str| -> Result<usize, GraphError> {
                    s.parse().map_err(|_| GraphError::BadFile {
                        line,
                        reason: format!("invalid node id '{}'", s),
                    })
                };
                edges.push((parse(fields[0])?, parse(fields[1])?));
            }
        }
        let n = n.ok_or(GraphError::BadFile {
            line: 0,
            reason: "empty graph file".into(),
        })?;
        Graph::new(n, &edges)
    }
}

/// Build a graph from an edge list (free-function form of [`Graph::new`]).
pub fn build_graph(n: usize, edges: &[(usize, usize)]) -> Result<Graph, GraphError> {
    Graph::new(n, edges)
}

/// Topology families for synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    /// Random geometric graph on the unit square; `param` is the radius.
    Geometric,
    /// Erdos-Renyi; `param` is the edge probability.
    ErdosRenyi,
    /// Two hub nodes joined through a bridge node, remaining nodes split as
    /// leaves of the hubs. `param` ignored.
    TwoStars,
    /// Uniform random recursive tree. `param` ignored.
    Forest,
}

const CONNECTIVITY_ATTEMPTS: usize = 1000;

/// Generate a connected topology. Random families retry with fresh derived
/// seeds until connected, up to a bounded attempt count.
pub fn generate_topology(
    kind: TopologyKind,
    n: usize,
    param: f64,
    seed: u64,
) -> Result<Graph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewNodes { min: 2, got: n });
    }
    match kind {
        TopologyKind::TwoStars => two_stars(n),
        TopologyKind::Forest => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::with_capacity(n - 1);
            for v in 1..n {
                edges.push((rng.gen_range(0..v), v));
            }
            Graph::new(n, &edges)
        }
        TopologyKind::Geometric | TopologyKind::ErdosRenyi => {
            for attempt in 0..CONNECTIVITY_ATTEMPTS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
                let g = match kind {
                    TopologyKind::Geometric => random_geometric(n, param, &mut rng),
                    TopologyKind::ErdosRenyi => erdos_renyi(n, param, &mut rng),
                    _ => unreachable!(),
                }?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
            Err(GraphError::ConnectivityRetriesExhausted(
                CONNECTIVITY_ATTEMPTS,
            ))
        }
    }
}

fn random_geometric(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> Result<Graph, GraphError> {
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen::<f64>(), rng.gen::<f64>()))
        .collect();
    let r2 = radius * radius;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pts[i].0 - pts[j].0;
            let dy = pts[i].1 - pts[j].1;
            if dx * dx + dy * dy <= r2 {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, &edges)
}

fn erdos_renyi(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Graph, GraphError> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, &edges)
}

/// Fixed two-stars family: hubs 0 and 1, bridge node 2 on the path 0-2-1,
/// nodes 3.. alternate as leaves of the two hubs.
fn two_stars(n: usize) -> Result<Graph, GraphError> {
    if n < 3 {
        return Err(GraphError::TooFewNodes { min: 3, got: n });
    }
    let mut edges = vec![(0, 2), (1, 2)];
    for v in 3..n {
        let hub = if (v - 3) % 2 == 0 { 0 } else { 1 };
        edges.push((hub, v));
    }
    Graph::new(n, &edges)
}

/// Auxiliary graph: base edges plus an edge between every pair of distinct
/// nodes sharing at least one common neighbor. Independent sets of the
/// auxiliary graph are exactly the collision-free subsets of the base graph.
pub fn auxiliary_graph(g: &Graph) -> Graph {
    let n = g.node_count();
    let mut edges: Vec<(usize, usize)> = g.edges().to_vec();
    for m in 0..n {
        let nb = g.neighbors(m);
        for a in 0..nb.len() {
            for b in (a + 1)..nb.len() {
                edges.push((nb[a], nb[b]));
            }
        }
    }
    Graph::new(n, &edges).expect("auxiliary edges are valid by construction")
}

/// Ordered list of disjoint node subsets covering all nodes; within each
/// subset no two nodes are adjacent or share a common neighbor in the base
/// graph (they can broadcast in the same slot without collisions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    subsets: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// Number of subsets q.
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Map from node id to its subset index.
    pub fn subset_of(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.n];
        for (k, subset) in self.subsets.iter().enumerate() {
            for &v in subset {
                owner[v] = k;
            }
        }
        owner
    }

    /// Check the collision-free condition against the base graph: every pair
    /// within a subset is non-adjacent and shares no common neighbor, the
    /// subsets are disjoint, and together they cover all nodes.
    pub fn validate(&self, g: &Graph) -> bool {
        if g.node_count() != self.n {
            return false;
        }
        let mut seen = vec![false; self.n];
        for subset in &self.subsets {
            for (a, &i) in subset.iter().enumerate() {
                if i >= self.n || seen[i] {
                    return false;
                }
                seen[i] = true;
                for &j in &subset[a + 1..] {
                    if g.has_edge(i, j) || share_neighbor(g, i, j) {
                        return false;
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn share_neighbor(g: &Graph, i: usize, j: usize) -> bool {
    g.neighbors(i).iter().any(|&m| g.has_edge(m, j))
}

/// Greedy vertex coloring of the auxiliary graph grouped by color.
///
/// Each node in `order` receives the smallest color index absent among its
/// already-colored auxiliary-graph neighbors. Independence in the auxiliary
/// graph implies the collision-free condition on the base graph.
pub fn greedy_coloring(g_aux: &Graph, order: &[usize]) -> Result<Partition, GraphError> {
    let n = g_aux.node_count();
    let mut seen = vec![false; n];
    if order.len() != n
        || order
            .iter()
            .any(|&v| v >= n || std::mem::replace(&mut seen[v], true))
    {
        return Err(GraphError::BadOrder(n));
    }
    let mut color = vec![usize::MAX; n];
    let mut q = 0;
    for &v in order {
        let mut used = vec![false; q + 1];
        for &u in g_aux.neighbors(v) {
            if color[u] != usize::MAX && color[u] <= q {
                used[color[u].min(q)] = true;
            }
        }
        let c = (0..=q).find(|&c| !used[c]).unwrap_or(q);
        color[v] = c;
        q = q.max(c + 1);
    }
    let mut subsets = vec![Vec::new(); q];
    for v in 0..n {
        subsets[color[v]].push(v);
    }
    Ok(Partition { subsets, n })
}

/// Node ordering for the greedy coloring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColoringOrder {
    /// Descending auxiliary-graph degree, ties broken by node index.
    #[default]
    AuxDegreeDesc,
    /// Natural node order 0..n.
    Index,
}

/// Partition a graph into collision-free subsets: build the auxiliary graph
/// and greedily color it with the requested node order.
pub fn collision_free_partition(g: &Graph, order: ColoringOrder) -> Partition {
    let aux = auxiliary_graph(g);
    let n = g.node_count();
    let mut nodes: Vec<usize> = (0..n).collect();
    if order == ColoringOrder::AuxDegreeDesc {
        nodes.sort_by_key(|&v| (std::cmp::Reverse(aux.degree(v)), v));
    }
    greedy_coloring(&aux, &nodes).expect("identity-based order is a permutation")
}

/// Unnormalized betweenness centrality over unordered node pairs, endpoints
/// excluded (Brandes accumulation on unweighted shortest paths).
pub fn betweenness(g: &Graph) -> Result<Vec<f64>, GraphError> {
    if !g.is_connected() {
        return Err(GraphError::Disconnected);
    }
    let n = g.node_count();
    let mut centrality = vec![0.0f64; n];
    let mut dist = vec![-1i64; n];
    let mut sigma = vec![0.0f64; n];
    let mut delta = vec![0.0f64; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut stack: Vec<usize> = Vec::with_capacity(n);
    let mut queue = VecDeque::with_capacity(n);
    for s in 0..n {
        for v in 0..n {
            dist[v] = -1;
            sigma[v] = 0.0;
            delta[v] = 0.0;
            preds[v].clear();
        }
        stack.clear();
        dist[s] = 0;
        sigma[s] = 1.0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            stack.push(u);
            for &v in g.neighbors(u) {
                if dist[v] < 0 {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
                if dist[v] == dist[u] + 1 {
                    sigma[v] += sigma[u];
                    preds[v].push(u);
                }
            }
        }
        while let Some(w) = stack.pop() {
            for &u in &preds[w] {
                delta[u] += sigma[u] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                centrality[w] += delta[w];
            }
        }
    }
    // Each unordered pair was counted from both endpoints.
    for c in &mut centrality {
        *c *= 0.5;
    }
    Ok(centrality)
}

/// Graph Laplacian L = D - A, accumulated edge by edge so that row sums are
/// exactly zero in floating point.
pub fn laplacian(g: &Graph) -> DMatrix<f64> {
    let n = g.node_count();
    let mut l = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        l[(i, i)] += 1.0;
        l[(j, j)] += 1.0;
        l[(i, j)] -= 1.0;
        l[(j, i)] -= 1.0;
    }
    l
}

/// Second-smallest eigenvalue of a symmetric matrix (algebraic connectivity
/// when applied to a Laplacian).
pub fn algebraic_connectivity(m: &DMatrix<f64>) -> Result<f64, GraphError> {
    let dev = spectral::asymmetry(m);
    if dev > 1e-9 {
        return Err(GraphError::NotSymmetric(dev));
    }
    if m.nrows() < 2 {
        return Ok(0.0);
    }
    Ok(spectral::sym_eig(m).values[1])
}

/// Network density of a graph (see [`Graph::density`]).
pub fn density(g: &Graph) -> f64 {
    g.density()
}
