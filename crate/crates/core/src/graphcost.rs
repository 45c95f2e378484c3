//! Objective-coupling graph, cost matrices and decomposition metrics.
//!
//! Agents and clusters are 0-based here. Files and labels use 1-based ids.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::matops::{self, SymMatrix};
use crate::sim::MasSystem;

/// Cluster adjacency threshold on `ηᵢᵀ|G|ηⱼ`.
pub const ADJACENCY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Weighted Laplacian `G` of the cost-coupling graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGraph {
    laplacian: DMatrix<f64>,
}

impl CostGraph {
    /// Builds the Laplacian from 0-based weighted edges.
    pub fn from_edges(n_agents: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        if n_agents == 0 {
            return Err(GraphError::InvalidGraph("graph needs at least one agent".into()));
        }
        let mut g = DMatrix::zeros(n_agents, n_agents);
        for &(i, j, w) in edges {
            if i >= n_agents || j >= n_agents {
                return Err(GraphError::InvalidGraph(format!(
                    "edge ({i},{j}) out of range for {n_agents} agents"
                )));
            }
            if i == j {
                return Err(GraphError::InvalidGraph(format!("self loop at {i}")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(GraphError::InvalidGraph(format!(
                    "edge ({i},{j}) weight {w} must be positive"
                )));
            }
            g[(i, j)] -= w;
            g[(j, i)] -= w;
            g[(i, i)] += w;
            g[(j, j)] += w;
        }
        Ok(Self { laplacian: g })
    }

    /// Validates an explicit Laplacian.
    pub fn from_laplacian(g: DMatrix<f64>) -> Result<Self, GraphError> {
        let n = g.nrows();
        if n == 0 || g.ncols() != n {
            return Err(GraphError::InvalidGraph("Laplacian must be square".into()));
        }
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                if g[(i, j)] != g[(j, i)] {
                    return Err(GraphError::InvalidGraph("Laplacian must be symmetric".into()));
                }
                if g[(i, j)] > 0.0 {
                    return Err(GraphError::InvalidGraph(
                        "off-diagonal entries must be nonpositive".into(),
                    ));
                }
                off += g[(i, j)].abs();
            }
            if (g[(i, i)] - off).abs() > 1e-12 * (1.0 + off) {
                return Err(GraphError::InvalidGraph(format!(
                    "diagonal {i} is not the row absolute sum"
                )));
            }
        }
        Ok(Self { laplacian: g })
    }

    /// Complete graph on `n` agents with unit weights.
    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j, 1.0)))
            .collect();
        Self::from_edges(n, &edges).expect("complete graph is valid")
    }

    pub fn n_agents(&self) -> usize {
        self.laplacian.nrows()
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            -self.laplacian[(i, j)]
        }
    }

    /// Undirected edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_agents();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.weight(i, j);
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_agents()).filter(move |&j| j != i && self.laplacian[(i, j)] != 0.0)
    }

    /// `|G|` entrywise.
    pub fn abs(&self) -> DMatrix<f64> {
        self.laplacian.abs()
    }

    /// Sum of all entries of `|G|`.
    pub fn abs_sum(&self) -> f64 {
        self.laplacian.abs().sum()
    }

    /// Smallest nonzero entry of `|G|`.
    pub fn min_nonzero_weight(&self) -> Option<f64> {
        self.laplacian
            .iter()
            .map(|w| w.abs())
            .filter(|&w| w > 0.0)
            .fold(None, |acc: Option<f64>, w| Some(acc.map_or(w, |a| a.min(w))))
    }

    /// Number of zero entries of `G`, diagonal included.
    pub fn zero_entries(&self) -> usize {
        self.laplacian.iter().filter(|&&w| w == 0.0).count()
    }

    /// Number of zero off-diagonal entries of `G`.
    pub fn zero_off_diagonal_entries(&self) -> usize {
        let n = self.n_agents();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.laplacian[(i, j)] == 0.0)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        let all: Vec<usize> = (0..self.n_agents()).collect();
        self.is_connected_subset(&all)
    }

    /// Connectivity of the subgraph induced by `agents`.
    pub fn is_connected_subset(&self, agents: &[usize]) -> bool {
        self.components_of(agents).len() <= 1
    }

    /// Connected components of the subgraph induced by `agents`.
    pub fn components_of(&self, agents: &[usize]) -> Vec<Vec<usize>> {
        let n = self.n_agents();
        let mut member = vec![false; n];
        for &a in agents {
            member[a] = true;
        }
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for &start in agents {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for v in self.neighbors(u) {
                    if member[v] && !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }
}

/// Assignment of agents to `s` disjoint, nonempty clusters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decomposition {
    assignment: Vec<usize>,
    s: usize,
}

impl Decomposition {
    /// `assignment[i]` is the 0-based cluster of agent `i`.
    pub fn new(assignment: Vec<usize>, s: usize) -> Result<Self, GraphError> {
        if assignment.is_empty() {
            return Err(GraphError::InvalidDecomposition("no agents".into()));
        }
        if s == 0 || s > assignment.len() {
            return Err(GraphError::InvalidDecomposition(format!(
                "cluster count {s} invalid for {} agents",
                assignment.len()
            )));
        }
        let mut sizes = vec![0usize; s];
        for (agent, &c) in assignment.iter().enumerate() {
            if c >= s {
                return Err(GraphError::InvalidDecomposition(format!(
                    "agent {} assigned to cluster {} but s = {s}",
                    agent + 1,
                    c + 1
                )));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&k| k == 0) {
            return Err(GraphError::InvalidDecomposition(format!(
                "cluster {} is empty",
                empty + 1
            )));
        }
        Ok(Self { assignment, s })
    }

    /// Builds a decomposition from explicit clusters of 0-based agents.
    pub fn from_clusters(n_agents: usize, clusters: &[Vec<usize>]) -> Result<Self, GraphError> {
        let mut assignment = vec![usize::MAX; n_agents];
        for (c, members) in clusters.iter().enumerate() {
            for &a in members {
                if a >= n_agents {
                    return Err(GraphError::InvalidDecomposition(format!(
                        "agent {} out of range",
                        a + 1
                    )));
                }
                if assignment[a] != usize::MAX {
                    return Err(GraphError::InvalidDecomposition(format!(
                        "agent {} appears in two clusters",
                        a + 1
                    )));
                }
                assignment[a] = c;
            }
        }
        if let Some(missing) = assignment.iter().position(|&c| c == usize::MAX) {
            return Err(GraphError::InvalidDecomposition(format!(
                "agent {} is not covered",
                missing + 1
            )));
        }
        Self::new(assignment, clusters.len())
    }

    /// Consecutive clusters of the given sizes, e.g. `[6, 3, 3]`.
    pub fn contiguous(sizes: &[usize]) -> Result<Self, GraphError> {
        let mut assignment = Vec::new();
        for (c, &k) in sizes.iter().enumerate() {
            assignment.extend(std::iter::repeat_n(c, k));
        }
        Self::new(assignment, sizes.len())
    }

    pub fn single(n_agents: usize) -> Self {
        Self::new(vec![0; n_agents], 1).expect("single cluster is valid")
    }

    pub fn singletons(n_agents: usize) -> Self {
        Self::new((0..n_agents).collect(), n_agents).expect("singletons are valid")
    }

    pub fn n_agents(&self) -> usize {
        self.assignment.len()
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, agent: usize) -> usize {
        self.assignment[agent]
    }

    /// Members of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.s];
        for (a, &c) in self.assignment.iter().enumerate() {
            out[c].push(a);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters().iter().map(Vec::len).collect()
    }

    /// Agent order that makes clusters contiguous (cluster-major, then agent id).
    pub fn permutation(&self) -> Vec<usize> {
        self.clusters().concat()
    }

    /// Relabels clusters by first appearance so equal partitions compare equal.
    pub fn canonical(&self) -> Self {
        let mut map = vec![usize::MAX; self.s];
        let mut next = 0;
        let assignment = self
            .assignment
            .iter()
            .map(|&c| {
                if map[c] == usize::MAX {
                    map[c] = next;
                    next += 1;
                }
                map[c]
            })
            .collect();
        Self {
            assignment,
            s: self.s,
        }
    }

    /// 1-based cluster ids, as written to files.
    pub fn one_based(&self) -> Vec<usize> {
        self.assignment.iter().map(|c| c + 1).collect()
    }

    pub fn from_one_based(ids: &[usize]) -> Result<Self, GraphError> {
        if ids.contains(&0) {
            return Err(GraphError::InvalidDecomposition("cluster ids are 1-based".into()));
        }
        let s = ids.iter().copied().max().unwrap_or(0);
        Self::new(ids.iter().map(|c| c - 1).collect(), s)
    }

    fn check_for(&self, n: usize) -> Result<(), GraphError> {
        if self.n_agents() != n {
            return Err(GraphError::InvalidDecomposition(format!(
                "decomposition covers {} agents, graph has {n}",
                self.n_agents()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Decomposition {
    /// `{1,2},{3},{4,5}` with runs of four or more collapsed to `{3,..,7}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .clusters()
            .iter()
            .map(|members| {
                let one: Vec<usize> = members.iter().map(|a| a + 1).collect();
                let contiguous = one.windows(2).all(|w| w[1] == w[0] + 1);
                if contiguous && one.len() >= 4 {
                    format!("{{{},..,{}}}", one[0], one[one.len() - 1])
                } else {
                    let ids: Vec<String> = one.iter().map(|a| a.to_string()).collect();
                    format!("{{{}}}", ids.join(","))
                }
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// `G = G₁ + G₂` split: intra-cluster and inter-cluster Laplacians.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGraphs {
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
}

impl SplitGraphs {
    pub fn trace_g2(&self) -> f64 {
        self.g2.trace()
    }
}

/// Keeps only inter-cluster off-diagonals in `G₂`, resets its diagonal to the
/// row absolute sums, and sets `G₁ = G − G₂`.
pub fn split_graph(graph: &CostGraph, dec: &Decomposition) -> Result<SplitGraphs, GraphError> {
    let n = graph.n_agents();
    dec.check_for(n)?;
    let g = graph.laplacian();
    let mut g2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && dec.cluster_of(i) != dec.cluster_of(j) {
                g2[(i, j)] = g[(i, j)];
            }
        }
    }
    for i in 0..n {
        let row: f64 = (0..n).filter(|&j| j != i).map(|j| g2[(i, j)].abs()).sum();
        g2[(i, i)] = row;
    }
    let g1 = g - &g2;
    Ok(SplitGraphs { g1, g2 })
}

/// Cluster adjacency matrix: `adj[i][j]` iff `ηᵢᵀ|G|ηⱼ > 0` (i ≠ j).
pub fn cluster_adjacency(graph: &CostGraph, dec: &Decomposition) -> Result<Vec<Vec<bool>>, GraphError> {
    let n = graph.n_agents();
    dec.check_for(n)?;
    let s = dec.s();
    let mut weight = vec![vec![0.0; s]; s];
    for i in 0..n {
        for j in 0..n {
            weight[dec.cluster_of(i)][dec.cluster_of(j)] += graph.laplacian()[(i, j)].abs();
        }
    }
    Ok((0..s)
        .map(|a| (0..s).map(|b| a != b && weight[a][b] > ADJACENCY_TOL).collect())
        .collect())
}

/// Number of unordered agent pairs lying in distinct, non-adjacent clusters.
pub fn kappa(graph: &CostGraph, dec: &Decomposition) -> Result<usize, GraphError> {
    let adj = cluster_adjacency(graph, dec)?;
    let sizes = dec.sizes();
    let mut total = 0;
    for a in 0..dec.s() {
        for b in a + 1..dec.s() {
            if !adj[a][b] {
                total += sizes[a] * sizes[b];
            }
        }
    }
    Ok(total)
}

/// Sum of `l_ij τ_ij` over all ordered cluster pairs, with `l_ij` at its
/// largest binary value under `l_ij ≤ 1 − ηᵢᵀ|G|ηⱼ / T`.
pub fn miqp_objective(graph: &CostGraph, dec: &Decomposition, t_norm: f64) -> Result<usize, GraphError> {
    let n = graph.n_agents();
    dec.check_for(n)?;
    let s = dec.s();
    let abs = graph.abs();
    let sizes = dec.sizes();
    let mut weight = vec![vec![0.0; s]; s];
    for i in 0..n {
        for j in 0..n {
            weight[dec.cluster_of(i)][dec.cluster_of(j)] += abs[(i, j)];
        }
    }
    let mut total = 0;
    for a in 0..s {
        for b in 0..s {
            let l = if 1.0 - weight[a][b] / t_norm >= 1.0 - ADJACENCY_TOL { 1 } else { 0 };
            total += l * sizes[a] * sizes[b];
        }
    }
    Ok(total)
}

/// Total weight of edges whose endpoints lie in different clusters.
pub fn cut_weight(graph: &CostGraph, dec: &Decomposition) -> Result<f64, GraphError> {
    dec.check_for(graph.n_agents())?;
    Ok(graph
        .edges()
        .iter()
        .filter(|(i, j, _)| dec.cluster_of(*i) != dec.cluster_of(*j))
        .map(|(_, _, w)| w)
        .sum())
}

/// Communication edges implied by a gain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CommLinks {
    /// Unordered pairs `(i, j)`, `i < j`, with a nonzero `K(i,j)` or `K(j,i)` block.
    pub edges: Vec<(usize, usize)>,
}

impl CommLinks {
    pub fn count(&self) -> usize {
        self.edges.len()
    }
}

/// Inter-agent links of `k` (`mN × nN`, blocks `m × n`). A block counts
/// when its max-abs entry exceeds `tol`; `None` means `1e-8 · ‖K‖_max`.
pub fn comm_links(
    k: &DMatrix<f64>,
    n_agents: usize,
    tol: Option<f64>,
) -> Result<CommLinks, GraphError> {
    if n_agents == 0 || k.nrows() % n_agents != 0 || k.ncols() % n_agents != 0 {
        return Err(GraphError::DimensionMismatch(format!(
            "gain {}x{} does not split into {n_agents}x{n_agents} blocks",
            k.nrows(),
            k.ncols()
        )));
    }
    let m = k.nrows() / n_agents;
    let n = k.ncols() / n_agents;
    let tol = tol.unwrap_or(1e-8 * k.amax());
    let nonzero = |i: usize, j: usize| k.view((i * m, j * n), (m, n)).amax() > tol;
    let mut edges = Vec::new();
    for i in 0..n_agents {
        for j in i + 1..n_agents {
            if nonzero(i, j) || nonzero(j, i) {
                edges.push((i, j));
            }
        }
    }
    Ok(CommLinks { edges })
}

/// `(Q̄, G, Q̃, R)` with `Q = Q̄ + G ⊗ Q̃` and `R = diag(Rᵢ)`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub qbar_blocks: Vec<DMatrix<f64>>,
    pub qtilde: DMatrix<f64>,
    pub graph: CostGraph,
    pub r_blocks: Vec<DMatrix<f64>>,
}

impl CostSpec {
    pub fn new(
        qbar_blocks: Vec<DMatrix<f64>>,
        qtilde: DMatrix<f64>,
        graph: CostGraph,
        r_blocks: Vec<DMatrix<f64>>,
    ) -> Result<Self, GraphError> {
        let big_n = graph.n_agents();
        let n = qtilde.nrows();
        if qbar_blocks.len() != big_n || r_blocks.len() != big_n {
            return Err(GraphError::DimensionMismatch(format!(
                "{} Q̄ blocks and {} R blocks for {big_n} agents",
                qbar_blocks.len(),
                r_blocks.len()
            )));
        }
        if qtilde.ncols() != n || qbar_blocks.iter().any(|b| b.shape() != (n, n)) {
            return Err(GraphError::DimensionMismatch("Q̄ and Q̃ blocks must be n×n".into()));
        }
        let m = r_blocks[0].nrows();
        if r_blocks.iter().any(|r| r.shape() != (m, m)) {
            return Err(GraphError::DimensionMismatch("R blocks must all be m×m".into()));
        }
        for (i, r) in r_blocks.iter().enumerate() {
            if !SymMatrix::new(r.clone()).map(|s| s.is_pd()).unwrap_or(false) {
                return Err(GraphError::InvalidGraph(format!("R_{} is not positive definite", i + 1)));
            }
        }
        Ok(Self {
            qbar_blocks,
            qtilde: matops::symmetrize(&qtilde),
            graph,
            r_blocks,
        })
    }

    /// Uniform blocks: `Q̄ᵢ = qbar`, `Rᵢ = r`.
    pub fn uniform(qbar: DMatrix<f64>, qtilde: DMatrix<f64>, graph: CostGraph, r: DMatrix<f64>) -> Result<Self, GraphError> {
        let n = graph.n_agents();
        Self::new(vec![qbar; n], qtilde, graph, vec![r; n])
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    pub fn state_dim(&self) -> usize {
        self.qtilde.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r_blocks[0].nrows()
    }

    pub fn qbar(&self) -> DMatrix<f64> {
        matops::block_diag(&self.qbar_blocks)
    }

    pub fn r(&self) -> DMatrix<f64> {
        matops::block_diag(&self.r_blocks)
    }

    /// `G₂ ⊗ Q̃` for a decomposition.
    pub fn g2_qtilde(&self, dec: &Decomposition) -> Result<DMatrix<f64>, GraphError> {
        Ok(split_graph(&self.graph, dec)?.g2.kronecker(&self.qtilde))
    }

    /// `Q̂ = Q̄ + G₁ ⊗ Q̃` in natural agent order.
    pub fn qhat(&self, dec: &Decomposition) -> Result<DMatrix<f64>, GraphError> {
        Ok(self.qbar() + split_graph(&self.graph, dec)?.g1.kronecker(&self.qtilde))
    }
}

/// `Q = Q̄ + G ⊗ Q̃`.
pub fn assemble_q(spec: &CostSpec) -> DMatrix<f64> {
    spec.qbar() + spec.graph.laplacian().kronecker(&spec.qtilde)
}

/// Cost data of one cluster, stacked in ascending agent order.
#[derive(Debug, Clone)]
pub struct ClusterCost {
    pub agents: Vec<usize>,
    pub qhat: DMatrix<f64>,
    pub rhat: DMatrix<f64>,
}

/// Per-cluster `(Q̂ⱼ, R̂ⱼ)`.
pub fn cluster_costs(spec: &CostSpec, dec: &Decomposition) -> Result<Vec<ClusterCost>, GraphError> {
    let split = split_graph(&spec.graph, dec)?;
    let n = spec.state_dim();
    Ok(dec
        .clusters()
        .into_iter()
        .map(|agents| {
            let k = agents.len();
            let mut qhat = DMatrix::zeros(k * n, k * n);
            for (a, &i) in agents.iter().enumerate() {
                for (b, &j) in agents.iter().enumerate() {
                    let mut block = &spec.qtilde * split.g1[(i, j)];
                    if i == j {
                        block += &spec.qbar_blocks[i];
                    }
                    qhat.view_mut((a * n, b * n), (n, n)).copy_from(&block);
                }
            }
            let rblocks: Vec<_> = agents.iter().map(|&i| spec.r_blocks[i].clone()).collect();
            ClusterCost {
                agents,
                qhat: matops::symmetrize(&qhat),
                rhat: matops::block_diag(&rblocks),
            }
        })
        .collect())
}

/// Outcome of the standing-assumption checks for a decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Per agent: `(Aᵢ, Bᵢ)` controllable.
    pub agent_controllable: Vec<bool>,
    /// Per cluster: `(Q̂ⱼ^{1/2}, 𝓐ⱼ)` observable.
    pub cluster_observable: Vec<bool>,
    /// `(Q^{1/2}, 𝓐)` observable.
    pub global_observable: bool,
    pub graph_connected: bool,
    pub cluster_connected: Vec<bool>,
}

impl AssumptionReport {
    pub fn controllable(&self) -> bool {
        self.agent_controllable.iter().all(|&c| c)
    }

    /// Both standing assumptions hold (connectivity is reported separately).
    pub fn holds(&self) -> bool {
        self.controllable() && self.global_observable && self.cluster_observable.iter().all(|&o| o)
    }
}

pub const PBH_TOL: f64 = 1e-9;

/// PBH tests for `(𝓐, 𝓑)`, `(Q^{1/2}, 𝓐)` and every `(Q̂ⱼ^{1/2}, 𝓐ⱼ)`.
pub fn check_assumptions(
    mas: &MasSystem,
    spec: &CostSpec,
    dec: &Decomposition,
) -> Result<AssumptionReport, GraphError> {
    if mas.n_agents() != spec.n_agents() {
        return Err(GraphError::DimensionMismatch(format!(
            "system has {} agents, cost has {}",
            mas.n_agents(),
            spec.n_agents()
        )));
    }
    dec.check_for(spec.n_agents())?;
    let agent_controllable = mas
        .agents()
        .iter()
        .map(|ag| matops::pbh_controllable(&ag.a, &ag.b, PBH_TOL))
        .collect();
    let q = assemble_q(spec);
    let global_observable = matops::pbh_observable(&q, &mas.a_full(), PBH_TOL);
    let costs = cluster_costs(spec, dec)?;
    let cluster_observable = costs
        .iter()
        .map(|c| {
            let (a, _) = mas.cluster_matrices(&c.agents);
            matops::pbh_observable(&c.qhat, &a, PBH_TOL)
        })
        .collect();
    let cluster_connected = dec
        .clusters()
        .iter()
        .map(|members| spec.graph.is_connected_subset(members))
        .collect();
    Ok(AssumptionReport {
        agent_controllable,
        cluster_observable,
        global_observable,
        graph_connected: spec.graph.is_connected(),
        cluster_connected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Five-agent graph with κ = 2, tr(G₂) = 6 for {1,2},{3},{4,5} and κ = 0,
    /// tr(G₂) = 6 for {1},{2,3},{4,5}.
    pub(crate) fn five_agent_graph() -> CostGraph {
        let e = [(1, 2), (2, 3), (2, 4), (1, 5), (4, 5)];
        let edges: Vec<_> = e.iter().map(|&(i, j)| (i - 1, j - 1, 1.0)).collect();
        CostGraph::from_edges(5, &edges).unwrap()
    }

    fn clique_path_3x3() -> CostGraph {
        let mut edges = Vec::new();
        for c in 0..3 {
            for i in 0..3 {
                for j in i + 1..3 {
                    edges.push((3 * c + i, 3 * c + j, 1.0));
                }
            }
        }
        edges.push((2, 3, 1.0));
        edges.push((5, 6, 1.0));
        CostGraph::from_edges(9, &edges).unwrap()
    }

    fn dec(clusters: &[&[usize]], n: usize) -> Decomposition {
        let c: Vec<Vec<usize>> = clusters.iter().map(|m| m.iter().map(|a| a - 1).collect()).collect();
        Decomposition::from_clusters(n, &c).unwrap()
    }

    #[test]
    fn five_agent_metrics() {
        let g = five_agent_graph();
        let d = dec(&[&[1, 2], &[3], &[4, 5]], 5);
        assert_eq!(split_graph(&g, &d).unwrap().trace_g2(), 6.0);
        assert_eq!(kappa(&g, &d).unwrap(), 2);
        let d = dec(&[&[1], &[2, 3], &[4, 5]], 5);
        assert_eq!(split_graph(&g, &d).unwrap().trace_g2(), 6.0);
        assert_eq!(kappa(&g, &d).unwrap(), 0);
    }

    #[test]
    fn clique_path_metrics() {
        let g = clique_path_3x3();
        let cases: [(&[&[usize]], usize, f64); 3] = [
            (&[&[1, 2], &[3, 4, 5, 6, 7], &[8, 9]], 4, 8.0),
            (&[&[1, 2, 3], &[4, 5, 6], &[7, 8, 9]], 9, 4.0),
            (&[&[1, 2, 3], &[4], &[5, 6, 7, 8, 9]], 15, 6.0),
        ];
        for (clusters, k, tr) in cases {
            let d = dec(clusters, 9);
            assert_eq!(kappa(&g, &d).unwrap(), k);
            assert_eq!(split_graph(&g, &d).unwrap().trace_g2(), tr);
            assert_eq!(miqp_objective(&g, &d, g.abs_sum().floor() + 1.0).unwrap(), 2 * k);
        }
    }

    #[test]
    fn single_cluster_has_no_inter_cluster_part() {
        let g = clique_path_3x3();
        let split = split_graph(&g, &Decomposition::single(9)).unwrap();
        assert_eq!(split.g2, DMatrix::zeros(9, 9));
        assert_eq!(&split.g1, g.laplacian());
        assert_eq!(kappa(&g, &Decomposition::single(9)).unwrap(), 0);
    }

    #[test]
    fn singletons_put_everything_in_g2() {
        let g = five_agent_graph();
        let split = split_graph(&g, &Decomposition::singletons(5)).unwrap();
        assert_eq!(split.g1, DMatrix::zeros(5, 5));
        assert_eq!(kappa(&g, &Decomposition::singletons(5)).unwrap(), g.zero_off_diagonal_entries() / 2);
    }

    #[test]
    fn comm_links_counts_blocks() {
        let k = DMatrix::<f64>::identity(6, 6);
        assert_eq!(comm_links(&k, 3, None).unwrap().count(), 0);
        let dense = DMatrix::from_element(18, 36, 1.0);
        assert_eq!(comm_links(&dense, 9, None).unwrap().count(), 36);
        assert!(comm_links(&DMatrix::zeros(5, 6), 3, None).is_err());
    }

    #[test]
    fn decomposition_validation() {
        assert!(Decomposition::new(vec![0, 2, 2], 3).is_err());
        assert!(Decomposition::new(vec![0, 3], 3).is_err());
        assert!(Decomposition::from_clusters(3, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(Decomposition::from_clusters(3, &[vec![0], vec![2]]).is_err());
        let d = Decomposition::contiguous(&[6, 3, 3]).unwrap();
        assert_eq!(d.to_string(), "{1,..,6},{7,8,9},{10,11,12}");
        let d = Decomposition::from_one_based(&[2, 2, 1]).unwrap();
        assert_eq!(d.canonical().assignment(), &[0, 0, 1]);
    }

    #[test]
    fn laplacian_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(CostGraph::from_laplacian(bad).is_err());
        let good = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        assert!(CostGraph::from_laplacian(good).is_ok());
        assert!(CostGraph::from_edges(2, &[(0, 0, 1.0)]).is_err());
    }

    #[test]
    fn example_cost_matrix() {
        let g = clique_path_3x3();
        let spec = CostSpec::uniform(
            DMatrix::identity(4, 4) * 0.5,
            DMatrix::identity(4, 4),
            g.clone(),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let q = assemble_q(&spec);
        let expected = g.laplacian().kronecker(&DMatrix::identity(4, 4)) + DMatrix::identity(36, 36) * 0.5;
        assert_eq!(q, expected);
        let d = Decomposition::singletons(9);
        assert_eq!(spec.qhat(&d).unwrap(), spec.qbar());
    }

    fn random_graph(n: usize, bits: &[bool], weights: &[u8]) -> CostGraph {
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                if bits[k % bits.len()] {
                    edges.push((i, j, 1.0 + f64::from(weights[k % weights.len()] % 3)));
                }
                k += 1;
            }
        }
        CostGraph::from_edges(n, &edges).unwrap()
    }

    proptest! {
        #[test]
        fn split_reconstructs_and_counts_cut(
            n in 2usize..12,
            bits in proptest::collection::vec(any::<bool>(), 66),
            assign in proptest::collection::vec(0usize..4, 12),
        ) {
            let g = random_graph(n, &bits, &[0]);
            let s = assign[..n].iter().copied().max().unwrap() + 1;
            let Ok(d) = Decomposition::new(assign[..n].to_vec(), s) else { return Ok(()); };
            let split = split_graph(&g, &d).unwrap();
            prop_assert_eq!(&split.g1 + &split.g2, g.laplacian().clone());
            prop_assert!(CostGraph::from_laplacian(split.g1.clone()).is_ok());
            prop_assert!(CostGraph::from_laplacian(split.g2.clone()).is_ok());
            prop_assert_eq!(split.trace_g2(), 2.0 * cut_weight(&g, &d).unwrap());
            // Q̂ ⪯ Q.
            let spec = CostSpec::uniform(DMatrix::identity(2, 2), DMatrix::identity(2, 2), g.clone(), DMatrix::identity(1, 1)).unwrap();
            prop_assert!(matops::psd_le(&spec.qhat(&d).unwrap(), &assemble_q(&spec)));
        }

        #[test]
        fn kappa_is_relabeling_invariant(
            n in 2usize..10,
            bits in proptest::collection::vec(any::<bool>(), 45),
            assign in proptest::collection::vec(0usize..4, 10),
            shift in 0usize..4,
        ) {
            let g = random_graph(n, &bits, &[1, 2]);
            let s = assign[..n].iter().copied().max().unwrap() + 1;
            let Ok(d) = Decomposition::new(assign[..n].to_vec(), s) else { return Ok(()); };
            let relabeled = Decomposition::new(d.assignment().iter().map(|c| (c + shift) % s).collect(), s).unwrap();
            prop_assert_eq!(kappa(&g, &d).unwrap(), kappa(&g, &relabeled).unwrap());
            // Clusters carrying no weight at all keep l_jj = 1.
            let idle: usize = d.clusters().iter()
                .filter(|c| c.iter().all(|&a| g.laplacian()[(a, a)] == 0.0))
                .map(|c| c.len() * c.len())
                .sum();
            prop_assert_eq!(miqp_objective(&g, &d, g.abs_sum() + 1.0).unwrap(), 2 * kappa(&g, &d).unwrap() + idle);
        }
    }
}
