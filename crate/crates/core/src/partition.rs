//! Exact decomposition search: maximum κ and minimum s-cut.
//!
//! Both objectives run a depth-first branch and bound over restricted-growth
//! assignments (agent 0 in cluster 0, cluster ids opened in order). Children
//! are visited in ascending cluster id and only strict improvements replace
//! the incumbent, so among equal optima the lexicographically smallest
//! assignment is returned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphcost::{self, CostGraph, Decomposition, GraphError};

pub const MAX_ENUMERATION_AGENTS: usize = 12;
pub const DEFAULT_NODE_BUDGET: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("no decomposition satisfies the constraints")]
    Infeasible,
    #[error("node budget of {budget} exhausted before any feasible decomposition was found")]
    Timeout { budget: u64 },
    #[error("enumeration limited to {MAX_ENUMERATION_AGENTS} agents, got {0}")]
    TooLarge(usize),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Side constraints on admissible decompositions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSet {
    /// `ξ`: `true` for leaders.
    pub leader_indicator: Option<Vec<bool>>,
    /// `ε` in the neighbour constraint; `None` uses the smallest nonzero `|G|` entry.
    pub min_epsilon: Option<f64>,
    /// Every cluster has at least one leader.
    pub require_leader: bool,
    /// Every agent in a non-singleton cluster has an intra-cluster neighbour.
    pub require_neighbor: bool,
    /// Every cluster induces a connected subgraph.
    pub require_connected: bool,
}

impl ConstraintSet {
    pub fn none() -> Self {
        Self::default()
    }

    /// Leader-per-cluster plus connected clusters.
    pub fn formation(leaders: &[usize], n_agents: usize) -> Self {
        let mut xi = vec![false; n_agents];
        for &l in leaders {
            xi[l] = true;
        }
        Self {
            leader_indicator: Some(xi),
            min_epsilon: None,
            require_leader: true,
            require_neighbor: true,
            require_connected: true,
        }
    }

    fn leaders(&self) -> Option<&[bool]> {
        if self.require_leader {
            self.leader_indicator.as_deref()
        } else {
            None
        }
    }
}

/// Search objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Kappa,
    Scut,
}

#[derive(Debug, Clone)]
pub struct PartitionProblem {
    pub graph: CostGraph,
    pub s: usize,
    pub constraints: ConstraintSet,
    /// Normalizer `T ≥ Σ|G|`.
    pub t_norm: f64,
    pub node_budget: u64,
}

impl PartitionProblem {
    /// Unconstrained problem with `T = ⌊Σ|G|⌋ + 1`.
    pub fn new(graph: CostGraph, s: usize) -> Self {
        let t_norm = graph.abs_sum().floor() + 1.0;
        Self {
            graph,
            s,
            constraints: ConstraintSet::none(),
            t_norm,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn with_node_budget(mut self, budget: u64) -> Self {
        self.node_budget = budget;
        self
    }

    fn validate(&self) -> Result<(), PartitionError> {
        let n = self.graph.n_agents();
        if self.s == 0 || self.s > n {
            return Err(PartitionError::Invalid(format!(
                "cluster count {} outside 1..={n}",
                self.s
            )));
        }
        if self.t_norm < self.graph.abs_sum() {
            return Err(PartitionError::Invalid(format!(
                "T = {} is below the total weight {}",
                self.t_norm,
                self.graph.abs_sum()
            )));
        }
        if let Some(xi) = &self.constraints.leader_indicator {
            if xi.len() != n {
                return Err(PartitionError::Invalid(format!(
                    "leader indicator has {} entries, graph has {n}",
                    xi.len()
                )));
            }
        }
        if self.constraints.require_leader {
            let Some(xi) = &self.constraints.leader_indicator else {
                return Err(PartitionError::Invalid("leader constraint without leaders".into()));
            };
            if xi.iter().filter(|&&l| l).count() < self.s {
                return Err(PartitionError::Infeasible);
            }
        }
        Ok(())
    }
}

/// Optimal (or best-found) decomposition with its metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    pub decomposition: Decomposition,
    pub kappa: usize,
    pub cut_weight: f64,
    pub trace_g2: f64,
    /// Ordered-pair MIQP objective `Σ l_ij τ_ij`.
    pub miqp_objective: usize,
    /// `false` when the node budget ran out first.
    pub optimal: bool,
    pub nodes: u64,
}

/// The neighbour constraint in its linear form:
/// `G_kk − Σᵢ ηᵢᵀ g_k e_kᵀ ηᵢ ≥ ε(Σᵢ ηᵢᵀ 1 e_kᵀ ηᵢ − 1)/N` for every agent `k`.
pub fn neighbor_constraint_holds(graph: &CostGraph, dec: &Decomposition, epsilon: f64) -> bool {
    let n = graph.n_agents();
    let g = graph.laplacian();
    (0..n).all(|k| {
        let ck = dec.cluster_of(k);
        let members: Vec<usize> = (0..n).filter(|&l| dec.cluster_of(l) == ck).collect();
        let same: f64 = members.iter().map(|&l| g[(l, k)]).sum();
        let lhs = g[(k, k)] - same;
        let rhs = epsilon * (members.len() as f64 - 1.0) / n as f64;
        lhs >= rhs - 1e-12
    })
}

/// Whether `dec` satisfies every active constraint.
pub fn is_feasible(graph: &CostGraph, dec: &Decomposition, cons: &ConstraintSet) -> bool {
    if let Some(xi) = cons.leaders() {
        let mut led = vec![false; dec.s()];
        for (i, &c) in dec.assignment().iter().enumerate() {
            led[c] |= xi[i];
        }
        if led.iter().any(|&l| !l) {
            return false;
        }
    }
    if cons.require_neighbor {
        let eps = cons
            .min_epsilon
            .or_else(|| graph.min_nonzero_weight())
            .unwrap_or(0.0);
        if !neighbor_constraint_holds(graph, dec, eps) {
            return false;
        }
    }
    if cons.require_connected
        && dec
            .clusters()
            .iter()
            .any(|members| !graph.is_connected_subset(members))
    {
        return false;
    }
    true
}

/// Every set partition of `n` agents into exactly `s` nonempty clusters, once each,
/// as canonical restricted-growth assignments in lexicographic order.
pub fn enumerate_partitions(n: usize, s: usize) -> Result<Vec<Decomposition>, PartitionError> {
    if n > MAX_ENUMERATION_AGENTS {
        return Err(PartitionError::TooLarge(n));
    }
    if n == 0 || s == 0 || s > n {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut a = vec![0usize; n];
    fn rec(k: usize, used: usize, n: usize, s: usize, a: &mut Vec<usize>, out: &mut Vec<Decomposition>) {
        if k == n {
            if used == s {
                out.push(Decomposition::new(a.clone(), s).expect("restricted growth string is valid"));
            }
            return;
        }
        let remaining = n - k;
        for c in 0..=used.min(s - 1) {
            let used_next = used.max(c + 1);
            if s - used_next > remaining - 1 {
                continue;
            }
            a[k] = c;
            rec(k + 1, used_next, n, s, a, out);
        }
    }
    a[0] = 0;
    rec(1, 1, n, s, &mut a, &mut out);
    Ok(out)
}

/// Feasible partitions of the problem's graph.
pub fn enumerate_feasible(problem: &PartitionProblem) -> Result<Vec<Decomposition>, PartitionError> {
    problem.validate()?;
    Ok(enumerate_partitions(problem.graph.n_agents(), problem.s)?
        .into_iter()
        .filter(|d| is_feasible(&problem.graph, d, &problem.constraints))
        .collect())
}

/// Decomposition maximizing κ.
pub fn max_kappa(problem: &PartitionProblem) -> Result<PartitionResult, PartitionError> {
    solve(problem, Objective::Kappa)
}

/// Decomposition minimizing the inter-cluster cut weight (`tr(G₂)/2`).
pub fn min_scut(problem: &PartitionProblem) -> Result<PartitionResult, PartitionError> {
    solve(problem, Objective::Scut)
}

pub fn solve(problem: &PartitionProblem, objective: Objective) -> Result<PartitionResult, PartitionError> {
    problem.validate()?;
    let mut search = Search::new(problem, objective);
    search.run();
    let best = match search.best.take() {
        Some(b) => b,
        None if search.exhausted => {
            return Err(PartitionError::Timeout {
                budget: problem.node_budget,
            })
        }
        None => return Err(PartitionError::Infeasible),
    };
    let dec = Decomposition::new(best, problem.s)?;
    let g = &problem.graph;
    Ok(PartitionResult {
        kappa: graphcost::kappa(g, &dec)?,
        cut_weight: graphcost::cut_weight(g, &dec)?,
        trace_g2: graphcost::split_graph(g, &dec)?.trace_g2(),
        miqp_objective: graphcost::miqp_objective(g, &dec, problem.t_norm)?,
        decomposition: dec,
        optimal: !search.exhausted,
        nodes: search.nodes,
    })
}

struct Search<'a> {
    p: &'a PartitionProblem,
    objective: Objective,
    n: usize,
    s: usize,
    w: Vec<Vec<f64>>,
    edge: Vec<Vec<bool>>,
    n_edges: usize,
    leaders: Option<&'a [bool]>,
    leaders_suffix: Vec<usize>,
    assign: Vec<usize>,
    best: Option<Vec<usize>>,
    best_value: f64,
    nodes: u64,
    exhausted: bool,
}

impl<'a> Search<'a> {
    fn new(p: &'a PartitionProblem, objective: Objective) -> Self {
        let n = p.graph.n_agents();
        let w: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| p.graph.weight(i, j).abs()).collect())
            .collect();
        let edge: Vec<Vec<bool>> = w.iter().map(|r| r.iter().map(|&x| x > 0.0).collect()).collect();
        let n_edges = p.graph.edges().len();
        let leaders = p.constraints.leaders();
        let mut leaders_suffix = vec![0; n + 1];
        if let Some(xi) = leaders {
            for k in (0..n).rev() {
                leaders_suffix[k] = leaders_suffix[k + 1] + usize::from(xi[k]);
            }
        }
        let best_value = match objective {
            Objective::Kappa => -1.0,
            Objective::Scut => f64::INFINITY,
        };
        Self {
            p,
            objective,
            n,
            s: p.s,
            w,
            edge,
            n_edges,
            leaders,
            leaders_suffix,
            assign: vec![usize::MAX; n],
            best: None,
            best_value,
            nodes: 0,
            exhausted: false,
        }
    }

    fn run(&mut self) {
        self.assign[0] = 0;
        let led = self.leaders.map_or(1, |xi| usize::from(xi[0]));
        self.rec(1, 1, led);
    }

    /// `k` agents assigned, `used` clusters opened, `led` of them contain a leader.
    fn rec(&mut self, k: usize, used: usize, led: usize) {
        if self.exhausted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.p.node_budget {
            self.exhausted = true;
            return;
        }
        if self.leaders.is_some() && (used - led) + (self.s - used) > self.leaders_suffix[k] {
            return;
        }
        if k == self.n {
            if used == self.s {
                self.leaf();
            }
            return;
        }
        if !self.promising(k, used) {
            return;
        }
        let remaining = self.n - k;
        for c in 0..=used.min(self.s - 1) {
            let used_next = used.max(c + 1);
            if self.s - used_next > remaining - 1 {
                continue;
            }
            let is_leader = self.leaders.is_some_and(|xi| xi[k]);
            let newly_led = is_leader && !self.cluster_has_leader(c, k);
            self.assign[k] = c;
            self.rec(k + 1, used_next, led + usize::from(newly_led));
            self.assign[k] = usize::MAX;
            if self.exhausted {
                return;
            }
        }
    }

    fn cluster_has_leader(&self, c: usize, k: usize) -> bool {
        let xi = self.leaders.expect("called only with leaders");
        (0..k).any(|i| self.assign[i] == c && xi[i])
    }

    fn leaf(&mut self) {
        let dec = Decomposition::new(self.assign.clone(), self.s).expect("complete assignment is valid");
        if !is_feasible(&self.p.graph, &dec, &self.p.constraints) {
            return;
        }
        let value = match self.objective {
            Objective::Kappa => self.kappa_of(&self.assign) as f64,
            Objective::Scut => self.cut_of(self.n),
        };
        let better = match self.objective {
            Objective::Kappa => value > self.best_value,
            Objective::Scut => value < self.best_value - 1e-12,
        };
        if better {
            self.best_value = value;
            self.best = Some(self.assign.clone());
        }
    }

    fn promising(&self, k: usize, used: usize) -> bool {
        match self.objective {
            Objective::Kappa => (self.kappa_bound(k, used) as f64) > self.best_value,
            Objective::Scut => self.cut_bound(k, used) < self.best_value - 1e-12,
        }
    }

    fn cluster_adjacency(&self, k: usize, used: usize) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; used]; used];
        for i in 0..k {
            for j in 0..k {
                if self.edge[i][j] {
                    adj[self.assign[i]][self.assign[j]] = true;
                }
            }
        }
        adj
    }

    fn kappa_of(&self, assign: &[usize]) -> usize {
        let adj = self.cluster_adjacency(self.n, self.s);
        let mut total = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let (a, b) = (assign[i], assign[j]);
                if a != b && !adj[a][b] {
                    total += 1;
                }
            }
        }
        total
    }

    /// Upper bound on κ for any completion of the first `k` assignments.
    fn kappa_bound(&self, k: usize, used: usize) -> usize {
        let adj = self.cluster_adjacency(k, used);
        let linked = |a: usize, b: usize| a == b || adj[a][b];
        let mut lost = self.n_edges;
        for i in 0..k {
            for j in i + 1..k {
                if !self.edge[i][j] && linked(self.assign[i], self.assign[j]) {
                    lost += 1;
                }
            }
        }
        // An unassigned agent ends up linked to every cluster holding one of
        // its assigned neighbours.
        let mut touched = vec![false; used];
        for u in k..self.n {
            touched.iter_mut().for_each(|t| *t = false);
            for i in 0..k {
                if self.edge[u][i] {
                    touched[self.assign[i]] = true;
                }
            }
            for i in 0..k {
                if !self.edge[u][i] && touched[self.assign[i]] {
                    lost += 1;
                }
            }
        }
        self.n * (self.n - 1) / 2 - lost
    }

    fn cut_of(&self, k: usize) -> f64 {
        let mut cut = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                if self.assign[i] != self.assign[j] {
                    cut += self.w[i][j];
                }
            }
        }
        cut
    }

    /// Lower bound on the cut for any completion of the first `k` assignments.
    fn cut_bound(&self, k: usize, used: usize) -> f64 {
        let mut bound = self.cut_of(k);
        let can_open = used < self.s;
        let mut to_cluster = vec![0.0; used];
        for u in k..self.n {
            to_cluster.iter_mut().for_each(|t| *t = 0.0);
            let mut total = 0.0;
            for i in 0..k {
                to_cluster[self.assign[i]] += self.w[u][i];
                total += self.w[u][i];
            }
            let mut best = if can_open { total } else { f64::INFINITY };
            for &t in &to_cluster {
                best = best.min(total - t);
            }
            bound += best;
        }
        bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(n: usize) -> CostGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        CostGraph::from_edges(n, &edges).unwrap()
    }

    fn brute(problem: &PartitionProblem, objective: Objective) -> Option<(f64, Decomposition)> {
        let mut best: Option<(f64, Decomposition)> = None;
        for d in enumerate_feasible(problem).unwrap() {
            let v = match objective {
                Objective::Kappa => -(graphcost::kappa(&problem.graph, &d).unwrap() as f64),
                Objective::Scut => graphcost::cut_weight(&problem.graph, &d).unwrap(),
            };
            if best.as_ref().is_none_or(|(b, _)| v < *b - 1e-12) {
                best = Some((v, d));
            }
        }
        best
    }

    #[test]
    fn stirling_counts() {
        assert_eq!(enumerate_partitions(3, 2).unwrap().len(), 3);
        assert_eq!(enumerate_partitions(4, 2).unwrap().len(), 7);
        assert_eq!(enumerate_partitions(5, 3).unwrap().len(), 25);
        assert_eq!(enumerate_partitions(6, 6).unwrap().len(), 1);
        assert!(matches!(enumerate_partitions(13, 2), Err(PartitionError::TooLarge(13))));
    }

    #[test]
    fn path_graph_kappa() {
        // Two clusters of a connected graph are always adjacent.
        let r = max_kappa(&PartitionProblem::new(path(3), 2)).unwrap();
        assert_eq!(r.kappa, 0);
        assert!(r.optimal);
        assert_eq!(r.decomposition.assignment(), &[0, 0, 1]);
        let r = max_kappa(&PartitionProblem::new(path(3), 3)).unwrap();
        assert_eq!(r.kappa, 1);
        let r = max_kappa(&PartitionProblem::new(path(3), 1)).unwrap();
        assert_eq!(r.kappa, 0);
    }

    #[test]
    fn triangle_three_cut() {
        let g = CostGraph::complete(3);
        let r = min_scut(&PartitionProblem::new(g, 3)).unwrap();
        assert_eq!(r.cut_weight, 3.0);
        assert_eq!(r.decomposition, Decomposition::singletons(3));
    }

    #[test]
    fn clique_path_optima() {
        let g = crate::sim::clique_path_graph(3, 3).unwrap();
        let r = max_kappa(&PartitionProblem::new(g.clone(), 3)).unwrap();
        assert_eq!(r.kappa, 15);
        assert_eq!(r.miqp_objective, 30);
        let r = min_scut(&PartitionProblem::new(g, 3)).unwrap();
        assert_eq!(r.trace_g2, 4.0);
        assert_eq!(r.decomposition, crate::sim::clique_clusters(3, 3));
    }

    #[test]
    fn formation_constraints() {
        let sc = crate::sim::formation_scenario(&crate::sim::FormationConfig::default()).unwrap();
        let cons = ConstraintSet::formation(&sc.leaders, 12);
        let problem = PartitionProblem::new(sc.graph.clone(), 3).with_constraints(cons.clone());
        let r = max_kappa(&problem).unwrap();
        let (v, _) = brute(&problem, Objective::Kappa).unwrap();
        assert_eq!(r.kappa as f64, -v);
        assert!(is_feasible(&sc.graph, &r.decomposition, &cons));
        let too_many = PartitionProblem::new(sc.graph.clone(), 4).with_constraints(cons);
        assert!(matches!(max_kappa(&too_many), Err(PartitionError::Infeasible)));
    }

    #[test]
    fn budget_exhaustion() {
        let g = crate::sim::clique_path_graph(3, 3).unwrap();
        let r = max_kappa(&PartitionProblem::new(g.clone(), 3).with_node_budget(30)).unwrap();
        assert!(!r.optimal);
        let err = max_kappa(&PartitionProblem::new(g, 3).with_node_budget(2));
        assert!(matches!(err, Err(PartitionError::Timeout { .. })));
    }

    #[test]
    fn neighbor_constraint_matches_neighbor_sets() {
        let g = path(4);
        let d = Decomposition::new(vec![0, 1, 0, 1], 2).unwrap();
        assert!(!neighbor_constraint_holds(&g, &d, 1.0));
        let d = Decomposition::new(vec![0, 0, 1, 2], 3).unwrap();
        assert!(neighbor_constraint_holds(&g, &d, 1.0));
    }

    fn graph_from(n: usize, bits: &[bool], weights: &[u8]) -> CostGraph {
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                if bits[k] {
                    edges.push((i, j, f64::from(1 + weights[k] % 3)));
                }
                k += 1;
            }
        }
        CostGraph::from_edges(n, &edges).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn search_matches_brute_force(
            n in 3usize..8,
            s in 1usize..5,
            bits in proptest::collection::vec(any::<bool>(), 28),
            weights in proptest::collection::vec(any::<u8>(), 28),
        ) {
            prop_assume!(s <= n);
            let g = graph_from(n, &bits, &weights);
            let problem = PartitionProblem::new(g, s);
            let (bk, dk) = brute(&problem, Objective::Kappa).unwrap();
            let rk = max_kappa(&problem).unwrap();
            prop_assert_eq!(rk.kappa as f64, -bk);
            prop_assert_eq!(&rk.decomposition, &dk);
            let (bs, ds) = brute(&problem, Objective::Scut).unwrap();
            let rs = min_scut(&problem).unwrap();
            prop_assert!((rs.cut_weight - bs).abs() < 1e-9);
            prop_assert_eq!(&rs.decomposition, &ds);
        }

        #[test]
        fn kappa_star_nondecreasing(
            n in 2usize..8,
            bits in proptest::collection::vec(any::<bool>(), 28),
        ) {
            let g = graph_from(n, &bits, &[0; 28]);
            let mut prev = 0;
            for s in 1..=n {
                let k = max_kappa(&PartitionProblem::new(g.clone(), s)).unwrap().kappa;
                prop_assert!(k >= prev);
                prev = k;
            }
            prop_assert_eq!(prev, g.zero_off_diagonal_entries() / 2);
        }
    }
}
