//! Multi-agent plants, fixed-step simulation and scenario generators.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphcost::{CostGraph, CostSpec, Decomposition, GraphError};
use crate::matops::{self, MatError, SymMatrix};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state blow-up at t = {t}: |x| = {norm:e}")]
    StateBlowup { t: f64, norm: f64 },
    #[error("closed loop is unstable (spectral abscissa {abscissa})")]
    UnstableClosedLoop { abscissa: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("csv export failed: {0}")]
    Csv(String),
}

/// One agent: `ẋᵢ = Aᵢxᵢ + Bᵢ(uᵢ + dᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Measured disturbance `dᵢ(t)`, keyed by the agent's global index.
pub type DisturbanceFn = Arc<dyn Fn(usize, f64) -> DVector<f64> + Send + Sync>;

/// Block-diagonal multi-agent system with white-box access to its matrices.
#[derive(Clone)]
pub struct MasSystem {
    agents: Vec<Agent>,
    ids: Vec<usize>,
    disturbance: Option<DisturbanceFn>,
    n: usize,
    m: usize,
}

impl std::fmt::Debug for MasSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MasSystem")
            .field("agents", &self.agents.len())
            .field("n", &self.n)
            .field("m", &self.m)
            .field("disturbed", &self.disturbance.is_some())
            .finish()
    }
}

impl MasSystem {
    pub fn new(agents: Vec<Agent>) -> Result<Self, SimError> {
        let first = agents
            .first()
            .ok_or_else(|| SimError::InvalidConfig("system needs at least one agent".into()))?;
        let n = first.a.nrows();
        let m = first.b.ncols();
        for (i, ag) in agents.iter().enumerate() {
            if ag.a.shape() != (n, n) || ag.b.shape() != (n, m) {
                return Err(SimError::DimensionMismatch(format!(
                    "agent {} has A {:?}, B {:?}; expected {n}x{n}, {n}x{m}",
                    i + 1,
                    ag.a.shape(),
                    ag.b.shape()
                )));
            }
        }
        let ids = (0..agents.len()).collect();
        Ok(Self {
            agents,
            ids,
            disturbance: None,
            n,
            m,
        })
    }

    pub fn with_disturbance(mut self, d: DisturbanceFn) -> Self {
        self.disturbance = Some(d);
        self
    }

    pub fn without_disturbance(&self) -> Self {
        let mut out = self.clone();
        out.disturbance = None;
        out
    }

    pub fn has_disturbance(&self) -> bool {
        self.disturbance.is_some()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Per-agent state dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Per-agent input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    /// Global agent indices of this (sub)system.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn a_full(&self) -> DMatrix<f64> {
        matops::block_diag(&self.agents.iter().map(|a| a.a.clone()).collect::<Vec<_>>())
    }

    pub fn b_full(&self) -> DMatrix<f64> {
        matops::block_diag(&self.agents.iter().map(|a| a.b.clone()).collect::<Vec<_>>())
    }

    /// `(𝓐ⱼ, 𝓑ⱼ)` of the agents listed, in the given order.
    pub fn cluster_matrices(&self, members: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let a: Vec<_> = members.iter().map(|&i| self.agents[i].a.clone()).collect();
        let b: Vec<_> = members.iter().map(|&i| self.agents[i].b.clone()).collect();
        (matops::block_diag(&a), matops::block_diag(&b))
    }

    /// Restriction to `members`; the disturbance keeps its global indexing.
    pub fn subsystem(&self, members: &[usize]) -> Self {
        Self {
            agents: members.iter().map(|&i| self.agents[i].clone()).collect(),
            ids: members.iter().map(|&i| self.ids[i]).collect(),
            disturbance: self.disturbance.clone(),
            n: self.n,
            m: self.m,
        }
    }

    /// Stacked `d(t)`, or `None` when undisturbed.
    pub fn disturbance_at(&self, t: f64) -> Option<DVector<f64>> {
        let d = self.disturbance.as_ref()?;
        let mut out = DVector::zeros(self.m * self.agents.len());
        for (k, &id) in self.ids.iter().enumerate() {
            out.rows_mut(k * self.m, self.m).copy_from(&d(id, t));
        }
        Some(out)
    }

    /// `𝓐x + 𝓑u_applied`, evaluated agent by agent.
    pub fn derivative(&self, x: &DVector<f64>, u_applied: &DVector<f64>) -> DVector<f64> {
        let mut dx = DVector::zeros(x.len());
        for (k, ag) in self.agents.iter().enumerate() {
            let xi = x.rows(k * self.n, self.n);
            let ui = u_applied.rows(k * self.m, self.m);
            let v = &ag.a * xi + &ag.b * ui;
            dx.rows_mut(k * self.n, self.n).copy_from(&v);
        }
        dx
    }

    fn applied(&self, t: f64, u: DVector<f64>) -> DVector<f64> {
        match self.disturbance_at(t) {
            Some(d) => u + d,
            None => u,
        }
    }
}

/// State-feedback law `u = c(t, x)`.
pub type Controller<'a> = dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Sync + 'a;

/// `u = −Kx`.
pub fn linear_feedback(k: &DMatrix<f64>) -> impl Fn(f64, &DVector<f64>) -> DVector<f64> + Sync + '_ {
    move |_, x| -(k * x)
}

/// One RK4 step. Returns the next state and the four `(weight, x, u, u_applied)`
/// stage samples, with weights summing to `dt`.
fn rk4_step(
    sys: &MasSystem,
    ctrl: &Controller<'_>,
    t: f64,
    x: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, [(f64, DVector<f64>, DVector<f64>, DVector<f64>); 4]) {
    let stage = |ts: f64, xs: DVector<f64>| {
        let u = ctrl(ts, &xs);
        let ua = sys.applied(ts, u.clone());
        let f = sys.derivative(&xs, &ua);
        (xs, u, ua, f)
    };
    let (x1, u1, a1, k1) = stage(t, x.clone());
    let (x2, u2, a2, k2) = stage(t + dt / 2.0, x + &k1 * (dt / 2.0));
    let (x3, u3, a3, k3) = stage(t + dt / 2.0, x + &k2 * (dt / 2.0));
    let (x4, u4, a4, k4) = stage(t + dt, x + &k3 * dt);
    let next = x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0);
    (
        next,
        [
            (dt / 6.0, x1, u1, a1),
            (dt / 3.0, x2, u2, a2),
            (dt / 3.0, x3, u3, a3),
            (dt / 6.0, x4, u4, a4),
        ],
    )
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Abort once `‖x‖` exceeds this.
    pub guard: f64,
    /// Early stop once the cost gained over this window falls below
    /// `stop_tol · accumulated`. `None` always runs to `t_max`.
    pub stop_window: Option<f64>,
    pub stop_tol: f64,
    /// Keep every `record_every`-th sample in the trajectory.
    pub record_every: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_max: 100.0,
            guard: 1e8,
            stop_window: Some(1.0),
            stop_tol: 1e-8,
            record_every: 1,
        }
    }
}

/// Sampled trajectory with running costs.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// `∫ xᵀQx + uᵀRu` up to each sample time.
    pub running_cost: Vec<f64>,
    /// `∫ uᵀu` up to each sample time.
    pub running_ju: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn cost(&self) -> f64 {
        self.running_cost.last().copied().unwrap_or(0.0)
    }

    pub fn ju(&self) -> f64 {
        self.running_ju.last().copied().unwrap_or(0.0)
    }

    /// CSV with columns `t, x1.., u1.., cost, ju`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        let nx = self.states.first().map_or(0, |x| x.len());
        let nu = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=nu).map(|i| format!("u{i}")));
        header.push("cost".into());
        header.push("ju".into());
        out.write_record(&header).map_err(|e| SimError::Csv(e.to_string()))?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            row.extend(self.inputs[k].iter().map(|v| v.to_string()));
            row.push(self.running_cost[k].to_string());
            row.push(self.running_ju[k].to_string());
            out.write_record(&row).map_err(|e| SimError::Csv(e.to_string()))?;
        }
        out.flush().map_err(|e| SimError::Csv(e.to_string()))
    }
}

/// RK4 simulation of `sys` under `ctrl`. When `weights` is given the running
/// cost `∫ xᵀQx + uᵀRu` is accumulated with the same stage weights.
pub fn integrate(
    sys: &MasSystem,
    ctrl: &Controller<'_>,
    x0: &DVector<f64>,
    weights: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let nx = sys.n_agents() * sys.state_dim();
    if x0.len() != nx {
        return Err(SimError::DimensionMismatch(format!(
            "x0 has {} entries, system state has {nx}",
            x0.len()
        )));
    }
    if !(opts.dt > 0.0) || !(opts.t_max >= 0.0) {
        return Err(SimError::InvalidConfig("dt must be positive and t_max nonnegative".into()));
    }
    if let Some((q, r)) = weights {
        let nu = sys.n_agents() * sys.input_dim();
        if q.shape() != (nx, nx) || r.shape() != (nu, nu) {
            return Err(SimError::DimensionMismatch("cost weights do not match the system".into()));
        }
    }
    let steps = (opts.t_max / opts.dt).round() as usize;
    let window_steps = opts
        .stop_window
        .map(|w| ((w / opts.dt).round() as usize).max(1));
    let every = opts.record_every.max(1);

    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    let mut cost = 0.0;
    let mut ju = 0.0;
    let mut window_start_cost = 0.0;
    let push = |traj: &mut Trajectory, t: f64, x: &DVector<f64>, cost: f64, ju: f64| {
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.inputs.push(ctrl(t, x));
        traj.running_cost.push(cost);
        traj.running_ju.push(ju);
    };
    push(&mut traj, 0.0, &x, 0.0, 0.0);
    for step in 0..steps {
        let t = step as f64 * opts.dt;
        let (next, stages) = rk4_step(sys, ctrl, t, &x, opts.dt);
        for (w, xs, us, _) in &stages {
            let uu = us.dot(us);
            ju += w * uu;
            if let Some((q, r)) = weights {
                cost += w * (xs.dot(&(q * xs)) + us.dot(&(r * us)));
            }
        }
        x = next;
        let norm = x.norm();
        let t_next = (step + 1) as f64 * opts.dt;
        if !norm.is_finite() || norm > opts.guard {
            return Err(SimError::StateBlowup { t: t_next, norm });
        }
        let last = step + 1 == steps;
        let mut stop = false;
        if let Some(ws) = window_steps {
            if (step + 1) % ws == 0 {
                let gained = cost + ju - window_start_cost;
                let total = cost + ju;
                stop = total > 0.0 && gained < opts.stop_tol * total;
                window_start_cost = total;
            }
        }
        if (step + 1) % every == 0 || last || stop {
            push(&mut traj, t_next, &x, cost, ju);
        }
        if stop {
            break;
        }
    }
    Ok(traj)
}

/// `X` with `(A−BK)ᵀX + X(A−BK) + Q + KᵀRK = 0`, so `J(x₀, K) = x₀ᵀXx₀`.
pub fn cost_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<SymMatrix, SimError> {
    let closed = a - b * k;
    let abscissa = matops::spectral_abscissa(&closed);
    if abscissa >= 0.0 {
        return Err(SimError::UnstableClosedLoop { abscissa });
    }
    let w = q + k.transpose() * r * k;
    Ok(matops::solve_lyapunov(&closed, &w)?)
}

/// Analytic and (optionally) quadrature values of `J` and `J_u` under `u = −Kx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEval {
    pub j: f64,
    pub j_u: f64,
    pub j_quad: Option<f64>,
    pub j_u_quad: Option<f64>,
}

/// Evaluates `u = −Kx` from `x0` on the undisturbed system.
pub fn evaluate_cost(
    sys: &MasSystem,
    spec: &CostSpec,
    k: &DMatrix<f64>,
    x0: &DVector<f64>,
    quadrature: bool,
) -> Result<CostEval, SimError> {
    let a = sys.a_full();
    let b = sys.b_full();
    let q = crate::graphcost::assemble_q(spec);
    let r = spec.r();
    if k.shape() != (b.ncols(), a.nrows()) || x0.len() != a.nrows() {
        return Err(SimError::DimensionMismatch("gain or x0 does not match the system".into()));
    }
    let x = cost_matrix(&a, &b, &q, &r, k)?;
    let eye = DMatrix::identity(r.nrows(), r.nrows());
    let xu = cost_matrix(&a, &b, &DMatrix::zeros(q.nrows(), q.nrows()), &eye, k)?;
    let mut out = CostEval {
        j: x.quad(x0),
        j_u: xu.quad(x0),
        j_quad: None,
        j_u_quad: None,
    };
    if quadrature {
        let closed = &a - &b * k;
        let abscissa = matops::spectral_abscissa(&closed);
        let radius = matops::eigenvalues(&closed)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        let dt = (0.2 / radius.max(1e-12)).min(1e-2);
        let t_max = (1e-6f64).ln() / abscissa * 1.5;
        let opts = SimOptions {
            dt,
            t_max,
            stop_window: None,
            record_every: usize::MAX,
            ..SimOptions::default()
        };
        let undisturbed = sys.without_disturbance();
        let ctrl = linear_feedback(k);
        let traj = integrate(&undisturbed, &ctrl, x0, Some((&q, &r)), &opts)?;
        out.j_quad = Some(traj.cost());
        out.j_u_quad = Some(traj.ju());
    }
    Ok(out)
}

/// Running-cost totals of a disturbed simulation.
pub fn simulate_cost(
    sys: &MasSystem,
    spec: &CostSpec,
    ctrl: &Controller<'_>,
    x0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<(f64, f64), SimError> {
    let q = crate::graphcost::assemble_q(spec);
    let r = spec.r();
    let traj = integrate(sys, ctrl, x0, Some((&q, &r)), opts)?;
    Ok((traj.cost(), traj.ju()))
}

/// One plant step as seen by a learner: no matrices, only measurements.
#[derive(Debug, Clone)]
pub struct PlantStep {
    pub x_next: DVector<f64>,
    /// `∫ x xᵀ` over the step.
    pub int_xx: DMatrix<f64>,
    /// `∫ x u_appliedᵀ` over the step, where `u_applied = u + d`.
    pub int_xu: DMatrix<f64>,
    /// Recorded applied input at the start of the step.
    pub u_applied: DVector<f64>,
}

/// Black-box view of a (sub)system: step and measure, nothing else.
#[derive(Clone)]
pub struct BlackBoxPlant {
    sys: MasSystem,
}

impl std::fmt::Debug for BlackBoxPlant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxPlant")
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .finish()
    }
}

impl BlackBoxPlant {
    pub fn new(sys: MasSystem) -> Self {
        Self { sys }
    }

    /// Plant of one cluster.
    pub fn cluster(sys: &MasSystem, members: &[usize]) -> Self {
        Self::new(sys.subsystem(members))
    }

    /// Total state dimension.
    pub fn state_dim(&self) -> usize {
        self.sys.n_agents() * self.sys.state_dim()
    }

    /// Total input dimension.
    pub fn input_dim(&self) -> usize {
        self.sys.n_agents() * self.sys.input_dim()
    }

    /// Advances one RK4 step under the input law `u(t, x)` and returns the
    /// stage-weighted moments used by the learner.
    pub fn step(
        &self,
        t: f64,
        x: &DVector<f64>,
        dt: f64,
        input: &Controller<'_>,
    ) -> PlantStep {
        let (x_next, stages) = rk4_step(&self.sys, input, t, x, dt);
        let nx = x.len();
        let nu = self.input_dim();
        let mut int_xx = DMatrix::zeros(nx, nx);
        let mut int_xu = DMatrix::zeros(nx, nu);
        for (w, xs, _, ua) in &stages {
            int_xx += xs * xs.transpose() * *w;
            int_xu += xs * ua.transpose() * *w;
        }
        PlantStep {
            x_next,
            int_xx,
            int_xu,
            u_applied: stages[0].3.clone(),
        }
    }
}

// ---------------------------------------------------------------- scenarios

/// Path of `s_cliques` complete graphs on `c` agents each; clique `i` links
/// its last agent to the first agent of clique `i + 1`.
pub fn clique_path_graph(s_cliques: usize, c: usize) -> Result<CostGraph, SimError> {
    if s_cliques == 0 || c == 0 {
        return Err(SimError::InvalidConfig("need at least one clique of one agent".into()));
    }
    let mut edges = Vec::new();
    for k in 0..s_cliques {
        for i in 0..c {
            for j in i + 1..c {
                edges.push((k * c + i, k * c + j, 1.0));
            }
        }
        if k + 1 < s_cliques {
            edges.push((k * c + c - 1, (k + 1) * c, 1.0));
        }
    }
    Ok(CostGraph::from_edges(s_cliques * c, &edges)?)
}

/// Decomposition whose clusters are the cliques.
pub fn clique_clusters(s_cliques: usize, c: usize) -> Decomposition {
    Decomposition::contiguous(&vec![c; s_cliques]).expect("cliques form a valid decomposition")
}

/// Heterogeneous double-integrator-like agents on a clique-path cost graph.
/// `(n, m)` must be `(4, 2)` or `(8, 4)`.
pub fn clique_path_scenario(
    s_cliques: usize,
    c: usize,
    n: usize,
    m: usize,
) -> Result<(MasSystem, CostSpec), SimError> {
    let lift = match (n, m) {
        (4, 2) => 1,
        (8, 4) => 2,
        _ => {
            return Err(SimError::InvalidConfig(format!(
                "unsupported agent dimensions (n, m) = ({n}, {m})"
            )))
        }
    };
    let graph = clique_path_graph(s_cliques, c)?;
    let big_n = graph.n_agents();
    let i2 = DMatrix::<f64>::identity(2, 2);
    let il = DMatrix::<f64>::identity(lift, lift);
    let agents = (1..=big_n)
        .map(|i| {
            let ratio = i as f64 / (i as f64 + 1.0);
            let mut a = DMatrix::zeros(4, 2 * 2);
            a.view_mut((0, 0), (2, 2)).copy_from(&(-&i2));
            a.view_mut((0, 2), (2, 2)).copy_from(&i2);
            a.view_mut((2, 2), (2, 2)).copy_from(&(&i2 * -ratio));
            let mut b = DMatrix::zeros(4, 2);
            b.view_mut((2, 0), (2, 2)).copy_from(&(&i2 * ratio));
            Agent {
                a: a.kronecker(&il),
                b: b.kronecker(&il),
            }
        })
        .collect();
    let sys = MasSystem::new(agents)?;
    let spec = CostSpec::uniform(
        DMatrix::identity(n, n) * 0.5,
        DMatrix::identity(n, n),
        graph,
        DMatrix::identity(m, m),
    )?;
    Ok((sys, spec))
}

/// Formation maneuver configuration. Agent ids are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormationConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub leaders: Vec<usize>,
    /// Target positions `hᵢ`; `None` uses the compressed column formation.
    pub targets: Option<Vec<[f64; 2]>>,
    /// Initial positions; `None` uses the mesh.
    pub initial_positions: Option<Vec<[f64; 2]>>,
    pub initial_velocities: Option<Vec<[f64; 2]>>,
    pub disturbance: bool,
}

impl Default for FormationConfig {
    /// Twelve agents on a 4×3 mesh (row-major numbering) with leaders 1, 8, 12.
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 3,
            spacing: 1.0,
            leaders: vec![1, 8, 12],
            targets: None,
            initial_positions: None,
            initial_velocities: None,
            disturbance: true,
        }
    }
}

impl FormationConfig {
    /// Mesh position of agent `i` (0-based): column to the right, rows downward.
    pub fn mesh_position(&self, i: usize) -> [f64; 2] {
        let r = i / self.cols;
        let c = i % self.cols;
        [c as f64 * self.spacing, -(r as f64) * self.spacing]
    }

    /// Default target: the mesh shifted 6 spacings to the right with its
    /// rows squeezed to half spacing and its columns to a quarter.
    pub fn default_target(&self, i: usize) -> [f64; 2] {
        let [x, y] = self.mesh_position(i);
        [6.0 * self.spacing + 0.25 * x, 0.5 * y]
    }
}

/// Built formation problem in error coordinates `xᵢ = (qᵢ − hᵢ, q̇ᵢ)`.
#[derive(Debug, Clone)]
pub struct FormationScenario {
    pub graph: CostGraph,
    /// 0-based leader indices.
    pub leaders: Vec<usize>,
    pub masses: Vec<DMatrix<f64>>,
    pub damping: Vec<DMatrix<f64>>,
    pub targets: Vec<[f64; 2]>,
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub disturbance: bool,
}

/// `Mᵢ = diag((i+1)/2, i/2)` for 1-based `i`.
pub fn default_mass(i: usize) -> DMatrix<f64> {
    let i = i as f64;
    DMatrix::from_diagonal(&DVector::from_vec(vec![(i + 1.0) / 2.0, i / 2.0]))
}

/// `Cᵢ = diag(i/4, i/5)` for 1-based `i`.
pub fn default_damping(i: usize) -> DMatrix<f64> {
    let i = i as f64;
    DMatrix::from_diagonal(&DVector::from_vec(vec![i / 4.0, i / 5.0]))
}

/// `dᵢ(t) = (0.05i, 0.1i)ᵀ cos t / (t + 1)` for 1-based `i`.
pub fn default_disturbance() -> DisturbanceFn {
    Arc::new(|idx, t| {
        let i = (idx + 1) as f64;
        DVector::from_vec(vec![0.05 * i, 0.1 * i]) * (t.cos() / (t + 1.0))
    })
}

/// Mesh graph: unit edges between horizontal and vertical neighbours.
pub fn mesh_graph(rows: usize, cols: usize) -> Result<CostGraph, SimError> {
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((i, i + 1, 1.0));
            }
            if r + 1 < rows {
                edges.push((i, i + cols, 1.0));
            }
        }
    }
    Ok(CostGraph::from_edges(rows * cols, &edges)?)
}

/// Formation scenario on a mesh with the default agent parameters.
pub fn formation_scenario(cfg: &FormationConfig) -> Result<FormationScenario, SimError> {
    if cfg.rows == 0 || cfg.cols == 0 {
        return Err(SimError::InvalidConfig("mesh must be nonempty".into()));
    }
    let n = cfg.rows * cfg.cols;
    let graph = mesh_graph(cfg.rows, cfg.cols)?;
    let pick = |given: &Option<Vec<[f64; 2]>>, f: &dyn Fn(usize) -> [f64; 2], what: &str| {
        match given {
            Some(v) if v.len() != n => Err(SimError::InvalidConfig(format!(
                "{what} lists {} agents, mesh has {n}",
                v.len()
            ))),
            Some(v) => Ok(v.clone()),
            None => Ok((0..n).map(f).collect()),
        }
    };
    let targets = pick(&cfg.targets, &|i| cfg.default_target(i), "targets")?;
    let positions = pick(&cfg.initial_positions, &|i| cfg.mesh_position(i), "initial positions")?;
    let velocities = pick(&cfg.initial_velocities, &|_| [0.0, 0.0], "initial velocities")?;
    if cfg.leaders.iter().any(|&l| l == 0 || l > n) {
        return Err(SimError::InvalidConfig("leader ids must lie in 1..=N".into()));
    }
    FormationScenario::new(
        graph,
        cfg.leaders.iter().map(|l| l - 1).collect(),
        (1..=n).map(default_mass).collect(),
        (1..=n).map(default_damping).collect(),
        targets,
        positions,
        velocities,
        cfg.disturbance,
    )
}

impl FormationScenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: CostGraph,
        mut leaders: Vec<usize>,
        masses: Vec<DMatrix<f64>>,
        damping: Vec<DMatrix<f64>>,
        targets: Vec<[f64; 2]>,
        positions: Vec<[f64; 2]>,
        velocities: Vec<[f64; 2]>,
        disturbance: bool,
    ) -> Result<Self, SimError> {
        let n = graph.n_agents();
        leaders.sort_unstable();
        leaders.dedup();
        if leaders.is_empty() {
            return Err(SimError::InvalidConfig(
                "formation needs at least one leader for a positive definite cost".into(),
            ));
        }
        if leaders.iter().any(|&l| l >= n) {
            return Err(SimError::InvalidConfig("leader index out of range".into()));
        }
        if !graph.is_connected() {
            return Err(SimError::InvalidConfig("formation graph must be connected".into()));
        }
        for (what, len) in [
            ("masses", masses.len()),
            ("damping", damping.len()),
            ("targets", targets.len()),
            ("positions", positions.len()),
            ("velocities", velocities.len()),
        ] {
            if len != n {
                return Err(SimError::InvalidConfig(format!("{what} has {len} entries, need {n}")));
            }
        }
        for (i, (m, c)) in masses.iter().zip(&damping).enumerate() {
            let pd = |x: &DMatrix<f64>| {
                x.shape() == (2, 2) && SymMatrix::new(x.clone()).is_ok_and(|s| s.is_pd())
            };
            if !pd(m) || !pd(c) {
                return Err(SimError::InvalidConfig(format!(
                    "agent {} needs 2x2 positive definite M and C",
                    i + 1
                )));
            }
        }
        Ok(Self {
            graph,
            leaders,
            masses,
            damping,
            targets,
            positions,
            velocities,
            disturbance,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    pub fn is_leader(&self, i: usize) -> bool {
        self.leaders.binary_search(&i).is_ok()
    }

    /// `Aᵢ = [[0, I], [0, −Mᵢ⁻¹Cᵢ]]`, `Bᵢ = [0; Mᵢ⁻¹]`, plus `dᵢ` when enabled.
    pub fn system(&self) -> MasSystem {
        let agents = self
            .masses
            .iter()
            .zip(&self.damping)
            .map(|(m, c)| {
                let m_inv = m.clone().try_inverse().expect("mass matrix is positive definite");
                let mut a = DMatrix::zeros(4, 4);
                a.view_mut((0, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
                a.view_mut((2, 2), (2, 2)).copy_from(&(-(&m_inv * c)));
                let mut b = DMatrix::zeros(4, 2);
                b.view_mut((2, 0), (2, 2)).copy_from(&m_inv);
                Agent { a, b }
            })
            .collect();
        let sys = MasSystem::new(agents).expect("formation agents share dimensions");
        if self.disturbance {
            sys.with_disturbance(default_disturbance())
        } else {
            sys
        }
    }

    /// `Q = (L + Λ) ⊗ I₄`, `R = I`.
    pub fn cost_spec(&self) -> CostSpec {
        let n = self.n_agents();
        let qbar = (0..n)
            .map(|i| DMatrix::identity(4, 4) * if self.is_leader(i) { 1.0 } else { 0.0 })
            .collect();
        CostSpec::new(
            qbar,
            DMatrix::identity(4, 4),
            self.graph.clone(),
            vec![DMatrix::identity(2, 2); n],
        )
        .expect("formation cost is well formed")
    }

    pub fn x0(&self) -> DVector<f64> {
        let mut x = DVector::zeros(4 * self.n_agents());
        for i in 0..self.n_agents() {
            x[4 * i] = self.positions[i][0] - self.targets[i][0];
            x[4 * i + 1] = self.positions[i][1] - self.targets[i][1];
            x[4 * i + 2] = self.velocities[i][0];
            x[4 * i + 3] = self.velocities[i][1];
        }
        x
    }

    /// Gain of `uᵢ = −Σ_{j ∈ 𝓔_c}(qᵢ − qⱼ − (hᵢ − hⱼ)) − kᵢ(qᵢ − hᵢ)` over the
    /// complete communication graph, as `u = −K x`.
    pub fn baseline_gain(&self) -> DMatrix<f64> {
        let n = self.n_agents();
        let mut lk = CostGraph::complete(n).laplacian().clone();
        for &l in &self.leaders {
            lk[(l, l)] += 1.0;
        }
        let s1 = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        lk.kronecker(&s1)
    }
}

/// Per-cluster outcome of the leader/connectivity feasibility test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterFeasibility {
    pub agents: Vec<usize>,
    pub has_leader: bool,
    pub connected: bool,
    /// Every connected component of the cluster's formation subgraph holds a leader.
    pub every_component_led: bool,
    /// PBH observability of `(Q̂ⱼ^{1/2}, 𝓐ⱼ)`.
    pub pbh_observable: bool,
}

impl ClusterFeasibility {
    /// Leader present and cluster subgraph connected.
    pub fn feasible(&self) -> bool {
        self.has_leader && self.connected
    }
}

/// Combinatorial and PBH verdicts for every cluster of `dec`.
pub fn formation_feasibility(
    sc: &FormationScenario,
    dec: &Decomposition,
) -> Result<Vec<ClusterFeasibility>, SimError> {
    let spec = sc.cost_spec();
    let sys = sc.system();
    let costs = crate::graphcost::cluster_costs(&spec, dec)?;
    Ok(costs
        .into_iter()
        .map(|cc| {
            let (a, _) = sys.cluster_matrices(&cc.agents);
            let comps = sc.graph.components_of(&cc.agents);
            ClusterFeasibility {
                has_leader: cc.agents.iter().any(|&i| sc.is_leader(i)),
                connected: comps.len() == 1,
                every_component_led: comps.iter().all(|c| c.iter().any(|&i| sc.is_leader(i))),
                pbh_observable: matops::pbh_observable(&cc.qhat, &a, crate::graphcost::PBH_TOL),
                agents: cc.agents,
            }
        })
        .collect())
}
