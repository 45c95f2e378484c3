//! Hierarchical controller: cluster Riccati solves, the coupling gain `R̃`,
//! gain assembly and suboptimality diagnostics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graphcost::{self, CostSpec, Decomposition, GraphError};
use crate::matops::{self, MatError, SymMatrix};
use crate::sim::{self, MasSystem, SimError};

/// Absolute threshold for treating an `R̃` block as structurally zero.
pub const ZERO_BLOCK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HierError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("closed loop is unstable (spectral abscissa {abscissa})")]
    UnstableClosedLoop { abscissa: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl From<SimError> for HierError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnstableClosedLoop { abscissa } => HierError::UnstableClosedLoop { abscissa },
            SimError::Mat(m) => HierError::Mat(m),
            SimError::Graph(g) => HierError::Graph(g),
            other => HierError::DimensionMismatch(other.to_string()),
        }
    }
}

/// Stabilizing `𝓟ⱼ` of every cluster Riccati equation, solved in parallel.
pub fn solve_clusters(
    mas: &MasSystem,
    spec: &CostSpec,
    dec: &Decomposition,
) -> Result<Vec<SymMatrix>, HierError> {
    check_dims(mas, spec, dec)?;
    let costs = graphcost::cluster_costs(spec, dec)?;
    costs
        .par_iter()
        .map(|c| {
            let (a, b) = mas.cluster_matrices(&c.agents);
            Ok(matops::solve_care(&a, &b, &c.qhat, &c.rhat)?)
        })
        .collect()
}

fn check_dims(mas: &MasSystem, spec: &CostSpec, dec: &Decomposition) -> Result<(), HierError> {
    if mas.n_agents() != spec.n_agents()
        || mas.state_dim() != spec.state_dim()
        || mas.input_dim() != spec.input_dim()
        || dec.n_agents() != spec.n_agents()
    {
        return Err(HierError::DimensionMismatch(format!(
            "system {}x(n={}, m={}), cost {}x(n={}, m={}), decomposition of {}",
            mas.n_agents(),
            mas.state_dim(),
            mas.input_dim(),
            spec.n_agents(),
            spec.state_dim(),
            spec.input_dim(),
            dec.n_agents()
        )));
    }
    Ok(())
}

/// Row/column index lists of a cluster in the natural stacked ordering.
fn indices(agents: &[usize], width: usize) -> Vec<usize> {
    agents
        .iter()
        .flat_map(|&i| (i * width)..(i * width + width))
        .collect()
}

/// Writes `block` into `out` at the given row and column index lists.
fn scatter(out: &mut DMatrix<f64>, rows: &[usize], cols: &[usize], block: &DMatrix<f64>) {
    for (a, &r) in rows.iter().enumerate() {
        for (b, &c) in cols.iter().enumerate() {
            out[(r, c)] = block[(a, b)];
        }
    }
}

/// `R̃ = Ξ (G₂⊗Q̃) Ξᵀ` with `Ξ = diag((𝓟ⱼ𝓑ⱼ)⁺)` in natural agent order.
/// `pb_blocks[j]` is `𝓟ⱼ𝓑ⱼ` (`nNⱼ × mNⱼ`).
pub fn compute_rtilde_from_pb(
    pb_blocks: &[DMatrix<f64>],
    dec: &Decomposition,
    g2q: &DMatrix<f64>,
    n: usize,
    m: usize,
) -> Result<DMatrix<f64>, HierError> {
    let big_n = dec.n_agents();
    if g2q.shape() != (n * big_n, n * big_n) || pb_blocks.len() != dec.s() {
        return Err(HierError::DimensionMismatch(format!(
            "G2⊗Q̃ is {:?}, expected {}x{}; {} PB blocks for {} clusters",
            g2q.shape(),
            n * big_n,
            n * big_n,
            pb_blocks.len(),
            dec.s()
        )));
    }
    let mut xi = DMatrix::zeros(m * big_n, n * big_n);
    for (agents, pb) in dec.clusters().iter().zip(pb_blocks) {
        if pb.shape() != (n * agents.len(), m * agents.len()) {
            return Err(HierError::DimensionMismatch(format!(
                "PB block is {:?}, cluster needs {}x{}",
                pb.shape(),
                n * agents.len(),
                m * agents.len()
            )));
        }
        scatter(&mut xi, &indices(agents, m), &indices(agents, n), &matops::pinv(pb, None));
    }
    Ok(matops::symmetrize(&(&xi * g2q * xi.transpose())))
}

/// `R̃` from model-based `𝓟ⱼ` and the full input matrix `𝓑`.
pub fn compute_rtilde(
    p_blocks: &[SymMatrix],
    b: &DMatrix<f64>,
    dec: &Decomposition,
    g2q: &DMatrix<f64>,
    n: usize,
    m: usize,
) -> Result<DMatrix<f64>, HierError> {
    let pb = cluster_pb(p_blocks, b, dec, n, m)?;
    compute_rtilde_from_pb(&pb, dec, g2q, n, m)
}

fn cluster_pb(
    p_blocks: &[SymMatrix],
    b: &DMatrix<f64>,
    dec: &Decomposition,
    n: usize,
    m: usize,
) -> Result<Vec<DMatrix<f64>>, HierError> {
    let big_n = dec.n_agents();
    if b.shape() != (n * big_n, m * big_n) || p_blocks.len() != dec.s() {
        return Err(HierError::DimensionMismatch("B or P blocks do not match the decomposition".into()));
    }
    Ok(dec
        .clusters()
        .iter()
        .zip(p_blocks)
        .map(|(agents, p)| {
            let bj = b.select_rows(&indices(agents, n)).select_columns(&indices(agents, m));
            p.as_matrix() * bj
        })
        .collect())
}

/// Hierarchical gain `K_h = (R⁻¹ + R̃)𝓑ᵀ𝓟` in natural agent order.
#[derive(Debug, Clone)]
pub struct HierarchicalGain {
    pub decomposition: Decomposition,
    pub n: usize,
    pub m: usize,
    pub p_blocks: Vec<SymMatrix>,
    pub r_tilde: DMatrix<f64>,
    pub k_local: DMatrix<f64>,
    pub k_global: DMatrix<f64>,
    pub k_h: DMatrix<f64>,
    /// `𝓑ᵀ𝓟` (`mN × nN`).
    pub bt_p: DMatrix<f64>,
}

/// Terms of one agent's control law.
#[derive(Debug, Clone)]
pub struct AgentGain {
    pub agent: usize,
    pub cluster: usize,
    /// `Rᵢ⁻¹Bᵢᵀ𝓟_{jⁱ,i}` acting on the own cluster state.
    pub local: DMatrix<f64>,
    /// `(k, R̃ᵢ(jⁱ,k)𝓑ₖᵀ𝓟ₖ)` for every cluster `k` carrying a nonzero coupling term.
    pub global: Vec<(usize, DMatrix<f64>)>,
}

impl HierarchicalGain {
    /// `𝓟 = diag(𝓟ⱼ)` scattered to natural order.
    pub fn p_full(&self) -> DMatrix<f64> {
        let big_n = self.decomposition.n_agents();
        let mut p = DMatrix::zeros(self.n * big_n, self.n * big_n);
        for (agents, pj) in self.decomposition.clusters().iter().zip(&self.p_blocks) {
            let idx = indices(agents, self.n);
            scatter(&mut p, &idx, &idx, pj.as_matrix());
        }
        p
    }

    /// Control law of agent `i`: `uᵢ = −local·x_{jⁱ} − Σₖ globalₖ·xₖ`.
    pub fn agent_gain(&self, i: usize) -> AgentGain {
        let dec = &self.decomposition;
        let clusters = dec.clusters();
        let j = dec.cluster_of(i);
        let rows: Vec<usize> = (i * self.m..(i + 1) * self.m).collect();
        let own = indices(&clusters[j], self.n);
        let k_local_rows = self.k_local.select_rows(&rows);
        let local = k_local_rows.select_columns(&own);
        let k_global_rows = self.k_global.select_rows(&rows);
        let global = clusters
            .iter()
            .enumerate()
            .filter_map(|(k, members)| {
                let block = k_global_rows.select_columns(&indices(members, self.n));
                (block.amax() > ZERO_BLOCK_TOL).then_some((k, block))
            })
            .collect();
        AgentGain {
            agent: i,
            cluster: j,
            local,
            global,
        }
    }

    /// `𝓐 − 𝓑K_h`.
    pub fn closed_loop(&self, mas: &MasSystem) -> DMatrix<f64> {
        mas.a_full() - mas.b_full() * &self.k_h
    }

    pub fn spectral_abscissa(&self, mas: &MasSystem) -> f64 {
        matops::spectral_abscissa(&self.closed_loop(mas))
    }

    /// Largest entry of the `R̃` block between clusters `a` and `b`.
    pub fn rtilde_block_max(&self, a: usize, b: usize) -> f64 {
        let clusters = self.decomposition.clusters();
        self.r_tilde
            .select_rows(&indices(&clusters[a], self.m))
            .select_columns(&indices(&clusters[b], self.m))
            .amax()
    }
}

/// Assembles `K_h` from per-cluster `𝓑ⱼᵀ𝓟ⱼ`, `R` blocks and `R̃`.
pub fn assemble_from_btp(
    dec: &Decomposition,
    n: usize,
    m: usize,
    p_blocks: Vec<SymMatrix>,
    btp_blocks: &[DMatrix<f64>],
    r_blocks: &[DMatrix<f64>],
    r_tilde: DMatrix<f64>,
) -> Result<HierarchicalGain, HierError> {
    let big_n = dec.n_agents();
    if btp_blocks.len() != dec.s() || r_blocks.len() != big_n || r_tilde.shape() != (m * big_n, m * big_n) {
        return Err(HierError::DimensionMismatch("gain assembly inputs are inconsistent".into()));
    }
    let mut bt_p = DMatrix::zeros(m * big_n, n * big_n);
    for (agents, btp) in dec.clusters().iter().zip(btp_blocks) {
        if btp.shape() != (m * agents.len(), n * agents.len()) {
            return Err(HierError::DimensionMismatch(format!(
                "BᵀP block is {:?}, cluster needs {}x{}",
                btp.shape(),
                m * agents.len(),
                n * agents.len()
            )));
        }
        scatter(&mut bt_p, &indices(agents, m), &indices(agents, n), btp);
    }
    let r_inv = matops::block_diag(
        &r_blocks
            .iter()
            .map(matops::spd_inverse)
            .collect::<Result<Vec<_>, _>>()?,
    );
    let k_local = &r_inv * &bt_p;
    let k_global = &r_tilde * &bt_p;
    let k_h = &k_local + &k_global;
    Ok(HierarchicalGain {
        decomposition: dec.clone(),
        n,
        m,
        p_blocks,
        r_tilde,
        k_local,
        k_global,
        k_h,
        bt_p,
    })
}

/// Model-based assembly from `𝓟ⱼ`, `𝓑`, `R` and `R̃`.
pub fn assemble_gain(
    p_blocks: Vec<SymMatrix>,
    b: &DMatrix<f64>,
    r_blocks: &[DMatrix<f64>],
    r_tilde: DMatrix<f64>,
    dec: &Decomposition,
    n: usize,
    m: usize,
) -> Result<HierarchicalGain, HierError> {
    let pb = cluster_pb(&p_blocks, b, dec, n, m)?;
    let btp: Vec<_> = pb.iter().map(|x| x.transpose()).collect();
    assemble_from_btp(dec, n, m, p_blocks, &btp, r_blocks, r_tilde)
}

/// Full model-based pipeline: cluster solves, `R̃`, assembly.
pub fn hierarchical_gain(
    mas: &MasSystem,
    spec: &CostSpec,
    dec: &Decomposition,
) -> Result<HierarchicalGain, HierError> {
    let p_blocks = solve_clusters(mas, spec, dec)?;
    let (n, m) = (spec.state_dim(), spec.input_dim());
    let b = mas.b_full();
    let g2q = spec.g2_qtilde(dec)?;
    let r_tilde = compute_rtilde(&p_blocks, &b, dec, &g2q, n, m)?;
    assemble_gain(p_blocks, &b, &spec.r_blocks, r_tilde, dec, n, m)
}

/// Centralized optimum `(P, K = R⁻¹𝓑ᵀP)`.
pub fn centralized_lqr(mas: &MasSystem, spec: &CostSpec) -> Result<(SymMatrix, DMatrix<f64>), HierError> {
    let b = mas.b_full();
    let r = spec.r();
    let p = matops::solve_care(&mas.a_full(), &b, &graphcost::assemble_q(spec), &r)?;
    let k = matops::spd_inverse(&r)? * b.transpose() * p.as_matrix();
    Ok((p, k))
}

/// Initial-state model for the gap analysis.
#[derive(Debug, Clone)]
pub enum GapInput {
    /// A fixed initial state.
    State(DVector<f64>),
    /// Zero-mean initial state with covariance `σ²I`.
    Sigma(f64),
}

/// Suboptimality diagnostics of a hierarchical gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    /// `J(x₀, u*)` (or its expectation).
    pub j_opt: f64,
    /// `J(x₀, u_h)`.
    pub j_h: f64,
    /// `x₀ᵀ𝓟x₀`.
    pub j_approx: f64,
    pub delta_j: f64,
    /// `σ²tr(V)` for random initial states, `x₀ᵀVx₀` for a fixed one.
    pub expected_gap: f64,
    pub trace_v: f64,
    pub trace_w: f64,
    pub f1: f64,
    pub f2: f64,
    /// `λ_max(𝓟) cond(𝓟) tr(W) / λ_min(Q̄)`; infinite unless `Q̄ ≻ 0`.
    pub trace_v_bound: f64,
    pub cond_p: f64,
    pub trace_g2: f64,
    pub sop: f64,
    /// `𝓑` has a zero column or no nonzero singular value, so `f₁, f₂` are not meaningful.
    pub vacuous: bool,
}

/// Evaluates the cost gap, its trace formula and the trace bounds for `gain`.
pub fn gap_report(
    mas: &MasSystem,
    spec: &CostSpec,
    dec: &Decomposition,
    gain: &HierarchicalGain,
    input: &GapInput,
) -> Result<GapReport, HierError> {
    check_dims(mas, spec, dec)?;
    let a = mas.a_full();
    let b = mas.b_full();
    let q = graphcost::assemble_q(spec);
    let r = spec.r();
    let (p, k) = centralized_lqr(mas, spec)?;
    let x_h = sim::cost_matrix(&a, &b, &q, &r, &gain.k_h)?;
    let p_hier = SymMatrix::new(gain.p_full())?;
    let a_s = &a - &b * &gain.k_h;
    let dk = &gain.k_h - &k;
    let w = dk.transpose() * &r * &dk;
    let v = matops::solve_lyapunov(&a_s, &w).map_err(|e| match e {
        MatError::UnstableMatrix { abscissa } => HierError::UnstableClosedLoop { abscissa },
        other => other.into(),
    })?;

    let eval = |m: &DMatrix<f64>| match input {
        GapInput::State(x0) => x0.dot(&(m * x0)),
        GapInput::Sigma(sigma) => sigma * sigma * m.trace(),
    };
    if let GapInput::State(x0) = input {
        if x0.len() != a.nrows() {
            return Err(HierError::DimensionMismatch("x0 does not match the system".into()));
        }
    }
    let j_opt = eval(p.as_matrix());
    let j_h = eval(x_h.as_matrix());
    let j_approx = eval(p_hier.as_matrix());

    let trace_g2 = graphcost::split_graph(&spec.graph, dec)?.trace_g2();
    let lmin_p = p_hier.lambda_min();
    let lmax_p = p_hier.lambda_max();
    let cond_p = lmax_p / lmin_p;
    let trace_w = w.trace();
    let qbar = SymMatrix::new(spec.qbar())?;
    let lmin_qbar = qbar.lambda_min();
    let trace_v_bound = if lmin_qbar > matops::PSD_TOL {
        lmax_p * cond_p * trace_w / lmin_qbar
    } else {
        f64::INFINITY
    };

    let sv = matops::singular_values(&b);
    let sv_max = sv.iter().copied().fold(0.0, f64::max);
    let cutoff = b.nrows().max(b.ncols()) as f64 * f64::EPSILON * sv_max;
    let sigma_l = sv.iter().copied().filter(|&x| x > cutoff).fold(f64::INFINITY, f64::min);
    let zero_column = (0..b.ncols()).any(|c| b.column(c).amax() == 0.0);
    let vacuous = zero_column || !sigma_l.is_finite();
    let tr_qt = spec.qtilde.trace();
    let lmax_r = SymMatrix::new(r.clone())?.lambda_max();
    let tr_bm = (&b * matops::spd_inverse(&r)? * b.transpose()).trace();
    let (f1, f2) = if vacuous {
        (f64::NAN, f64::NAN)
    } else {
        let f1 = trace_g2.powi(2) * tr_qt.powi(2) / (lmin_p.powi(2) * sigma_l.powi(2)) * lmax_r;
        let f2 = (p.lambda_max() - lmin_p)
            * (tr_bm + sv_max.powi(2) * trace_g2 * tr_qt / (lmin_p.powi(2) * sigma_l.powi(2)));
        (f1, f2)
    };

    Ok(GapReport {
        j_opt,
        j_h,
        j_approx,
        delta_j: j_h - j_opt,
        expected_gap: eval(v.as_matrix()),
        trace_v: v.trace(),
        trace_w,
        f1,
        f2,
        trace_v_bound,
        cond_p,
        trace_g2,
        sop: (j_h - j_opt) / j_opt,
        vacuous,
    })
}
