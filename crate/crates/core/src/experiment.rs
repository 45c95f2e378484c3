//! End-to-end pipeline (decompose → learn or solve → assemble → evaluate)
//! and the benchmark tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adp::{self, AdpError, LearnConfig};
use crate::graphcost::{self, CostGraph, CostSpec, Decomposition, GraphError};
use crate::hierctrl::{self, HierError, HierarchicalGain};
use crate::matops::{self, MatError, SymMatrix};
use crate::partition::{self, ConstraintSet, PartitionError, PartitionProblem};
use crate::sim::{self, Agent, BlackBoxPlant, FormationConfig, FormationScenario, MasSystem, SimError, SimOptions};

/// Above this many unknowns the centralized learner is skipped in benchmarks.
pub const CENTRALIZED_UNKNOWN_LIMIT: usize = 1500;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed json")]
    Json(#[from] serde_json::Error),
    #[error("csv error")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Hier(#[from] HierError),
    #[error(transparent)]
    Adp(#[from] AdpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mat(#[from] MatError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ------------------------------------------------------------ scenario files

/// One agent in a scenario file, matrices as row lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFile {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Explicit system and cost. Agent ids in `edges` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub n_agents: usize,
    pub edges: Vec<(usize, usize, f64)>,
    /// One block for all agents, or one per agent.
    pub qbar: Vec<Vec<Vec<f64>>>,
    pub qtilde: Vec<Vec<f64>>,
    /// One block for all agents, or one per agent.
    pub r: Vec<Vec<Vec<f64>>>,
    pub agents: Vec<AgentFile>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ExperimentError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(ExperimentError::InvalidConfig("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn expand(blocks: &[Vec<Vec<f64>>], n: usize, what: &str) -> Result<Vec<DMatrix<f64>>, ExperimentError> {
    let mats = blocks.iter().map(|b| to_matrix(b)).collect::<Result<Vec<_>, _>>()?;
    match mats.len() {
        1 => Ok(vec![mats[0].clone(); n]),
        k if k == n => Ok(mats),
        k => Err(ExperimentError::InvalidConfig(format!("{what}: {k} blocks for {n} agents"))),
    }
}

impl ScenarioFile {
    pub fn build(&self) -> Result<(MasSystem, CostSpec), ExperimentError> {
        let edges = self
            .edges
            .iter()
            .map(|&(i, j, w)| {
                if i == 0 || j == 0 {
                    Err(ExperimentError::InvalidConfig("edge ids are 1-based".into()))
                } else {
                    Ok((i - 1, j - 1, w))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let graph = CostGraph::from_edges(self.n_agents, &edges)?;
        let spec = CostSpec::new(
            expand(&self.qbar, self.n_agents, "qbar")?,
            to_matrix(&self.qtilde)?,
            graph,
            expand(&self.r, self.n_agents, "r")?,
        )?;
        if self.agents.len() != self.n_agents {
            return Err(ExperimentError::InvalidConfig(format!(
                "{} agent models for {} agents",
                self.agents.len(),
                self.n_agents
            )));
        }
        let agents = self
            .agents
            .iter()
            .map(|a| Ok(Agent { a: to_matrix(&a.a)?, b: to_matrix(&a.b)? }))
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok((MasSystem::new(agents)?, spec))
    }

    pub fn from_parts(mas: &MasSystem, spec: &CostSpec) -> Self {
        Self {
            n_agents: spec.n_agents(),
            edges: spec.graph.edges().iter().map(|&(i, j, w)| (i + 1, j + 1, w)).collect(),
            qbar: spec.qbar_blocks.iter().map(from_matrix).collect(),
            qtilde: from_matrix(&spec.qtilde),
            r: spec.r_blocks.iter().map(from_matrix).collect(),
            agents: mas
                .agents()
                .iter()
                .map(|a| AgentFile { a: from_matrix(&a.a), b: from_matrix(&a.b) })
                .collect(),
        }
    }
}

/// Where the system and cost come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioRef {
    CliquePath { s_cliques: usize, c: usize, n: usize, m: usize },
    Formation(FormationConfig),
    File { path: PathBuf },
}

/// Built scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub mas: MasSystem,
    pub spec: CostSpec,
    pub formation: Option<FormationScenario>,
    /// Clique size, when the scenario is a clique path.
    pub clique: Option<(usize, usize)>,
}

impl ScenarioRef {
    pub fn build(&self, base: Option<&Path>) -> Result<Scenario, ExperimentError> {
        match self {
            ScenarioRef::CliquePath { s_cliques, c, n, m } => {
                let (mas, spec) = sim::clique_path_scenario(*s_cliques, *c, *n, *m)?;
                Ok(Scenario { mas, spec, formation: None, clique: Some((*s_cliques, *c)) })
            }
            ScenarioRef::Formation(cfg) => {
                let sc = sim::formation_scenario(cfg)?;
                Ok(Scenario { mas: sc.system(), spec: sc.cost_spec(), formation: Some(sc), clique: None })
            }
            ScenarioRef::File { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let text = fs::read_to_string(&full).map_err(io_err(&full))?;
                let file: ScenarioFile = serde_json::from_str(&text)?;
                let (mas, spec) = file.build()?;
                Ok(Scenario { mas, spec, formation: None, clique: None })
            }
        }
    }
}

// ------------------------------------------------------------ configuration

/// How the decomposition is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecompositionChoice {
    /// Maximize κ with `s` clusters (formation constraints added automatically).
    Kappa { s: usize },
    /// Minimize the cut with `s` clusters (formation constraints added automatically).
    Scut { s: usize },
    /// 1-based cluster id per agent.
    Explicit { assignment: Vec<usize> },
    /// Consecutive clusters of the given sizes.
    Sizes { sizes: Vec<usize> },
    /// The cliques of a clique-path scenario.
    Cliques,
    /// A single cluster (centralized).
    Single,
}

/// Initial-state distribution for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum X0Scheme {
    /// Components uniform over `{1, −1, 0}`.
    Ternary,
    /// Components normal with zero mean and the given variance.
    Normal { variance: f64 },
    /// The scenario's own initial state, simulated with its disturbance.
    Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub scheme: X0Scheme,
    pub samples: usize,
    pub seed: u64,
    /// Integration settings for the `Scenario` scheme.
    pub sim: SimOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scheme: X0Scheme::Normal { variance: 0.5 },
            samples: 1000,
            seed: 1,
            sim: SimOptions {
                dt: 1e-2,
                t_max: 200.0,
                stop_window: None,
                record_every: 10,
                ..SimOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioRef,
    pub decomposition: DecompositionChoice,
    /// `None` solves the cluster Riccati equations from the model.
    #[serde(default)]
    pub learning: Option<LearnConfig>,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Include wall-clock learning time in the report.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.evaluation.samples == 0 {
            return Err(ExperimentError::InvalidConfig("sample count must be at least 1".into()));
        }
        if let X0Scheme::Normal { variance } = self.evaluation.scheme {
            if !(variance > 0.0) {
                return Err(ExperimentError::InvalidConfig("variance must be positive".into()));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------ reports

/// One row of a decomposition comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub decomposition: String,
    pub kappa: usize,
    pub trace_g2: f64,
    pub cond_p: f64,
    pub cond_qhat: f64,
    /// Mean cost of the evaluated controller.
    pub j_mean: f64,
    pub j_u: f64,
    /// Mean optimal cost over the same initial states.
    pub j_opt: f64,
    pub n_c: usize,
    /// Wall-clock learning seconds; machine dependent.
    pub learn_time: Option<f64>,
    /// `(J − J*)/J*` of the means.
    pub sop: f64,
}

pub fn write_rows<W: std::io::Write>(rows: &[ReportRow], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| ExperimentError::Io { path: PathBuf::from("<csv>"), source: e })?;
    Ok(())
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String, ExperimentError> {
    let mut buf = Vec::new();
    write_rows(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Seeded initial states.
pub fn sample_x0(scheme: X0Scheme, dim: usize, samples: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match scheme {
        X0Scheme::Ternary | X0Scheme::Scenario => (0..samples)
            .map(|_| DVector::from_fn(dim, |_, _| [1.0, -1.0, 0.0][rng.random_range(0..3)]))
            .collect(),
        X0Scheme::Normal { variance } => {
            let normal = Normal::new(0.0, variance.sqrt()).expect("variance is positive");
            (0..samples)
                .map(|_| DVector::from_fn(dim, |_, _| rng.sample(normal)))
                .collect()
        }
    }
}

/// Mean `J` and `J_u` of gains `K` over many initial states, against the optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub j_u: f64,
    pub j_opt: f64,
    pub j_u_opt: f64,
}

impl Evaluation {
    pub fn sop(&self) -> f64 {
        (self.j - self.j_opt) / self.j_opt
    }
}

/// Evaluates `k` against the centralized optimum.
pub fn evaluate(sc: &Scenario, k: &DMatrix<f64>, eval: &EvalConfig) -> Result<Evaluation, ExperimentError> {
    let (_, k_opt) = hierctrl::centralized_lqr(&sc.mas, &sc.spec)?;
    match eval.scheme {
        X0Scheme::Scenario => {
            let x0 = sc
                .formation
                .as_ref()
                .map(|f| f.x0())
                .ok_or_else(|| ExperimentError::InvalidConfig("scenario scheme needs a formation".into()))?;
            let run = |gain: &DMatrix<f64>| {
                sim::simulate_cost(&sc.mas, &sc.spec, &sim::linear_feedback(gain), &x0, &eval.sim)
            };
            let (j, j_u) = run(k)?;
            let (j_opt, j_u_opt) = run(&k_opt)?;
            Ok(Evaluation { j, j_u, j_opt, j_u_opt })
        }
        scheme => {
            let a = sc.mas.a_full();
            let b = sc.mas.b_full();
            let q = graphcost::assemble_q(&sc.spec);
            let r = sc.spec.r();
            let zero = DMatrix::zeros(q.nrows(), q.nrows());
            let eye = DMatrix::identity(r.nrows(), r.nrows());
            let x = sim::cost_matrix(&a, &b, &q, &r, k)?;
            let xu = sim::cost_matrix(&a, &b, &zero, &eye, k)?;
            let x_opt = sim::cost_matrix(&a, &b, &q, &r, &k_opt)?;
            let xu_opt = sim::cost_matrix(&a, &b, &zero, &eye, &k_opt)?;
            let xs = sample_x0(scheme, a.nrows(), eval.samples, eval.seed);
            let mean = |m: &SymMatrix| xs.iter().map(|x0| m.quad(x0)).sum::<f64>() / xs.len() as f64;
            Ok(Evaluation { j: mean(&x), j_u: mean(&xu), j_opt: mean(&x_opt), j_u_opt: mean(&xu_opt) })
        }
    }
}

/// Chooses the decomposition for a scenario.
pub fn choose_decomposition(sc: &Scenario, choice: &DecompositionChoice) -> Result<Decomposition, ExperimentError> {
    let n = sc.spec.n_agents();
    let constraints = sc
        .formation
        .as_ref()
        .map_or_else(ConstraintSet::none, |f| ConstraintSet::formation(&f.leaders, n));
    let dec = match choice {
        DecompositionChoice::Kappa { s } => {
            let p = PartitionProblem::new(sc.spec.graph.clone(), *s).with_constraints(constraints);
            partition::max_kappa(&p)?.decomposition
        }
        DecompositionChoice::Scut { s } => {
            let p = PartitionProblem::new(sc.spec.graph.clone(), *s).with_constraints(constraints);
            partition::min_scut(&p)?.decomposition
        }
        DecompositionChoice::Explicit { assignment } => Decomposition::from_one_based(assignment)?,
        DecompositionChoice::Sizes { sizes } => Decomposition::contiguous(sizes)?,
        DecompositionChoice::Cliques => {
            let (s, c) = sc
                .clique
                .ok_or_else(|| ExperimentError::InvalidConfig("cliques need a clique-path scenario".into()))?;
            sim::clique_clusters(s, c)
        }
        DecompositionChoice::Single => Decomposition::single(n),
    };
    if dec.n_agents() != n {
        return Err(ExperimentError::InvalidConfig(format!(
            "decomposition covers {} agents, scenario has {n}",
            dec.n_agents()
        )));
    }
    Ok(dec)
}

/// Initial gains for learning: zero when the cluster is open-loop stable,
/// otherwise a white-box shift stabilizer.
pub fn initial_gains(mas: &MasSystem, dec: &Decomposition) -> Result<Vec<DMatrix<f64>>, ExperimentError> {
    dec.clusters()
        .iter()
        .map(|c| {
            let (a, b) = mas.cluster_matrices(c);
            Ok(matops::stabilizing_gain(&a, &b)?)
        })
        .collect()
}

/// Either learned or model-based hierarchical gain, with learning time.
pub fn build_gain(
    sc: &Scenario,
    dec: &Decomposition,
    learning: Option<&LearnConfig>,
) -> Result<(HierarchicalGain, Option<f64>), ExperimentError> {
    match learning {
        None => Ok((hierctrl::hierarchical_gain(&sc.mas, &sc.spec, dec)?, None)),
        Some(cfg) => {
            let plants: Vec<_> = dec.clusters().iter().map(|c| BlackBoxPlant::cluster(&sc.mas, c)).collect();
            let k0 = initial_gains(&sc.mas, dec)?;
            let res = adp::learn_hierarchical(&plants, &sc.spec, dec, Some(&k0), cfg)?;
            Ok((res.gain, Some(res.total_time.as_secs_f64())))
        }
    }
}

/// Per-cluster learning diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnSummaryRow {
    pub cluster: usize,
    pub agents: String,
    pub unknowns: usize,
    pub iterations: usize,
    pub converged: bool,
    pub regressor_cond: f64,
    /// `‖P̂ − P‖_F / ‖P‖_F` against the model-based cluster Riccati solution.
    pub p_rel_error: f64,
    pub seconds: Option<f64>,
}

/// Learns every cluster and reports how close each `P̂ⱼ` is to the model-based `𝓟ⱼ`.
pub fn learn_with_summary(
    sc: &Scenario,
    dec: &Decomposition,
    cfg: &LearnConfig,
    record_timing: bool,
) -> Result<(adp::HierarchicalLearnResult, Vec<LearnSummaryRow>), ExperimentError> {
    let plants: Vec<_> = dec.clusters().iter().map(|c| BlackBoxPlant::cluster(&sc.mas, c)).collect();
    let k0 = initial_gains(&sc.mas, dec)?;
    let res = adp::learn_hierarchical(&plants, &sc.spec, dec, Some(&k0), cfg)?;
    let exact = hierctrl::solve_clusters(&sc.mas, &sc.spec, dec)?;
    let (n, m) = (sc.spec.state_dim(), sc.spec.input_dim());
    let rows = dec
        .clusters()
        .iter()
        .enumerate()
        .map(|(j, agents)| {
            let lr = &res.clusters[j];
            let p = exact[j].as_matrix();
            LearnSummaryRow {
                cluster: j + 1,
                agents: agents.iter().map(|a| (a + 1).to_string()).collect::<Vec<_>>().join(" "),
                unknowns: adp::unknown_count(n * agents.len(), m * agents.len()),
                iterations: lr.iterations,
                converged: lr.converged,
                regressor_cond: lr.regressor_cond,
                p_rel_error: (lr.p_hat.as_matrix() - p).norm() / p.norm(),
                seconds: record_timing.then(|| res.cluster_times[j].as_secs_f64()),
            }
        })
        .collect();
    Ok((res, rows))
}

/// Report row for a decomposition and gain.
pub fn report_row(
    sc: &Scenario,
    dec: &Decomposition,
    gain: &HierarchicalGain,
    learn_time: Option<f64>,
    eval: &EvalConfig,
) -> Result<ReportRow, ExperimentError> {
    let e = evaluate(sc, &gain.k_h, eval)?;
    let p = SymMatrix::new(gain.p_full())?;
    let qhat = SymMatrix::new(sc.spec.qhat(dec)?)?;
    Ok(ReportRow {
        decomposition: dec.to_string(),
        kappa: graphcost::kappa(&sc.spec.graph, dec)?,
        trace_g2: graphcost::split_graph(&sc.spec.graph, dec)?.trace_g2(),
        cond_p: p.lambda_max() / p.lambda_min(),
        cond_qhat: qhat.lambda_max() / qhat.lambda_min(),
        j_mean: e.j,
        j_u: e.j_u,
        j_opt: e.j_opt,
        n_c: graphcost::comm_links(&gain.k_h, sc.spec.n_agents(), None)?.count(),
        learn_time,
        sop: e.sop(),
    })
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub decomposition: Decomposition,
    pub gain: HierarchicalGain,
    pub row: ReportRow,
    pub feasibility: Option<Vec<sim::ClusterFeasibility>>,
    pub files: Vec<PathBuf>,
}

/// Decomposition summary written next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionFile {
    /// 1-based cluster id per agent.
    pub assignment: Vec<usize>,
    pub s: usize,
    pub label: String,
    pub kappa: usize,
    pub trace_g2: f64,
}

impl DecompositionFile {
    pub fn new(graph: &CostGraph, dec: &Decomposition) -> Result<Self, ExperimentError> {
        Ok(Self {
            assignment: dec.one_based(),
            s: dec.s(),
            label: dec.to_string(),
            kappa: graphcost::kappa(graph, dec)?,
            trace_g2: graphcost::split_graph(graph, dec)?.trace_g2(),
        })
    }
}

pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Runs the full pipeline. `base` resolves relative scenario paths.
pub fn run(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let sc = cfg.scenario.build(base)?;
    let dec = choose_decomposition(&sc, &cfg.decomposition)?;
    let feasibility = sc
        .formation
        .as_ref()
        .map(|f| sim::formation_feasibility(f, &dec))
        .transpose()?;
    let (gain, time) = build_gain(&sc, &dec, cfg.learning.as_ref())?;
    let time = if cfg.record_timing { time } else { None };
    let row = report_row(&sc, &dec, &gain, time, &cfg.evaluation)?;
    let mut files = Vec::new();
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let report = dir.join("report.csv");
        fs::write(&report, rows_to_csv(std::slice::from_ref(&row))?).map_err(io_err(&report))?;
        files.push(report);
        let dfile = dir.join("decomposition.json");
        let text = serde_json::to_string_pretty(&DecompositionFile::new(&sc.spec.graph, &dec)?)?;
        fs::write(&dfile, text).map_err(io_err(&dfile))?;
        files.push(dfile);
        let kfile = dir.join("gain_kh.csv");
        write_matrix_csv(&gain.k_h, &kfile)?;
        files.push(kfile);
        let rfile = dir.join("r_tilde.csv");
        write_matrix_csv(&gain.r_tilde, &rfile)?;
        files.push(rfile);
        if let Some(f) = &sc.formation {
            let traj = sim::integrate(
                &sc.mas,
                &sim::linear_feedback(&gain.k_h),
                &f.x0(),
                Some((&graphcost::assemble_q(&sc.spec), &sc.spec.r())),
                &cfg.evaluation.sim,
            )?;
            let tfile = dir.join("trajectory.csv");
            let out = fs::File::create(&tfile).map_err(io_err(&tfile))?;
            traj.write_csv(out)?;
            files.push(tfile);
        }
    }
    Ok(RunOutput { decomposition: dec, gain, row, feasibility, files })
}

// ------------------------------------------------------------ benchmarks

/// Which benchmark table to regenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchTable {
    RlCompare,
    DecompositionCompare,
    Formation,
}

impl std::str::FromStr for BenchTable {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rl-compare" => Ok(Self::RlCompare),
            "decomposition-compare" => Ok(Self::DecompositionCompare),
            "formation" => Ok(Self::Formation),
            other => Err(ExperimentError::InvalidConfig(format!("unknown table {other}"))),
        }
    }
}

/// Row of the RL comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRow {
    pub s: usize,
    pub c: usize,
    pub n: usize,
    pub m: usize,
    /// Centralized learning seconds, `None` when skipped (`**`).
    pub rl_time: Option<f64>,
    pub hrl_time: Option<f64>,
    pub rl_unknowns: usize,
    /// Largest per-cluster unknown count.
    pub hrl_unknowns: usize,
    pub j_opt: f64,
    pub j_hrl: f64,
    pub sop: f64,
}

/// Benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub learning: LearnConfig,
    /// Run the learners and report their times; otherwise model-based gains.
    pub learn: bool,
    /// Run the centralized learner when its unknown count allows.
    pub centralized: bool,
    pub record_timing: bool,
    /// Initial states per evaluation.
    pub samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            learning: LearnConfig::default(),
            learn: true,
            centralized: true,
            record_timing: true,
            samples: 1000,
        }
    }
}

/// Cases of the RL comparison: `(s, c, n, m)`.
pub const RL_CASES: [(usize, usize, usize, usize); 4] = [(3, 2, 4, 2), (3, 3, 4, 2), (3, 4, 4, 2), (4, 4, 8, 4)];

pub fn rl_compare(cfg: &BenchConfig) -> Result<Vec<RlRow>, ExperimentError> {
    RL_CASES
        .iter()
        .map(|&(s, c, n, m)| rl_row(s, c, n, m, cfg))
        .collect()
}

pub fn rl_row(s: usize, c: usize, n: usize, m: usize, cfg: &BenchConfig) -> Result<RlRow, ExperimentError> {
    let sc = ScenarioRef::CliquePath { s_cliques: s, c, n, m }.build(None)?;
    let dec = sim::clique_clusters(s, c);
    let learning = LearnConfig { seed: cfg.seed, ..cfg.learning.clone() };
    let (gain, hrl_time) = build_gain(&sc, &dec, cfg.learn.then_some(&learning))?;
    let big_n = s * c;
    let rl_unknowns = adp::unknown_count(n * big_n, m * big_n);
    let rl_time = if cfg.learn && cfg.centralized && rl_unknowns <= CENTRALIZED_UNKNOWN_LIMIT {
        let start = Instant::now();
        let plant = BlackBoxPlant::new(sc.mas.clone());
        let k0 = DMatrix::zeros(m * big_n, n * big_n);
        adp::learn_plant(&plant, &graphcost::assemble_q(&sc.spec), &sc.spec.r(), &k0, &learning, cfg.seed)?;
        Some(start.elapsed().as_secs_f64())
    } else {
        None
    };
    let eval = EvalConfig { scheme: X0Scheme::Ternary, samples: cfg.samples, seed: cfg.seed, ..EvalConfig::default() };
    let e = evaluate(&sc, &gain.k_h, &eval)?;
    let timing = |t: Option<f64>| if cfg.record_timing { t } else { None };
    Ok(RlRow {
        s,
        c,
        n,
        m,
        rl_time: timing(rl_time),
        hrl_time: timing(hrl_time),
        rl_unknowns,
        hrl_unknowns: adp::unknown_count(n * c, m * c),
        j_opt: e.j_opt,
        j_hrl: e.j,
        sop: e.sop(),
    })
}

/// The three decompositions of the clique-path comparison plus the undecomposed row.
pub fn decomposition_compare(cfg: &BenchConfig) -> Result<Vec<ReportRow>, ExperimentError> {
    let sc = ScenarioRef::CliquePath { s_cliques: 3, c: 3, n: 4, m: 2 }.build(None)?;
    let decs = vec![
        Decomposition::from_one_based(&[1, 1, 2, 2, 2, 2, 2, 3, 3])?,
        choose_decomposition(&sc, &DecompositionChoice::Scut { s: 3 })?,
        choose_decomposition(&sc, &DecompositionChoice::Kappa { s: 3 })?,
        Decomposition::single(9),
    ];
    let eval = EvalConfig {
        scheme: X0Scheme::Normal { variance: 0.5 },
        samples: cfg.samples,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let learning = LearnConfig { seed: cfg.seed, ..cfg.learning.clone() };
    decs.par_iter()
        .map(|dec| {
            let (gain, t) = build_gain(&sc, dec, cfg.learn.then_some(&learning))?;
            let mut row = report_row(&sc, dec, &gain, if cfg.record_timing { t } else { None }, &eval)?;
            if dec.s() == 1 {
                row.decomposition = "undecomposed".into();
            }
            Ok(row)
        })
        .collect()
}

/// Formation decompositions 6-3-3, 1-10-1, 7-2-3, keeping only feasible ones.
pub fn formation_table(cfg: &BenchConfig) -> Result<Vec<ReportRow>, ExperimentError> {
    let sc = ScenarioRef::Formation(FormationConfig::default()).build(None)?;
    let f = sc.formation.as_ref().expect("formation scenario");
    let eval = EvalConfig {
        scheme: X0Scheme::Scenario,
        samples: 1,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let learning = LearnConfig { seed: cfg.seed, ..cfg.learning.clone() };
    let mut rows = Vec::new();
    for sizes in [vec![6, 3, 3], vec![1, 10, 1], vec![7, 2, 3]] {
        let dec = Decomposition::contiguous(&sizes)?;
        if !sim::formation_feasibility(f, &dec)?.iter().all(|c| c.feasible()) {
            continue;
        }
        let (gain, t) = build_gain(&sc, &dec, cfg.learn.then_some(&learning))?;
        let mut row = report_row(&sc, &dec, &gain, if cfg.record_timing { t } else { None }, &eval)?;
        row.decomposition = sizes.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("-");
        rows.push(row);
    }
    Ok(rows)
}

/// Formation LQR versus the baseline stabilization law on the documented mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub j_lqr: f64,
    pub j_u_lqr: f64,
    pub j_baseline: f64,
    pub j_u_baseline: f64,
}

pub fn formation_dominance(cfg: &FormationConfig, opts: &SimOptions) -> Result<DominanceReport, ExperimentError> {
    let f = sim::formation_scenario(cfg)?;
    let mas = f.system();
    let spec = f.cost_spec();
    let (_, k) = hierctrl::centralized_lqr(&mas, &spec)?;
    let x0 = f.x0();
    let (j_lqr, j_u_lqr) = sim::simulate_cost(&mas, &spec, &sim::linear_feedback(&k), &x0, opts)?;
    let kb = f.baseline_gain();
    let (j_baseline, j_u_baseline) = sim::simulate_cost(&mas, &spec, &sim::linear_feedback(&kb), &x0, opts)?;
    Ok(DominanceReport { j_lqr, j_u_lqr, j_baseline, j_u_baseline })
}

/// Serializes any rows as CSV.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, ExperimentError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    for r in rows {
        out.serialize(r)?;
    }
    let bytes = out.into_inner().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_eval() -> EvalConfig {
        EvalConfig { samples: 50, ..EvalConfig::default() }
    }

    #[test]
    fn clique_rows_match_table_metrics() {
        let cfg = ExperimentConfig {
            scenario: ScenarioRef::CliquePath { s_cliques: 3, c: 3, n: 4, m: 2 },
            decomposition: DecompositionChoice::Cliques,
            learning: None,
            evaluation: quick_eval(),
            output_dir: None,
            record_timing: false,
        };
        let out = run(&cfg, None).unwrap();
        assert_eq!((out.row.kappa, out.row.trace_g2, out.row.n_c), (9, 4.0, 27));
        assert!(out.row.sop >= 0.0);
        let cfg = ExperimentConfig { decomposition: DecompositionChoice::Kappa { s: 3 }, ..cfg };
        assert_eq!(run(&cfg, None).unwrap().row.kappa, 15);
    }

    #[test]
    fn scenario_file_round_trip() {
        let (mas, spec) = sim::clique_path_scenario(2, 2, 4, 2).unwrap();
        let file = ScenarioFile::from_parts(&mas, &spec);
        let text = serde_json::to_string(&file).unwrap();
        let back: ScenarioFile = serde_json::from_str(&text).unwrap();
        let (mas2, spec2) = back.build().unwrap();
        assert_eq!(mas2.a_full(), mas.a_full());
        assert_eq!(graphcost::assemble_q(&spec2), graphcost::assemble_q(&spec));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig {
            scenario: ScenarioRef::Formation(FormationConfig::default()),
            decomposition: DecompositionChoice::Sizes { sizes: vec![6, 3, 3] },
            learning: Some(LearnConfig::default()),
            evaluation: EvalConfig::default(),
            output_dir: Some(PathBuf::from("out")),
            record_timing: false,
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = ExperimentConfig { evaluation: EvalConfig { samples: 0, ..EvalConfig::default() }, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn x0_schemes_are_seeded() {
        let a = sample_x0(X0Scheme::Ternary, 5, 3, 7);
        assert_eq!(a, sample_x0(X0Scheme::Ternary, 5, 3, 7));
        assert!(a.iter().flat_map(|x| x.iter()).all(|v| [1.0, -1.0, 0.0].contains(v)));
        let b = sample_x0(X0Scheme::Normal { variance: 0.5 }, 4, 20_000, 1);
        let var = b.iter().flat_map(|x| x.iter()).map(|v| v * v).sum::<f64>() / 80_000.0;
        assert!((var - 0.5).abs() < 0.02);
    }
}
