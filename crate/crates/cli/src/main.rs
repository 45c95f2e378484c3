use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use hlqr::adp::LearnConfig;
use hlqr::experiment::{
    self, BenchConfig, BenchTable, DecompositionChoice, DecompositionFile, EvalConfig,
    ExperimentConfig, Scenario, ScenarioRef, X0Scheme,
};
use hlqr::graphcost;
use hlqr::hierctrl::{self, GapInput};
use hlqr::partition::{self, ConstraintSet, PartitionProblem};
use hlqr::sim::{self, FormationConfig, SimOptions};

/// Worker-pool size for parallel cluster solves, learning and benchmarks.
const WORKERS_ENV: &str = "HLQR_WORKERS";

#[derive(Parser)]
#[command(name = "hlqr", version, about = "Hierarchical LQR for multi-agent systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose a decomposition by maximum κ or minimum s-cut.
    Decompose(DecomposeArgs),
    /// Model-based hierarchical gain and its suboptimality report.
    Solve(SolveArgs),
    /// Learn the cluster controllers from simulated data and assemble the gain.
    Learn(LearnArgs),
    /// Simulate a controller and write its trajectory.
    Simulate(SimulateArgs),
    /// Full pipeline from a config file or flags.
    Run(RunArgs),
    /// Regenerate a benchmark table.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// `clique-path`, `formation`, or a scenario JSON file.
    scenario: Option<String>,
    /// Number of cliques.
    #[arg(long, default_value_t = 3)]
    s: usize,
    /// Agents per clique.
    #[arg(long, default_value_t = 3)]
    c: usize,
    /// Agent state dimension (4 or 8).
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Agent input dimension (2 or 4).
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Formation configuration JSON.
    #[arg(long)]
    formation_config: Option<PathBuf>,
}

impl ScenarioArgs {
    fn reference(&self) -> Result<ScenarioRef> {
        Ok(match self.scenario.as_deref().unwrap_or("clique-path") {
            "clique-path" => ScenarioRef::CliquePath { s_cliques: self.s, c: self.c, n: self.n, m: self.m },
            "formation" => {
                let cfg = match &self.formation_config {
                    Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
                    None => FormationConfig::default(),
                };
                ScenarioRef::Formation(cfg)
            }
            path => ScenarioRef::File { path: PathBuf::from(path) },
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Kappa,
    Scut,
}

#[derive(Args, Clone)]
struct DecArgs {
    /// Cluster count, or `cliques` for the clique-path cliques.
    #[arg(long)]
    clusters: Option<String>,
    /// Decomposition objective; used with a numeric `--clusters` (default 3).
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Consecutive cluster sizes, e.g. `6,3,3`.
    #[arg(long, value_delimiter = ',')]
    dec: Option<Vec<usize>>,
    /// 1-based cluster id per agent, e.g. `1,1,2,2,2`.
    #[arg(long, value_delimiter = ',')]
    assign: Option<Vec<usize>>,
}

impl DecArgs {
    /// Explicit choices win; a bare cluster count maximizes κ. Without any
    /// flag the clique-path default is its cliques and the formation default 6-3-3.
    fn choice(&self, scenario: &ScenarioRef) -> Result<DecompositionChoice> {
        if let Some(a) = &self.assign {
            return Ok(DecompositionChoice::Explicit { assignment: a.clone() });
        }
        if let Some(sizes) = &self.dec {
            return Ok(DecompositionChoice::Sizes { sizes: sizes.clone() });
        }
        let count = match self.clusters.as_deref() {
            Some("cliques") => return Ok(DecompositionChoice::Cliques),
            Some(v) => Some(v.parse::<usize>().with_context(|| format!("--clusters expects a number or `cliques`, got {v}"))?),
            None => None,
        };
        match (self.objective, count) {
            (Some(ObjectiveArg::Scut), s) => Ok(DecompositionChoice::Scut { s: s.unwrap_or(3) }),
            (Some(ObjectiveArg::Kappa), s) | (None, s @ Some(_)) => Ok(DecompositionChoice::Kappa { s: s.unwrap_or(3) }),
            (None, None) => match scenario {
                ScenarioRef::CliquePath { .. } => Ok(DecompositionChoice::Cliques),
                ScenarioRef::Formation(_) => Ok(DecompositionChoice::Sizes { sizes: vec![6, 3, 3] }),
                ScenarioRef::File { .. } => bail!("choose a decomposition with --clusters, --objective, --dec or --assign"),
            },
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Random seed for excitation and initial states.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value = "kappa")]
    objective: ObjectiveArg,
    /// Number of clusters.
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    /// Constraint set JSON; formation scenarios default to leader and connectivity constraints.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Search node budget.
    #[arg(long)]
    node_budget: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Initial-state distribution.
    #[arg(long, value_enum)]
    x0: Option<X0Arg>,
    /// Variance of the normal initial-state distribution.
    #[arg(long, default_value_t = 0.5)]
    variance: f64,
    /// Initial states per evaluation.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum X0Arg {
    Ternary,
    Normal,
    Scenario,
}

impl EvalArgs {
    fn config(&self, scenario: &ScenarioRef, seed: u64) -> EvalConfig {
        let scheme = match self.x0 {
            Some(X0Arg::Ternary) => X0Scheme::Ternary,
            Some(X0Arg::Normal) => X0Scheme::Normal { variance: self.variance },
            Some(X0Arg::Scenario) => X0Scheme::Scenario,
            None => match scenario {
                ScenarioRef::Formation(_) => X0Scheme::Scenario,
                _ => X0Scheme::Normal { variance: self.variance },
            },
        };
        EvalConfig { scheme, samples: self.samples, seed, ..EvalConfig::default() }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    dec: DecArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct LearnFlags {
    /// Data-collection horizon in seconds (default scales with the unknown count).
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Integration window of each regression row, in seconds.
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    tol_pi: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Excitation amplitude.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Leave wall-clock times out of the reports.
    #[arg(long)]
    no_timing: bool,
}

impl LearnFlags {
    fn apply(&self, mut cfg: LearnConfig, seed: u64) -> LearnConfig {
        cfg.seed = seed;
        cfg.horizon = self.horizon.or(cfg.horizon);
        cfg.dt = self.dt.unwrap_or(cfg.dt);
        cfg.window = self.window.unwrap_or(cfg.window);
        cfg.tol_pi = self.tol_pi.unwrap_or(cfg.tol_pi);
        cfg.max_iter = self.max_iter.unwrap_or(cfg.max_iter);
        cfg.amplitude = self.amplitude.unwrap_or(cfg.amplitude);
        cfg
    }
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    dec: DecArgs,
    #[command(flatten)]
    learn: LearnFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Hierarchical,
    Lqr,
    Baseline,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    dec: DecArgs,
    #[arg(long, value_enum, default_value = "hierarchical")]
    controller: ControllerArg,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, default_value_t = 100.0)]
    t_max: f64,
    /// Keep every k-th sample.
    #[arg(long, default_value_t = 10)]
    record_every: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Experiment configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    dec: DecArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    learn: LearnFlags,
    /// Solve the cluster Riccati equations from the model instead of learning.
    #[arg(long)]
    model_based: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    RlCompare,
    DecompositionCompare,
    Formation,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    table: TableArg,
    /// Use model-based cluster gains (no learning, no times).
    #[arg(long)]
    model_based: bool,
    /// Skip the centralized learner in rl-compare.
    #[arg(long)]
    no_centralized: bool,
    #[arg(long)]
    no_timing: bool,
    /// Initial states per evaluation.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[command(flatten)]
    common: Common,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn build(args: &ScenarioArgs) -> Result<(ScenarioRef, Scenario)> {
    let r = args.reference()?;
    let sc = r.build(None)?;
    Ok((r, sc))
}

#[derive(Serialize)]
struct DecomposeMetrics {
    decomposition: String,
    s: usize,
    kappa: usize,
    trace_g2: f64,
    cut_weight: f64,
    miqp_objective: usize,
    optimal: bool,
    nodes: u64,
}

fn decompose(a: &DecomposeArgs) -> Result<()> {
    let (_, sc) = build(&a.scenario)?;
    let n = sc.spec.n_agents();
    let constraints = match (&a.constraints, &sc.formation) {
        (Some(p), _) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        (None, Some(f)) => ConstraintSet::formation(&f.leaders, n),
        (None, None) => ConstraintSet::none(),
    };
    let mut problem = PartitionProblem::new(sc.spec.graph.clone(), a.clusters).with_constraints(constraints);
    if let Some(b) = a.node_budget {
        problem = problem.with_node_budget(b);
    }
    let res = match a.objective {
        ObjectiveArg::Kappa => partition::max_kappa(&problem)?,
        ObjectiveArg::Scut => partition::min_scut(&problem)?,
    };
    let metrics = DecomposeMetrics {
        decomposition: res.decomposition.to_string(),
        s: res.decomposition.s(),
        kappa: res.kappa,
        trace_g2: res.trace_g2,
        cut_weight: res.cut_weight,
        miqp_objective: res.miqp_objective,
        optimal: res.optimal,
        nodes: res.nodes,
    };
    let csv = experiment::to_csv(std::slice::from_ref(&metrics))?;
    print!("{csv}");
    if let Some(dir) = &a.common.out {
        write(dir, "decomposition.json", &json(&DecompositionFile::new(&sc.spec.graph, &res.decomposition)?)?)?;
        write(dir, "metrics.csv", &csv)?;
    }
    Ok(())
}

fn solve(a: &SolveArgs) -> Result<()> {
    let (r, sc) = build(&a.scenario)?;
    let dec = experiment::choose_decomposition(&sc, &a.dec.choice(&r)?)?;
    let gain = hierctrl::hierarchical_gain(&sc.mas, &sc.spec, &dec)?;
    let eval = a.eval.config(&r, a.common.seed);
    let row = experiment::report_row(&sc, &dec, &gain, None, &eval)?;
    let sigma = match eval.scheme {
        X0Scheme::Normal { variance } => variance.sqrt(),
        _ => 1.0,
    };
    let input = match &sc.formation {
        Some(f) if eval.scheme == X0Scheme::Scenario => GapInput::State(f.x0()),
        _ => GapInput::Sigma(sigma),
    };
    let gap = hierctrl::gap_report(&sc.mas, &sc.spec, &dec, &gain, &input)?;
    let csv = experiment::rows_to_csv(std::slice::from_ref(&row))?;
    print!("{csv}");
    if let Some(dir) = &a.common.out {
        write(dir, "report.csv", &csv)?;
        write(dir, "gap_report.json", &json(&gap)?)?;
        write(dir, "gap_report.csv", &experiment::to_csv(std::slice::from_ref(&gap))?)?;
        write(dir, "decomposition.json", &json(&DecompositionFile::new(&sc.spec.graph, &dec)?)?)?;
        experiment::write_matrix_csv(&gain.k_h, &dir.join("gain_kh.csv"))?;
        experiment::write_matrix_csv(&gain.r_tilde, &dir.join("r_tilde.csv"))?;
    }
    Ok(())
}

fn learn(a: &LearnArgs) -> Result<()> {
    let (r, sc) = build(&a.scenario)?;
    let dec = experiment::choose_decomposition(&sc, &a.dec.choice(&r)?)?;
    let cfg = a.learn.apply(LearnConfig::default(), a.common.seed);
    let (res, rows) = experiment::learn_with_summary(&sc, &dec, &cfg, !a.learn.no_timing)?;
    let csv = experiment::to_csv(&rows)?;
    print!("{csv}");
    if let Some(dir) = &a.common.out {
        write(dir, "learn_summary.csv", &csv)?;
        write(dir, "learn_config.json", &json(&cfg)?)?;
        experiment::write_matrix_csv(&res.gain.k_h, &dir.join("gain_kh.csv"))?;
        experiment::write_matrix_csv(&res.gain.r_tilde, &dir.join("r_tilde.csv"))?;
        for (j, c) in res.clusters.iter().enumerate() {
            experiment::write_matrix_csv(c.p_hat.as_matrix(), &dir.join(format!("p_hat_{}.csv", j + 1)))?;
            experiment::write_matrix_csv(&c.k_hat, &dir.join(format!("k_hat_{}.csv", j + 1)))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SimSummary {
    controller: &'static str,
    decomposition: String,
    t_end: f64,
    j: f64,
    j_u: f64,
    final_norm: f64,
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let (r, sc) = build(&a.scenario)?;
    let dec = experiment::choose_decomposition(&sc, &a.dec.choice(&r)?)?;
    let (name, k) = match a.controller {
        ControllerArg::Hierarchical => ("hierarchical", hierctrl::hierarchical_gain(&sc.mas, &sc.spec, &dec)?.k_h),
        ControllerArg::Lqr => ("lqr", hierctrl::centralized_lqr(&sc.mas, &sc.spec)?.1),
        ControllerArg::Baseline => match &sc.formation {
            Some(f) => ("baseline", f.baseline_gain()),
            None => bail!("the baseline law is defined for the formation scenario only"),
        },
    };
    let x0: DVector<f64> = match &sc.formation {
        Some(f) => f.x0(),
        None => experiment::sample_x0(X0Scheme::Ternary, sc.mas.a_full().nrows(), 1, a.common.seed).remove(0),
    };
    let opts = SimOptions { dt: a.dt, t_max: a.t_max, stop_window: None, record_every: a.record_every, ..SimOptions::default() };
    let q = graphcost::assemble_q(&sc.spec);
    let rr = sc.spec.r();
    let traj = sim::integrate(&sc.mas, &sim::linear_feedback(&k), &x0, Some((&q, &rr)), &opts)?;
    let summary = SimSummary {
        controller: name,
        decomposition: dec.to_string(),
        t_end: traj.times.last().copied().unwrap_or(0.0),
        j: traj.cost(),
        j_u: traj.ju(),
        final_norm: traj.final_state().norm(),
    };
    let csv = experiment::to_csv(std::slice::from_ref(&summary))?;
    print!("{csv}");
    if let Some(dir) = &a.common.out {
        write(dir, "simulation.csv", &csv)?;
        fs::create_dir_all(dir)?;
        let path = dir.join("trajectory.csv");
        traj.write_csv(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?)?;
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let (mut cfg, base) = match &a.config {
        Some(p) => (ExperimentConfig::from_file(p)?, p.parent().map(Path::to_path_buf)),
        None => {
            let scenario = a.scenario.reference()?;
            let decomposition = a.dec.choice(&scenario)?;
            let evaluation = a.eval.config(&scenario, a.common.seed);
            let cfg = ExperimentConfig {
                scenario,
                decomposition,
                learning: Some(LearnConfig::default()),
                evaluation,
                output_dir: None,
                record_timing: true,
            };
            (cfg, None)
        }
    };
    if a.config.is_some() {
        if a.dec.assign.is_some() || a.dec.dec.is_some() || a.dec.clusters.is_some() || a.dec.objective.is_some() {
            cfg.decomposition = a.dec.choice(&cfg.scenario)?;
        }
        cfg.evaluation.seed = a.common.seed;
    }
    cfg.learning = if a.model_based { None } else { cfg.learning.map(|l| a.learn.apply(l, a.common.seed)) };
    if a.learn.no_timing {
        cfg.record_timing = false;
    }
    if let Some(out) = &a.common.out {
        cfg.output_dir = Some(out.clone());
    }
    let out = experiment::run(&cfg, base.as_deref())?;
    if let Some(f) = &out.feasibility {
        for (j, c) in f.iter().enumerate() {
            eprintln!(
                "cluster {}: leader={} connected={} observable={} -> {}",
                j + 1,
                c.has_leader,
                c.connected,
                c.pbh_observable,
                if c.feasible() { "feasible" } else { "infeasible" }
            );
        }
    }
    print!("{}", experiment::rows_to_csv(std::slice::from_ref(&out.row))?);
    if let Some(dir) = &cfg.output_dir {
        write(dir, "config.json", &json(&cfg)?)?;
    }
    Ok(())
}

/// Column annotations written next to each table.
const TABLE_NOTES: &str = "\
machine-dependent: rl_time, hrl_time, learn_time (wall-clock seconds, empty when not measured)
distribution-dependent: j_opt, j_hrl, j_mean, j_u, sop (random initial states, seeded)
exact: s, c, n, m, rl_unknowns, hrl_unknowns, kappa, trace_g2, n_c
";

fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        seed: a.common.seed,
        learn: !a.model_based,
        centralized: !a.no_centralized,
        record_timing: !a.no_timing,
        samples: a.samples,
        ..BenchConfig::default()
    };
    let tables: Vec<BenchTable> = match a.table {
        TableArg::RlCompare => vec![BenchTable::RlCompare],
        TableArg::DecompositionCompare => vec![BenchTable::DecompositionCompare],
        TableArg::Formation => vec![BenchTable::Formation],
        TableArg::All => vec![BenchTable::RlCompare, BenchTable::DecompositionCompare, BenchTable::Formation],
    };
    for t in tables {
        let (name, csv) = match t {
            BenchTable::RlCompare => ("rl-compare", experiment::to_csv(&experiment::rl_compare(&cfg)?)?),
            BenchTable::DecompositionCompare => {
                ("decomposition-compare", experiment::rows_to_csv(&experiment::decomposition_compare(&cfg)?)?)
            }
            BenchTable::Formation => ("formation", experiment::rows_to_csv(&experiment::formation_table(&cfg)?)?),
        };
        println!("# {name}");
        print!("{csv}");
        if let Some(dir) = &a.common.out {
            write(dir, &format!("{name}.csv"), &csv)?;
            write(dir, &format!("{name}.notes"), TABLE_NOTES)?;
        }
    }
    Ok(())
}

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV} must be a positive integer, got {v}"))?;
        if n == 0 {
            bail!("{WORKERS_ENV} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_workers().and_then(|()| match &cli.command {
        Command::Decompose(a) => decompose(a),
        Command::Solve(a) => solve(a),
        Command::Learn(a) => learn(a),
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
