//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hlqr::adp::{self, LearnConfig};
use hlqr::experiment::{self, ScenarioRef};
use hlqr::graphcost::{
    self, check_assumptions, cluster_adjacency, comm_links, cut_weight, kappa, split_graph, CostGraph, CostSpec,
    Decomposition,
};
use hlqr::hierctrl::{self, GapInput, ZERO_BLOCK_TOL};
use hlqr::matops::SymMatrix;
use hlqr::partition::{self, PartitionProblem};
use hlqr::sim::{self, Agent, BlackBoxPlant, FormationConfig, FormationScenario, MasSystem, SimOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ------------------------------------------------------------ generators

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = uniform(rng, n, n);
    &g * g.transpose() + DMatrix::identity(n, n) * floor
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> CostGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j, rng.random_range(0.5..2.0)));
            }
        }
    }
    CostGraph::from_edges(n, &edges).unwrap()
}

/// Restricted-growth random decomposition into exactly `s` clusters.
fn random_decomposition(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Decomposition {
    let mut ids: Vec<usize> = (0..n).map(|i| if i < s { i } else { rng.random_range(0..s) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    Decomposition::new(ids, s).unwrap().canonical()
}

struct Instance {
    mas: MasSystem,
    spec: CostSpec,
    dec: Decomposition,
}

/// Random MAS with `N ≤ max_agents`, `n ≤ 4`. With `qbar_pd` every `Q̄ᵢ ≻ 0`,
/// otherwise some `Q̄ᵢ` vanish so the observability assumptions matter.
fn random_instance(rng: &mut ChaCha8Rng, max_agents: usize, qbar_pd: bool) -> Instance {
    let big_n = rng.random_range(2..=max_agents);
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=n);
    let agents = (0..big_n)
        .map(|_| Agent { a: uniform(rng, n, n), b: uniform(rng, n, m) })
        .collect();
    let mas = MasSystem::new(agents).unwrap();
    let graph = random_graph(rng, big_n, 0.5);
    let qbar = (0..big_n)
        .map(|_| {
            if qbar_pd {
                random_pd(rng, n, 0.1)
            } else if rng.random_bool(0.5) {
                DMatrix::zeros(n, n)
            } else {
                random_pd(rng, n, 0.0) * 0.5
            }
        })
        .collect();
    let qtilde = random_pd(rng, n, 0.1);
    let r = (0..big_n).map(|_| random_pd(rng, m, 0.2)).collect();
    let spec = CostSpec::new(qbar, qtilde, graph, r).unwrap();
    let s = rng.random_range(1..=big_n);
    let dec = random_decomposition(rng, big_n, s);
    Instance { mas, spec, dec }
}

/// Draws instances until one passes both standing assumptions.
fn admissible_instance(rng: &mut ChaCha8Rng, max_agents: usize, qbar_pd: bool) -> Instance {
    loop {
        let inst = random_instance(rng, max_agents, qbar_pd);
        if check_assumptions(&inst.mas, &inst.spec, &inst.dec).unwrap().holds() {
            return inst;
        }
    }
}

// ------------------------------------------------------------ criteria

fn c1_graph_metrics() -> Outcome {
    let (mas, spec) = sim::clique_path_scenario(3, 3, 4, 2).unwrap();
    let cases = [
        (vec![1, 1, 2, 2, 2, 2, 2, 3, 3], 4, 8.0, 32),
        (vec![1, 1, 1, 2, 2, 2, 3, 3, 3], 9, 4.0, 27),
        (vec![1, 1, 1, 2, 3, 3, 3, 3, 3], 15, 6.0, 21),
    ];
    let mut got = Vec::new();
    let mut pass = true;
    for (assign, k, tr, nc) in cases {
        let dec = Decomposition::from_one_based(&assign).unwrap();
        let gain = hierctrl::hierarchical_gain(&mas, &spec, &dec).unwrap();
        let row = (
            kappa(&spec.graph, &dec).unwrap(),
            split_graph(&spec.graph, &dec).unwrap().trace_g2(),
            comm_links(&gain.k_h, 9, None).unwrap().count(),
        );
        pass &= row == (k, tr, nc);
        got.push(format!("{}:{:?}", dec, row));
    }
    outcome(pass, got.join(" "))
}

fn c2_partition_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for _ in 0..50 {
        let n = rng.random_range(4..=10);
        let density = rng.random_range(0.2..0.7);
        let g = random_graph(&mut rng, n, density);
        for s in [2, 3, 4] {
            let all = partition::enumerate_partitions(n, s).unwrap();
            let best_k = all.iter().map(|d| kappa(&g, d).unwrap()).max().unwrap();
            let best_cut = all.iter().map(|d| cut_weight(&g, d).unwrap()).fold(f64::INFINITY, f64::min);
            let p = PartitionProblem::new(g.clone(), s);
            let k = partition::max_kappa(&p).unwrap();
            let c = partition::min_scut(&p).unwrap();
            cases += 1;
            if k.kappa != best_k || !k.optimal || (c.cut_weight - best_cut).abs() > 1e-9 || !c.optimal {
                mismatches.push(format!("N={n} s={s}: κ {} vs {best_k}, cut {} vs {best_cut}", k.kappa, c.cut_weight));
            }
        }
    }
    outcome(mismatches.is_empty(), format!("{cases} cases, {} mismatches {:?}", mismatches.len(), mismatches))
}

fn c3_sandwich() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::INFINITY;
    let mut errors = 0;
    for _ in 0..100 {
        let inst = admissible_instance(&mut rng, 6, false);
        let Ok(gain) = hierctrl::hierarchical_gain(&inst.mas, &inst.spec, &inst.dec) else {
            errors += 1;
            continue;
        };
        let (p, _) = hierctrl::centralized_lqr(&inst.mas, &inst.spec).unwrap();
        let pc = SymMatrix::new(gain.p_full()).unwrap();
        let x = sim::cost_matrix(
            &inst.mas.a_full(),
            &inst.mas.b_full(),
            &graphcost::assemble_q(&inst.spec),
            &inst.spec.r(),
            &gain.k_h,
        )
        .unwrap();
        for _ in 0..20 {
            let x0 = DVector::from_fn(p.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let (lo, mid, hi) = (pc.quad(&x0), p.quad(&x0), x.quad(&x0));
            worst = worst.min(mid - lo).min(hi - mid);
        }
    }
    outcome(errors == 0 && worst >= -1e-8, format!("100 instances x 20 states, min slack {worst:.3e}, solver errors {errors}"))
}

fn c4_gap_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = 0.8;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let inst = admissible_instance(&mut rng, 6, false);
        let gain = hierctrl::hierarchical_gain(&inst.mas, &inst.spec, &inst.dec).unwrap();
        let rep = hierctrl::gap_report(&inst.mas, &inst.spec, &inst.dec, &gain, &GapInput::Sigma(sigma)).unwrap();
        let (p, _) = hierctrl::centralized_lqr(&inst.mas, &inst.spec).unwrap();
        let x = sim::cost_matrix(
            &inst.mas.a_full(),
            &inst.mas.b_full(),
            &graphcost::assemble_q(&inst.spec),
            &inst.spec.r(),
            &gain.k_h,
        )
        .unwrap();
        let d = SymMatrix::new(x.as_matrix() - p.as_matrix()).unwrap();
        let samples = 100_000;
        let mean = (0..samples)
            .map(|_| {
                let x0 = DVector::from_fn(d.dim(), |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
                d.quad(&x0)
            })
            .sum::<f64>()
            / samples as f64;
        let expected = sigma * sigma * rep.trace_v;
        let rel = if expected.abs() < 1e-12 { mean.abs() } else { (mean - expected).abs() / expected.abs() };
        worst = worst.max(rel);
    }
    outcome(worst <= 0.05, format!("10 instances x 1e5 states, worst relative error {:.3}%", worst * 100.0))
}

fn c5_structure(instances: &[(Instance, hierctrl::HierarchicalGain)]) -> Outcome {
    let mut worst_block: f64 = 0.0;
    let mut link_violations = 0;
    for (inst, gain) in instances {
        let adj = cluster_adjacency(&inst.spec.graph, &inst.dec).unwrap();
        for a in 0..inst.dec.s() {
            for b in 0..inst.dec.s() {
                if a != b && !adj[a][b] {
                    worst_block = worst_block.max(gain.rtilde_block_max(a, b));
                }
            }
        }
        let big_n = inst.spec.n_agents();
        let k = kappa(&inst.spec.graph, &inst.dec).unwrap();
        if comm_links(&gain.k_h, big_n, None).unwrap().count() > big_n * (big_n - 1) / 2 - k {
            link_violations += 1;
        }
    }
    outcome(
        worst_block <= ZERO_BLOCK_TOL && link_violations == 0,
        format!(
            "{} instances, max non-adjacent R̃ block {worst_block:.2e}, link-count violations {link_violations}",
            instances.len()
        ),
    )
}

fn c6_stability(instances: &[(Instance, hierctrl::HierarchicalGain)], errors: usize) -> Outcome {
    let worst = instances
        .iter()
        .map(|(inst, g)| g.spectral_abscissa(&inst.mas))
        .fold(f64::NEG_INFINITY, f64::max);
    let unstable = instances.iter().filter(|(inst, g)| g.spectral_abscissa(&inst.mas) >= 0.0).count();
    outcome(
        unstable == 0 && errors == 0,
        format!(
            "{} admissible trials, unstable {unstable}, solver errors {errors}, max abscissa {worst:.3e}",
            instances.len() + errors
        ),
    )
}

fn c7_trace_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut v1, mut v2, mut vacuous) = (0, 0, 0);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let inst = admissible_instance(&mut rng, 6, true);
        let gain = hierctrl::hierarchical_gain(&inst.mas, &inst.spec, &inst.dec).unwrap();
        let rep = hierctrl::gap_report(&inst.mas, &inst.spec, &inst.dec, &gain, &GapInput::Sigma(1.0)).unwrap();
        if rep.trace_v > rep.trace_v_bound * (1.0 + 1e-9) + 1e-12 {
            v1 += 1;
        }
        if rep.vacuous {
            vacuous += 1;
        } else if rep.trace_w > (rep.f1 + rep.f2) * (1.0 + 1e-9) + 1e-12 {
            v2 += 1;
        }
        if rep.f1 + rep.f2 > 0.0 {
            worst_ratio = worst_ratio.max(rep.trace_w / (rep.f1 + rep.f2));
        }
    }
    outcome(
        v1 == 0 && v2 == 0,
        format!("100 instances, tr(V) violations {v1}, tr(W) violations {v2}, vacuous {vacuous}, max tr(W)/(f1+f2) {worst_ratio:.3}"),
    )
}

fn c8_monotone_kappa() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = Vec::new();
    for _ in 0..30 {
        let n = rng.random_range(2..=8);
        let density = rng.random_range(0.2..0.8);
        let g = random_graph(&mut rng, n, density);
        let best: Vec<usize> = (1..=n)
            .map(|s| {
                partition::enumerate_partitions(n, s)
                    .unwrap()
                    .iter()
                    .map(|d| kappa(&g, d).unwrap())
                    .max()
                    .unwrap()
            })
            .collect();
        if best.windows(2).any(|w| w[1] < w[0]) {
            violations.push(format!("N={n}: {best:?}"));
        }
        if best[n - 1] != kappa(&g, &Decomposition::singletons(n)).unwrap() {
            violations.push(format!("N={n}: κ*(N) {} differs from singletons", best[n - 1]));
        }
    }
    outcome(violations.is_empty(), format!("30 graphs, violations {:?}", violations))
}

fn c9_adp_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let cfg = LearnConfig::default();
    for c in [2, 3] {
        let sc = ScenarioRef::CliquePath { s_cliques: 3, c, n: 4, m: 2 }.build(None).unwrap();
        let dec = sim::clique_clusters(3, c);
        let (_, rows) = experiment::learn_with_summary(&sc, &dec, &cfg, false).unwrap();
        worst = rows.iter().map(|r| r.p_rel_error).fold(worst, f64::max);
    }
    // Scalar plant ẋ = x + u with q = r = 1: P = 1 + √2.
    let mas = MasSystem::new(vec![Agent { a: DMatrix::from_element(1, 1, 1.0), b: DMatrix::from_element(1, 1, 1.0) }]).unwrap();
    let plant = BlackBoxPlant::new(mas);
    let one = DMatrix::from_element(1, 1, 1.0);
    let (res, _) = adp::learn_plant(&plant, &one, &one, &DMatrix::from_element(1, 1, 2.0), &cfg, 5).unwrap();
    let exact = 1.0 + 2f64.sqrt();
    let scalar = (res.p_hat[(0, 0)] - exact).abs() / exact;
    outcome(
        worst <= 1e-3 && scalar <= 1e-4,
        format!("cluster max rel. Frobenius error {worst:.2e}, scalar rel. error {scalar:.2e}"),
    )
}

fn c10_sop_trend() -> Outcome {
    let cfg = LearnConfig::default();
    let mut means = Vec::new();
    for c in [2, 3, 4] {
        let sc = ScenarioRef::CliquePath { s_cliques: 3, c, n: 4, m: 2 }.build(None).unwrap();
        let dec = sim::clique_clusters(3, c);
        let (gain, _) = experiment::build_gain(&sc, &dec, Some(&cfg)).unwrap();
        let (p, _) = hierctrl::centralized_lqr(&sc.mas, &sc.spec).unwrap();
        let x = sim::cost_matrix(
            &sc.mas.a_full(),
            &sc.mas.b_full(),
            &graphcost::assemble_q(&sc.spec),
            &sc.spec.r(),
            &gain.k_h,
        )
        .unwrap();
        let sops: Vec<f64> = (0..200u64)
            .filter_map(|seed| {
                let x0 = experiment::sample_x0(experiment::X0Scheme::Ternary, p.dim(), 1, seed).remove(0);
                let j_opt = p.quad(&x0);
                (j_opt > 0.0).then(|| (x.quad(&x0) - j_opt) / j_opt)
            })
            .collect();
        let min = sops.iter().copied().fold(f64::INFINITY, f64::min);
        means.push((sops.iter().sum::<f64>() / sops.len() as f64, min));
    }
    let decreasing = means.windows(2).all(|w| w[1].0 < w[0].0);
    let nonneg = means.iter().all(|&(_, min)| min >= -1e-12);
    outcome(
        decreasing && nonneg,
        format!(
            "mean SOP c=2,3,4: {}",
            means.iter().map(|(m, _)| format!("{:.2}%", m * 100.0)).collect::<Vec<_>>().join(" → ")
        ),
    )
}

fn c11_formation_feasibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut clusters, mut mismatches, mut disconnected_led) = (0, 0, 0);
    let mut example = None;
    while clusters < 200 {
        // Random leader set and random decomposition on the 12-agent mesh.
        let leaders: Vec<usize> = (1..=12).filter(|_| rng.random_bool(0.3)).collect();
        let cfg = FormationConfig { leaders, ..FormationConfig::default() };
        let sc: FormationScenario = sim::formation_scenario(&cfg).unwrap();
        let s = rng.random_range(1..=6);
        let dec = random_decomposition(&mut rng, 12, s);
        for c in sim::formation_feasibility(&sc, &dec).unwrap() {
            if clusters == 200 {
                break;
            }
            clusters += 1;
            if !c.connected && c.every_component_led {
                disconnected_led += 1;
            }
            if c.feasible() != c.pbh_observable {
                mismatches += 1;
                example.get_or_insert_with(|| {
                    format!(
                        "agents {:?} leaders {:?}: leader+connected={} observable={}",
                        c.agents.iter().map(|a| a + 1).collect::<Vec<_>>(),
                        cfg.leaders,
                        c.feasible(),
                        c.pbh_observable
                    )
                });
            }
        }
    }
    outcome(
        mismatches == 0,
        format!(
            "200 clusters, mismatches {mismatches} (disconnected clusters with a leader in every component: {disconnected_led}){}",
            example.map(|e| format!("; first: {e}")).unwrap_or_default()
        ),
    )
}

fn c12_formation_dominance() -> Outcome {
    let opts = SimOptions { dt: 1e-2, t_max: 200.0, stop_window: None, record_every: 1000, ..SimOptions::default() };
    let d = experiment::formation_dominance(&FormationConfig::default(), &opts).unwrap();
    outcome(
        d.j_lqr < d.j_baseline && d.j_u_lqr < d.j_u_baseline,
        format!(
            "J {:.2} < {:.2}, J_u {:.2} < {:.2}",
            d.j_lqr, d.j_baseline, d.j_u_lqr, d.j_u_baseline
        ),
    )
}

/// Instances shared by the structure and stability criteria.
fn stability_trials() -> (Vec<(Instance, hierctrl::HierarchicalGain)>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut out = Vec::new();
    let mut errors = 0;
    for _ in 0..1000 {
        let inst = admissible_instance(&mut rng, 6, false);
        match hierctrl::hierarchical_gain(&inst.mas, &inst.spec, &inst.dec) {
            Ok(g) => out.push((inst, g)),
            Err(_) => errors += 1,
        }
    }
    (out, errors)
}

fn main() -> ExitCode {
    let budgets: [(usize, &str, Option<Duration>); 12] = [
        (1, "graph metrics", Some(Duration::from_secs(1))),
        (2, "partition optimality", Some(Duration::from_secs(120))),
        (3, "cost sandwich", None),
        (4, "expected gap identity", Some(Duration::from_secs(120))),
        (5, "coupling structure", None),
        (6, "closed-loop stability", None),
        (7, "gap bounds", None),
        (8, "κ* monotone in s", None),
        (9, "learning vs Riccati", Some(Duration::from_secs(60))),
        (10, "suboptimality trend", Some(Duration::from_secs(300))),
        (11, "formation feasibility", None),
        (12, "formation dominance", None),
    ];
    let selected: Option<Vec<usize>> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.parse().ok())
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty());
    let mut trials = None;
    let mut failed = 0;
    for (id, name, budget) in budgets {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let res = match id {
            1 => c1_graph_metrics(),
            2 => c2_partition_optimality(),
            3 => c3_sandwich(),
            4 => c4_gap_identity(),
            5 | 6 => {
                let (inst, errors) = trials.get_or_insert_with(stability_trials);
                if id == 5 {
                    c5_structure(inst)
                } else {
                    c6_stability(inst, *errors)
                }
            }
            7 => c7_trace_bounds(),
            8 => c8_monotone_kappa(),
            9 => c9_adp_oracle(),
            10 => c10_sop_trend(),
            11 => c11_formation_feasibility(),
            _ => c12_formation_dominance(),
        };
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let pass = res.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = match budget {
            Some(b) if !in_time => format!(" [over budget {:.0?} > {:.0?}]", elapsed, b),
            _ => String::new(),
        };
        println!(
            "criterion {id:>2} {:<24} {} ({:.2} s) {}{timing}",
            name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            res.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
