//! Model-free learning of cluster gains by off-policy integral policy
//! iteration, and the hierarchical learning pipeline built on it.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphcost::{CostSpec, Decomposition, GraphError};
use crate::hierctrl::{self, HierError, HierarchicalGain};
use crate::matops::{self, MatError, SymMatrix};
use crate::sim::BlackBoxPlant;

/// Regressors with a larger condition estimate are rejected.
pub const MAX_REGRESSOR_COND: f64 = 1e8;

#[derive(Debug, Error)]
pub enum AdpError {
    #[error("regressor is rank deficient (condition estimate {cond:e}); collect more or richer data")]
    RankDeficient { cond: f64 },
    #[error("policy iteration did not converge in {iterations} iterations (last step {delta:e})")]
    NoConvergence { iterations: usize, delta: f64 },
    #[error("state blow-up at t = {t}: |x| = {norm:e}")]
    StateBlowup { t: f64, norm: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Hier(#[from] HierError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-channel sum of sinusoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub seed: u64,
    /// Amplitude of each sinusoid, per channel.
    pub amplitudes: Vec<f64>,
    /// `frequencies[c][k]` in rad/s.
    pub frequencies: Vec<Vec<f64>>,
    pub phases: Vec<Vec<f64>>,
}

impl Excitation {
    /// `n_sines` sinusoids per channel with frequencies in `[0.5, 20]` rad/s.
    pub fn new(seed: u64, channels: usize, n_sines: usize, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frequencies = Vec::with_capacity(channels);
        let mut phases = Vec::with_capacity(channels);
        for _ in 0..channels {
            frequencies.push((0..n_sines).map(|_| rng.random_range(0.5..20.0)).collect());
            phases.push((0..n_sines).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect());
        }
        Self {
            seed,
            amplitudes: vec![amplitude; channels],
            frequencies,
            phases,
        }
    }

    /// No exploration at all.
    pub fn zero(channels: usize) -> Self {
        Self {
            seed: 0,
            amplitudes: vec![0.0; channels],
            frequencies: vec![Vec::new(); channels],
            phases: vec![Vec::new(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.channels(), |c, _| {
            self.frequencies[c]
                .iter()
                .zip(&self.phases[c])
                .map(|(w, ph)| (w * t + ph).sin())
                .sum::<f64>()
                * self.amplitudes[c]
        })
    }
}

/// Integrals over one sampling window.
#[derive(Debug, Clone)]
pub struct Window {
    pub x_start: DVector<f64>,
    pub x_end: DVector<f64>,
    /// `∫ x xᵀ`.
    pub i_xx: DMatrix<f64>,
    /// `∫ x u_appliedᵀ`.
    pub i_xu: DMatrix<f64>,
}

impl Window {
    /// `x(t_{k+1})⊗x(t_{k+1}) − x(t_k)⊗x(t_k)` in the symmetric basis, with
    /// off-diagonal products doubled so that `Δ(xᵀPx) = δxxᵀ vecs(P)`.
    pub fn delta_xx(&self) -> DVector<f64> {
        let qe = quad_basis(&self.x_end);
        let qs = quad_basis(&self.x_start);
        qe - qs
    }
}

/// Sampled trajectory kept for model identification.
#[derive(Debug, Clone)]
pub struct RawSamples {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    /// Applied input at each sample time.
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub windows: Vec<Window>,
    pub samples: Option<RawSamples>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn unknowns(&self) -> usize {
        unknown_count(self.n, self.m)
    }
}

/// `n(n+1)/2 + mn`.
pub fn unknown_count(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m * n
}

fn quad_basis(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { x[i] * x[i] } else { 2.0 * x[i] * x[j] };
            k += 1;
        }
    }
    out
}

fn sym_from_basis(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            p[(i, j)] = v[k];
            p[(j, i)] = v[k];
            k += 1;
        }
    }
    p
}

/// Data-collection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectOptions {
    pub horizon: f64,
    pub dt: f64,
    pub window: f64,
    pub guard: f64,
    pub keep_samples: bool,
}

/// Runs `u = −k0·x + e(t)` on the plant and integrates the regression data.
pub fn collect(
    plant: &BlackBoxPlant,
    k0: &DMatrix<f64>,
    exc: &Excitation,
    x0: &DVector<f64>,
    opts: &CollectOptions,
) -> Result<Dataset, AdpError> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    if k0.shape() != (m, n) || x0.len() != n || exc.channels() != m {
        return Err(AdpError::DimensionMismatch(format!(
            "k0 {:?}, x0 {}, excitation {} channels for a plant with n = {n}, m = {m}",
            k0.shape(),
            x0.len(),
            exc.channels()
        )));
    }
    if !(opts.dt > 0.0) || !(opts.window >= opts.dt) || !(opts.horizon >= opts.window) {
        return Err(AdpError::InvalidConfig("need 0 < dt <= window <= horizon".into()));
    }
    let per_window = (opts.window / opts.dt).round() as usize;
    if ((per_window as f64) * opts.dt - opts.window).abs() > 1e-9 * opts.window {
        return Err(AdpError::InvalidConfig("dt must divide the window length".into()));
    }
    let n_windows = (opts.horizon / opts.window).floor() as usize;
    let law = |t: f64, x: &DVector<f64>| -(k0 * x) + exc.eval(t);
    let mut windows = Vec::with_capacity(n_windows);
    let mut samples = opts.keep_samples.then(|| RawSamples {
        dt: opts.dt,
        states: Vec::new(),
        inputs: Vec::new(),
    });
    let mut x = x0.clone();
    let mut step = 0usize;
    for _ in 0..n_windows {
        let x_start = x.clone();
        let mut i_xx = DMatrix::zeros(n, n);
        let mut i_xu = DMatrix::zeros(n, m);
        for _ in 0..per_window {
            let t = step as f64 * opts.dt;
            let out = plant.step(t, &x, opts.dt, &law);
            if let Some(s) = samples.as_mut() {
                s.states.push(x.clone());
                s.inputs.push(out.u_applied.clone());
            }
            i_xx += out.int_xx;
            i_xu += out.int_xu;
            x = out.x_next;
            step += 1;
            let norm = x.norm();
            if !norm.is_finite() || norm > opts.guard {
                return Err(AdpError::StateBlowup {
                    t: step as f64 * opts.dt,
                    norm,
                });
            }
        }
        windows.push(Window {
            x_start,
            x_end: x.clone(),
            i_xx,
            i_xu,
        });
    }
    if let Some(s) = samples.as_mut() {
        s.states.push(x.clone());
        s.inputs.push(law(step as f64 * opts.dt, &x));
    }
    Ok(Dataset {
        n,
        m,
        windows,
        samples,
    })
}

/// Outcome of policy iteration on one dataset.
#[derive(Debug, Clone)]
pub struct LearnResult {
    pub p_hat: SymMatrix,
    pub k_hat: DMatrix<f64>,
    /// `R̂ k_hat`, i.e. the learned `𝓑ᵀ𝓟`.
    pub btp_hat: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Value iterates `P_1, P_2, …`.
    pub p_history: Vec<SymMatrix>,
    /// Condition estimate of the first regressor.
    pub regressor_cond: f64,
}

/// Least squares by Householder QR; returns the solution and a condition estimate.
fn least_squares(theta: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64), AdpError> {
    let qr = theta.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let dmax = diag.iter().copied().fold(0.0, f64::max);
    let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    if !(cond <= MAX_REGRESSOR_COND) {
        return Err(AdpError::RankDeficient { cond });
    }
    let mut rhs = y.clone();
    qr.q_tr_mul(&mut rhs);
    let p = theta.ncols();
    let top = rhs.rows(0, p).into_owned();
    let sol = r
        .solve_upper_triangular(&top)
        .ok_or(AdpError::RankDeficient { cond: f64::INFINITY })?;
    Ok((sol, cond))
}

/// Off-policy policy iteration on `data` for cost weights `(q, r)`.
pub fn policy_iteration(
    data: &Dataset,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    tol_pi: f64,
    max_iter: usize,
) -> Result<LearnResult, AdpError> {
    let (n, m) = (data.n, data.m);
    if q.shape() != (n, n) || r.shape() != (m, m) || k0.shape() != (m, n) {
        return Err(AdpError::DimensionMismatch("weights or k0 do not match the data".into()));
    }
    let nsym = n * (n + 1) / 2;
    let unknowns = nsym + m * n;
    let rows = data.len();
    if rows < unknowns {
        return Err(AdpError::RankDeficient { cond: f64::INFINITY });
    }
    let r_inv = matops::spd_inverse(r)?;
    let mut delta = DMatrix::zeros(rows, nsym);
    for (w, win) in data.windows.iter().enumerate() {
        delta.row_mut(w).copy_from(&win.delta_xx().transpose());
    }
    let mut k = k0.clone();
    let mut prev: Option<DMatrix<f64>> = None;
    let mut history = Vec::new();
    let mut first_cond = f64::NAN;
    let mut last_delta = f64::INFINITY;
    for it in 1..=max_iter {
        let qk = q + k.transpose() * r * &k;
        let mut theta = DMatrix::zeros(rows, unknowns);
        theta.view_mut((0, 0), (rows, nsym)).copy_from(&delta);
        let mut y = DVector::zeros(rows);
        for (w, win) in data.windows.iter().enumerate() {
            // ∫(u + Kx) xᵀ = (∫x uᵀ)ᵀ + K ∫x xᵀ, laid out row-major over (input, state).
            let coupling = win.i_xu.transpose() + &k * &win.i_xx;
            for a in 0..m {
                for b in 0..n {
                    theta[(w, nsym + a * n + b)] = -2.0 * coupling[(a, b)];
                }
            }
            y[w] = -(qk.component_mul(&win.i_xx)).sum();
        }
        let (sol, cond) = least_squares(&theta, &y)?;
        if it == 1 {
            first_cond = cond;
        }
        let p = sym_from_basis(&sol.as_slice()[..nsym], n);
        let btp = DMatrix::from_row_slice(m, n, &sol.as_slice()[nsym..]);
        k = &r_inv * &btp;
        history.push(SymMatrix::new(p.clone())?);
        if let Some(pp) = &prev {
            last_delta = (&p - pp).norm();
            if last_delta < tol_pi {
                let btp_hat = r * &k;
                return Ok(LearnResult {
                    p_hat: SymMatrix::new(p)?,
                    k_hat: k,
                    btp_hat,
                    iterations: it,
                    converged: true,
                    p_history: history,
                    regressor_cond: first_cond,
                });
            }
        }
        prev = Some(p);
    }
    Err(AdpError::NoConvergence {
        iterations: max_iter,
        delta: last_delta,
    })
}

/// Least-squares fit of central-difference derivatives: returns `(Â, B̂)`.
pub fn estimate_b(data: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>), AdpError> {
    let s = data
        .samples
        .as_ref()
        .ok_or_else(|| AdpError::InvalidConfig("dataset was collected without raw samples".into()))?;
    let (n, m) = (data.n, data.m);
    let k = s.states.len();
    if k < 3 {
        return Err(AdpError::RankDeficient { cond: f64::INFINITY });
    }
    let rows = k - 2;
    let mut phi = DMatrix::zeros(rows, n + m);
    let mut dx = DMatrix::zeros(rows, n);
    for i in 1..k - 1 {
        let d = (&s.states[i + 1] - &s.states[i - 1]) / (2.0 * s.dt);
        phi.view_mut((i - 1, 0), (1, n)).copy_from(&s.states[i].transpose());
        phi.view_mut((i - 1, n), (1, m)).copy_from(&s.inputs[i].transpose());
        dx.row_mut(i - 1).copy_from(&d.transpose());
    }
    if rows < n + m {
        return Err(AdpError::RankDeficient { cond: f64::INFINITY });
    }
    let sv = matops::singular_values(&phi);
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_REGRESSOR_COND) {
        return Err(AdpError::RankDeficient { cond });
    }
    let theta = matops::pinv(&phi, None) * dx;
    let ab = theta.transpose();
    Ok((ab.columns(0, n).into_owned(), ab.columns(n, m).into_owned()))
}

/// Learning settings shared by every cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub seed: u64,
    pub dt: f64,
    pub window: f64,
    /// Windows per unknown; the horizon is `ceil(factor · unknowns) · window`.
    pub windows_per_unknown: f64,
    pub tol_pi: f64,
    pub max_iter: usize,
    pub amplitude: f64,
    pub n_sines: usize,
    pub guard: f64,
    /// Fixed collection horizon overriding `windows_per_unknown`.
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dt: 1e-3,
            window: 0.1,
            windows_per_unknown: 2.0,
            tol_pi: 1e-8,
            max_iter: 50,
            amplitude: 0.5,
            n_sines: 10,
            guard: 1e8,
            horizon: None,
        }
    }
}

impl LearnConfig {
    pub fn collect_options(&self, n: usize, m: usize) -> CollectOptions {
        let windows = (self.windows_per_unknown * unknown_count(n, m) as f64).ceil().max(1.0);
        CollectOptions {
            horizon: self.horizon.unwrap_or(windows * self.window),
            dt: self.dt,
            window: self.window,
            guard: self.guard,
            keep_samples: false,
        }
    }
}

/// Seeded initial state for data collection.
pub fn initial_state(seed: u64, n: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Collect and learn one plant; returns the result and its wall-clock time.
pub fn learn_plant(
    plant: &BlackBoxPlant,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    cfg: &LearnConfig,
    seed: u64,
) -> Result<(LearnResult, Duration), AdpError> {
    let start = Instant::now();
    let (n, m) = (plant.state_dim(), plant.input_dim());
    let exc = Excitation::new(seed, m, cfg.n_sines, cfg.amplitude);
    let x0 = initial_state(seed, n);
    let data = collect(plant, k0, &exc, &x0, &cfg.collect_options(n, m))?;
    let res = policy_iteration(&data, q, r, k0, cfg.tol_pi, cfg.max_iter)?;
    Ok((res, start.elapsed()))
}

/// Learned hierarchical controller with per-cluster diagnostics.
#[derive(Debug, Clone)]
pub struct HierarchicalLearnResult {
    pub gain: HierarchicalGain,
    pub clusters: Vec<LearnResult>,
    pub cluster_times: Vec<Duration>,
    /// Wall-clock time of the whole learning phase.
    pub total_time: Duration,
}

impl HierarchicalLearnResult {
    /// Time of the slowest cluster (clusters learn concurrently).
    pub fn critical_time(&self) -> Duration {
        self.cluster_times.iter().copied().max().unwrap_or_default()
    }
}

/// Learns every cluster in parallel, builds `R̃` from `𝓟ⱼ𝓑ⱼ = (R̂ⱼk̂ⱼ)ᵀ`
/// and assembles `K_h`. `initial_gains[j]`, when given, must stabilize cluster `j`.
pub fn learn_hierarchical(
    plants: &[BlackBoxPlant],
    spec: &CostSpec,
    dec: &Decomposition,
    initial_gains: Option<&[DMatrix<f64>]>,
    cfg: &LearnConfig,
) -> Result<HierarchicalLearnResult, AdpError> {
    if plants.len() != dec.s() || initial_gains.is_some_and(|g| g.len() != dec.s()) {
        return Err(AdpError::DimensionMismatch(format!(
            "{} plants for {} clusters",
            plants.len(),
            dec.s()
        )));
    }
    let start = Instant::now();
    let costs = crate::graphcost::cluster_costs(spec, dec)?;
    let learned: Vec<(LearnResult, Duration)> = costs
        .par_iter()
        .enumerate()
        .map(|(j, c)| {
            let plant = &plants[j];
            let k0 = match initial_gains {
                Some(g) => g[j].clone(),
                None => DMatrix::zeros(plant.input_dim(), plant.state_dim()),
            };
            learn_plant(plant, &c.qhat, &c.rhat, &k0, cfg, cfg.seed.wrapping_add(j as u64))
        })
        .collect::<Result<_, _>>()?;
    let (n, m) = (spec.state_dim(), spec.input_dim());
    let pb: Vec<_> = learned.iter().map(|(r, _)| r.btp_hat.transpose()).collect();
    let g2q = spec.g2_qtilde(dec)?;
    let r_tilde = hierctrl::compute_rtilde_from_pb(&pb, dec, &g2q, n, m)?;
    let btp: Vec<_> = learned.iter().map(|(r, _)| r.btp_hat.clone()).collect();
    let p_blocks = learned.iter().map(|(r, _)| r.p_hat.clone()).collect();
    let gain = hierctrl::assemble_from_btp(dec, n, m, p_blocks, &btp, &spec.r_blocks, r_tilde)?;
    let total_time = start.elapsed();
    let (clusters, cluster_times) = learned.into_iter().unzip();
    Ok(HierarchicalLearnResult {
        gain,
        clusters,
        cluster_times,
        total_time,
    })
}
