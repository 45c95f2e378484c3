//! Dense linear-algebra kernels shared by the rest of the crate.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. The Riccati solver is a
//! Newton–Kleinman iteration seeded by a Bass shift stabilizer; Lyapunov
//! equations are solved by a complex Schur (Bartels–Stewart) sweep, with a
//! matrix sign iteration as fallback.

use std::ops::Deref;

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

/// Eigenvalues at or above this are accepted as nonnegative in PSD checks.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("no stabilizing Riccati solution: {0}")]
    NonStabilizable(String),
    #[error("Riccati iteration stalled with residual {residual:e}")]
    IterationDiverged { residual: f64 },
    #[error("matrix is not Hurwitz (spectral abscissa {abscissa})")]
    UnstableMatrix { abscissa: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),
}

/// A square matrix whose symmetric part has been enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self, MatError> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(MatError::DimensionMismatch(format!(
                "symmetric matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(symmetrize(&m)))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.0.clone().symmetric_eigenvalues()
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues().max()
    }

    pub fn is_psd(&self) -> bool {
        self.lambda_min() >= -PSD_TOL * (1.0 + self.0.amax())
    }

    pub fn is_pd(&self) -> bool {
        self.lambda_min() > PSD_TOL * (1.0 + self.0.amax())
    }

    /// Quadratic form `xᵀ S x`.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.0 * x))
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Symmetric PSD square root via the eigendecomposition (negative
    /// eigenvalues clipped to zero).
    pub fn sqrt_psd(&self) -> DMatrix<f64> {
        let eig = self.0.clone().symmetric_eigen();
        let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Singular-value and eigenvalue summary of a matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralReport {
    /// Extremal eigenvalues of the symmetric part; NaN for non-square input.
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `sigma_max / sigma_min`, or `+inf` when the smallest singular value is
    /// below the rank cutoff.
    pub cond: f64,
    pub sigma_max: f64,
    /// Smallest singular value above the rank cutoff (0 for the zero matrix).
    pub sigma_l: f64,
    /// Largest real part of the eigenvalues; NaN for non-square input.
    pub spectral_abscissa: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CareOptions {
    pub tol_residual: f64,
    pub max_iter: usize,
}

impl Default for CareOptions {
    fn default() -> Self {
        Self {
            tol_residual: 1e-9,
            max_iter: 80,
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral abscissa needs a square matrix");
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    eigenvalues(m).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// Eigenvalues via multishift QR with deflation.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    assert_eq!(m.nrows(), m.ncols(), "eigenvalues need a square matrix");
    if m.nrows() == 0 {
        return Vec::new();
    }
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    match f.eigenvalues() {
        Ok(ev) => ev,
        Err(_) => m.complex_eigenvalues().iter().copied().collect(),
    }
}

/// QR sweeps allowed per row before a Schur decomposition is abandoned.
const SCHUR_SWEEPS: usize = 60;

fn complex_schur(m: &DMatrix<f64>) -> Option<(DMatrix<Complex<f64>>, DMatrix<Complex<f64>>)> {
    let c = m.map(|x| Complex::new(x, 0.0));
    let max_iter = SCHUR_SWEEPS * m.nrows().max(1);
    nalgebra::linalg::Schur::try_new(c, f64::EPSILON, max_iter).map(|s| s.unpack())
}

/// Solves `aᵀ V + V a + W = 0` for a Hurwitz `a`.
pub fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<SymMatrix, MatError> {
    let n = a.nrows();
    if a.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(MatError::DimensionMismatch(format!(
            "lyapunov: a is {}x{}, w is {}x{}",
            a.nrows(),
            a.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let Some((u, t)) = complex_schur(a) else {
        return lyapunov_sign(a, w);
    };
    let abscissa = t.diagonal().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if abscissa >= 0.0 {
        return Err(MatError::UnstableMatrix { abscissa });
    }
    // a = U T Uᴴ and aᵀ = U Tᴴ Uᴴ, so with Y = Uᴴ V U:  Tᴴ Y + Y T = -Uᴴ W U.
    let wc = w.map(|x| Complex::new(x, 0.0));
    let c = -(u.adjoint() * wc * &u);
    let mut y = DMatrix::<Complex<f64>>::zeros(n, n);
    for j in 0..n {
        let mut rhs = c.column(j).clone_owned();
        for k in 0..j {
            let tkj = t[(k, j)];
            if tkj != Complex::new(0.0, 0.0) {
                rhs -= y.column(k) * tkj;
            }
        }
        // Forward substitution with the lower-triangular Tᴴ + T_jj I.
        let tjj = t[(j, j)];
        for i in 0..n {
            let mut acc = rhs[i];
            for k in 0..i {
                acc -= t[(k, i)].conj() * y[(k, j)];
            }
            y[(i, j)] = acc / (t[(i, i)].conj() + tjj);
        }
    }
    let v = (&u * y * u.adjoint()).map(|z| z.re);
    SymMatrix::new(v)
}

/// Matrix sign iteration with determinant scaling: `Aₖ → −I` and
/// `Wₖ → 2V`. Used when the Schur form does not converge.
fn lyapunov_sign(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<SymMatrix, MatError> {
    let n = a.nrows();
    let (sign, mut v) = sign_iteration(a, w)?;
    if (sign + DMatrix::<f64>::identity(n, n)).norm() > 1e-8 * (n as f64).sqrt() {
        return Err(MatError::UnstableMatrix { abscissa: spectral_abscissa(a) });
    }
    // Residual corrections through the same iteration.
    for _ in 0..2 {
        let res = a.transpose() * &v + &v * a + w;
        v += sign_iteration(a, &res)?.1;
    }
    SymMatrix::new(symmetrize(&v))
}

fn sign_iteration(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), MatError> {
    let n = a.nrows();
    let mut ak = a.clone();
    let mut wk = symmetrize(w);
    for _ in 0..100 {
        let lu = ak.clone().lu();
        let det = lu.determinant().abs();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| MatError::UnstableMatrix { abscissa: 0.0 })?;
        let c = if det.is_finite() && det > 0.0 { det.powf(-1.0 / n as f64) } else { 1.0 };
        let next = (&ak * c + &inv / c) * 0.5;
        wk = symmetrize(&((&wk * c + inv.transpose() * &wk * &inv / c) * 0.5));
        let change = (&next - &ak).norm() / next.norm().max(1.0);
        ak = next;
        if change < 1e-14 {
            break;
        }
    }
    Ok((ak, wk * 0.5))
}

pub fn lyapunov_residual(a: &DMatrix<f64>, v: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    (a.transpose() * v + v * a + w).norm()
}

/// `P A + Aᵀ P + Q − P B R⁻¹ Bᵀ P`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MatError> {
    let r_inv = spd_inverse(r)?;
    let pb = p * b;
    Ok(p * a + a.transpose() * p + q - &pb * r_inv * pb.transpose())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MatError> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| MatError::Singular("expected a positive definite matrix".into()))
}

/// Bass shift stabilizer: returns `K` with `A − B K` Hurwitz, or zero when `A`
/// is already Hurwitz.
pub fn stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, MatError> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(MatError::DimensionMismatch(format!(
            "B has {} rows, A is {n}x{n}",
            b.nrows()
        )));
    }
    let eigs = eigenvalues(a);
    if eigs.iter().all(|z| z.re < 0.0) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let min_re = eigs.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let max_mod = eigs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let shift = (-min_re).max(0.0) + 1.0f64.max(0.5 * max_mod);
    // (A + βI) Z + Z (A + βI)ᵀ = 2 B Bᵀ, rewritten for solve_lyapunov.
    let shifted = -(a + DMatrix::identity(n, n) * shift).transpose();
    let z = solve_lyapunov(&shifted, &(b * b.transpose() * 2.0))?;
    let z_inv = z
        .as_matrix()
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| MatError::NonStabilizable("Bass Gramian is singular".into()))?;
    let k = b.transpose() * z_inv;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(MatError::NonStabilizable(
            "shift stabilizer failed to produce a Hurwitz closed loop".into(),
        ));
    }
    Ok(k)
}

/// Stabilizing solution of `P A + Aᵀ P + Q − P B R⁻¹ Bᵀ P = 0`.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<SymMatrix, MatError> {
    solve_care_with(a, b, q, r, CareOptions::default())
}

pub fn solve_care_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: CareOptions,
) -> Result<SymMatrix, MatError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(MatError::DimensionMismatch(format!(
            "care: A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let q = symmetrize(q);
    let r = symmetrize(r);
    let r_inv = spd_inverse(&r)?;
    let mut k = stabilizing_gain(a, b)?;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..opts.max_iter {
        let ak = a - b * &k;
        let w = &q + k.transpose() * &r * &k;
        let p = solve_lyapunov(&ak, &w).map_err(|e| match e {
            MatError::UnstableMatrix { .. } => {
                MatError::NonStabilizable("Kleinman iterate lost stability".into())
            }
            other => other,
        })?;
        k = &r_inv * b.transpose() * p.as_matrix();
        let res = care_residual(a, b, &q, &r, &p)?.norm();
        if res <= opts.tol_residual * (1.0 + p.norm()) {
            let closed = a - b * &k;
            if !is_hurwitz(&closed) {
                return Err(MatError::NonStabilizable(
                    "converged solution is not stabilizing".into(),
                ));
            }
            // One more Newton step usually lands at rounding level.
            let w = &q + k.transpose() * &r * &k;
            if let Ok(polished) = solve_lyapunov(&closed, &w) {
                let res2 = care_residual(a, b, &q, &r, &polished)?.norm();
                if res2 < res {
                    return Ok(polished);
                }
            }
            return Ok(p);
        }
        if res < 0.5 * best {
            best = res;
            stalled = 0;
        } else {
            stalled += 1;
            best = best.min(res);
            if stalled > 8 {
                return Err(MatError::IterationDiverged { residual: res });
            }
        }
    }
    Err(MatError::IterationDiverged { residual: best })
}

/// Moore–Penrose pseudoinverse. Singular values at or below `tol` are
/// treated as zero; `None` uses `max(rows, cols) · eps · sigma_max`.
pub fn pinv(m: &DMatrix<f64>, tol: Option<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = tol.unwrap_or(rows.max(cols) as f64 * f64::EPSILON * sigma_max);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut out = DMatrix::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

/// Numerical rank with the `max(dim) · eps · sigma_max` cutoff, or a caller
/// supplied relative tolerance.
pub fn rank(m: &DMatrix<f64>, rel_tol: Option<f64>) -> usize {
    let sv = singular_values(m);
    if sv.is_empty() {
        return 0;
    }
    let smax = sv.max();
    let tol = smax * rel_tol.unwrap_or(m.nrows().max(m.ncols()) as f64 * f64::EPSILON);
    sv.iter().filter(|&&s| s > tol && s > 0.0).count()
}

pub fn spectral(m: &DMatrix<f64>) -> SpectralReport {
    assert!(!m.is_empty(), "spectral report of an empty matrix");
    let sv = singular_values(m);
    let sigma_max = sv.max();
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * sigma_max;
    let sigma_min = sv.min();
    let cond = if sigma_min > tol && sigma_min > 0.0 {
        sigma_max / sigma_min
    } else {
        f64::INFINITY
    };
    let nonzero: Vec<f64> = sv.iter().copied().filter(|&s| s > tol && s > 0.0).collect();
    let sigma_l = nonzero.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma_l = if nonzero.is_empty() { 0.0 } else { sigma_l };
    let (lambda_min, lambda_max, spectral_abscissa) = if m.is_square() {
        let ev = symmetrize(m).symmetric_eigenvalues();
        (ev.min(), ev.max(), spectral_abscissa(m))
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    SpectralReport {
        lambda_min,
        lambda_max,
        cond,
        sigma_max,
        sigma_l,
        spectral_abscissa,
        rank: nonzero.len(),
    }
}

/// True when `lower ⪯ upper` in the PSD order (within [`PSD_TOL`]).
pub fn psd_le(lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> bool {
    let d = symmetrize(&(upper - lower));
    let scale = 1.0 + upper.amax().max(lower.amax());
    d.symmetric_eigenvalues().min() >= -PSD_TOL * scale
}

/// Distinct eigenvalues of `a`, merging numerically coincident ones.
fn distinct_eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let scale = 1.0 + a.amax();
    let mut out: Vec<Complex<f64>> = Vec::new();
    for z in eigenvalues(a) {
        if !out.iter().any(|w| (w - z).norm() <= 1e-7 * scale) {
            out.push(z);
        }
    }
    out
}

fn min_singular_complex(m: DMatrix<Complex<f64>>) -> (f64, f64) {
    let sv = m.svd(false, false).singular_values;
    (sv.min(), sv.max())
}

/// Popov–Belevitch–Hautus controllability test of `(a, b)`.
pub fn pbh_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let scale = 1.0 + a.norm() + b.norm();
    distinct_eigenvalues(a).into_iter().all(|lambda| {
        let mut stacked = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                stacked[(i, j)] = id - Complex::new(a[(i, j)], 0.0);
            }
            for j in 0..b.ncols() {
                stacked[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        // σ_min over the n rows of a wide matrix: use the Gram form.
        let gram = &stacked * stacked.adjoint();
        let (smin, _) = min_singular_complex(gram);
        smin.sqrt() > rel_tol * scale
    })
}

/// PBH observability test of `(c, a)`.
pub fn pbh_observable(c: &DMatrix<f64>, a: &DMatrix<f64>, rel_tol: f64) -> bool {
    pbh_controllable(&a.transpose(), &c.transpose(), rel_tol)
}
