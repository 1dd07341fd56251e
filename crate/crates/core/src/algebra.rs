//! Matrix equations: stabilizing CARE solutions, Lyapunov equations and the
//! filter-covariance Riccati ODE.
//!
//! The CARE is always written as
//!
//! ```text
//! AᵀP + PA − PDP + Q = 0,     A − DP Hurwitz.
//! ```
//!
//! The filter equation `A_x P + P A_xᵀ − P bᵀb P + I = 0` maps to
//! `A = A_xᵀ, D = bᵀb, Q = I`; the Receiver equation for `G2` maps to
//! `A = A_x, D = B_x C2⁻¹ B_xᵀ, Q = F2`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::LQPersuasionModel;

pub const DEFAULT_RICCATI_STEP: f64 = 1e-3;
const CARE_RESIDUAL_TOL: f64 = 1e-10;
const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-11;
const DRIFT_TOL: f64 = 1e-8;
const NK_MAX_ITER: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct CareProblem {
    pub a: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl CareProblem {
    /// Stationary filter covariance equation for drift `a_x` and precision `obs_b`.
    pub fn filter(a_x: &DMatrix<f64>, obs_b: &DMatrix<f64>) -> Self {
        let n = a_x.nrows();
        Self {
            a: a_x.transpose(),
            d: obs_b.transpose() * obs_b,
            q: DMatrix::identity(n, n),
        }
    }

    /// Quadratic value-function coefficient equation of the Receiver.
    pub fn receiver(model: &LQPersuasionModel) -> Self {
        Self { a: model.a_x.clone(), d: model.control_gain(), q: model.f2.clone() }
    }

    pub fn residual(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        self.a.transpose() * p + p * &self.a - p * &self.d * p + &self.q
    }

    pub fn closed_loop(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a - &self.d * p
    }

    fn check_shapes(&self) -> Result<usize> {
        let n = self.a.nrows();
        if self.a.ncols() != n || self.d.shape() != (n, n) || self.q.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "CARE with a {:?}, d {:?}, q {:?}",
                self.a.shape(),
                self.d.shape(),
                self.q.shape()
            )));
        }
        Ok(n)
    }
}

/// Unique stabilizing symmetric solution of the CARE.
///
/// Scalar problems use the quadratic formula. Larger problems run
/// Newton–Kleinman from `P = 0` when `A` is already Hurwitz, otherwise from
/// the matrix-sign-function estimate of the stable invariant subspace of the
/// Hamiltonian. Both the residual and the Hurwitz property are verified.
pub fn solve_care(problem: &CareProblem) -> Result<DMatrix<f64>> {
    let n = problem.check_shapes()?;
    let p = if n == 1 {
        scalar_care(problem)?
    } else {
        let p0 = if linalg::max_real_part(&problem.a) < 0.0 {
            DMatrix::zeros(n, n)
        } else {
            sign_function_care(problem)?
        };
        newton_kleinman(problem, p0)?
    };
    verify_care(problem, &p)?;
    Ok(p)
}

fn scalar_care(problem: &CareProblem) -> Result<DMatrix<f64>> {
    let (a, d, q) = (problem.a[(0, 0)], problem.d[(0, 0)], problem.q[(0, 0)]);
    // d p² − 2a p − q = 0; the stabilizing root has closed loop −√(a² + dq).
    let s = (a * a + d * q).max(0.0).sqrt();
    if !(s > 0.0) {
        return Err(Error::NoStabilizingSolution { max_real_part: a });
    }
    let p = if a <= 0.0 {
        q / (s - a)
    } else if d > 0.0 {
        (a + s) / d
    } else {
        return Err(Error::NoStabilizingSolution { max_real_part: a });
    };
    Ok(DMatrix::from_element(1, 1, p))
}

fn verify_care(problem: &CareProblem, p: &DMatrix<f64>) -> Result<()> {
    let residual = problem.residual(p).norm();
    let bound = CARE_RESIDUAL_TOL * (1.0 + p.norm().powi(2)) * scale_of(problem);
    if !(residual <= bound) {
        return Err(Error::ResidualTooLarge { residual, bound });
    }
    let max_re = linalg::max_real_part(&problem.closed_loop(p));
    if !(max_re < 0.0) {
        return Err(Error::NoStabilizingSolution { max_real_part: max_re });
    }
    Ok(())
}

fn scale_of(problem: &CareProblem) -> f64 {
    problem.a.norm().max(problem.d.norm()).max(problem.q.norm()).max(1.0)
}

/// One Newton–Kleinman refinement step:
/// `(A − DP)ᵀ P⁺ + P⁺ (A − DP) + PDP + Q = 0`.
pub fn newton_kleinman_step(problem: &CareProblem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let closed = problem.closed_loop(p);
    let rhs = p * &problem.d * p + &problem.q;
    solve_lyapunov(&closed.transpose(), &rhs)
}

fn newton_kleinman(problem: &CareProblem, mut p: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for _ in 0..NK_MAX_ITER {
        let next = newton_kleinman_step(problem, &p).map_err(|e| match e {
            Error::ThetaNotHurwitz { max_real_part } => Error::NoStabilizingSolution { max_real_part },
            other => other,
        })?;
        let change = (&next - &p).amax();
        p = next;
        if change <= 1e-15 * (1.0 + p.amax()) {
            break;
        }
    }
    Ok(p)
}

/// Stabilizing solution from the matrix sign of the Hamiltonian
/// `H = [[A, −D], [−Q, −Aᵀ]]`, whose stable invariant subspace is `[I; P]`.
fn sign_function_care(problem: &CareProblem) -> Result<DMatrix<f64>> {
    let n = problem.a.nrows();
    let h = linalg::block2(&problem.a, &(-&problem.d), &(-&problem.q), &(-problem.a.transpose()));
    let mut z = h;
    for _ in 0..100 {
        let det = z.determinant().abs();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::NoStabilizingSolution { max_real_part: 0.0 });
        }
        let c = det.powf(-1.0 / (2 * n) as f64);
        let zc = &z * c;
        let inv = zc.clone().try_inverse().ok_or(Error::SingularSystem("sign iteration"))?;
        let next = (zc + inv) * 0.5;
        let change = (&next - &z).norm() / next.norm().max(1.0);
        z = next;
        if change < 1e-13 {
            break;
        }
    }
    let id = DMatrix::<f64>::identity(n, n);
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let lhs = linalg::block2(&w12, &DMatrix::zeros(n, 0), &(w22 + &id), &DMatrix::zeros(n, 0));
    let rhs = -linalg::block2(&(w11 + &id), &DMatrix::zeros(n, 0), &w21, &DMatrix::zeros(n, 0));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|_| Error::SingularSystem("sign-function subspace"))?;
    Ok(linalg::symmetrize(&p))
}

/// Unique `w` with `wΘᵀ + Θw + q = 0` for Hurwitz `Θ`, from the Kronecker
/// system `(I ⊗ Θ + Θ ⊗ I) vec(w) = −vec(q)`.
pub fn solve_lyapunov(theta: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = theta.nrows();
    if theta.ncols() != n || q.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "Lyapunov with theta {:?}, q {:?}",
            theta.shape(),
            q.shape()
        )));
    }
    let max_re = linalg::max_real_part(theta);
    if !(max_re < 0.0) {
        return Err(Error::ThetaNotHurwitz { max_real_part: max_re });
    }
    let id = DMatrix::<f64>::identity(n, n);
    let op = linalg::kron(&id, theta) + linalg::kron(theta, &id);
    let rhs = nalgebra::DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = op.lu().solve(&rhs).ok_or(Error::SingularSystem("Lyapunov"))?;
    let w = linalg::symmetrize(&DMatrix::from_vec(n, n, sol.as_slice().to_vec()));
    let residual = (&w * theta.transpose() + theta * &w + q).norm();
    let bound = LYAPUNOV_RESIDUAL_TOL * (1.0 + w.norm()) * theta.norm().max(1.0);
    if !(residual <= bound) {
        return Err(Error::SingularSystem("Lyapunov residual"));
    }
    Ok(w)
}

/// Solution path of the filter-covariance ODE on a time grid.
#[derive(Debug, Clone)]
pub struct RiccatiPath {
    pub t_grid: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
    pub limit: DMatrix<f64>,
}

impl RiccatiPath {
    /// Piecewise-constant lookup: the value at the last grid time `≤ t`.
    pub fn at(&self, t: f64) -> &DMatrix<f64> {
        let idx = self.t_grid.partition_point(|&s| s <= t);
        &self.values[idx.saturating_sub(1)]
    }

    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().unwrap_or(&0.0)
    }

    /// Path frozen at its limit on `[0, horizon]`.
    pub fn stationary(limit: DMatrix<f64>, horizon: f64) -> Self {
        Self { t_grid: vec![0.0, horizon], values: vec![limit.clone(), limit.clone()], limit }
    }
}

pub(crate) fn riccati_rhs(a: &DMatrix<f64>, btb: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    a * p + p * a.transpose() - p * btb * p + DMatrix::<f64>::identity(n, n)
}

/// RK4 integration of `P′ = A_xP + PA_xᵀ − Pbᵀb P + I` with the default step.
pub fn integrate_riccati_ode(
    a: &DMatrix<f64>,
    obs_b: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    t_grid: &[f64],
) -> Result<RiccatiPath> {
    integrate_riccati_ode_with_step(a, obs_b, p0, t_grid, DEFAULT_RICCATI_STEP)
}

/// As [`integrate_riccati_ode`], with at most `step` between RK4 evaluations.
/// Each grid interval is split into equal substeps.
pub fn integrate_riccati_ode_with_step(
    a: &DMatrix<f64>,
    obs_b: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    t_grid: &[f64],
    step: f64,
) -> Result<RiccatiPath> {
    let n = a.nrows();
    if a.ncols() != n || obs_b.ncols() != n || p0.shape() != (n, n) {
        return Err(Error::DimensionMismatch("Riccati ODE inputs".into()));
    }
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("t_grid must start at 0 and be strictly increasing".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Config("step must be positive".into()));
    }
    let btb = obs_b.transpose() * obs_b;
    let mut values = Vec::with_capacity(t_grid.len());
    let mut p = p0.clone();
    values.push(p.clone());
    for w in t_grid.windows(2) {
        let span = w[1] - w[0];
        let nsub = (span / step).ceil().max(1.0) as usize;
        let h = span / nsub as f64;
        for k in 0..nsub {
            let t = w[0] + k as f64 * h;
            let k1 = riccati_rhs(a, &btb, &p);
            let k2 = riccati_rhs(a, &btb, &(&p + &k1 * (h / 2.0)));
            let k3 = riccati_rhs(a, &btb, &(&p + &k2 * (h / 2.0)));
            let k4 = riccati_rhs(a, &btb, &(&p + &k3 * h));
            let next = &p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            check_drift(&next, t + h)?;
            p = linalg::symmetrize(&next);
        }
        values.push(p.clone());
    }
    let limit = solve_care(&CareProblem::filter(a, obs_b))?;
    Ok(RiccatiPath { t_grid: t_grid.to_vec(), values, limit })
}

pub(crate) fn check_drift(p: &DMatrix<f64>, t: f64) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepSizeTooCoarse { t, reason: "non-finite value".into() });
    }
    let scale = 1.0 + p.amax();
    let asym = linalg::asymmetry(p);
    if asym > DRIFT_TOL * scale {
        return Err(Error::StepSizeTooCoarse { t, reason: format!("asymmetry {asym:.3e}") });
    }
    let min_eig = linalg::min_sym_eigenvalue(p);
    if min_eig < -DRIFT_TOL * scale {
        return Err(Error::StepSizeTooCoarse { t, reason: format!("negative eigenvalue {min_eig:.3e}") });
    }
    Ok(())
}

pub fn uniform_grid(horizon: f64, step: f64) -> Vec<f64> {
    let n = (horizon / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}
