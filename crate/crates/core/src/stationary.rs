//! Closed-loop joint system for `(X*, X̂*)` and its Gaussian moments.
//!
//! ```text
//! d𝒳 = (Θ(t) 𝒳 + ϑ) dt + Ξ(t) d(W, B)
//! Θ = [[A_x, −D G2], [P bᵀb, A_x − D G2 − P bᵀb]],   D = B_x C2⁻¹ B_xᵀ
//! Ξ = blockdiag(I, P bᵀ)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::algebra::{self, RiccatiPath};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{normalize_observation, LQPersuasionModel};
use crate::receiver::ReceiverSolution;

pub fn theta_matrix(model: &LQPersuasionModel, g2: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let dg2 = model.control_gain() * g2;
    let pbb = p * model.obs_b.transpose() * &model.obs_b;
    linalg::block2(&model.a_x, &(-&dg2), &pbb, &(&model.a_x - &dg2 - &pbb))
}

pub fn xi_matrix(model: &LQPersuasionModel, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = model.d_w;
    let gain = p * model.obs_b.transpose();
    linalg::block2(
        &DMatrix::identity(n, n),
        &DMatrix::zeros(n, model.d_b),
        &DMatrix::zeros(n, n),
        &gain,
    )
}

/// `θ = B_x k + c_x`, the constant drift shared by both components.
pub fn theta_offset(model: &LQPersuasionModel, sol: &ReceiverSolution) -> DVector<f64> {
    &model.b_x * &sol.feedback_c + &model.c_x
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSystem {
    pub t_grid: Vec<f64>,
    pub theta_of_t: Vec<DMatrix<f64>>,
    pub theta_limit: DMatrix<f64>,
    pub vartheta: DVector<f64>,
    pub xi_of_t: Vec<DMatrix<f64>>,
    pub xi_limit: DMatrix<f64>,
}

pub fn closed_loop_system(
    model: &LQPersuasionModel,
    sol: &ReceiverSolution,
    riccati: &RiccatiPath,
) -> Result<ClosedLoopSystem> {
    let m = normalize_observation(model)?;
    let n = m.d_w;
    if sol.g2.shape() != (n, n) || riccati.limit.shape() != (n, n) {
        return Err(Error::DimensionMismatch("closed-loop inputs".into()));
    }
    let theta = theta_offset(&m, sol);
    let vartheta = DVector::from_iterator(2 * n, theta.iter().chain(theta.iter()).copied());
    Ok(ClosedLoopSystem {
        t_grid: riccati.t_grid.clone(),
        theta_of_t: riccati.values.iter().map(|p| theta_matrix(&m, &sol.g2, p)).collect(),
        theta_limit: theta_matrix(&m, &sol.g2, &riccati.limit),
        vartheta,
        xi_of_t: riccati.values.iter().map(|p| xi_matrix(&m, p)).collect(),
        xi_limit: xi_matrix(&m, &riccati.limit),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryLaw {
    pub mean: DVector<f64>,
    pub cov_joint: DMatrix<f64>,
    pub p_limit: DMatrix<f64>,
}

impl StationaryLaw {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var_x(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.cov_joint.view((0, 0), (n, n)).into_owned()
    }

    pub fn var_x_hat(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.cov_joint.view((n, n), (n, n)).into_owned()
    }

    /// Scalar variance summary: trace of the X-block.
    pub fn x_variance(&self) -> f64 {
        self.var_x().trace()
    }

    pub fn joint_mean(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.dim(), self.mean.iter().chain(self.mean.iter()).copied())
    }
}

/// `m∞ = −Θ1⁻¹θ` and `w∞` from `wΘ∞ᵀ + Θ∞w + Ξ∞Ξ∞ᵀ = 0`.
pub fn stationary_law(model: &LQPersuasionModel, sol: &ReceiverSolution) -> Result<StationaryLaw> {
    let m = normalize_observation(model)?;
    let theta1 = sol.theta1(&m);
    let max_re = linalg::max_real_part(&theta1);
    if !(max_re < 0.0) {
        return Err(Error::ThetaNotHurwitz { max_real_part: max_re });
    }
    let mean = theta1
        .lu()
        .solve(&(-theta_offset(&m, sol)))
        .ok_or(Error::Theta1Singular)?;
    let theta = theta_matrix(&m, &sol.g2, &sol.p_limit);
    let xi = xi_matrix(&m, &sol.p_limit);
    let cov_joint = algebra::solve_lyapunov(&theta, &(&xi * xi.transpose()))?;
    Ok(StationaryLaw { mean, cov_joint, p_limit: sol.p_limit.clone() })
}

#[derive(Debug, Clone)]
pub struct MomentPath {
    pub t_grid: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

/// RK4 for `m′ = Θ1m + θ` from `x0` and `w′ = wΘ(t)ᵀ + Θ(t)w + Ξ(t)Ξ(t)ᵀ`
/// from `0`. The filter covariance is carried in the same state so every RK
/// stage sees a consistent `P(t)`; its initial value is taken from `riccati`.
pub fn integrate_moment_odes(
    model: &LQPersuasionModel,
    sol: &ReceiverSolution,
    riccati: &RiccatiPath,
    t_grid: &[f64],
) -> Result<MomentPath> {
    integrate_moment_odes_with_step(model, sol, &riccati.values[0], t_grid, algebra::DEFAULT_RICCATI_STEP)
}

pub fn integrate_moment_odes_with_step(
    model: &LQPersuasionModel,
    sol: &ReceiverSolution,
    p0: &DMatrix<f64>,
    t_grid: &[f64],
    step: f64,
) -> Result<MomentPath> {
    let m = normalize_observation(model)?;
    let n = m.d_w;
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("t_grid must start at 0 and be strictly increasing".into()));
    }
    let theta1 = sol.theta1(&m);
    let offset = theta_offset(&m, sol);
    let btb = m.obs_b.transpose() * &m.obs_b;

    let rhs = |mean: &DVector<f64>, w: &DMatrix<f64>, p: &DMatrix<f64>| {
        let th = theta_matrix(&m, &sol.g2, p);
        let xi = xi_matrix(&m, p);
        (
            &theta1 * mean + &offset,
            w * th.transpose() + &th * w + &xi * xi.transpose(),
            algebra::riccati_rhs(&m.a_x, &btb, p),
        )
    };

    let mut mean = m.x0.clone();
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    let mut p = p0.clone();
    let mut out = MomentPath { t_grid: t_grid.to_vec(), mean: vec![mean.clone()], cov: vec![w.clone()] };
    for win in t_grid.windows(2) {
        let span = win[1] - win[0];
        let nsub = (span / step).ceil().max(1.0) as usize;
        let h = span / nsub as f64;
        for k in 0..nsub {
            let (a1, b1, c1) = rhs(&mean, &w, &p);
            let (a2, b2, c2) = rhs(&(&mean + &a1 * (h / 2.0)), &(&w + &b1 * (h / 2.0)), &(&p + &c1 * (h / 2.0)));
            let (a3, b3, c3) = rhs(&(&mean + &a2 * (h / 2.0)), &(&w + &b2 * (h / 2.0)), &(&p + &c2 * (h / 2.0)));
            let (a4, b4, c4) = rhs(&(&mean + &a3 * h), &(&w + &b3 * h), &(&p + &c3 * h));
            mean += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
            let w_next = &w + (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0);
            let p_next = &p + (c1 + c2 * 2.0 + c3 * 2.0 + c4) * (h / 6.0);
            let t = win[0] + (k + 1) as f64 * h;
            algebra::check_drift(&w_next, t)?;
            algebra::check_drift(&p_next, t)?;
            w = linalg::symmetrize(&w_next);
            p = linalg::symmetrize(&p_next);
        }
        out.mean.push(mean.clone());
        out.cov.push(w.clone());
    }
    Ok(out)
}

/// Solve the Receiver problem and its stationary law in one call.
pub fn equilibrium(model: &LQPersuasionModel) -> Result<(ReceiverSolution, StationaryLaw)> {
    let sol = crate::receiver::solve_receiver(model)?;
    let law = stationary_law(model, &sol)?;
    Ok((sol, law))
}

/// `σ∞²(b) = (1/2κ)[1 − ((β−κ)/β)(√(1+κ²/b²) − κ/b)²]` for the scalar OU
/// application with `β = √(κ² + 2γF2)`.
pub fn scalar_variance_closed_form(kappa: f64, beta: f64, b: f64) -> f64 {
    if b == 0.0 {
        return 1.0 / (2.0 * kappa);
    }
    let r = kappa / b.abs();
    // √(1+r²) − r written without cancellation
    let s = 1.0 / ((1.0 + r * r).sqrt() + r);
    (1.0 - (beta - kappa) / beta * s * s) / (2.0 * kappa)
}
