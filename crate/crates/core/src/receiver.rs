//! Receiver's separated ergodic control problem.
//!
//! With the ansatz `V(x) = xᵀG2x + G1ᵀx` the ergodic HJB splits into a
//! Riccati equation for `G2`, a linear system for `G1` and the constant `ζ`.
//! The optimal control is affine in the filter, `v* = K x̂ + k`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::algebra::{self, CareProblem};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{normalize_observation, LQPersuasionModel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReceiverSolution {
    pub g2: DMatrix<f64>,
    pub g1: DVector<f64>,
    pub zeta: f64,
    pub feedback_k: DMatrix<f64>,
    pub feedback_c: DVector<f64>,
    pub p_limit: DMatrix<f64>,
}

impl ReceiverSolution {
    pub fn control(&self, x_hat: &DVector<f64>) -> DVector<f64> {
        &self.feedback_k * x_hat + &self.feedback_c
    }

    /// `Θ1 = A_x − B_x C2⁻¹ B_xᵀ G2`.
    pub fn theta1(&self, model: &LQPersuasionModel) -> DMatrix<f64> {
        &model.a_x + &model.b_x * &self.feedback_k
    }
}

pub fn solve_receiver(model: &LQPersuasionModel) -> Result<ReceiverSolution> {
    model.validate()?;
    let m = normalize_observation(model)?;
    let g2 = algebra::solve_care(&CareProblem::receiver(&m))?;
    let p = algebra::solve_care(&CareProblem::filter(&m.a_x, &m.obs_b))?;
    let c2_inv = m.c2_inv();
    let gain = m.control_gain();

    // (A_xᵀ − G2 D) G1 = −(2 G2 c_x − G2 B_x C2⁻¹ C1 + F1)
    let lhs = m.a_x.transpose() - &g2 * &gain;
    let rhs = -(&g2 * &m.c_x * 2.0 - &g2 * &m.b_x * &c2_inv * &m.c1 + &m.f1);
    let g1 = solve_theta1_system(&lhs, &rhs)?;

    let lin = m.b_x.transpose() * &g1 + &m.c1;
    let btb = m.obs_b.transpose() * &m.obs_b;
    let diffusion = (&g2 * &p * &btb * &p).trace();
    let printed = (&m.obs_b * p.transpose() * &g2 * &p * m.obs_b.transpose()).trace();
    if (diffusion - printed).abs() > 1e-10 * (1.0 + diffusion.abs()) {
        log::warn!("trace forms of the diffusion term disagree: {diffusion} vs {printed}");
    }
    let zeta = m.c_x.dot(&g1) - 0.25 * lin.dot(&(&c2_inv * &lin)) + diffusion;

    let feedback_k = -(&c2_inv * m.b_x.transpose() * &g2);
    let feedback_c = -(&c2_inv * &lin) * 0.5;
    Ok(ReceiverSolution { g2, g1, zeta, feedback_k, feedback_c, p_limit: p })
}

fn solve_theta1_system(lhs: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = lhs.nrows();
    if linalg::rank(lhs) < n {
        return Err(Error::Theta1Singular);
    }
    lhs.clone().lu().solve(rhs).ok_or(Error::Theta1Singular)
}

/// `inf_v {L∞V(x) + f(x, v)} − ζ` with `f` taken without `F0`, evaluated
/// at the analytic minimizer.
pub fn hjb_residual(model: &LQPersuasionModel, sol: &ReceiverSolution, x: &DVector<f64>) -> f64 {
    let m = normalize_observation(model).unwrap_or_else(|_| model.clone());
    let grad = &sol.g2 * x * 2.0 + &sol.g1;
    let c2_inv = m.c2_inv();
    let v = -(&c2_inv * (m.b_x.transpose() * &grad + &m.c1)) * 0.5;
    let drift = &m.a_x * x + &m.b_x * &v + &m.c_x;
    let btb = m.obs_b.transpose() * &m.obs_b;
    let diffusion = (&sol.g2 * &sol.p_limit * &btb * &sol.p_limit).trace();
    let cost = x.dot(&(&m.f2 * x)) + m.f1.dot(x) + v.dot(&(&m.c2 * &v)) + m.c1.dot(&v);
    drift.dot(&grad) + diffusion + cost - sol.zeta
}

/// Full ergodic Receiver cost `J^R = ζ + F0 + tr(F2 P∞)`.
pub fn receiver_ergodic_value(model: &LQPersuasionModel, sol: &ReceiverSolution) -> f64 {
    sol.zeta + model.f0 + (&model.f2 * &sol.p_limit).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig1(b: f64) -> LQPersuasionModel {
        LQPersuasionModel::scalar_ou(0.5, 1.0, 1.0, 200.0, -150.0, 100.0, b)
    }

    #[test]
    fn figure_one_coefficients_and_feedback() {
        let sol = solve_receiver(&fig1(5.5)).unwrap();
        let (kappa, gamma, ell) = (0.5, 1.0, 1.0);
        let beta = 400.25f64.sqrt();
        assert!((sol.g2[(0, 0)] - (beta - kappa) / (2.0 * gamma)).abs() < 1e-12);
        assert!((sol.g2[(0, 0)] - 9.75312).abs() < 1e-5);
        assert!((sol.feedback_k[(0, 0)] + 2.0 * gamma * sol.g2[(0, 0)]).abs() < 1e-12);
        assert!((sol.feedback_k[(0, 0)] + 19.50625).abs() < 1e-5);
        // v*(x̂) = κ(x̂ − ℓ) − βx̂ + βm∞
        let m_inf = 150.25 / 400.25;
        assert!((sol.feedback_k[(0, 0)] - (kappa - beta)).abs() < 1e-12);
        assert!((sol.feedback_c[0] - (-kappa * ell + beta * m_inf)).abs() < 1e-12);
    }

    #[test]
    fn no_linear_terms_gives_zero_g1() {
        let m = LQPersuasionModel::scalar_ou(0.5, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0);
        let sol = solve_receiver(&m).unwrap();
        assert_eq!(sol.g1[0], 0.0);
        assert_eq!(sol.feedback_c[0], 0.0);
    }

    #[test]
    fn carbon_g2() {
        let m = LQPersuasionModel::scalar_ou(0.5, 9.0, 0.1, 1.0, 0.0, 0.0, 1.0);
        let sol = solve_receiver(&m).unwrap();
        assert!((sol.g2[(0, 0)] - (0.45f64.sqrt() - 0.5) / 0.2).abs() < 1e-12);
        assert!((sol.g2[(0, 0)] - 0.854102).abs() < 1e-6);
    }

    #[test]
    fn hjb_residual_vanishes_on_a_sweep() {
        let m = fig1(5.5);
        let sol = solve_receiver(&m).unwrap();
        assert!(hjb_residual(&m, &sol, &DVector::zeros(1)).abs() < 1e-9);
        let worst = (0..100)
            .map(|i| -10.0 + 20.0 * i as f64 / 99.0)
            .map(|x| hjb_residual(&m, &sol, &DVector::from_element(1, x)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8, "{worst:e}");
    }

    #[test]
    fn shifted_zeta_shifts_residual() {
        let m = fig1(5.5);
        let mut sol = solve_receiver(&m).unwrap();
        sol.zeta += 1.0;
        for x in [-3.0, 0.0, 2.5] {
            let r = hjb_residual(&m, &sol, &DVector::from_element(1, x));
            assert!((r + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ergodic_value_at_figure_one() {
        let m = fig1(5.5);
        let sol = solve_receiver(&m).unwrap();
        assert!((sol.zeta + 19.942477147055612).abs() < 1e-9);
        assert!((receiver_ergodic_value(&m, &sol) - 113.26532786843947).abs() < 1e-9);
    }

    #[test]
    fn zero_f2_value_independent_of_precision() {
        let vals: Vec<f64> = [0.0, 0.5, 3.0, 40.0]
            .iter()
            .map(|&b| {
                let m = LQPersuasionModel::scalar_ou(0.7, 2.0, 0.4, 0.0, 1.3, 2.0, b);
                receiver_ergodic_value(&m, &solve_receiver(&m).unwrap())
            })
            .collect();
        for v in &vals {
            assert!((v - vals[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_information_limit() {
        let m = fig1(1e6);
        let sol = solve_receiver(&m).unwrap();
        let j = receiver_ergodic_value(&m, &sol);
        assert!((j - (sol.zeta + m.f0)).abs() < 1e-3);
    }

    #[test]
    fn f0_enters_only_the_full_value() {
        let a = fig1(2.0);
        let mut b = a.clone();
        b.f0 += 7.0;
        let (sa, sb) = (solve_receiver(&a).unwrap(), solve_receiver(&b).unwrap());
        assert_eq!(sa.zeta, sb.zeta);
        let gap = receiver_ergodic_value(&b, &sb) - receiver_ergodic_value(&a, &sa);
        assert!((gap - 7.0).abs() < 1e-12);
    }

    #[test]
    fn value_non_increasing_in_precision() {
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let b = 0.01 * 1.2f64.powi(i);
            let m = fig1(b);
            let j = receiver_ergodic_value(&m, &solve_receiver(&m).unwrap());
            assert!(j <= prev + 1e-10);
            prev = j;
        }
    }

    proptest! {
        #[test]
        fn feedback_form_matches_first_order_condition(x in -50.0f64..50.0, b in 0.0f64..20.0) {
            let m = fig1(b);
            let sol = solve_receiver(&m).unwrap();
            let xh = DVector::from_element(1, x);
            let grad = &sol.g2 * &xh * 2.0 + &sol.g1;
            let foc = -(m.c2_inv() * (m.b_x.transpose() * grad + &m.c1)) * 0.5;
            let v = sol.control(&xh);
            prop_assert!((foc[0] - v[0]).abs() <= 1e-12 * (1.0 + v[0].abs()));
        }

        #[test]
        fn scalar_g2_closed_form(kappa in 0.01f64..5.0, gamma in 0.01f64..5.0, f2 in 0.0f64..500.0) {
            let m = LQPersuasionModel::scalar_ou(kappa, 1.0, gamma, f2, 0.0, 0.0, 1.0);
            let g2 = solve_receiver(&m).unwrap().g2[(0, 0)];
            let exact = ((kappa * kappa + 2.0 * gamma * f2).sqrt() - kappa) / (2.0 * gamma);
            prop_assert!((g2 - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        }
    }
}
