//! Ergodic mean-field game: damped Picard iteration on the stationary
//! mean/covariance pair that enters the Receiver's coefficients.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{assumption_report, LQPersuasionModel};
use crate::receiver::ReceiverSolution;
use crate::stationary::{self, StationaryLaw};

/// Coefficients `(F1, F2, c_x)` as functions of the population mean and
/// joint covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub f1: DVector<f64>,
    pub f2: DMatrix<f64>,
    pub c_x: DVector<f64>,
    /// Constant cost, carried for completeness; it never moves the equilibrium.
    pub f0: f64,
}

pub type CoefficientMap = Arc<dyn Fn(&DVector<f64>, &DMatrix<f64>) -> Coefficients + Send + Sync>;

#[derive(Clone)]
pub struct MfgFamily {
    pub base: LQPersuasionModel,
    pub coefficient_map: CoefficientMap,
}

impl fmt::Debug for MfgFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MfgFamily").field("base", &self.base).finish_non_exhaustive()
    }
}

impl MfgFamily {
    pub fn new(base: LQPersuasionModel, coefficient_map: CoefficientMap) -> Self {
        Self { base, coefficient_map }
    }

    pub fn instantiate(&self, m: &DVector<f64>, w: &DMatrix<f64>) -> LQPersuasionModel {
        let c = (self.coefficient_map)(m, w);
        LQPersuasionModel { f1: c.f1, f2: c.f2, c_x: c.c_x, f0: c.f0, ..self.base.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfgOptions {
    pub tol: f64,
    pub damping: f64,
    pub max_iter: usize,
}

impl Default for MfgOptions {
    fn default() -> Self {
        Self { tol: 1e-10, damping: 0.5, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct MfgEquilibrium {
    pub m_star: DVector<f64>,
    pub w_star: DMatrix<f64>,
    pub model: LQPersuasionModel,
    pub solution: ReceiverSolution,
    pub law: StationaryLaw,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

fn gap(m: &DVector<f64>, w: &DMatrix<f64>, law: &StationaryLaw) -> f64 {
    (m - &law.mean).amax().max((w - &law.cov_joint).amax())
}

fn best_response(
    family: &MfgFamily,
    m: &DVector<f64>,
    w: &DMatrix<f64>,
    iteration: usize,
) -> Result<(LQPersuasionModel, ReceiverSolution, StationaryLaw)> {
    let model = family.instantiate(m, w);
    let violated = |check: String| Error::AssumptionViolatedAtIterate { iteration, check };
    model.validate().map_err(|e| violated(e.to_string()))?;
    // Joint observability only affects uniqueness of the degenerate b = 0 law,
    // which the iteration handles; every other check is required.
    let report = assumption_report(&model);
    if let Some(name) = report.failures().into_iter().find(|n| *n != "xi_observable") {
        return Err(violated(name.to_string()));
    }
    let (sol, law) = stationary::equilibrium(&model).map_err(|e| violated(e.to_string()))?;
    Ok((model, sol, law))
}

/// Damped fixed-point iteration
/// `(m, w) ← (1 − δ)(m, w) + δ (m∞, w∞)(m, w)` until the gap is below `tol`.
pub fn mfg_solve(
    family: &MfgFamily,
    init: (DVector<f64>, DMatrix<f64>),
    opts: MfgOptions,
) -> Result<MfgEquilibrium> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Config(format!("damping {} outside (0, 1]", opts.damping)));
    }
    let (mut m, mut w) = init;
    let n = family.base.d_w;
    if m.len() != n || w.shape() != (2 * n, 2 * n) {
        return Err(Error::DimensionMismatch("mean-field initial guess".into()));
    }
    let mut history = Vec::new();
    for iteration in 0..=opts.max_iter {
        let (model, solution, law) = best_response(family, &m, &w, iteration)?;
        let residual = gap(&m, &w, &law);
        history.push(residual);
        if residual <= opts.tol {
            return Ok(MfgEquilibrium {
                m_star: m,
                w_star: w,
                model,
                solution,
                law,
                iterations: iteration,
                residual,
                residual_history: history,
            });
        }
        if iteration == opts.max_iter {
            return Err(Error::NoConvergence { iterations: iteration, residual });
        }
        let d = opts.damping;
        m = &m * (1.0 - d) + &law.mean * d;
        w = &w * (1.0 - d) + &law.cov_joint * d;
    }
    unreachable!("loop returns on its last iteration")
}

/// `max(‖m − m∞(m, w)‖, ‖w − w∞(m, w)‖)` in the max norm.
pub fn mfg_residual(family: &MfgFamily, candidate: (&DVector<f64>, &DMatrix<f64>)) -> Result<f64> {
    let (_, _, law) = best_response(family, candidate.0, candidate.1, 0)?;
    Ok(gap(candidate.0, candidate.1, &law))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smart_meter_family(b: f64) -> MfgFamily {
        let (kappa, ell, u0, gamma, p0, p1) = (0.5, 1.0, 100.0, 1.0, 50.0, 100.0);
        let base = LQPersuasionModel::scalar_ou(kappa, ell, gamma, u0, 0.0, u0 * ell * ell, b);
        let c_x = base.c_x.clone();
        MfgFamily::new(
            base,
            Arc::new(move |m: &DVector<f64>, _w: &DMatrix<f64>| Coefficients {
                f1: DVector::from_element(1, p0 + p1 * m[0] - 2.0 * ell * u0),
                f2: DMatrix::from_element(1, 1, u0),
                c_x: c_x.clone(),
                f0: u0 * ell * ell,
            }),
        )
    }

    fn carbon_family(eps: f64, lambda_q: f64) -> MfgFamily {
        let (kappa, ell, a, gamma, lambda_a) = (0.5, 9.0, 9.0, 0.1, 0.25);
        let base = LQPersuasionModel::scalar_ou(kappa, ell, gamma, lambda_a + lambda_q, 0.0, 0.0, 1.0);
        let c_x = base.c_x.clone();
        MfgFamily::new(
            base,
            Arc::new(move |m: &DVector<f64>, w: &DMatrix<f64>| {
                let q = m[0] - eps * w[(0, 0)].max(0.0).sqrt();
                Coefficients {
                    f1: DVector::from_element(1, -2.0 * (lambda_a * a + lambda_q * q)),
                    f2: DMatrix::from_element(1, 1, lambda_a + lambda_q),
                    c_x: c_x.clone(),
                    f0: lambda_a * a * a + lambda_q * q * q,
                }
            }),
        )
    }

    fn zero_init() -> (DVector<f64>, DMatrix<f64>) {
        (DVector::zeros(1), DMatrix::zeros(2, 2))
    }

    #[test]
    fn smart_meter_equilibrium_mean() {
        let eq = mfg_solve(&smart_meter_family(5.5), zero_init(), MfgOptions::default()).unwrap();
        let exact = (200.25 - 50.0) / (200.25 + 100.0);
        assert!((eq.m_star[0] - exact).abs() <= 1e-8);
        assert!((eq.m_star[0] - 0.500416).abs() < 1e-6);
        assert!(eq.residual <= 1e-10);
    }

    #[test]
    fn uncoupled_carbon_matches_single_receiver() {
        let fam = carbon_family(1.0, 0.0);
        let eq = mfg_solve(&fam, zero_init(), MfgOptions { damping: 1.0, ..Default::default() }).unwrap();
        let model = fam.instantiate(&DVector::zeros(1), &DMatrix::zeros(2, 2));
        let (_, law) = stationary::equilibrium(&model).unwrap();
        assert!((eq.m_star[0] - law.mean[0]).abs() < 1e-12);
        assert!(eq.iterations <= 2);
    }

    #[test]
    fn damping_does_not_move_the_equilibrium() {
        for fam in [smart_meter_family(2.0), carbon_family(1.5, 0.75)] {
            let sols: Vec<_> = [0.3, 0.5, 1.0]
                .iter()
                .map(|&d| {
                    let opts = MfgOptions { damping: d, ..Default::default() };
                    mfg_solve(&fam, zero_init(), opts).unwrap()
                })
                .collect();
            for s in &sols[1..] {
                assert!((&s.m_star - &sols[0].m_star).amax() <= 1e-9);
                assert!((&s.w_star - &sols[0].w_star).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn residual_history_contracts() {
        let eq = mfg_solve(&carbon_family(2.0, 0.75), zero_init(), MfgOptions::default()).unwrap();
        let h = &eq.residual_history;
        assert!(h.len() > 4);
        for k in 3..h.len() - 1 {
            if h[k] > 1e-13 {
                assert!(h[k + 1] / h[k] < 1.0, "ratio at {k}: {}", h[k + 1] / h[k]);
            }
        }
    }

    #[test]
    fn residual_is_positive_away_from_equilibrium() {
        let fam = carbon_family(1.0, 0.75);
        let eq = mfg_solve(&fam, zero_init(), MfgOptions::default()).unwrap();
        assert!(mfg_residual(&fam, (&eq.m_star, &eq.w_star)).unwrap() <= 1e-10);
        let single_model = fam.instantiate(&DVector::from_element(1, 9.0), &DMatrix::zeros(2, 2));
        let (_, single) = stationary::equilibrium(&single_model).unwrap();
        assert!(mfg_residual(&fam, (&single.mean, &single.cov_joint)).unwrap() > 1e-3);
        // the mean map has slope 1/3, so a unit perturbation leaves a gap of 2/3
        let bumped = &eq.m_star + DVector::from_element(1, 1.0);
        let r = mfg_residual(&fam, (&bumped, &eq.w_star)).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn no_convergence_is_reported() {
        let opts = MfgOptions { max_iter: 2, damping: 0.1, ..Default::default() };
        match mfg_solve(&smart_meter_family(1.0), zero_init(), opts) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_iterate_is_named() {
        let base = LQPersuasionModel::scalar_ou(0.5, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0);
        let fam = MfgFamily::new(
            base,
            Arc::new(|m: &DVector<f64>, _w: &DMatrix<f64>| Coefficients {
                f1: DVector::zeros(1),
                f2: DMatrix::from_element(1, 1, if m[0] > 0.01 { -1.0 } else { 1.0 }),
                c_x: DVector::from_element(1, 0.5),
                f0: 0.0,
            }),
        );
        let r = mfg_solve(&fam, zero_init(), MfgOptions::default());
        assert!(matches!(r, Err(Error::AssumptionViolatedAtIterate { iteration: 1, .. })), "{r:?}");
    }
}
