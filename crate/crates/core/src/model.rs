//! Game data model: state/observation dynamics, Receiver cost, and the
//! standing-assumption checks that every solver relies on.
//!
//! State and message follow
//!
//! ```text
//! dX = (A_x X + B_x v + c_x) dt + dW,     X_0 = x0
//! dM = b X dt + Σ dB,                     M_0 = 0
//! ```
//!
//! and the Receiver pays `f(x, v) = xᵀF2x + F1ᵀx + F0 + vᵀC2v + C1ᵀv`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::algebra::{self, CareProblem};
use crate::error::{Error, Result};
use crate::linalg;

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-10;
pub const HURWITZ_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct LQPersuasionModel {
    pub d_w: usize,
    pub d_b: usize,
    pub r: usize,
    pub a_x: DMatrix<f64>,
    pub b_x: DMatrix<f64>,
    pub c_x: DVector<f64>,
    pub obs_b: DMatrix<f64>,
    pub obs_sigma: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub f1: DVector<f64>,
    pub f0: f64,
    pub c2: DMatrix<f64>,
    pub c1: DVector<f64>,
    pub x0: DVector<f64>,
}

impl LQPersuasionModel {
    /// One-dimensional model with `Σ = 1`: drift `-κ x + κℓ + v`, cost
    /// `F2 x² + F1 x + F0 + v²/(2γ)`.
    pub fn scalar_ou(kappa: f64, ell: f64, gamma: f64, f2: f64, f1: f64, f0: f64, b: f64) -> Self {
        let m1 = |v: f64| DMatrix::from_element(1, 1, v);
        let v1 = |v: f64| DVector::from_element(1, v);
        Self {
            d_w: 1,
            d_b: 1,
            r: 1,
            a_x: m1(-kappa),
            b_x: m1(1.0),
            c_x: v1(kappa * ell),
            obs_b: m1(b),
            obs_sigma: m1(1.0),
            f2: m1(f2),
            f1: v1(f1),
            f0,
            c2: m1(1.0 / (2.0 * gamma)),
            c1: v1(0.0),
            x0: v1(ell),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dw, db, r) = (self.d_w, self.d_b, self.r);
        if dw == 0 || db == 0 || r == 0 {
            return Err(Error::InvalidModel("dimensions must be positive".into()));
        }
        let shapes: [(&str, (usize, usize), (usize, usize)); 10] = [
            ("a_x", self.a_x.shape(), (dw, dw)),
            ("b_x", self.b_x.shape(), (dw, r)),
            ("c_x", self.c_x.shape(), (dw, 1)),
            ("obs_b", self.obs_b.shape(), (db, dw)),
            ("obs_sigma", self.obs_sigma.shape(), (db, db)),
            ("f2", self.f2.shape(), (dw, dw)),
            ("f1", self.f1.shape(), (dw, 1)),
            ("c2", self.c2.shape(), (r, r)),
            ("c1", self.c1.shape(), (r, 1)),
            ("x0", self.x0.shape(), (dw, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::InvalidModel(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        let all_finite = self.a_x.iter().chain(self.b_x.iter()).chain(self.c_x.iter())
            .chain(self.obs_b.iter()).chain(self.obs_sigma.iter()).chain(self.f2.iter())
            .chain(self.f1.iter()).chain(self.c2.iter()).chain(self.c1.iter())
            .chain(self.x0.iter()).all(|v| v.is_finite())
            && self.f0.is_finite();
        if !all_finite {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        for (name, m) in [("a_x", &self.a_x), ("f2", &self.f2), ("c2", &self.c2)] {
            let tol = SYMMETRY_TOL * m.amax().max(1.0);
            if linalg::asymmetry(m) > tol {
                return Err(Error::InvalidModel(format!("{name} is not symmetric")));
            }
        }
        if linalg::min_sym_eigenvalue(&self.f2) < -PSD_TOL {
            return Err(Error::InvalidModel("f2 is not positive semi-definite".into()));
        }
        if linalg::min_sym_eigenvalue(&self.c2) <= 0.0 {
            return Err(Error::InvalidModel("c2 is not positive definite".into()));
        }
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.obs_sigma == DMatrix::identity(self.d_b, self.d_b)
    }

    pub fn c2_inv(&self) -> DMatrix<f64> {
        self.c2
            .clone()
            .try_inverse()
            .expect("c2 is positive definite by validation")
    }

    /// `B_x C2⁻¹ B_xᵀ`.
    pub fn control_gain(&self) -> DMatrix<f64> {
        &self.b_x * self.c2_inv() * self.b_x.transpose()
    }

    /// Receiver running cost `f(x, v)` including `F0`.
    pub fn running_cost(&self, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
        x.dot(&(&self.f2 * x)) + self.f1.dot(x) + self.f0 + v.dot(&(&self.c2 * v)) + self.c1.dot(v)
    }

    pub fn with_precision(&self, b: DMatrix<f64>) -> Self {
        Self { obs_b: b, ..self.clone() }
    }
}

/// Replace `(b, Σ)` by `(Σ⁻¹ b, I)`. The Receiver's filtration is unchanged.
pub fn normalize_observation(model: &LQPersuasionModel) -> Result<LQPersuasionModel> {
    if model.is_normalized() {
        return Ok(model.clone());
    }
    let sv = model.obs_sigma.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > 1e-12 * smax.max(f64::MIN_POSITIVE)) {
        return Err(Error::Normalization { smallest_singular_value: smin });
    }
    let lu = model.obs_sigma.clone().lu();
    let b = lu
        .solve(&model.obs_b)
        .ok_or(Error::Normalization { smallest_singular_value: smin })?;
    Ok(LQPersuasionModel {
        obs_b: b,
        obs_sigma: DMatrix::identity(model.d_b, model.d_b),
        ..model.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    /// Eigenvalues as `(re, im)`.
    Eigenvalues { values: Vec<(f64, f64)> },
    Rank { achieved: usize, required: usize },
    MinEigenvalue { value: f64 },
    Failure { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub passed: bool,
    pub witness: Witness,
}

impl Check {
    fn rank(achieved: usize, required: usize) -> Self {
        Self { passed: achieved == required, witness: Witness::Rank { achieved, required } }
    }

    fn psd(m: &DMatrix<f64>) -> Self {
        let value = linalg::min_sym_eigenvalue(m);
        Self { passed: value >= -PSD_TOL, witness: Witness::MinEigenvalue { value } }
    }

    fn hurwitz(m: &DMatrix<f64>) -> Self {
        let values = linalg::eigenvalues(m);
        let passed = values.iter().all(|&(re, _)| re < -HURWITZ_TOL);
        Self { passed, witness: Witness::Eigenvalues { values } }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self { passed: false, witness: Witness::Failure { message: message.into() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// `(A_x, bᵀ)` stabilisable.
    pub stabilisable_filter: Check,
    pub f2_psd: Check,
    /// `B_x C2⁻¹ B_xᵀ ⪰ 0`.
    pub control_psd: Check,
    /// `(A_x, B_x C2⁻¹ B_xᵀ)` stabilisable.
    pub stabilisable_control: Check,
    /// `(F2, A_x)` detectable.
    pub detectable: Check,
    pub theta1_hurwitz: Check,
    pub theta_stable: Check,
    /// Controllability rank of `(Θ∞, Ξ∞)`.
    pub xi_observable: Check,
}

impl AssumptionReport {
    pub fn checks(&self) -> [(&'static str, &Check); 8] {
        [
            ("stabilisable_filter", &self.stabilisable_filter),
            ("f2_psd", &self.f2_psd),
            ("control_psd", &self.control_psd),
            ("stabilisable_control", &self.stabilisable_control),
            ("detectable", &self.detectable),
            ("theta1_hurwitz", &self.theta1_hurwitz),
            ("theta_stable", &self.theta_stable),
            ("xi_observable", &self.xi_observable),
        ]
    }

    pub fn all_pass(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks().iter().filter(|(_, c)| !c.passed).map(|(n, _)| *n).collect()
    }

    pub fn verdicts(&self) -> [bool; 8] {
        self.checks().map(|(_, c)| c.passed)
    }
}

/// Evaluate every standing assumption. Failures are reported, never thrown;
/// a model whose `Σ` is not the identity is normalized first.
pub fn assumption_report(model: &LQPersuasionModel) -> AssumptionReport {
    let normalized = normalize_observation(model);
    let m = match &normalized {
        Ok(m) => m,
        Err(e) => {
            let fail = || Check::failure(e.to_string());
            return AssumptionReport {
                stabilisable_filter: fail(),
                f2_psd: Check::psd(&model.f2),
                control_psd: fail(),
                stabilisable_control: fail(),
                detectable: fail(),
                theta1_hurwitz: fail(),
                theta_stable: fail(),
                xi_observable: fail(),
            };
        }
    };
    let n = m.d_w;
    let bt = m.obs_b.transpose();
    let gain = m.control_gain();

    let (ok, achieved) = linalg::hautus_stabilisable(&m.a_x, &bt, HURWITZ_TOL);
    let stabilisable_filter = Check { passed: ok, witness: Witness::Rank { achieved, required: n } };
    let f2_psd = Check::psd(&m.f2);
    let control_psd = Check::psd(&gain);
    let (_, achieved) = linalg::hautus_stabilisable(&m.a_x, &gain, HURWITZ_TOL);
    let stabilisable_control = Check::rank(achieved, n);
    let (_, achieved) = linalg::hautus_stabilisable(&m.a_x.transpose(), &m.f2.transpose(), HURWITZ_TOL);
    let detectable = Check::rank(achieved, n);

    let g2 = algebra::solve_care(&CareProblem::receiver(m));
    let p_inf = algebra::solve_care(&CareProblem::filter(&m.a_x, &m.obs_b));
    let theta1_hurwitz = match &g2 {
        Ok(g2) => Check::hurwitz(&(&m.a_x - &gain * g2)),
        Err(e) => Check::failure(format!("receiver Riccati equation: {e}")),
    };
    let (theta_stable, xi_observable) = match (&g2, &p_inf) {
        (Ok(g2), Ok(p)) => {
            let theta = crate::stationary::theta_matrix(m, g2, p);
            let xi = crate::stationary::xi_matrix(m, p);
            let ctrl = linalg::controllability_rank(&theta, &xi);
            (Check::hurwitz(&theta), Check::rank(ctrl, 2 * n))
        }
        (Err(e), _) => {
            let msg = format!("receiver Riccati equation: {e}");
            (Check::failure(msg.clone()), Check::failure(msg))
        }
        (_, Err(e)) => {
            let msg = format!("filter Riccati equation: {e}");
            (Check::failure(msg.clone()), Check::failure(msg))
        }
    };

    AssumptionReport {
        stabilisable_filter,
        f2_psd,
        control_psd,
        stabilisable_control,
        detectable,
        theta1_hurwitz,
        theta_stable,
        xi_observable,
    }
}

/// Quadratic form `zᵀQz + lᵀz + c0` on the joint state `z = (X, X̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub c0: f64,
}

impl QuadraticForm {
    pub fn zero(dim: usize) -> Self {
        Self { q: DMatrix::zeros(dim, dim), l: DVector::zeros(dim), c0: 0.0 }
    }

    /// Scalar-state form `qx·X² + lx·X + c0` that ignores `X̂`.
    pub fn on_state(qx: f64, lx: f64, c0: f64) -> Self {
        let mut f = Self::zero(2);
        f.q[(0, 0)] = qx;
        f.l[0] = lx;
        f.c0 = c0;
        f
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let n = self.l.len();
        let mut acc = self.c0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.q[(i, j)] * z[j];
            }
            acc += z[i] * row + self.l[i] * z[i];
        }
        acc
    }

    /// `E[zᵀQz + lᵀz + c0] = tr(Q w) + μᵀQμ + lᵀμ + c0` under any law with
    /// mean `μ` and covariance `w`.
    pub fn expectation(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        (&self.q * cov).trace() + mean.dot(&(&self.q * mean)) + self.l.dot(mean) + self.c0
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { q: &self.q * s, l: &self.l * s, c0: self.c0 * s }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    d_w: usize,
    d_b: usize,
    r: usize,
    a_x: Vec<Vec<f64>>,
    b_x: Vec<Vec<f64>>,
    c_x: Vec<f64>,
    obs_b: Vec<Vec<f64>>,
    obs_sigma: Vec<Vec<f64>>,
    f2: Vec<Vec<f64>>,
    f1: Vec<f64>,
    f0: f64,
    c2: Vec<Vec<f64>>,
    c1: Vec<f64>,
    x0: Vec<f64>,
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl TryFrom<ModelDoc> for LQPersuasionModel {
    type Error = Error;

    fn try_from(d: ModelDoc) -> Result<Self> {
        let model = Self {
            d_w: d.d_w,
            d_b: d.d_b,
            r: d.r,
            a_x: matrix_from_rows("a_x", &d.a_x)?,
            b_x: matrix_from_rows("b_x", &d.b_x)?,
            c_x: DVector::from_vec(d.c_x),
            obs_b: matrix_from_rows("obs_b", &d.obs_b)?,
            obs_sigma: matrix_from_rows("obs_sigma", &d.obs_sigma)?,
            f2: matrix_from_rows("f2", &d.f2)?,
            f1: DVector::from_vec(d.f1),
            f0: d.f0,
            c2: matrix_from_rows("c2", &d.c2)?,
            c1: DVector::from_vec(d.c1),
            x0: DVector::from_vec(d.x0),
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<LQPersuasionModel> for ModelDoc {
    fn from(m: LQPersuasionModel) -> Self {
        Self {
            d_w: m.d_w,
            d_b: m.d_b,
            r: m.r,
            a_x: rows_of(&m.a_x),
            b_x: rows_of(&m.b_x),
            c_x: m.c_x.iter().copied().collect(),
            obs_b: rows_of(&m.obs_b),
            obs_sigma: rows_of(&m.obs_sigma),
            f2: rows_of(&m.f2),
            f1: m.f1.iter().copied().collect(),
            f0: m.f0,
            c2: rows_of(&m.c2),
            c1: m.c1.iter().copied().collect(),
            x0: m.x0.iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig1(b: f64) -> LQPersuasionModel {
        // κ=0.5, ℓ=1, γ=1, u0=100, p0=50, p1=100
        LQPersuasionModel::scalar_ou(0.5, 1.0, 1.0, 200.0, 50.0 - 200.0, 100.0, b)
    }

    #[test]
    fn normalize_scalar_division() {
        let mut m = fig1(2.0);
        m.obs_sigma = DMatrix::from_element(1, 1, 2.0);
        let n = normalize_observation(&m).unwrap();
        assert_eq!(n.obs_b[(0, 0)], 1.0);
        assert_eq!(n.obs_sigma[(0, 0)], 1.0);
    }

    #[test]
    fn normalize_identity_is_noop() {
        let m = fig1(5.5);
        assert_eq!(normalize_observation(&m).unwrap(), m);
    }

    #[test]
    fn normalize_diagonal_cancellation() {
        let mut m = fig1(1.0);
        m.d_w = 2;
        m.d_b = 2;
        m.a_x = DMatrix::from_diagonal_element(2, 2, -0.5);
        m.b_x = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        m.c_x = DVector::zeros(2);
        m.f2 = DMatrix::identity(2, 2);
        m.f1 = DVector::zeros(2);
        m.x0 = DVector::zeros(2);
        m.obs_b = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        m.obs_sigma = m.obs_b.clone();
        m.validate().unwrap();
        let n = normalize_observation(&m).unwrap();
        assert!((n.obs_b - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn normalize_rejects_singular_sigma() {
        let mut m = fig1(1.0);
        m.obs_sigma = DMatrix::zeros(1, 1);
        match normalize_observation(&m) {
            Err(Error::Normalization { smallest_singular_value }) => {
                assert_eq!(smallest_singular_value, 0.0)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn figure_one_model_passes_every_check() {
        let rep = assumption_report(&fig1(5.5));
        assert!(rep.all_pass(), "{:?}", rep.failures());
    }

    #[test]
    fn unstable_unobserved_state_fails_filter_check() {
        let mut m = fig1(0.0);
        m.a_x = DMatrix::from_element(1, 1, 1.0);
        let rep = assumption_report(&m);
        assert!(!rep.stabilisable_filter.passed);
        assert_eq!(rep.stabilisable_filter.witness, Witness::Rank { achieved: 0, required: 1 });
    }

    #[test]
    fn no_information_breaks_joint_observability() {
        let rep = assumption_report(&fig1(0.0));
        assert!(!rep.xi_observable.passed);
        assert_eq!(rep.xi_observable.witness, Witness::Rank { achieved: 1, required: 2 });
        assert!(rep.theta_stable.passed);
    }

    #[test]
    fn json_rejects_unknown_keys_and_round_trips() {
        let m = fig1(5.5);
        let s = serde_json::to_string(&m).unwrap();
        let back: LQPersuasionModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<LQPersuasionModel>(v).is_err());
    }

    #[test]
    fn json_rejects_asymmetric_drift() {
        let mut v = serde_json::to_value(fig1(1.0)).unwrap();
        v["d_w"] = 2.into();
        v["a_x"] = serde_json::json!([[-1.0, 0.5], [0.0, -1.0]]);
        assert!(serde_json::from_value::<LQPersuasionModel>(v).is_err());
    }

    #[test]
    fn quadratic_expectation_of_degenerate_law_is_pointwise_value() {
        let f = QuadraticForm::on_state(2.0, -1.0, 3.0);
        let z = DVector::from_vec(vec![1.5, 0.3]);
        let e = f.expectation(&z, &DMatrix::zeros(2, 2));
        assert!((e - f.eval(z.as_slice())).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(b in -20.0f64..20.0, s in 0.05f64..10.0) {
            let mut m = fig1(b);
            m.obs_sigma = DMatrix::from_element(1, 1, s);
            let once = normalize_observation(&m).unwrap();
            let twice = normalize_observation(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn report_invariant_under_normalization(b in 0.1f64..20.0, s in 0.1f64..10.0) {
            let mut m = fig1(b * s);
            m.obs_sigma = DMatrix::from_element(1, 1, s);
            let raw = assumption_report(&m).verdicts();
            let norm = assumption_report(&normalize_observation(&m).unwrap()).verdicts();
            prop_assert_eq!(raw, norm);
        }

        #[test]
        fn scalar_models_pass_standing_checks(
            kappa in 0.01f64..5.0, gamma in 0.01f64..5.0, f2 in 0.0f64..500.0, b in 0.0f64..50.0
        ) {
            let m = LQPersuasionModel::scalar_ou(kappa, 1.0, gamma, f2, 0.3, 0.0, b);
            let rep = assumption_report(&m);
            prop_assert!(rep.stabilisable_filter.passed);
            prop_assert!(rep.f2_psd.passed);
            prop_assert!(rep.control_psd.passed);
            prop_assert!(rep.stabilisable_control.passed);
            prop_assert!(rep.detectable.passed);
            prop_assert!(rep.theta1_hurwitz.passed);
        }
    }
}
