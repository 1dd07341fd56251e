//! Sender's static problem: choose the scalar device precision `b ≥ 0`
//! minimizing `E[g] + h(b)` under the stationary (or mean-field) law the
//! Receiver's optimal response induces.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra;
use crate::error::{Error, Result};
use crate::mfg::{self, CoefficientMap, MfgFamily, MfgOptions};
use crate::model::{LQPersuasionModel, QuadraticForm};
use crate::receiver::ReceiverSolution;
use crate::stationary::{self, StationaryLaw};

pub const GRID_POINTS: usize = 200;
pub const GRID_FLOOR: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-8;

pub type ModelOfB = Arc<dyn Fn(f64) -> LQPersuasionModel + Send + Sync>;

#[derive(Clone)]
pub enum SenderMode {
    Single,
    Mfg { map: CoefficientMap, init: (DVector<f64>, DMatrix<f64>), opts: MfgOptions },
}

/// `g` as a quadratic in the joint state plus terms in the equilibrium mean
/// `m`, such as the income `p(m)·m` of the mean-field application.
#[derive(Debug, Clone, PartialEq)]
pub struct SenderCost {
    pub g: QuadraticForm,
    pub mean_q: DMatrix<f64>,
    pub mean_l: DVector<f64>,
}

impl SenderCost {
    pub fn new(g: QuadraticForm, d_w: usize) -> Self {
        Self { g, mean_q: DMatrix::zeros(d_w, d_w), mean_l: DVector::zeros(d_w) }
    }

    /// `½k·Var(X)` for a scalar state: the quadratic `½k X²` with the `½k m²`
    /// part removed again through the mean term.
    pub fn variance_only(k: f64) -> Self {
        Self {
            g: QuadraticForm::on_state(0.5 * k, 0.0, 0.0),
            mean_q: DMatrix::from_element(1, 1, -0.5 * k),
            mean_l: DVector::zeros(1),
        }
    }

    pub fn expectation(&self, law: &StationaryLaw) -> f64 {
        let m = &law.mean;
        self.g.expectation(&law.joint_mean(), &law.cov_joint) + m.dot(&(&self.mean_q * m)) + self.mean_l.dot(m)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { g: self.g.scaled(s), mean_q: &self.mean_q * s, mean_l: &self.mean_l * s }
    }
}

/// Device cost `h`. The variance-based families read `z`, the X-block
/// stationary variance at the chosen precision; all satisfy `h(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceCost {
    None,
    /// `H(z) = (rη/2)(Δv/(z − v_lo) − 1)`.
    ReciprocalVariance { r: f64, eta: f64, v_lo: f64, v_hi: f64 },
    /// `G(z) = −½(η/Δv) ln((z − v_lo)/Δv)`.
    LogBarrier { eta: f64, v_lo: f64, v_hi: f64 },
    /// `Σ_i coeffs[i]·b^(i+1)`.
    Polynomial { coeffs: Vec<f64> },
}

impl DeviceCost {
    pub fn eval(&self, b: f64, z: f64) -> f64 {
        if b == 0.0 {
            return 0.0;
        }
        match *self {
            DeviceCost::None => 0.0,
            DeviceCost::ReciprocalVariance { r, eta, v_lo, v_hi } => {
                if z <= v_lo {
                    return f64::INFINITY;
                }
                0.5 * r * eta * ((v_hi - v_lo) / (z - v_lo) - 1.0)
            }
            DeviceCost::LogBarrier { eta, v_lo, v_hi } => {
                if z <= v_lo {
                    return f64::INFINITY;
                }
                let dv = v_hi - v_lo;
                -0.5 * eta / dv * ((z - v_lo) / dv).ln()
            }
            DeviceCost::Polynomial { ref coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, c| (acc + c) * b)
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            DeviceCost::None => DeviceCost::None,
            DeviceCost::ReciprocalVariance { r, eta, v_lo, v_hi } => {
                DeviceCost::ReciprocalVariance { r: *r, eta: eta * s, v_lo: *v_lo, v_hi: *v_hi }
            }
            DeviceCost::LogBarrier { eta, v_lo, v_hi } => {
                DeviceCost::LogBarrier { eta: eta * s, v_lo: *v_lo, v_hi: *v_hi }
            }
            DeviceCost::Polynomial { coeffs } => {
                DeviceCost::Polynomial { coeffs: coeffs.iter().map(|c| c * s).collect() }
            }
        }
    }
}

#[derive(Clone)]
pub struct SenderScenario {
    pub model_of_b: ModelOfB,
    pub mode: SenderMode,
    pub g_spec: SenderCost,
    pub h_spec: DeviceCost,
}

impl fmt::Debug for SenderScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            SenderMode::Single => "single",
            SenderMode::Mfg { .. } => "mfg",
        };
        f.debug_struct("SenderScenario")
            .field("mode", &mode)
            .field("g_spec", &self.g_spec)
            .field("h_spec", &self.h_spec)
            .finish_non_exhaustive()
    }
}

impl SenderScenario {
    pub fn scaled(&self, s: f64) -> Self {
        Self { g_spec: self.g_spec.scaled(s), h_spec: self.h_spec.scaled(s), ..self.clone() }
    }
}

/// Everything computed for one precision level.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub b: f64,
    pub model: LQPersuasionModel,
    pub solution: ReceiverSolution,
    pub law: StationaryLaw,
    pub expected_g: f64,
    pub device_cost: f64,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.expected_g + self.device_cost
    }

    pub fn x_variance(&self) -> f64 {
        self.law.x_variance()
    }
}

pub fn evaluate(scenario: &SenderScenario, b: f64) -> Result<Evaluation> {
    if !(b >= 0.0) {
        return Err(Error::Config(format!("precision must be non-negative, got {b}")));
    }
    let base = (scenario.model_of_b)(b);
    let (model, solution, law) = match &scenario.mode {
        SenderMode::Single => {
            let (sol, law) = stationary::equilibrium(&base)?;
            (base, sol, law)
        }
        SenderMode::Mfg { map, init, opts } => {
            let family = MfgFamily::new(base, map.clone());
            let eq = mfg::mfg_solve(&family, init.clone(), *opts)?;
            (eq.model, eq.solution, eq.law)
        }
    };
    let expected_g = scenario.g_spec.expectation(&law);
    let device_cost = scenario.h_spec.eval(b, law.x_variance());
    Ok(Evaluation { b, model, solution, law, expected_g, device_cost })
}

pub fn sender_objective(scenario: &SenderScenario, b: f64) -> Result<f64> {
    Ok(evaluate(scenario, b)?.objective())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFlag {
    Interior,
    NoInformation,
    Cap,
}

#[derive(Debug, Clone, Serialize)]
pub struct SenderResult {
    pub b_star: f64,
    pub objective_star: f64,
    pub boundary_flag: BoundaryFlag,
    /// `(b, objective)` over the search grid, ordered by `b`.
    pub grid: Vec<(f64, f64)>,
    pub warning: Option<String>,
}

pub fn search_grid(b_max: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    if b_max <= GRID_FLOOR {
        grid.extend((1..=GRID_POINTS).map(|i| b_max * i as f64 / GRID_POINTS as f64));
    } else {
        let ratio = (b_max / GRID_FLOOR).ln();
        grid.extend((0..GRID_POINTS).map(|i| GRID_FLOOR * (ratio * i as f64 / (GRID_POINTS - 1) as f64).exp()));
        *grid.last_mut().unwrap() = b_max;
    }
    grid
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn golden(f: &dyn Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64)> {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2)?;
        }
        if x2 - x1 <= f64::EPSILON * x2.abs() {
            break;
        }
    }
    Ok(if f1 <= f2 { (x1, f1) } else { (x2, f2) })
}

/// Locate the zero of a central-difference derivative around `b`. Golden
/// section alone stalls at `√ε` relative accuracy on flat minima.
fn polish(f: &dyn Fn(f64) -> Result<f64>, b: f64, lo: f64, hi: f64) -> Result<Option<f64>> {
    let deriv = |x: f64| -> Result<f64> {
        let h = 1e-5 * x.abs().max(1e-3);
        Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
    };
    let delta = 1e-4 * (1.0 + b);
    let (mut a, mut c) = ((b - delta).max(lo), (b + delta).min(hi));
    if a <= 0.0 {
        return Ok(None);
    }
    let (da, dc) = (deriv(a)?, deriv(c)?);
    if !(da < 0.0 && dc > 0.0) {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + c);
        if mid <= a || mid >= c {
            break;
        }
        if deriv(mid)? < 0.0 {
            a = mid;
        } else {
            c = mid;
        }
    }
    Ok(Some(0.5 * (a + c)))
}

fn multimodality_warning(grid: &[f64], vals: &[f64]) -> Option<String> {
    let n = vals.len();
    let minima: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || vals[i] <= vals[i - 1];
            let right = i + 1 == n || vals[i] <= vals[i + 1];
            left && right
        })
        .collect();
    for (k, &i) in minima.iter().enumerate() {
        for &j in &minima[k + 1..] {
            if j > i + 1 && (vals[i] - vals[j]).abs() <= 1e-6 {
                return Some(format!(
                    "objective has near-equal local minima at b = {} and b = {}",
                    grid[i], grid[j]
                ));
            }
        }
    }
    None
}

/// Grid scan over `{0} ∪ logspace(1e-3, b_max)` followed by golden-section
/// refinement of the best bracket. The endpoints `0` and `b_max` always
/// compete; ties go to the endpoint.
pub fn optimize_precision(scenario: &SenderScenario, b_max: f64, tol: f64) -> Result<SenderResult> {
    if !(b_max > 0.0) || !(tol > 0.0) {
        return Err(Error::Config(format!("need b_max > 0 and tol > 0, got {b_max}, {tol}")));
    }
    let grid = search_grid(b_max);
    let vals = grid
        .par_iter()
        .map(|&b| sender_objective(scenario, b))
        .collect::<Result<Vec<f64>>>()?;
    let best = (0..vals.len()).fold(0, |best, i| if vals[i] < vals[best] { i } else { best });
    let warning = multimodality_warning(&grid, &vals);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }

    let f = |b: f64| sender_objective(scenario, b);
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (mut b_ref, mut f_ref) = golden(&f, lo, hi, tol)?;
    if let Some(b) = polish(&f, b_ref, lo, hi)? {
        b_ref = b;
        f_ref = f(b)?;
    }

    let last = grid.len() - 1;
    let (b_grid, f_grid) = [(0.0, vals[0]), (b_max, vals[last]), (grid[best], vals[best])]
        .into_iter()
        .fold((f64::NAN, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
    // Near an interior grid minimum the refined point is trusted down to
    // rounding noise; against an endpoint it has to win by more than that.
    let interior = best != 0 && best != last;
    let slack = 1e-12 * f_grid.abs().max(1.0);
    let accept = if interior { f_ref <= f_grid + slack } else { f_ref < f_grid - slack };
    let (b_star, objective_star) = if accept { (b_ref, f_ref) } else { (b_grid, f_grid) };
    let boundary_flag = if b_star == 0.0 {
        BoundaryFlag::NoInformation
    } else if b_star >= b_max {
        BoundaryFlag::Cap
    } else {
        BoundaryFlag::Interior
    };
    Ok(SenderResult { b_star, objective_star, boundary_flag, grid: grid.into_iter().zip(vals).collect(), warning })
}

fn x_variance_at(scenario: &SenderScenario, b: f64) -> Result<f64> {
    Ok(evaluate(scenario, b)?.x_variance())
}

/// `(v_lo, v_hi)`: the full-information floor `lyap(Θ1, I)` and the
/// no-information variance at `b = 0`.
pub fn variance_bounds(scenario: &SenderScenario) -> Result<(f64, f64)> {
    let ev = evaluate(scenario, 0.0)?;
    let n = ev.model.d_w;
    let theta1 = ev.solution.theta1(&ev.model);
    let floor = algebra::solve_lyapunov(&theta1, &DMatrix::identity(n, n))?;
    Ok((floor.trace(), ev.x_variance()))
}

/// The `b ≥ 0` whose stationary X-variance equals `z`, by bisection on the
/// decreasing map `b ↦ σ∞²(b)`. Scalar observation only.
pub fn invert_variance(scenario: &SenderScenario, z: f64) -> Result<f64> {
    let probe = (scenario.model_of_b)(0.0);
    if probe.d_w != 1 || probe.d_b != 1 {
        return Err(Error::Config("variance inversion needs a scalar observation".into()));
    }
    let (v_lo, v_hi) = variance_bounds(scenario)?;
    if (z - v_hi).abs() <= 1e-12 * v_hi {
        return Ok(0.0);
    }
    if !(z > v_lo && z <= v_hi) {
        return Err(Error::OutOfRange { value: z, lo: v_lo, hi: v_hi });
    }
    let mut hi = 1.0;
    let mut doublings = 0;
    while x_variance_at(scenario, hi)? > z {
        hi *= 2.0;
        doublings += 1;
        if doublings > 1100 {
            return Err(Error::OutOfRange { value: z, lo: v_lo, hi: v_hi });
        }
    }
    let mut lo = 0.0;
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if x_variance_at(scenario, mid)? > z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Optimal variance for the reciprocal-variance cost:
/// `v_hi` if `kΔv ≤ rη`, else `v_lo + √(rηΔv/k)`.
pub fn app1_variance_rule(k: f64, r: f64, eta: f64, v_lo: f64, v_hi: f64) -> f64 {
    let dv = v_hi - v_lo;
    if k * dv <= r * eta {
        v_hi
    } else {
        v_lo + (r * eta * dv / k).sqrt()
    }
}

/// `H′(z)` for the reciprocal-variance cost.
pub fn reciprocal_variance_slope(r: f64, eta: f64, v_lo: f64, v_hi: f64, z: f64) -> f64 {
    -0.5 * r * eta * (v_hi - v_lo) / (z - v_lo).powi(2)
}
