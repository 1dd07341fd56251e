//! Euler–Maruyama simulation of the controlled state and its filter.
//!
//! Path `i` draws `dW` from ChaCha8 stream `2i` and `dB` from stream `2i+1`
//! of the generator seeded with `seed`, so every path is reproducible on its
//! own and the `W` noise does not depend on the precision `b`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::RiccatiPath;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{normalize_observation, LQPersuasionModel, QuadraticForm};
use crate::output;
use crate::receiver::ReceiverSolution;

pub const DIVERGENCE_BOUND: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub burn_in: f64,
    /// Both noise channels switched off when false.
    pub noise: bool,
    /// Each step's Brownian increment is the sum of this many sub-increments,
    /// which couples a run at `dt` with one at `dt / noise_refinement`.
    pub noise_refinement: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 200.0,
            n_paths: 2000,
            seed: 0,
            burn_in: 0.2,
            noise: true,
            noise_refinement: 1,
        }
    }
}

impl SimConfig {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::Config(format!("need 0 < dt <= horizon, got dt = {}", self.dt)));
        }
        if self.n_paths == 0 || self.noise_refinement == 0 {
            return Err(Error::Config("n_paths and noise_refinement must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::Config(format!("burn_in {} outside [0, 1)", self.burn_in)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Mean of per-path values with the cross-path standard error.
pub fn cross_path_estimate(samples: &[f64]) -> Estimate {
    let n = samples.len() as f64;
    let value = linalg::pairwise_sum(samples) / n;
    if samples.len() < 2 {
        return Estimate { value, stderr: f64::NAN };
    }
    let dev: Vec<f64> = samples.iter().map(|s| (s - value).powi(2)).collect();
    let var = linalg::pairwise_sum(&dev) / (n - 1.0);
    Estimate { value, stderr: (var / n).sqrt() }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimStats {
    pub seed: u64,
    /// Joint state `(X, X̂)` at the horizon, one row per path.
    pub terminal: Vec<Vec<f64>>,
    /// Post-burn-in time averages per path.
    pub receiver_path_means: Vec<f64>,
    pub sender_path_means: Vec<f64>,
    pub state_path_means: Vec<Vec<f64>>,
    /// `(W stream, B stream)` per path.
    pub streams: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrand {
    Receiver,
    Sender,
    /// Component `i` of `X`.
    State(usize),
}

impl SimStats {
    pub fn dim(&self) -> usize {
        self.terminal.first().map_or(0, |z| z.len() / 2)
    }

    fn column(&self, i: usize) -> Vec<f64> {
        self.terminal.iter().map(|z| z[i]).collect()
    }

    pub fn terminal_mean(&self, i: usize) -> Estimate {
        cross_path_estimate(&self.column(i))
    }

    /// Sample covariance of joint components `i` and `j` at the horizon.
    pub fn terminal_cov(&self, i: usize, j: usize) -> Estimate {
        let (a, b) = (self.column(i), self.column(j));
        let (ma, mb) = (cross_path_estimate(&a).value, cross_path_estimate(&b).value);
        let prods: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).collect();
        bessel(cross_path_estimate(&prods), prods.len())
    }

    pub fn terminal_cov_matrix(&self) -> DMatrix<f64> {
        let n = 2 * self.dim();
        DMatrix::from_fn(n, n, |i, j| self.terminal_cov(i, j).value)
    }

    /// `Var̂(X_i) − Var̂(X̂_i)` with its standard error.
    pub fn variance_gap(&self, i: usize) -> Estimate {
        let n = self.dim();
        let (x, xh) = (self.column(i), self.column(n + i));
        let (mx, mh) = (cross_path_estimate(&x).value, cross_path_estimate(&xh).value);
        let d: Vec<f64> = x.iter().zip(&xh).map(|(a, b)| (a - mx).powi(2) - (b - mh).powi(2)).collect();
        bessel(cross_path_estimate(&d), d.len())
    }
}

fn bessel(e: Estimate, n: usize) -> Estimate {
    let c = n as f64 / (n as f64 - 1.0);
    Estimate { value: e.value * c, stderr: e.stderr * c }
}

pub fn ergodic_estimate(stats: &SimStats, which: Integrand) -> Estimate {
    match which {
        Integrand::Receiver => cross_path_estimate(&stats.receiver_path_means),
        Integrand::Sender => cross_path_estimate(&stats.sender_path_means),
        Integrand::State(i) => {
            let xs: Vec<f64> = stats.state_path_means.iter().map(|v| v[i]).collect();
            cross_path_estimate(&xs)
        }
    }
}

/// Recorded states of one path every `every` steps, including `t = 0`.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.x.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        if n == 1 {
            header.extend(["X".to_string(), "X_hat".to_string()]);
        } else {
            header.extend((1..=n).map(|i| format!("X_{i}")));
            header.extend((1..=n).map(|i| format!("X_hat_{i}")));
        }
        let rows: Vec<Vec<f64>> = (0..self.t.len())
            .map(|k| {
                let mut r = vec![self.t[k]];
                r.extend(&self.x[k]);
                r.extend(&self.x_hat[k]);
                r
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        output::write_csv(path, &header, &rows)
    }
}

/// Dense copies of the closed-loop data so the inner loop never allocates.
struct Kernel {
    n: usize,
    nb: usize,
    nr: usize,
    a: Vec<f64>,
    bx: Vec<f64>,
    c: Vec<f64>,
    obs: Vec<f64>,
    k: Vec<f64>,
    kc: Vec<f64>,
    model: LQPersuasionModel,
    g: QuadraticForm,
    t_grid: Vec<f64>,
    gains: Vec<Vec<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

fn matvec_add(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Kernel {
    fn new(model: &LQPersuasionModel, sol: &ReceiverSolution, riccati: &RiccatiPath, g: &QuadraticForm) -> Result<Self> {
        let m = normalize_observation(model)?;
        if g.l.len() != 2 * m.d_w {
            return Err(Error::DimensionMismatch("sender integrand must act on (X, X_hat)".into()));
        }
        let gains = riccati.values.iter().map(|p| row_major(&(p * m.obs_b.transpose()))).collect();
        Ok(Self {
            n: m.d_w,
            nb: m.d_b,
            nr: m.r,
            a: row_major(&m.a_x),
            bx: row_major(&m.b_x),
            c: m.c_x.iter().copied().collect(),
            obs: row_major(&m.obs_b),
            k: row_major(&sol.feedback_k),
            kc: sol.feedback_c.iter().copied().collect(),
            g: g.clone(),
            t_grid: riccati.t_grid.clone(),
            gains,
            model: m,
        })
    }
}

struct PathOut {
    terminal: Vec<f64>,
    receiver: f64,
    sender: f64,
    state: Vec<f64>,
}

fn normal_increment(rng: &mut ChaCha8Rng, scale: f64, refinement: usize) -> f64 {
    let mut s = 0.0;
    for _ in 0..refinement {
        s += rng.sample::<f64, _>(StandardNormal);
    }
    s * scale
}

fn run_path(
    kern: &Kernel,
    cfg: &SimConfig,
    path: u64,
    mut record: Option<(&mut Trajectory, usize)>,
) -> Result<PathOut> {
    let (n, nb, nr) = (kern.n, kern.nb, kern.nr);
    let mut rng_w = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_w.set_stream(2 * path);
    let mut rng_b = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_b.set_stream(2 * path + 1);

    let steps = cfg.n_steps();
    let burn = (cfg.burn_in * steps as f64).ceil() as usize;
    let dt = cfg.dt;
    let scale = (dt / cfg.noise_refinement as f64).sqrt();

    let mut x: Vec<f64> = kern.model.x0.iter().copied().collect();
    let mut xh = x.clone();
    let mut v = vec![0.0; nr];
    let mut dx = vec![0.0; n];
    let mut dxh = vec![0.0; n];
    let mut innov = vec![0.0; nb];
    let mut joint = vec![0.0; 2 * n];
    let mut xv = nalgebra::DVector::zeros(n);
    let mut vv = nalgebra::DVector::zeros(nr);
    let (mut acc_f, mut acc_g) = (0.0, 0.0);
    let mut acc_x = vec![0.0; n];
    let mut gidx = 0;

    if let Some((traj, _)) = record.as_mut() {
        traj.t.push(0.0);
        traj.x.push(x.clone());
        traj.x_hat.push(xh.clone());
    }

    for step in 0..steps {
        let t = step as f64 * dt;
        while gidx + 1 < kern.t_grid.len() && kern.t_grid[gidx + 1] <= t {
            gidx += 1;
        }
        let gain = &kern.gains[gidx];

        v.copy_from_slice(&kern.kc);
        matvec_add(&mut v, &kern.k, &xh);

        if step >= burn {
            xv.as_mut_slice().copy_from_slice(&x);
            vv.as_mut_slice().copy_from_slice(&v);
            acc_f += kern.model.running_cost(&xv, &vv);
            joint[..n].copy_from_slice(&x);
            joint[n..].copy_from_slice(&xh);
            acc_g += kern.g.eval(&joint);
            for (a, xi) in acc_x.iter_mut().zip(&x) {
                *a += xi;
            }
        }

        // common drift part B v + c
        dx.copy_from_slice(&kern.c);
        matvec_add(&mut dx, &kern.bx, &v);
        dxh.copy_from_slice(&dx);
        matvec_add(&mut dx, &kern.a, &x);
        matvec_add(&mut dxh, &kern.a, &xh);

        for (j, inn) in innov.iter_mut().enumerate() {
            let row = &kern.obs[j * n..(j + 1) * n];
            let err: f64 = row.iter().zip(x.iter().zip(&xh)).map(|(b, (a, c))| b * (a - c)).sum();
            let db = if cfg.noise { normal_increment(&mut rng_b, scale, cfg.noise_refinement) } else { 0.0 };
            *inn = err * dt + db;
        }
        for i in 0..n {
            let dw = if cfg.noise { normal_increment(&mut rng_w, scale, cfg.noise_refinement) } else { 0.0 };
            let row = &gain[i * nb..(i + 1) * nb];
            let filt: f64 = row.iter().zip(&innov).map(|(l, d)| l * d).sum();
            x[i] += dx[i] * dt + dw;
            xh[i] += dxh[i] * dt + filt;
        }
        let magnitude = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(magnitude <= DIVERGENCE_BOUND) {
            return Err(Error::UnstablePath { path, t: t + dt, magnitude });
        }
        if let Some((traj, every)) = record.as_mut() {
            if (step + 1) % *every == 0 {
                traj.t.push((step + 1) as f64 * dt);
                traj.x.push(x.clone());
                traj.x_hat.push(xh.clone());
            }
        }
    }

    let count = (steps - burn.min(steps)).max(1) as f64;
    let mut terminal = x;
    terminal.extend(xh);
    Ok(PathOut {
        terminal,
        receiver: acc_f / count,
        sender: acc_g / count,
        state: acc_x.into_iter().map(|a| a / count).collect(),
    })
}

pub fn simulate(
    model: &LQPersuasionModel,
    sol: &ReceiverSolution,
    riccati: &RiccatiPath,
    cfg: &SimConfig,
) -> Result<SimStats> {
    simulate_with_sender(model, sol, riccati, cfg, &QuadraticForm::zero(2 * model.d_w))
}

/// As [`simulate`], also averaging the Sender integrand `g(X, X̂)`.
pub fn simulate_with_sender(
    model: &LQPersuasionModel,
    sol: &ReceiverSolution,
    riccati: &RiccatiPath,
    cfg: &SimConfig,
    g: &QuadraticForm,
) -> Result<SimStats> {
    cfg.validate()?;
    let kern = Kernel::new(model, sol, riccati, g)?;
    let outs = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| run_path(&kern, cfg, p, None))
        .collect::<Vec<_>>();
    let mut stats = SimStats {
        seed: cfg.seed,
        terminal: Vec::with_capacity(cfg.n_paths),
        receiver_path_means: Vec::with_capacity(cfg.n_paths),
        sender_path_means: Vec::with_capacity(cfg.n_paths),
        state_path_means: Vec::with_capacity(cfg.n_paths),
        streams: (0..cfg.n_paths as u64).map(|p| (2 * p, 2 * p + 1)).collect(),
    };
    for out in outs {
        let out = out?;
        stats.terminal.push(out.terminal);
        stats.receiver_path_means.push(out.receiver);
        stats.sender_path_means.push(out.sender);
        stats.state_path_means.push(out.state);
    }
    Ok(stats)
}

/// Single path `path` recorded every `every` steps.
pub fn simulate_trajectory(
    model: &LQPersuasionModel,
    sol: &ReceiverSolution,
    riccati: &RiccatiPath,
    cfg: &SimConfig,
    path: u64,
    every: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    let kern = Kernel::new(model, sol, riccati, &QuadraticForm::zero(2 * model.d_w))?;
    let mut traj = Trajectory::default();
    run_path(&kern, cfg, path, Some((&mut traj, every.max(1))))?;
    Ok(traj)
}
