use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("observation noise loading is singular (smallest singular value {smallest_singular_value:.3e})")]
    Normalization { smallest_singular_value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no stabilizing solution of the Riccati equation (closed-loop max real part {max_real_part:.6e})")]
    NoStabilizingSolution { max_real_part: f64 },

    #[error("Riccati residual too large: {residual:.3e} > {bound:.3e}")]
    ResidualTooLarge { residual: f64, bound: f64 },

    #[error("matrix is not Hurwitz (max real part {max_real_part:.6e})")]
    ThetaNotHurwitz { max_real_part: f64 },

    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),

    #[error("integration step too coarse at t = {t}: {reason}")]
    StepSizeTooCoarse { t: f64, reason: String },

    #[error("closed-loop matrix Theta1 is singular; cannot solve for the linear value coefficient")]
    Theta1Singular,

    #[error("mean-field iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("standing assumption violated at mean-field iterate {iteration}: {check}")]
    AssumptionViolatedAtIterate { iteration: usize, check: String },

    #[error("value {value} outside admissible range ({lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("simulated path {path} left the stability region at t = {t} (|X| = {magnitude:.3e})")]
    UnstablePath { path: u64, t: f64, magnitude: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
