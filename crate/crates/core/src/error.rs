use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("sigma is singular on cell {cell} (condition estimate {condition:.3e})")]
    SingularSigma { cell: usize, condition: f64 },

    #[error("time interval [{t1}, {t2}] is outside [0, {horizon}]")]
    OutOfRange { t1: f64, t2: f64, horizon: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("constraint set does not contain the origin: {0}")]
    OriginNotFeasible(String),

    #[error("box-QP projection failed to converge on cell {cell} (KKT residual {residual:.3e})")]
    InfeasibleQp { cell: usize, residual: f64 },

    #[error("g_v = {g_v:.6e} is not negative at (t={t}, v={v}, y={y})")]
    NonNegativeGv { t: f64, v: f64, y: f64, g_v: f64 },

    #[error("exponent {exponent:.3e} overflows double precision")]
    NumericOverflow { exponent: f64 },

    #[error("preference family does not expose g")]
    GExposureMissing,

    #[error(
        "fixed-point iteration did not converge on [{start}, {end}) after {iterations} sweeps (best distance {best:.3e})"
    )]
    NoConvergence {
        start: f64,
        end: f64,
        iterations: usize,
        best: f64,
    },

    #[error("clamp bound {bound:.6e} binds at cell {cell} (h = {h:.6e})")]
    ClampBinding { cell: usize, h: f64, bound: f64 },

    #[error("tail energy v_a = {v:.3e} at t = {t} exceeds the blow-up threshold")]
    BlowUp { t: f64, v: f64 },

    #[error("oracle iteration did not converge after {sweeps} sweeps (last update {last:.3e})")]
    OracleNoConvergence { sweeps: usize, last: f64 },
}
