use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("x = {x} is outside the open interval ({lower}, {upper})")]
    Domain { x: f64, lower: f64, upper: f64 },

    #[error("derivative requested at a kink, x = {x}")]
    Kink { x: f64 },

    #[error("expression error: {0}")]
    Expr(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("quadrature on [{a}, {b}] did not converge: estimate {estimate}, error estimate {error}")]
    Quadrature {
        a: f64,
        b: f64,
        estimate: f64,
        error: f64,
    },

    #[error("process `{0}` has no closed-form fundamental solutions")]
    NotInCatalog(String),

    #[error("{which} did not converge; last shooting bracket [{lo}, {hi}]")]
    FundamentalSolve { which: &'static str, lo: f64, hi: f64 },

    #[error("{which} is not positive and strictly monotone at x = {x}")]
    Monotonicity { which: &'static str, x: f64 },

    #[error("payoff is non-positive on the whole window [{lo}, {hi}]")]
    TrivialProblem { lo: f64, hi: f64 },

    #[error("Green integral on the {side} side diverges: tail increments {tail:?}")]
    GreenDivergence { side: &'static str, tail: Vec<f64> },

    #[error("hypothesis failed at x = {x}: {what}")]
    HypothesisFailed { x: f64, what: String },

    #[error("function is not a difference of convex functions on the scan range: {0}")]
    NotDcRepresentable(String),

    #[error("Monte Carlo configuration: {0}")]
    McConfig(String),

    #[error("problem file: {0}")]
    Config(String),
}
