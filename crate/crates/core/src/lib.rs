//! Optimal stopping of one-dimensional diffusions over threshold rules.
//!
//! Given `dX = a(X) dt + sigma(X) dW`, a discount rate `rho` and a payoff
//! `g`, the value of stopping when `X` first reaches `p` factors as
//! `h(p) psi(x)` (or `h(p) phi(x)` from above), where `psi` and `phi` are the
//! increasing and decreasing solutions of `L u = rho u`. The crate builds
//! those solutions, maximizes `h`, certifies the maximizer, checks whether it
//! is optimal among all stopping times, and cross-checks values by Monte Carlo.
//!
//! ```
//! use optstop::prelude::*;
//!
//! let problem = Problem::new(
//!     DiffusionSpec::gbm(0.03, 0.25)?,
//!     PayoffSpec::terminal(RealFn::parse("x - 1")?),
//!     0.08,
//!     Direction::LInterval,
//!     GridSpec::bounded(0.02, 100.0),
//! )?;
//! let pair = fundamental_pair(&problem)?;
//! let solution = maximize_h(&problem, &pair)?;
//! let (beta, _) = beta_roots(0.03, 0.25, 0.08);
//! assert!((solution.p_star - beta / (beta - 1.0)).abs() < 1e-8);
//! # Ok::<(), optstop::Error>(())
//! ```

pub mod config;
pub mod diffusion;
pub mod error;
pub mod excessive;
pub mod expr;
pub mod fbp;
pub mod func;
pub mod fundsol;
pub mod green;
pub mod jet;
pub mod mcsim;
pub mod quad;
pub mod realopt;
pub mod report;
pub mod threshold;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod guide_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/problems.md")]
mod guide_problems {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fundamental.md")]
mod guide_fundamental {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/thresholds.md")]
mod guide_thresholds {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/optimality.md")]
mod guide_optimality {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/running-payoffs.md")]
mod guide_running_payoffs {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/free-boundary.md")]
mod guide_free_boundary {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/real-options.md")]
mod guide_real_options {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/monte-carlo.md")]
mod guide_monte_carlo {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod guide_cli {}

pub mod prelude {
    pub use crate::config::load_problem;
    pub use crate::diffusion::{
        check_regularity, generator_apply, scale_density, DiffusionSpec, Direction, GridSpec, Interval, PayoffSpec,
        Problem,
    };
    pub use crate::excessive::{check_statement_conditions, verify_global_optimality, GlobalVerdict, Verdict};
    pub use crate::fbp::{classify_by_propositions, find_stationary_points};
    pub use crate::func::RealFn;
    pub use crate::fundsol::{beta_roots, fundamental_pair, gamma_roots, FundamentalPair, Which};
    pub use crate::green::{green_decompose, reduce_integral_problem, verify_theorem4};
    pub use crate::mcsim::{
        estimate_alternative_rule, estimate_integral_value, estimate_refined, estimate_threshold_value, MCConfig,
        Scheme, StoppingRule,
    };
    pub use crate::realopt::{solve_abandonment, solve_investment, AbandonmentProblem, InvestmentProblem};
    pub use crate::threshold::{maximize_h, smooth_pasting_report, value_at};
    pub use crate::Error;
}
