//! Investment timing and abandonment.
//!
//! Investing pays `X - I` the first time the price rises to `p*`. Abandoning a
//! project that earns `g1(X)` per unit time costs `L` and is done the first
//! time the price falls to `p*`.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{Catalog, DiffusionSpec, Direction, GridSpec, PayoffSpec, Problem};
use crate::error::{Error, Result};
use crate::func::RealFn;
use crate::fundsol::{beta_roots, fundamental_pair, FundamentalPair, Which};
use crate::green::{green_decompose, reduce_integral_problem, verify_theorem4, ReducedProblem, Theorem4Certificate};
use crate::report::{self, Check};
use crate::threshold::{maximize_h, ThresholdSolution};

#[derive(Debug, Clone)]
pub struct InvestmentProblem {
    pub cost: f64,
    pub process: DiffusionSpec,
    pub discount: f64,
    pub grid: GridSpec,
}

impl InvestmentProblem {
    /// Uses the window `[I/50, 100 I]` when `I > 0`.
    pub fn new(cost: f64, process: DiffusionSpec, discount: f64) -> Self {
        let grid = if cost > 0.0 {
            GridSpec::bounded(cost / 50.0, 100.0 * cost)
        } else {
            GridSpec::default()
        };
        InvestmentProblem {
            cost,
            process,
            discount,
            grid,
        }
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = grid;
        self
    }

    pub fn problem(&self) -> Result<Problem> {
        if !(self.cost >= 0.0) {
            return Err(Error::Invalid(format!("investment cost {} must be nonnegative", self.cost)));
        }
        if self.cost >= self.process.domain().upper {
            return Err(Error::Invalid("investment cost must lie below the upper end of the state space".into()));
        }
        let g = RealFn::parse(&format!("x - {:e}", self.cost))?;
        Problem::new(
            self.process.clone(),
            PayoffSpec::terminal(g),
            self.discount,
            Direction::LInterval,
            self.grid.clone(),
        )
    }

    /// `beta I / (beta - 1)` for geometric Brownian motion with `rho > alpha`.
    pub fn closed_form(&self) -> Option<f64> {
        match self.process.catalog() {
            Some(Catalog::Gbm { alpha, sigma }) if self.discount > alpha => {
                let (b, _) = beta_roots(alpha, sigma, self.discount);
                Some(b * self.cost / (b - 1.0))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PastingIdentity {
    /// `psi(p*)`.
    pub lhs: f64,
    /// `(p* - I) psi'(p*)`.
    pub rhs: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// The three conditions that make `p*` an optimal investment threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Theorem5Certificate {
    /// `(p - I) psi(p*) <= (p* - I) psi(p)` for grid `p < p*`.
    pub dominance: Check,
    pub pasting: PastingIdentity,
    /// `a(p) <= rho (p - I)` for grid `p > p*`.
    pub generator: Check,
    pub above_cost: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvestmentSolution {
    pub cost: f64,
    pub solution: ThresholdSolution,
    pub certificate: Option<Theorem5Certificate>,
    pub closed_form: Option<f64>,
    /// Threshold obtained with the payoff `(x - I)^+`.
    pub positive_part_p_star: Option<f64>,
    #[serde(skip)]
    pub problem: Problem,
}

pub fn theorem5_certificate(problem: &Problem, pair: &FundamentalPair, cost: f64, p_star: f64) -> Theorem5Certificate {
    let (psi_s, dpsi_s) = pair.eval(Which::Psi, p_star);
    let gain = p_star - cost;
    let scale = gain.abs().max(1.0);
    let mut dominance = Check::vacuous();
    for (&p, &u) in pair.grid().iter().zip(pair.psi_values()) {
        if p < p_star {
            dominance.observe(p, ((p - cost) * psi_s - gain * u) / psi_s.max(u));
        }
    }
    let dominance = dominance.decide(1e-9 * scale);
    let rhs = gain * dpsi_s;
    let tolerance = 1e-8 * psi_s.abs().max(rhs.abs());
    let residual = psi_s - rhs;
    let pasting = PastingIdentity {
        lhs: psi_s,
        rhs,
        residual,
        tolerance,
        pass: residual.abs() <= tolerance,
    };
    let rho = problem.discount;
    let mut generator = Check::vacuous();
    for &p in pair.grid() {
        if p > p_star {
            let a = problem.process.drift(p);
            let m = a - rho * (p - cost);
            generator.observe(p, m / (a.abs() + rho * (p - cost).abs()).max(1.0));
        }
    }
    let generator = generator.decide(1e-9);
    let above_cost = p_star > cost;
    let pass = dominance.pass && pasting.pass && generator.pass && above_cost;
    Theorem5Certificate {
        dominance,
        pasting,
        generator,
        above_cost,
        pass,
    }
}

/// Maximizes `(p - I) / psi(p)` and checks the investment conditions at the
/// result. The run with `(x - I)^+` is kept as a comparison.
pub fn solve_investment(ip: &InvestmentProblem) -> Result<InvestmentSolution> {
    let problem = ip.problem()?;
    let pair = fundamental_pair(&problem)?;
    let solution = maximize_h(&problem, &pair)?;
    let certificate = solution
        .exists
        .then(|| theorem5_certificate(&problem, &pair, ip.cost, solution.p_star));
    let positive_part_p_star = if ip.cost > 0.0 {
        let plus = problem.with_payoff(
            PayoffSpec::terminal(RealFn::parse(&format!("max(x - {:e}, 0)", ip.cost))?).with_kinks(vec![ip.cost]),
        )?;
        maximize_h(&plus, &pair).ok().filter(|s| s.exists).map(|s| s.p_star)
    } else {
        None
    };
    Ok(InvestmentSolution {
        cost: ip.cost,
        solution,
        certificate,
        closed_form: ip.closed_form(),
        positive_part_p_star,
        problem,
    })
}

#[derive(Debug, Clone)]
pub struct AbandonmentProblem {
    /// Revenue rate `g1`.
    pub flow: RealFn,
    /// Zero-profit price when the flow is `x - c`.
    pub revenue_cost: Option<f64>,
    /// Abandonment cost `L`.
    pub salvage: f64,
    pub process: DiffusionSpec,
    pub discount: f64,
    pub grid: GridSpec,
}

impl AbandonmentProblem {
    pub fn new(flow: RealFn, salvage: f64, process: DiffusionSpec, discount: f64) -> Self {
        AbandonmentProblem {
            flow,
            revenue_cost: None,
            salvage,
            process,
            discount,
            grid: GridSpec::default(),
        }
    }

    /// Flow `x - c` on the window `[c/100, 50 c]`.
    pub fn linear(revenue_cost: f64, salvage: f64, process: DiffusionSpec, discount: f64) -> Result<Self> {
        let flow = RealFn::parse(&format!("x - {revenue_cost:e}"))?;
        let grid = if revenue_cost > 0.0 {
            GridSpec::bounded(revenue_cost / 100.0, 50.0 * revenue_cost)
        } else {
            GridSpec::default()
        };
        Ok(AbandonmentProblem {
            flow,
            revenue_cost: Some(revenue_cost),
            salvage,
            process,
            discount,
            grid,
        })
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = grid;
        self
    }

    /// Terminal payoff `-L` with running payoff `g1`.
    pub fn problem(&self) -> Result<Problem> {
        if !(self.salvage >= 0.0) {
            return Err(Error::Invalid(format!("abandonment cost {} must be nonnegative", self.salvage)));
        }
        Problem::new(
            self.process.clone(),
            PayoffSpec::terminal(RealFn::constant(-self.salvage)).with_flow(self.flow.clone()),
            self.discount,
            Direction::RInterval,
            self.grid.clone(),
        )
    }

    /// `beta1/(beta1 - 1) (rho - alpha)/rho (c - rho L)` for geometric
    /// Brownian motion with negative drift and `c > rho L`.
    pub fn closed_form(&self) -> Option<f64> {
        let c = self.revenue_cost?;
        let rho = self.discount;
        match self.process.catalog() {
            Some(Catalog::Gbm { alpha, sigma }) if alpha < 0.0 && c > rho * self.salvage => {
                let (_, b1) = beta_roots(alpha, sigma, rho);
                Some(b1 / (b1 - 1.0) * (rho - alpha) / rho * (c - rho * self.salvage))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BreakevenDiagnostic {
    pub flow_at_p_star: f64,
    pub flow_negative: bool,
    pub i2_at_p_star: f64,
    pub i2_negative: bool,
    /// `p* < c` when the flow is `x - c`.
    pub below_zero_profit: Option<bool>,
    /// `p* < c - rho L` for geometric Brownian motion.
    pub below_adjusted_cost: Option<bool>,
    /// `beta1 > rho / alpha` for geometric Brownian motion.
    pub root_bound: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AbandonmentSolution {
    pub solution: ThresholdSolution,
    pub certificate: Option<Theorem4Certificate>,
    pub breakeven: Option<BreakevenDiagnostic>,
    pub closed_form: Option<f64>,
    #[serde(skip)]
    pub problem: Problem,
    #[serde(skip)]
    pub reduced: ReducedProblem,
}

impl AbandonmentSolution {
    /// Value of the optimal rule: `R(x)` plus the reduced threshold value.
    pub fn value(&self, x: f64) -> Result<f64> {
        let v = self.solution.value_fn(&self.reduced.problem, x)?;
        Ok(self.reduced.total_value(x, v))
    }
}

/// Reduces the flow through the Green representation, maximizes over lower
/// thresholds and checks the three abandonment conditions.
pub fn solve_abandonment(ap: &AbandonmentProblem) -> Result<AbandonmentSolution> {
    let problem = ap.problem()?;
    let pair = fundamental_pair(&problem)?;
    let green = green_decompose(&problem, &pair)?;
    let reduced = reduce_integral_problem(&problem, green)?;
    let solution = maximize_h(&reduced.problem, &pair)?;
    let (certificate, breakeven) = if solution.exists {
        let p = solution.p_star;
        let cert = verify_theorem4(&problem, &reduced.green, p)?;
        let flow = ap.flow.eval(p);
        let i2 = cert.i2_at_pstar;
        let gbm = match ap.process.catalog() {
            Some(Catalog::Gbm { alpha, sigma }) => Some((alpha, sigma)),
            _ => None,
        };
        let breakeven = BreakevenDiagnostic {
            flow_at_p_star: flow,
            flow_negative: flow < 0.0,
            i2_at_p_star: i2,
            i2_negative: i2 < 0.0,
            below_zero_profit: ap.revenue_cost.map(|c| p < c),
            below_adjusted_cost: gbm.and(ap.revenue_cost).map(|c| p < c - ap.discount * ap.salvage),
            root_bound: gbm.filter(|(a, _)| *a < 0.0).map(|(a, s)| {
                let (_, b1) = beta_roots(a, s, ap.discount);
                b1 > ap.discount / a
            }),
        };
        (Some(cert), Some(breakeven))
    } else {
        (None, None)
    };
    Ok(AbandonmentSolution {
        solution,
        certificate,
        breakeven,
        closed_form: ap.closed_form(),
        problem,
        reduced,
    })
}

/// `n` points spaced evenly in log scale from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

pub const DEFAULT_SWEEP_POINTS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    /// `NaN` when no interior threshold exists.
    pub p_star: f64,
    pub closed_form: f64,
    pub certified: bool,
}

/// Investment thresholds for geometric Brownian motion over a range of volatilities.
pub fn investment_sigma_sweep(alpha: f64, discount: f64, cost: f64, sigmas: &[f64]) -> Result<Vec<SweepRow>> {
    sigmas
        .par_iter()
        .map(|&sigma| {
            let ip = InvestmentProblem::new(cost, DiffusionSpec::gbm(alpha, sigma)?, discount);
            let s = solve_investment(&ip)?;
            Ok(SweepRow {
                sigma,
                p_star: if s.solution.exists { s.solution.p_star } else { f64::NAN },
                closed_form: s.closed_form.unwrap_or(f64::NAN),
                certified: s.certificate.is_some_and(|c| c.pass),
            })
        })
        .collect()
}

/// Abandonment thresholds for geometric Brownian motion with flow `x - c`.
pub fn abandonment_sigma_sweep(
    alpha: f64,
    discount: f64,
    revenue_cost: f64,
    salvage: f64,
    sigmas: &[f64],
) -> Result<Vec<SweepRow>> {
    sigmas
        .par_iter()
        .map(|&sigma| {
            let ap = AbandonmentProblem::linear(revenue_cost, salvage, DiffusionSpec::gbm(alpha, sigma)?, discount)?;
            let s = solve_abandonment(&ap)?;
            Ok(SweepRow {
                sigma,
                p_star: if s.solution.exists { s.solution.p_star } else { f64::NAN },
                closed_form: s.closed_form.unwrap_or(f64::NAN),
                certified: s.certificate.as_ref().is_some_and(|c| c.pass),
            })
        })
        .collect()
}

/// CSV `sigma, p_star, closed_form, certified`.
pub fn write_sweep_csv<W: Write>(w: &mut W, rows: &[SweepRow]) -> io::Result<()> {
    report::write_csv(
        w,
        &["sigma", "p_star", "closed_form", "certified"],
        rows.iter()
            .map(|r| vec![r.sigma, r.p_star, r.closed_form, if r.certified { 1.0 } else { 0.0 }]),
    )
}
