//! Running payoffs through the Green representation.
//!
//! With `H(y) = 2 / (sigma^2(y) S'(y))` the perpetual flow value is
//! `R(x) = B^{-1} [phi(x) I1(x) + psi(x) I2(x)]`, where
//! `I1(x) = int_l^x psi g1 H` and `I2(x) = int_x^r phi g1 H`. Subtracting `R`
//! from the terminal payoff turns a problem with a running payoff into a
//! terminal one.

use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::diffusion::{scale_density, Direction, PayoffSpec, Problem};
use crate::error::{Error, Result};
use crate::func::{RealFn, Side, SmoothFn};
use crate::fundsol::{FundamentalPair, Which};
use crate::jet::{ode_jet, Jet};
use crate::quad;
use crate::report::{self, Check};

/// Relative change below which a tail extension counts as converged.
pub const TAIL_TOL: f64 = 1e-6;
const MAX_EXTENSIONS: usize = 80;

/// How the integral beyond one end of the window was obtained.
#[derive(Debug, Clone, Serialize)]
pub struct TailDiagnostic {
    pub value: f64,
    /// Last segment contribution relative to the accumulated tail.
    pub last_change: f64,
    /// Geometric estimate of what remains beyond the last segment.
    pub remainder: f64,
    pub extensions: usize,
    /// Outermost point reached.
    pub reach: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GreenDecomposition {
    pub grid: Vec<f64>,
    pub r: Vec<f64>,
    pub dr: Vec<f64>,
    pub i1: Vec<f64>,
    pub i2: Vec<f64>,
    pub b: f64,
    /// `H(y) = 2 / (sigma^2 S')` on the grid.
    pub h: Vec<f64>,
    pub scale: Vec<f64>,
    pub lower_tail: TailDiagnostic,
    pub upper_tail: TailDiagnostic,
    #[serde(skip)]
    flow: Option<RealFn>,
    #[serde(skip)]
    pair: FundamentalPair,
    #[serde(skip)]
    problem: Problem,
}

fn flow_at(flow: &Option<RealFn>, x: f64) -> f64 {
    flow.as_ref().map_or(0.0, |f| f.eval(x))
}

/// Builds `R`, `I1`, `I2` on the pair's grid.
pub fn green_decompose(problem: &Problem, pair: &FundamentalPair) -> Result<GreenDecomposition> {
    let flow = problem.payoff.flow().cloned();
    let grid = pair.grid().to_vec();
    let n = grid.len();
    let b = pair.wronskian();
    let process = &problem.process;
    let scale = pair.scale_values().to_vec();
    let h: Vec<f64> = grid
        .iter()
        .zip(&scale)
        .map(|(&x, s)| {
            let sig = process.sigma(x);
            2.0 / (sig * sig * s)
        })
        .collect();

    // per-cell integrals of psi g1 H and phi g1 H
    let mut c1 = vec![0.0; n - 1];
    let mut c2 = vec![0.0; n - 1];
    if flow.is_some() {
        for i in 0..n - 1 {
            let (a, bb) = (grid[i], grid[i + 1]);
            let weight = |y: f64| flow_weight(problem, &flow, a, scale[i], y);
            c1[i] = cell_integral(|y| pair.psi(y) * weight(y), a, bb);
            c2[i] = cell_integral(|y| pair.phi(y) * weight(y), a, bb);
        }
    }

    let lower_tail = tail(problem, pair, &flow, Which::Psi)?;
    let upper_tail = tail(problem, pair, &flow, Which::Phi)?;

    let mut i1 = vec![0.0; n];
    let mut i2 = vec![0.0; n];
    i1[0] = lower_tail.value;
    for i in 1..n {
        i1[i] = i1[i - 1] + c1[i - 1];
    }
    i2[n - 1] = upper_tail.value;
    for i in (0..n - 1).rev() {
        i2[i] = i2[i + 1] + c2[i];
    }
    let psi = pair.psi_values();
    let phi = pair.phi_values();
    let r: Vec<f64> = (0..n).map(|i| (phi[i] * i1[i] + psi[i] * i2[i]) / b).collect();
    let dr: Vec<f64> = (0..n)
        .map(|i| (pair.dphi_values()[i] * i1[i] + pair.dpsi_values()[i] * i2[i]) / b)
        .collect();
    Ok(GreenDecomposition {
        grid,
        r,
        dr,
        i1,
        i2,
        b,
        h,
        scale,
        lower_tail,
        upper_tail,
        flow,
        pair: pair.clone(),
        problem: problem.clone(),
    })
}

/// `g1(y) H(y)`, carrying `S'` from the node `a` where it equals `s_a`.
fn flow_weight(problem: &Problem, flow: &Option<RealFn>, a: f64, s_a: f64, y: f64) -> f64 {
    let process = &problem.process;
    let log = quad::integrate(
        |t| {
            let s = process.sigma(t);
            2.0 * process.drift(t) / (s * s)
        },
        a,
        y,
        1e-15,
        1e-13,
    )
    .map_or(f64::NAN, |q| q.value);
    let sig = process.sigma(y);
    flow_at(flow, y) * 2.0 / (sig * sig * s_a * (-log).exp())
}

fn cell_integral(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let size = quad::gauss_legendre5(|y| f(y).abs(), a, b).abs();
    quad::integrate(&f, a, b, 1e-13 * size, 1e-12).map_or(f64::NAN, |q| q.value)
}

/// Integral of `u g1 H` beyond the window: below it for `psi`, above it for
/// `phi`. Segments double outward (halving the gap to a finite endpoint)
/// until the last one changes the total by less than [`TAIL_TOL`]. When the
/// segments decay geometrically the remainder is summed in closed form.
fn tail(problem: &Problem, pair: &FundamentalPair, flow: &Option<RealFn>, which: Which) -> Result<TailDiagnostic> {
    let w = problem.window();
    let d = problem.domain();
    let side = if which == Which::Psi { "lower" } else { "upper" };
    let (start, end) = match which {
        Which::Psi => (w.lo, d.lower),
        Which::Phi => (w.hi, d.upper),
    };
    let width = w.hi - w.lo;
    let point = |k: usize| -> f64 {
        if end.is_finite() {
            end + (start - end) * 0.5f64.powi(k as i32)
        } else {
            let sign = if which == Which::Psi { -1.0 } else { 1.0 };
            start + sign * width * (2f64.powi(k as i32) - 1.0)
        }
    };
    if flow.is_none() {
        return Ok(TailDiagnostic {
            value: 0.0,
            last_change: 0.0,
            remainder: 0.0,
            extensions: 0,
            reach: start,
        });
    }
    let process = &problem.process;
    let integrand = |y: f64| {
        let s = process.sigma(y);
        let sp = scale_density(problem, y).unwrap_or(f64::NAN);
        pair.eval(which, y).0 * flow_at(flow, y) * 2.0 / (s * s * sp)
    };
    let mut total = 0.0;
    let mut increments: Vec<f64> = Vec::new();
    for k in 1..=MAX_EXTENSIONS {
        let (a, b) = (point(k - 1), point(k));
        if a == b {
            break;
        }
        let seg = match quad::integrate(integrand, a.min(b), a.max(b), 1e-300, 1e-10) {
            Ok(q) => q.value,
            Err(_) => {
                increments.push(f64::NAN);
                break;
            }
        };
        total += seg;
        increments.push(seg);
        let change = if total != 0.0 { (seg / total).abs() } else if seg == 0.0 { 0.0 } else { 1.0 };
        if k < 3 {
            continue;
        }
        let n = increments.len();
        let (prev, prev2) = (increments[n - 2], increments[n - 3]);
        let q = if prev != 0.0 { seg / prev } else { 0.0 };
        let q_prev = if prev2 != 0.0 { prev / prev2 } else { 0.0 };
        // geometric decay: add the remainder once the ratio has settled
        if q > 0.0 && q < 1.0 {
            let remainder = seg * q / (1.0 - q);
            let err = seg.abs() * (q - q_prev).abs() / ((1.0 - q) * (1.0 - q));
            if err <= 1e-3 * TAIL_TOL * (total + remainder).abs() {
                return Ok(TailDiagnostic {
                    value: total + remainder,
                    last_change: change,
                    remainder,
                    extensions: k,
                    reach: b,
                });
            }
        } else if change < TAIL_TOL {
            return Ok(TailDiagnostic {
                value: total,
                last_change: change,
                remainder: 0.0,
                extensions: k,
                reach: b,
            });
        }
    }
    let keep = increments.len().saturating_sub(6);
    Err(Error::GreenDivergence {
        side,
        tail: increments[keep..].to_vec(),
    })
}

impl GreenDecomposition {
    pub fn flow(&self) -> Option<&RealFn> {
        self.flow.as_ref()
    }

    fn cell(&self, x: f64) -> usize {
        let n = self.grid.len();
        self.grid.partition_point(|&g| g <= x).saturating_sub(1).min(n - 2)
    }

    /// `(I1(x), I2(x))` at any point of the window.
    pub fn integrals(&self, x: f64) -> (f64, f64) {
        let i = self.cell(x);
        let a = self.grid[i];
        if x == a || self.flow.is_none() {
            return (self.i1[i], self.i2[i]);
        }
        let weight = |y: f64| flow_weight(&self.problem, &self.flow, a, self.scale[i], y);
        let d1 = cell_integral(|y| self.pair.psi(y) * weight(y), a, x);
        let d2 = cell_integral(|y| self.pair.phi(y) * weight(y), a, x);
        (self.i1[i] + d1, self.i2[i] - d2)
    }

    pub fn r_at(&self, x: f64) -> f64 {
        let (i1, i2) = self.integrals(x);
        (self.pair.phi(x) * i1 + self.pair.psi(x) * i2) / self.b
    }

    pub fn dr_at(&self, x: f64) -> f64 {
        let (i1, i2) = self.integrals(x);
        (self.pair.dphi(x) * i1 + self.pair.dpsi(x) * i2) / self.b
    }

    pub fn i2_at(&self, x: f64) -> f64 {
        self.integrals(x).1
    }

    /// Jet of `R` at `x` from the resolvent equation `L R - rho R = -g1`.
    pub fn r_jet(&self, x: f64) -> Result<Jet> {
        let (a, s) = self.problem.process.coefficient_jets(x)?;
        let forcing = match &self.flow {
            Some(f) => f.jet(x, Side::Center)?.scale(-1.0),
            None => Jet::constant(0.0),
        };
        Ok(ode_jet(&s, &a, &forcing, self.problem.discount, self.r_at(x), self.dr_at(x)))
    }

    /// `L R - rho R + g1` on the grid, with `R''` differenced from `R'`.
    /// End points are `NaN`.
    pub fn residuals(&self) -> Vec<f64> {
        let n = self.grid.len();
        let process = &self.problem.process;
        (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    return f64::NAN;
                }
                let x = self.grid[i];
                let d2 = (self.dr[i + 1] - self.dr[i - 1]) / (self.grid[i + 1] - self.grid[i - 1]);
                let s = process.sigma(x);
                process.drift(x) * self.dr[i] + 0.5 * s * s * d2 - self.problem.discount * self.r[i]
                    + flow_at(&self.flow, x)
            })
            .collect()
    }

    /// CSV `x, R, I1, I2, residual`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let res = self.residuals();
        report::write_csv(
            w,
            &["x", "R", "I1", "I2", "residual"],
            (0..self.grid.len()).map(|i| vec![self.grid[i], self.r[i], self.i1[i], self.i2[i], res[i]]),
        )
    }
}

/// `g0 - R` as a function.
struct ReducedPayoff {
    g0: RealFn,
    green: Arc<GreenDecomposition>,
}

impl SmoothFn for ReducedPayoff {
    fn eval(&self, x: f64) -> f64 {
        self.g0.eval(x) - self.green.r_at(x)
    }

    fn jet(&self, x: f64, side: Side) -> Result<Jet> {
        Ok(self.g0.jet(x, side)? - self.green.r_jet(x)?)
    }

    fn is_analytic(&self) -> bool {
        self.g0.is_analytic()
    }

    fn kinks_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.g0.kinks_in(lo, hi)
    }

    fn describe(&self) -> String {
        format!("({}) - R(x)", self.g0.describe())
    }
}

/// Terminal problem with `g = g0 - R`; the original value is `R(x)` plus the
/// reduced value.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub problem: Problem,
    pub green: Arc<GreenDecomposition>,
}

impl ReducedProblem {
    pub fn total_value(&self, x: f64, reduced_value: f64) -> f64 {
        self.green.r_at(x) + reduced_value
    }
}

pub fn reduce_integral_problem(problem: &Problem, green: GreenDecomposition) -> Result<ReducedProblem> {
    let green = Arc::new(green);
    let payoff = if green.flow.is_none() {
        PayoffSpec::terminal(problem.payoff.g().clone()).with_kinks(problem.payoff.kinks().to_vec())
    } else {
        PayoffSpec::terminal(RealFn::new(ReducedPayoff {
            g0: problem.payoff.g().clone(),
            green: green.clone(),
        }))
        .with_kinks(problem.payoff.kinks().to_vec())
    };
    Ok(ReducedProblem {
        problem: problem.with_payoff(payoff)?,
        green,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderIdentity {
    /// `I2(p*) S'(p*)`.
    pub lhs: f64,
    /// `g0'(p*) phi(p*) - g0(p*) phi'(p*)`.
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem4Certificate {
    pub p_star: f64,
    /// `[g0(p) - R(p)] phi(p*) <= [g0(p*) - R(p*)] phi(p)` for grid `p > p*`.
    pub dominance: Check,
    pub first_order: FirstOrderIdentity,
    /// `L g0 - rho g0 + g1 <= 0` for grid `p < p*`.
    pub generator: Check,
    pub i2_at_pstar: f64,
    pub pass: bool,
}

/// Checks the three conditions characterizing an optimal lower threshold for
/// a problem with running payoff.
///
/// Fails with [`Error::HypothesisFailed`] when `g0 < R` somewhere on the grid
/// at or below `p*`.
pub fn verify_theorem4(problem: &Problem, green: &GreenDecomposition, p_star: f64) -> Result<Theorem4Certificate> {
    if problem.direction != Direction::RInterval {
        return Err(Error::Invalid("the running-payoff certificate applies to r-intervals".into()));
    }
    problem.domain().check_interior(p_star)?;
    let g0 = problem.payoff.g();
    let pair = &green.pair;
    for (i, &x) in green.grid.iter().enumerate() {
        if x > p_star {
            break;
        }
        let gap = g0.eval(x) - green.r[i];
        if gap < -1e-9 * green.r[i].abs().max(1.0) {
            return Err(Error::HypothesisFailed {
                x,
                what: format!("g0 - R = {gap} < 0"),
            });
        }
    }

    let (phi_s, dphi_s) = pair.eval(Which::Phi, p_star);
    let reduced_s = g0.eval(p_star) - green.r_at(p_star);
    let scale = reduced_s.abs().max(1.0);
    let mut dominance = Check::vacuous();
    for (i, &p) in green.grid.iter().enumerate() {
        if p > p_star {
            let m = (g0.eval(p) - green.r[i]) * phi_s - reduced_s * pair.phi_values()[i];
            dominance.observe(p, m / pair.phi_values()[i].max(phi_s));
        }
    }
    let dominance = dominance.decide(1e-9 * scale);

    let i2 = green.i2_at(p_star);
    let lhs = i2 * scale_density(problem, p_star)?;
    let gj = g0.jet(p_star, Side::Left)?;
    let rhs = gj.derivative(1) * phi_s - gj.value() * dphi_s;
    let tolerance = 1e-6 * lhs.abs().max(rhs.abs()).max(1.0);
    let first_order = FirstOrderIdentity {
        lhs,
        rhs,
        tolerance,
        pass: (lhs - rhs).abs() <= tolerance,
    };

    let process = &problem.process;
    let rho = problem.discount;
    let mut generator = Check::vacuous();
    for &x in &green.grid {
        if x >= p_star {
            break;
        }
        let j = g0.jet(x, Side::Center)?;
        let v = process.generator_on_jet(x, &j) - rho * j.value() + flow_at(&green.flow, x);
        generator.observe(x, v);
    }
    let generator = generator.decide(1e-9 * (rho * g0.eval(p_star)).abs().max(1.0));
    let pass = dominance.pass && first_order.pass && generator.pass;
    Ok(Theorem4Certificate {
        p_star,
        dominance,
        first_order,
        generator,
        i2_at_pstar: i2,
        pass,
    })
}
