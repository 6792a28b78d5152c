//! Optimal thresholds within the class of first-passage rules.
//!
//! Stopping the first time `X` enters `[p, r)` from `x < p` is worth
//! `V(p; x) = g(p) psi(x) / psi(p) = h(p) psi(x)`, so the best threshold
//! maximizes `h = g / psi`. The r-direction (enter `(l, p]`) uses `phi`.

use std::io::{self, Write};

use serde::Serialize;

use crate::diffusion::{Direction, Problem};
use crate::error::{Error, Result};
use crate::func::Side;
use crate::fundsol::{FundamentalPair, Which};
use crate::report::{self, Check};

/// Relative width at which golden-section refinement stops.
const GOLDEN_TOL: f64 = 1e-10;

/// Relative tolerance below which certificate violations count as noise.
pub const CERTIFICATE_TOL: f64 = 1e-9;

/// `h(p)`: `g(p)/psi(p)` for l-intervals, `g(p)/phi(p)` for r-intervals.
pub fn h_value(problem: &Problem, pair: &FundamentalPair, p: f64) -> Result<f64> {
    problem.domain().check_interior(p)?;
    let u = pair.eval(Which::for_direction(problem.direction), p).0;
    Ok(problem.g(p) / u)
}

/// `h'(p)` from the one-sided derivative of `g` on the given side.
pub fn h_derivative(problem: &Problem, pair: &FundamentalPair, p: f64, side: Side) -> Result<f64> {
    problem.domain().check_interior(p)?;
    let (u, du) = pair.eval(Which::for_direction(problem.direction), p);
    let g = problem.payoff.g_jet(p, side)?;
    Ok((g.derivative(1) * u - g.value() * du) / (u * u))
}

/// Value of the threshold rule `p` started at `x`.
pub fn value_at(problem: &Problem, pair: &FundamentalPair, p: f64, x: f64) -> Result<f64> {
    problem.domain().check_interior(p)?;
    problem.domain().check_interior(x)?;
    let which = Which::for_direction(problem.direction);
    let stopped = match problem.direction {
        Direction::LInterval => x >= p,
        Direction::RInterval => x <= p,
    };
    if stopped {
        Ok(problem.g(x))
    } else {
        Ok(problem.g(p) * pair.eval(which, x).0 / pair.eval(which, p).0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Edge {
    Lower,
    Upper,
}

/// Why a threshold solution does not exist inside the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Diagnostic {
    /// `h` is still rising at the window edge.
    SupAtBoundary { edge: Edge, at: f64, h: f64 },
}

/// Grid verification of the two inequalities that characterize the optimal
/// threshold. `left_condition` covers grid points below `p*`, `right_condition`
/// those above. For l-intervals the left side asks `h(p) <= h(p*)` and the
/// right side asks `h` to be non-increasing; r-intervals swap the roles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem2Certificate {
    pub left_condition: Check,
    pub right_condition: Check,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdSolution {
    pub direction: Direction,
    pub exists: bool,
    /// Maximizer when `exists`, otherwise the window edge carrying the supremum.
    pub p_star: f64,
    pub h_star: f64,
    pub diagnostic: Option<Diagnostic>,
    pub certificate: Option<Theorem2Certificate>,
    pub grid: Vec<f64>,
    pub h_grid: Vec<f64>,
    /// `V(p*; x)` on the grid; empty when no solution exists.
    pub value: Vec<f64>,
    #[serde(skip)]
    pub pair: FundamentalPair,
}

impl ThresholdSolution {
    /// `V(p*; x)` at any interior `x`.
    pub fn value_fn(&self, problem: &Problem, x: f64) -> Result<f64> {
        if !self.exists {
            return Err(Error::Invalid("no threshold solution inside the window".into()));
        }
        value_at(problem, &self.pair, self.p_star, x)
    }

    pub fn certified(&self) -> bool {
        self.exists && self.certificate.is_some_and(|c| c.pass)
    }

    /// CSV `p, h` over the grid.
    pub fn write_h_table<W: Write>(&self, w: &mut W) -> io::Result<()> {
        report::write_csv(w, &["p", "h"], self.grid.iter().zip(&self.h_grid).map(|(p, h)| vec![*p, *h]))
    }

    /// CSV `x, V, g` over the grid.
    pub fn write_value_table<W: Write>(&self, w: &mut W, problem: &Problem) -> io::Result<()> {
        report::write_csv(
            w,
            &["x", "V", "g"],
            self.grid
                .iter()
                .zip(&self.value)
                .map(|(x, v)| vec![*x, *v, problem.g(*x)]),
        )
    }
}

fn stops_earlier(direction: Direction, a: f64, b: f64) -> bool {
    match direction {
        Direction::LInterval => a < b,
        Direction::RInterval => a > b,
    }
}

/// Maximizes `h` over the window: grid scan, golden section on the best
/// bracket, then bisection on `h'` where it changes sign.
///
/// Ties go to the threshold that stops earliest.
pub fn maximize_h(problem: &Problem, pair: &FundamentalPair) -> Result<ThresholdSolution> {
    let direction = problem.direction;
    let which = Which::for_direction(direction);
    let grid = pair.grid().to_vec();
    let u = pair.values(which);
    let g: Vec<f64> = grid.iter().map(|&x| problem.g(x)).collect();
    let n = grid.len();
    if g.iter().all(|v| !(*v > 0.0)) {
        return Err(Error::TrivialProblem {
            lo: grid[0],
            hi: grid[n - 1],
        });
    }
    let h_grid: Vec<f64> = g.iter().zip(u).map(|(g, u)| g / u).collect();
    let h_max = h_grid.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-12 * h_max.abs().max(f64::MIN_POSITIVE);
    let mut best = usize::MAX;
    for i in 0..n {
        if h_grid[i] >= h_max - tie && (best == usize::MAX || stops_earlier(direction, grid[i], grid[best])) {
            best = i;
        }
    }

    let empty = |diag: Diagnostic, at: f64, h: f64| ThresholdSolution {
        direction,
        exists: false,
        p_star: at,
        h_star: h,
        diagnostic: Some(diag),
        certificate: None,
        grid: grid.clone(),
        h_grid: h_grid.clone(),
        value: Vec::new(),
        pair: pair.clone(),
    };
    if best == n - 1 && h_grid[n - 1] > h_grid[n - 2] + tie {
        let d = Diagnostic::SupAtBoundary {
            edge: Edge::Upper,
            at: grid[n - 1],
            h: h_grid[n - 1],
        };
        return Ok(empty(d, grid[n - 1], h_grid[n - 1]));
    }
    if best == 0 && h_grid[0] > h_grid[1] + tie {
        let d = Diagnostic::SupAtBoundary {
            edge: Edge::Lower,
            at: grid[0],
            h: h_grid[0],
        };
        return Ok(empty(d, grid[0], h_grid[0]));
    }

    let (p_star, h_star) = refine(problem, pair, &grid, &h_grid, best, tie);
    let value = grid
        .iter()
        .map(|&x| value_at(problem, pair, p_star, x))
        .collect::<Result<Vec<_>>>()?;
    let certificate = theorem2_certificate(direction, &grid, &h_grid, p_star, h_star);
    Ok(ThresholdSolution {
        direction,
        exists: true,
        p_star,
        h_star,
        diagnostic: None,
        certificate: Some(certificate),
        grid,
        h_grid,
        value,
        pair: pair.clone(),
    })
}

fn refine(problem: &Problem, pair: &FundamentalPair, grid: &[f64], h: &[f64], best: usize, tie: f64) -> (f64, f64) {
    let n = grid.len();
    let lo_i = best.saturating_sub(1);
    let hi_i = (best + 1).min(n - 1);
    let plateau = (lo_i < best && (h[lo_i] - h[best]).abs() <= tie) || (hi_i > best && (h[hi_i] - h[best]).abs() <= tie);
    if plateau {
        return (grid[best], h[best]);
    }
    let f = |p: f64| h_value(problem, pair, p).unwrap_or(f64::NEG_INFINITY);
    let (mut a, mut b) = (grid[lo_i], grid[hi_i]);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > GOLDEN_TOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let mut p = 0.5 * (a + b);
    let mut hp = f(p);
    if hp < h[best] {
        p = grid[best];
        hp = h[best];
    }
    // a maximum sitting on a kink is taken exactly at the kink
    let (lo, hi) = (grid[lo_i], grid[hi_i]);
    let mut kinks: Vec<f64> = problem.payoff.kinks().iter().copied().filter(|k| *k >= lo && *k <= hi).collect();
    kinks.extend(problem.payoff.g().kinks_in(lo, hi));
    for k in kinks {
        let hk = f(k);
        if hk >= hp - tie {
            return (k, hk);
        }
    }
    // polish on h' when it brackets a sign change
    let dh = |x: f64| h_derivative(problem, pair, x, Side::Center).ok();
    if let (Some(da), Some(db)) = (dh(grid[lo_i]), dh(grid[hi_i])) {
        if da > 0.0 && db < 0.0 {
            let (mut a, mut b) = (grid[lo_i], grid[hi_i]);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                match dh(m) {
                    Some(v) if v > 0.0 => a = m,
                    Some(v) if v < 0.0 => b = m,
                    Some(_) => {
                        a = m;
                        b = m;
                    }
                    None => break,
                }
            }
            let m = 0.5 * (a + b);
            let hm = f(m);
            if hm >= hp - tie {
                p = m;
                hp = hm;
            }
        }
    }
    (p, hp)
}

fn theorem2_certificate(direction: Direction, grid: &[f64], h: &[f64], p_star: f64, h_star: f64) -> Theorem2Certificate {
    let tol = CERTIFICATE_TOL * h_star.abs().max(1.0);
    let mut dominance = Check::vacuous();
    let mut monotone = Check::vacuous();
    match direction {
        Direction::LInterval => {
            let mut prev = (p_star, h_star);
            for (&p, &hp) in grid.iter().zip(h) {
                if p < p_star {
                    dominance.observe(p, hp - h_star);
                } else if p > p_star {
                    monotone.observe(p, hp - prev.1);
                    prev = (p, hp);
                }
            }
            let (d, m) = (dominance.decide(tol), monotone.decide(tol));
            Theorem2Certificate {
                left_condition: d,
                right_condition: m,
                tolerance: tol,
                pass: d.pass && m.pass,
            }
        }
        Direction::RInterval => {
            let mut prev = (p_star, h_star);
            for (&p, &hp) in grid.iter().zip(h).rev() {
                if p > p_star {
                    dominance.observe(p, hp - h_star);
                } else if p < p_star {
                    monotone.observe(p, hp - prev.1);
                    prev = (p, hp);
                }
            }
            let (d, m) = (dominance.decide(tol), monotone.decide(tol));
            Theorem2Certificate {
                left_condition: m,
                right_condition: d,
                tolerance: tol,
                pass: d.pass && m.pass,
            }
        }
    }
}

/// One-sided slopes at `p*` and the pasting chain
/// `g'(p*+0) <= h* u'(p*) <= g'(p*-0)`, with `u = psi` or `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PastingReport {
    pub p_star: f64,
    pub g_left: f64,
    pub g_right: f64,
    /// Slope of `h* u` at `p*`, the value function on the continuation side.
    pub v_continuation: f64,
    /// `h* u'(p*) - g'(p*+0)`; negative values break the chain.
    pub slack_lower: f64,
    /// `g'(p*-0) - h* u'(p*)`; negative values break the chain.
    pub slack_upper: f64,
    /// `|h* u'(p*) - g'(p*)|` when `g` is differentiable at `p*`.
    pub smooth_gap: Option<f64>,
    pub tolerance: f64,
    pub holds: bool,
}

pub fn smooth_pasting_report(problem: &Problem, solution: &ThresholdSolution) -> Result<PastingReport> {
    if !solution.exists {
        return Err(Error::Invalid("smooth pasting needs an interior threshold".into()));
    }
    let p = solution.p_star;
    let which = Which::for_direction(problem.direction);
    let du = solution.pair.eval(which, p).1;
    let v = solution.h_star * du;
    let g_left = problem.payoff.g_jet(p, Side::Left)?.derivative(1);
    let g_right = problem.payoff.g_jet(p, Side::Right)?.derivative(1);
    let tol = 1e-8 * g_left.abs().max(g_right.abs()).max(1.0);
    let slack_lower = v - g_right;
    let slack_upper = g_left - v;
    let differentiable = (g_left - g_right).abs() <= tol;
    Ok(PastingReport {
        p_star: p,
        g_left,
        g_right,
        v_continuation: v,
        slack_lower,
        slack_upper,
        smooth_gap: differentiable.then(|| (v - 0.5 * (g_left + g_right)).abs()),
        tolerance: tol,
        holds: slack_lower >= -tol && slack_upper >= -tol,
    })
}
