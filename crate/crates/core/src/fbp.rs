//! Free-boundary solutions as stationary points of `h`.
//!
//! A pair `(H, p)` with `H = h(p) u` on the continuation side pastes
//! continuously by construction and smoothly exactly when `h'(p) = 0`. Since
//! `H^(n)(p) = h(p) u^(n)(p)` and `g = h u`, the first non-vanishing
//! derivative of `h` at a stationary point satisfies
//! `h^(n)(p) u(p) = g^(n)(p) - H^(n)(p)`, which drives the classification.

use std::io::{self, Write};

use serde::Serialize;

use crate::diffusion::{Direction, Problem};
use crate::error::Result;
use crate::func::Side;
use crate::fundsol::{FundamentalPair, Which};
use crate::jet::Jet;
use crate::report;
use crate::threshold::{maximize_h, Diagnostic};

/// Relative size below which `h'` counts as zero at a root.
pub const ROOT_TOL: f64 = 1e-12;
/// Relative size below which a gap `g^(n) - H^(n)` counts as zero.
pub const GAP_TOL: f64 = 1e-8;
/// Highest derivative order examined.
pub const ORDER_CAP: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    StrictMax,
    StrictMin,
    HigherOrderMax,
    HigherOrderMin,
    /// First non-vanishing derivative of odd order: `h` is monotone through the point.
    Inflection,
    /// No non-vanishing derivative up to the order cap.
    Degenerate,
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryPoint {
    pub p_bar: f64,
    pub h: f64,
    /// `h^(k)(p)` for `k = 1..=ORDER_CAP` (fewer when the payoff is not analytic).
    pub h_derivatives: Vec<f64>,
    /// `g^(k)(p)` for `k = 0..`.
    pub g_derivatives: Vec<f64>,
    /// `H^(k)(p)` from the continuation side, `k = 0..`.
    pub big_h_derivatives: Vec<f64>,
    /// Order of the first non-vanishing gap.
    pub order: Option<usize>,
    pub classification: Classification,
    /// `H'(p) - g'(p)`.
    pub smooth_pasting_residual: f64,
    /// `h''(p) u(p) - (g''(p) - H''(p))`.
    pub second_order_identity_residual: f64,
    /// Size of the terms in `h'`, used to scale tolerances.
    pub scale: f64,
}

impl StationaryPoint {
    /// `H(x) = h(p) u(x)`.
    pub fn candidate(&self, problem: &Problem, pair: &FundamentalPair, x: f64) -> f64 {
        self.h * pair.eval(Which::for_direction(problem.direction), x).0
    }

    /// `g^(n) - H^(n)` at the classifying order.
    pub fn gap(&self, n: usize) -> f64 {
        self.g_derivatives[n] - self.big_h_derivatives[n]
    }
}

fn h_jet(problem: &Problem, pair: &FundamentalPair, p: f64) -> Result<(Jet, Jet, Jet)> {
    let g = problem.payoff.g_jet(p, Side::Center)?;
    let u = pair.jet(Which::for_direction(problem.direction), p)?;
    Ok((g.clone() / u.clone(), g, u))
}

/// `h'(p)` and the size of its two terms.
fn dh(problem: &Problem, pair: &FundamentalPair, p: f64) -> Option<(f64, f64)> {
    let (u, du) = pair.eval(Which::for_direction(problem.direction), p);
    let g = problem.payoff.g_jet(p, Side::Center).ok()?;
    let a = g.derivative(1) / u;
    let b = g.value() * du / (u * u);
    Some((a - b, a.abs() + b.abs()))
}

fn d2h(problem: &Problem, pair: &FundamentalPair, p: f64) -> Option<f64> {
    h_jet(problem, pair, p).ok().map(|(h, _, _)| h.derivative(2))
}

fn bisect(mut lo: f64, mut hi: f64, mut f_lo: f64, f: impl Fn(f64) -> Option<(f64, f64)>) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let Some((v, scale)) = f(mid) else { break };
        if v == 0.0 || v.abs() <= ROOT_TOL * scale * 1e-3 {
            return mid;
        }
        if (v > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = v;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Stationary points of `h` on the window grid, including touching roots
/// where `h'` vanishes without changing sign. Grid points at declared or
/// detected kinks are skipped.
pub fn find_stationary_points(problem: &Problem, pair: &FundamentalPair) -> Result<Vec<StationaryPoint>> {
    let grid = pair.grid();
    let n = grid.len();
    let spacing = problem.grid_spacing();
    let d: Vec<Option<(f64, f64)>> = grid.iter().map(|&p| dh(problem, pair, p)).collect();
    let is_zero = |v: Option<(f64, f64)>| v.is_some_and(|(v, s)| v.abs() <= ROOT_TOL * s.max(f64::MIN_POSITIVE));
    let mut roots: Vec<f64> = Vec::new();
    let mut plateaus: Vec<f64> = Vec::new();

    let mut i = 0;
    while i < n {
        if is_zero(d[i]) {
            let start = i;
            while i + 1 < n && is_zero(d[i + 1]) {
                i += 1;
            }
            if i - start >= 2 {
                plateaus.push(grid[start]);
            } else {
                roots.push(grid[start]);
            }
        }
        i += 1;
    }

    for i in 0..n - 1 {
        let (Some((a, _)), Some((b, _))) = (d[i], d[i + 1]) else { continue };
        if is_zero(d[i]) || is_zero(d[i + 1]) {
            continue;
        }
        if (a > 0.0) != (b > 0.0) {
            roots.push(bisect(grid[i], grid[i + 1], a, |p| dh(problem, pair, p)));
        }
    }

    // touching roots: |h'| has a local minimum and h'' changes sign nearby
    for i in 1..n - 1 {
        let (Some((a, _)), Some((b, _)), Some((c, _))) = (d[i - 1], d[i], d[i + 1]) else { continue };
        if is_zero(d[i]) || (a > 0.0) != (b > 0.0) || (b > 0.0) != (c > 0.0) {
            continue;
        }
        if !(b.abs() <= a.abs() && b.abs() <= c.abs()) {
            continue;
        }
        let (lo, hi) = (grid[i - 1], grid[i + 1]);
        let (Some(s_lo), Some(s_hi)) = (d2h(problem, pair, lo), d2h(problem, pair, hi)) else { continue };
        if (s_lo > 0.0) == (s_hi > 0.0) {
            continue;
        }
        let q = bisect(lo, hi, s_lo, |p| d2h(problem, pair, p).map(|v| (v, v.abs().max(1e-300))));
        if let Some((v, s)) = dh(problem, pair, q) {
            if v.abs() <= 1e-10 * s {
                roots.push(q);
            }
        }
    }

    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= 0.5 * spacing);

    let mut out = Vec::new();
    for p in plateaus {
        out.push(describe_point(problem, pair, p, true)?);
    }
    for p in roots {
        if plateaus_contain(&out, p, spacing) {
            continue;
        }
        out.push(describe_point(problem, pair, p, false)?);
    }
    out.sort_by(|a, b| a.p_bar.total_cmp(&b.p_bar));
    Ok(out)
}

fn plateaus_contain(points: &[StationaryPoint], p: f64, spacing: f64) -> bool {
    points
        .iter()
        .any(|s| s.classification == Classification::Degenerate && (s.p_bar - p).abs() <= 2.0 * spacing)
}

fn describe_point(problem: &Problem, pair: &FundamentalPair, p: f64, plateau: bool) -> Result<StationaryPoint> {
    let (h, g, u) = h_jet(problem, pair, p)?;
    let cap = if problem.payoff.g().is_analytic() { ORDER_CAP } else { 2 };
    let h_derivatives: Vec<f64> = (1..=cap).map(|k| h.derivative(k)).collect();
    let g_derivatives: Vec<f64> = (0..=cap).map(|k| g.derivative(k)).collect();
    let big_h_derivatives: Vec<f64> = (0..=cap).map(|k| h.value() * u.derivative(k)).collect();
    let scale = (g.derivative(1) / u.value()).abs() + (g.value() * u.derivative(1) / (u.value() * u.value())).abs();

    let mut order = None;
    if !plateau {
        for k in 2..=cap {
            let gap = g_derivatives[k] - big_h_derivatives[k];
            let size = g_derivatives[k].abs().max(big_h_derivatives[k].abs()).max(f64::MIN_POSITIVE);
            if gap.abs() > GAP_TOL * size {
                order = Some(k);
                break;
            }
        }
    }
    let classification = match order {
        None => Classification::Degenerate,
        Some(k) if k % 2 == 1 => Classification::Inflection,
        Some(k) => {
            let max = h_derivatives[k - 1] < 0.0;
            match (k, max) {
                (2, true) => Classification::StrictMax,
                (2, false) => Classification::StrictMin,
                (_, true) => Classification::HigherOrderMax,
                (_, false) => Classification::HigherOrderMin,
            }
        }
    };
    Ok(StationaryPoint {
        p_bar: p,
        h: h.value(),
        smooth_pasting_residual: big_h_derivatives[1] - g_derivatives[1],
        second_order_identity_residual: h_derivatives[1] * u.value() - (g_derivatives[2] - big_h_derivatives[2]),
        h_derivatives,
        g_derivatives,
        big_h_derivatives,
        order,
        classification,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    SolvesStoppingProblem,
    FailsStoppingProblem,
    Undetermined,
}

/// Which argument produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    /// Strict second-order gap at the only stationary point.
    Uniqueness,
    /// Strict gap, dominance on the continuation side, every other point on the stopping side.
    OthersBehind,
    /// As above, with some points ahead cleared by a higher-order gap.
    OthersAheadHigherOrder,
    /// The second-order necessary inequality fails.
    SecondOrderNecessary,
    /// Settled by comparison with the maximizer of `h`.
    CrossCheck,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointVerdict {
    pub verdict: Verdict,
    pub branch: Option<Branch>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FBPReport {
    pub direction: Direction,
    pub stationary_points: Vec<StationaryPoint>,
    pub verdicts: Vec<PointVerdict>,
    pub selected: Option<usize>,
    /// Threshold from the direct maximization, when one exists.
    pub maximizer: Option<f64>,
    pub scan_spacing: f64,
    pub notes: Vec<String>,
}

impl FBPReport {
    pub fn selected_point(&self) -> Option<&StationaryPoint> {
        self.selected.map(|i| &self.stationary_points[i])
    }
}

/// `true` when `b` lies on the continuation side of `a`.
fn ahead(direction: Direction, a: f64, b: f64) -> bool {
    match direction {
        Direction::LInterval => b > a,
        Direction::RInterval => b < a,
    }
}

/// Applies the second-order conditions to each stationary point, then
/// settles what they leave open by comparing with [`maximize_h`].
pub fn classify_by_propositions(
    problem: &Problem,
    pair: &FundamentalPair,
    points: Vec<StationaryPoint>,
) -> Result<FBPReport> {
    let direction = problem.direction;
    let which = Which::for_direction(direction);
    let spacing = problem.grid_spacing();
    let mut notes = vec![format!(
        "stationary points were isolated on a grid of spacing {}; roots closer than that may be merged or missed",
        report::num(spacing)
    )];
    let kinks = problem.payoff.undeclared_kinks(pair.grid());
    let declared: Vec<f64> = problem.payoff.kinks().to_vec();
    if !kinks.is_empty() || !declared.is_empty() {
        notes.push("points where g is not differentiable were excluded from the search".into());
    }
    if points.is_empty() {
        let d: Vec<f64> = pair.grid().iter().filter_map(|&p| dh(problem, pair, p).map(|v| v.0)).collect();
        if d.iter().all(|v| *v >= 0.0) {
            notes.push("h is non-decreasing across the window".into());
        } else if d.iter().all(|v| *v <= 0.0) {
            notes.push("h is non-increasing across the window".into());
        }
    }

    let mut verdicts = Vec::with_capacity(points.len());
    for (i, s) in points.iter().enumerate() {
        let v = match s.classification {
            Classification::StrictMax => {
                if points.len() == 1 {
                    PointVerdict {
                        verdict: Verdict::SolvesStoppingProblem,
                        branch: Some(Branch::Uniqueness),
                        note: "strict second-order gap at the only stationary point".into(),
                    }
                } else {
                    case_two(problem, pair, &points, i, which)
                }
            }
            Classification::StrictMin => PointVerdict {
                verdict: Verdict::FailsStoppingProblem,
                branch: Some(Branch::SecondOrderNecessary),
                note: "H'' < g'' violates the second-order necessary condition".into(),
            },
            Classification::Degenerate => PointVerdict {
                verdict: Verdict::Undetermined,
                branch: None,
                note: format!("no non-vanishing gap up to order {}", s.h_derivatives.len()),
            },
            _ => PointVerdict {
                verdict: Verdict::Undetermined,
                branch: None,
                note: format!("H'' = g'' (first non-vanishing gap at order {})", s.order.unwrap_or(0)),
            },
        };
        verdicts.push(v);
    }

    let solution = maximize_h(problem, pair);
    let maximizer = match &solution {
        Ok(s) if s.exists => Some(s.p_star),
        _ => None,
    };
    match &solution {
        Ok(s) if !s.exists => {
            if let Some(Diagnostic::SupAtBoundary { at, .. }) = s.diagnostic {
                notes.push(format!("sup of h is approached at the window edge {}", report::num(at)));
            }
        }
        Err(e) => notes.push(format!("direct maximization failed: {e}")),
        _ => {}
    }
    for (s, v) in points.iter().zip(verdicts.iter_mut()) {
        if v.verdict != Verdict::Undetermined {
            continue;
        }
        match maximizer {
            None => {
                *v = PointVerdict {
                    verdict: Verdict::FailsStoppingProblem,
                    branch: Some(Branch::CrossCheck),
                    note: format!("{}; h has no interior maximizer", v.note),
                }
            }
            Some(p) if (s.p_bar - p).abs() <= spacing => {
                *v = PointVerdict {
                    verdict: Verdict::SolvesStoppingProblem,
                    branch: Some(Branch::CrossCheck),
                    note: format!("{}; coincides with the maximizer of h", v.note),
                }
            }
            Some(p) => {
                let h_star = solution.as_ref().map(|s| s.h_star).unwrap_or(f64::NAN);
                if s.h < h_star - 1e-9 * h_star.abs().max(1.0) {
                    *v = PointVerdict {
                        verdict: Verdict::FailsStoppingProblem,
                        branch: Some(Branch::CrossCheck),
                        note: format!("{}; h is larger at {}", v.note, report::num(p)),
                    }
                }
            }
        }
    }
    for (s, v) in points.iter().zip(&verdicts) {
        if v.verdict == Verdict::SolvesStoppingProblem {
            if let Some(p) = maximizer {
                if (s.p_bar - p).abs() > spacing {
                    notes.push(format!(
                        "point {} was accepted by the second-order argument but the maximizer of h is {}",
                        report::num(s.p_bar),
                        report::num(p)
                    ));
                }
            }
        }
    }
    let selected = points
        .iter()
        .enumerate()
        .filter(|(i, _)| verdicts[*i].verdict == Verdict::SolvesStoppingProblem)
        .max_by(|a, b| a.1.h.total_cmp(&b.1.h))
        .map(|(i, _)| i);
    Ok(FBPReport {
        direction,
        stationary_points: points,
        verdicts,
        selected,
        maximizer,
        scan_spacing: spacing,
        notes,
    })
}

fn case_two(problem: &Problem, pair: &FundamentalPair, points: &[StationaryPoint], i: usize, which: Which) -> PointVerdict {
    let direction = problem.direction;
    let s = &points[i];
    let tol = 1e-9 * s.h.abs().max(1.0);
    for (x, u) in pair.grid().iter().zip(pair.values(which)) {
        if ahead(direction, s.p_bar, *x) || *x == s.p_bar {
            continue;
        }
        if s.h * u < problem.g(*x) - tol * u.max(1.0) {
            return PointVerdict {
                verdict: Verdict::Undetermined,
                branch: None,
                note: format!("H < g at {} on the continuation side", report::num(*x)),
            };
        }
    }
    let mut used_higher = false;
    for (j, other) in points.iter().enumerate() {
        if j == i || !ahead(direction, s.p_bar, other.p_bar) {
            continue;
        }
        // the argument needs H^(n) > g^(n) at the first gap, n > 2
        match other.order {
            Some(n) if n > 2 && other.h_derivatives[n - 1] < 0.0 => used_higher = true,
            _ => {
                return PointVerdict {
                    verdict: Verdict::Undetermined,
                    branch: None,
                    note: format!("stationary point {} ahead is not cleared", report::num(other.p_bar)),
                }
            }
        }
    }
    PointVerdict {
        verdict: Verdict::SolvesStoppingProblem,
        branch: Some(if used_higher { Branch::OthersAheadHigherOrder } else { Branch::OthersBehind }),
        note: "strict second-order gap; H dominates g and the other stationary points are cleared".into(),
    }
}

/// CSV `p, h, dh` over the grid.
pub fn write_landscape<W: Write>(w: &mut W, problem: &Problem, pair: &FundamentalPair) -> io::Result<()> {
    let which = Which::for_direction(problem.direction);
    report::write_csv(
        w,
        &["p", "h", "dh"],
        pair.grid().iter().zip(pair.values(which)).map(|(&p, u)| {
            let d = dh(problem, pair, p).map_or(f64::NAN, |v| v.0);
            vec![p, problem.g(p) / u, d]
        }),
    )
}
