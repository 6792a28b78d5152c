//! Excessivity of the payoff beyond the threshold, which upgrades optimality
//! among thresholds to optimality among all stopping times.

use serde::Serialize;

use crate::diffusion::{Direction, Problem};
use crate::error::{Error, Result};
use crate::func::{RealFn, Side};
use crate::fundsol::{FundamentalPair, Which};
use crate::jet::Jet;
use crate::report::Check;
use crate::threshold::ThresholdSolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Excessive,
    NotExcessive,
    Inconclusive,
}

/// `Lg - rho g <= 0` on the post-threshold grid, allowing violations on a set
/// narrower than one grid spacing.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorCondition {
    pub check: Check,
    /// Total width of runs of violating grid points.
    pub violation_width: f64,
    pub spacing: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KinkJump {
    pub at: f64,
    /// `g'(a+0) - g'(a-0)`.
    pub jump: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PastingMeasure {
    /// `sigma^2(p*)/2 [g'(p*+0) - h* psi'(p*)]` for l-intervals,
    /// `sigma^2(p*)/2 [h* phi'(p*) - g'(p*-0)]` for r-intervals.
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcessivityReport {
    pub direction: Direction,
    pub p_star: f64,
    pub generator_condition: GeneratorCondition,
    pub kink_condition: Vec<KinkJump>,
    pub nonnegativity_condition: Check,
    pub pasting_measure_at_pstar: PastingMeasure,
    /// Non-smooth points that were not declared as kinks.
    pub undeclared_kinks: Vec<f64>,
    pub verdict: Verdict,
}

fn beyond(direction: Direction, x: f64, p: f64) -> bool {
    match direction {
        Direction::LInterval => x > p,
        Direction::RInterval => x < p,
    }
}

/// Checks `Lg <= rho g` almost everywhere past `p*`, non-positive slope jumps
/// at declared kinks, `g >= 0` there, and the sign of the atom at `p*`.
pub fn check_statement_conditions(problem: &Problem, pair: &FundamentalPair, p_star: f64) -> Result<ExcessivityReport> {
    problem.domain().check_interior(p_star)?;
    let direction = problem.direction;
    let rho = problem.discount;
    let payoff = &problem.payoff;
    let process = &problem.process;
    let grid: Vec<f64> = pair.grid().iter().copied().filter(|&x| beyond(direction, x, p_star)).collect();
    let spacing = problem.grid_spacing();
    let kink_tol = 1e-12 * p_star.abs().max(1.0);

    let mut undeclared = Vec::new();
    if grid.len() > 1 {
        for k in payoff.undeclared_kinks(&grid) {
            if (k - p_star).abs() > kink_tol {
                undeclared.push(k);
            }
        }
    }

    let mut check = Check::vacuous();
    let mut nonneg = Check::vacuous();
    let mut width = 0.0;
    let mut run = 0usize;
    for &x in &grid {
        nonneg.observe(x, -problem.g(x));
        if payoff.kink_near(x, kink_tol).is_some() {
            continue;
        }
        let jet = match payoff.g_jet(x, Side::Center) {
            Ok(j) => j,
            Err(Error::Kink { x }) => {
                undeclared.push(x);
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = process.sigma(x);
        let lg = process.drift(x) * jet.derivative(1);
        let diff = 0.5 * s * s * jet.derivative(2);
        let margin = lg + diff - rho * jet.value();
        let tol = 1e-9 * (lg.abs() + diff.abs() + (rho * jet.value()).abs()).max(1.0);
        check.observe(x, margin);
        if margin > tol {
            run += 1;
        } else {
            if run > 1 {
                width += (run - 1) as f64 * spacing;
            }
            run = 0;
        }
    }
    if run > 1 {
        width += (run - 1) as f64 * spacing;
    }
    let generator = GeneratorCondition {
        check: Check {
            pass: width < spacing,
            ..check
        },
        violation_width: width,
        spacing,
        pass: width < spacing,
    };

    let mut kinks = Vec::new();
    for &a in payoff.kinks() {
        if !beyond(direction, a, p_star) || (a - p_star).abs() <= kink_tol || !pair.grid().first().is_some_and(|lo| a >= *lo) {
            continue;
        }
        if !pair.grid().last().is_some_and(|hi| a <= *hi) {
            continue;
        }
        let jump = payoff.g_jet(a, Side::Right)?.derivative(1) - payoff.g_jet(a, Side::Left)?.derivative(1);
        kinks.push(KinkJump {
            at: a,
            jump,
            pass: jump <= 1e-9 * jump.abs().max(1.0),
        });
    }

    let which = Which::for_direction(direction);
    let (u, du) = pair.eval(which, p_star);
    let h_star = problem.g(p_star) / u;
    let s = process.sigma(p_star);
    let value = match direction {
        Direction::LInterval => 0.5 * s * s * (payoff.g_jet(p_star, Side::Right)?.derivative(1) - h_star * du),
        Direction::RInterval => 0.5 * s * s * (h_star * du - payoff.g_jet(p_star, Side::Left)?.derivative(1)),
    };
    let pasting = PastingMeasure {
        value,
        pass: value <= 1e-8 * (0.5 * s * s * h_star * du).abs().max(1.0),
    };
    let nonneg = nonneg.decide(0.0);

    undeclared.sort_by(|a, b| a.total_cmp(b));
    undeclared.dedup();
    let all_pass = generator.pass && kinks.iter().all(|k| k.pass) && nonneg.pass && pasting.pass;
    let verdict = if !undeclared.is_empty() {
        Verdict::Inconclusive
    } else if all_pass {
        Verdict::Excessive
    } else {
        Verdict::NotExcessive
    };
    Ok(ExcessivityReport {
        direction,
        p_star,
        generator_condition: generator,
        kink_condition: kinks,
        nonnegativity_condition: nonneg,
        pasting_measure_at_pstar: pasting,
        undeclared_kinks: undeclared,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GlobalVerdict {
    GloballyOptimal,
    NotOptimal,
    Inconclusive,
    NotApplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalOptimalityReport {
    pub verdict: GlobalVerdict,
    pub reason: String,
    pub excessivity: Option<ExcessivityReport>,
    /// The value function over all stopping times when the verdict is positive.
    pub value_function: Option<String>,
}

/// Combines the threshold certificate with the excessivity conditions.
pub fn verify_global_optimality(problem: &Problem, solution: &ThresholdSolution) -> Result<GlobalOptimalityReport> {
    if !solution.exists {
        return Ok(GlobalOptimalityReport {
            verdict: GlobalVerdict::NotApplicable,
            reason: "no threshold solution inside the window".into(),
            excessivity: None,
            value_function: None,
        });
    }
    let report = check_statement_conditions(problem, &solution.pair, solution.p_star)?;
    let certified = solution.certified();
    let (verdict, reason) = if !report.nonnegativity_condition.pass {
        (
            GlobalVerdict::Inconclusive,
            format!("g < 0 beyond the threshold at x = {}", report.nonnegativity_condition.worst_x),
        )
    } else if report.verdict == Verdict::Inconclusive {
        (
            GlobalVerdict::Inconclusive,
            format!("undeclared kinks at {:?}", report.undeclared_kinks),
        )
    } else if !certified {
        (GlobalVerdict::NotOptimal, "threshold certificate fails".into())
    } else if report.verdict == Verdict::NotExcessive {
        (GlobalVerdict::NotOptimal, "payoff is not excessive beyond the threshold".into())
    } else {
        (GlobalVerdict::GloballyOptimal, "threshold certificate and excessivity hold".into())
    };
    let value_function = (verdict == GlobalVerdict::GloballyOptimal).then(|| {
        let (fun, below, above) = match problem.direction {
            Direction::LInterval => ("psi", "<", ">="),
            Direction::RInterval => ("phi", ">", "<="),
        };
        format!(
            "U(x) = {h} * {fun}(x) for x {below} {p}; U(x) = g(x) for x {above} {p}",
            h = solution.h_star,
            p = solution.p_star
        )
    });
    Ok(GlobalOptimalityReport {
        verdict,
        reason,
        excessivity: Some(report),
        value_function,
    })
}

/// A function that is smooth between finitely many kinks.
pub trait PiecewiseSmooth {
    fn jet(&self, x: f64, side: Side) -> Result<Jet>;
    fn kinks(&self) -> Vec<f64>;
}

/// A [`RealFn`] with its kink list.
#[derive(Debug, Clone)]
pub struct Piecewise {
    pub f: RealFn,
    pub kinks: Vec<f64>,
}

impl PiecewiseSmooth for Piecewise {
    fn jet(&self, x: f64, side: Side) -> Result<Jet> {
        self.f.jet(x, side)
    }

    fn kinks(&self) -> Vec<f64> {
        self.kinks.clone()
    }
}

/// `h* psi` on the continuation side of `p*` and `g` on the stopping side.
#[derive(Debug, Clone)]
pub struct ThresholdValue<'a> {
    pub problem: &'a Problem,
    pub solution: &'a ThresholdSolution,
}

impl PiecewiseSmooth for ThresholdValue<'_> {
    fn jet(&self, x: f64, side: Side) -> Result<Jet> {
        let s = self.solution;
        let p = s.p_star;
        let continuation = match s.direction {
            Direction::LInterval => x < p || (x == p && side == Side::Left),
            Direction::RInterval => x > p || (x == p && side == Side::Right),
        };
        if continuation {
            Ok(s.pair.jet(Which::for_direction(s.direction), x)?.scale(s.h_star))
        } else {
            self.problem.payoff.g_jet(x, side)
        }
    }

    fn kinks(&self) -> Vec<f64> {
        let s = self.solution;
        let mut k: Vec<f64> = self
            .problem
            .payoff
            .kinks()
            .iter()
            .copied()
            .filter(|&a| beyond(s.direction, a, s.p_star))
            .collect();
        k.push(s.p_star);
        k.sort_by(|a, b| a.total_cmp(b));
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Atom {
    pub at: f64,
    /// `sigma^2(a)/2 [F'(a+0) - F'(a-0)]`.
    pub mass: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasureScanReport {
    /// Density `L F - rho F` at smooth grid points; `margin` is its maximum.
    pub absolutely_continuous: Check,
    pub atoms: Vec<Atom>,
    /// `F(e) <= liminf F(x)` at each included endpoint.
    pub lower_semicontinuity: Vec<Check>,
    /// Total variation of `F'` on the scan grid.
    pub derivative_variation: f64,
    pub nonpositive: bool,
}

/// Density of the absolutely continuous part of `L F - rho F` at `x`.
pub fn measure_density(problem: &Problem, jet: &Jet, x: f64) -> f64 {
    problem.process.generator_on_jet(x, jet) - problem.discount * jet.value()
}

fn derivative_variation(f: &dyn PiecewiseSmooth, grid: &[f64]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut alternations = 0;
    let mut last_sign = 0.0;
    let mut prev: Option<f64> = None;
    for &x in grid {
        let left = f.jet(x, Side::Left)?.derivative(1);
        let right = f.jet(x, Side::Right)?.derivative(1);
        if let Some(p) = prev {
            for d in [left - p, right - left] {
                total += d.abs();
                if d.abs() > 1e-12 * (1.0 + left.abs()) {
                    if last_sign != 0.0 && d.signum() != last_sign {
                        alternations += 1;
                    }
                    last_sign = d.signum();
                }
            }
        }
        prev = Some(right);
    }
    Ok((total, alternations))
}

/// Splits `L F - rho F` into its density and atoms over `grid` and checks
/// both are non-positive.
///
/// Fails with [`Error::NotDcRepresentable`] when the variation of `F'` keeps
/// growing under grid refinement with many sign alternations, the discrete
/// signature of a derivative without bounded variation.
pub fn lemma2_measure_scan(problem: &Problem, f: &dyn PiecewiseSmooth, grid: &[f64]) -> Result<MeasureScanReport> {
    if grid.len() < 2 {
        return Err(Error::Invalid("measure scan needs at least two grid points".into()));
    }
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let kinks: Vec<f64> = f.kinks().into_iter().filter(|k| *k >= lo && *k <= hi).collect();
    let tol_x = 1e-12 * lo.abs().max(hi.abs()).max(1.0);

    let mut fine = Vec::with_capacity(2 * grid.len());
    for w in grid.windows(2) {
        fine.push(w[0]);
        fine.push(0.5 * (w[0] + w[1]));
    }
    fine.push(hi);
    let (tv, alt) = derivative_variation(f, grid)?;
    let (tv_fine, alt_fine) = derivative_variation(f, &fine)?;
    if alt_fine > grid.len() / 4 && tv_fine > 1.25 * tv + 1e-9 {
        return Err(Error::NotDcRepresentable(format!(
            "variation of F' grows from {tv} to {tv_fine} under refinement with {alt} / {alt_fine} sign alternations"
        )));
    }

    let mut density = Check::vacuous();
    let mut worst_scale: f64 = 1.0;
    for &x in grid {
        if kinks.iter().any(|k| (k - x).abs() <= tol_x) {
            continue;
        }
        let jet = f.jet(x, Side::Center)?;
        let d = measure_density(problem, &jet, x);
        if d > density.margin {
            worst_scale = (problem.discount * jet.value()).abs().max(1.0);
        }
        density.observe(x, d);
    }
    let density = density.decide(1e-9 * worst_scale);

    let mut atoms = Vec::new();
    for &a in &kinks {
        let s = problem.process.sigma(a);
        let jump = f.jet(a, Side::Right)?.derivative(1) - f.jet(a, Side::Left)?.derivative(1);
        let mass = 0.5 * s * s * jump;
        atoms.push(Atom {
            at: a,
            mass,
            pass: mass <= 1e-9 * (0.5 * s * s).max(1.0),
        });
    }

    let d = problem.domain();
    let mut lsc = Vec::new();
    for (included, e, dir) in [(d.lower_included, d.lower, 1.0), (d.upper_included, d.upper, -1.0)] {
        if !included {
            continue;
        }
        let at = f.jet(e, if dir > 0.0 { Side::Right } else { Side::Left })?.value();
        let mut c = Check::vacuous();
        for k in [1e-4, 1e-6, 1e-8] {
            let x = e + dir * k * e.abs().max(1.0);
            c.observe(e, at - f.jet(x, Side::Center)?.value());
        }
        lsc.push(c.decide(1e-9 * at.abs().max(1.0)));
    }

    let nonpositive = density.pass && atoms.iter().all(|a| a.pass) && lsc.iter().all(|c| c.pass);
    Ok(MeasureScanReport {
        absolutely_continuous: density,
        atoms,
        lower_semicontinuity: lsc,
        derivative_variation: tv,
        nonpositive,
    })
}
