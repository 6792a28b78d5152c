//! Diffusion processes, payoffs and the stopping problem they define.
//!
//! A process on an interval with endpoints `l < r` has generator
//! `L f = a(x) f' + sigma(x)^2 f'' / 2`. The scale density
//! `S'(x) = exp(-int_{x0}^{x} 2 a / sigma^2)` and the local integrability
//! check for `(1 + |a|) / sigma^2` live here as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::{RealFn, Side};
use crate::jet::Jet;
use crate::quad;

/// Default number of points on the working grid.
pub const DEFAULT_GRID_POINTS: usize = 2001;

/// State space `D` with endpoints `l < r`, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub lower_included: bool,
    pub upper_included: bool,
}

impl Interval {
    pub fn new(lower: f64, upper: f64, lower_included: bool, upper_included: bool) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            return Err(Error::Invalid(format!("interval needs l < r, got ({lower}, {upper})")));
        }
        if (lower_included && !lower.is_finite()) || (upper_included && !upper.is_finite()) {
            return Err(Error::Invalid("an infinite endpoint cannot be included".into()));
        }
        Ok(Interval {
            lower,
            upper,
            lower_included,
            upper_included,
        })
    }

    pub fn open(lower: f64, upper: f64) -> Result<Self> {
        Self::new(lower, upper, false, false)
    }

    pub fn positive_half_line() -> Self {
        Interval {
            lower: 0.0,
            upper: f64::INFINITY,
            lower_included: false,
            upper_included: false,
        }
    }

    pub fn real_line() -> Self {
        Interval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            lower_included: false,
            upper_included: false,
        }
    }

    pub fn in_interior(&self, x: f64) -> bool {
        x > self.lower && x < self.upper
    }

    pub fn check_interior(&self, x: f64) -> Result<()> {
        if self.in_interior(x) {
            Ok(())
        } else {
            Err(Error::Domain {
                x,
                lower: self.lower,
                upper: self.upper,
            })
        }
    }
}

/// Named processes with closed-form fundamental solutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Catalog {
    /// `dX = alpha X dt + sigma X dW` on `(0, inf)`.
    Gbm { alpha: f64, sigma: f64 },
    /// `dX = mu dt + sigma dW` on the real line.
    ArithmeticBm { mu: f64, sigma: f64 },
}

impl Catalog {
    pub fn name(&self) -> &'static str {
        match self {
            Catalog::Gbm { .. } => "gbm",
            Catalog::ArithmeticBm { .. } => "arithmetic_bm",
        }
    }
}

/// The diffusion `X_t`: drift, diffusion coefficient and state space.
#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    drift: RealFn,
    diffusion: RealFn,
    domain: Interval,
    catalog: Option<Catalog>,
}

impl DiffusionSpec {
    pub fn new(drift: RealFn, diffusion: RealFn, domain: Interval) -> Self {
        DiffusionSpec {
            drift,
            diffusion,
            domain,
            catalog: None,
        }
    }

    pub fn gbm(alpha: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !alpha.is_finite() {
            return Err(Error::Invalid(format!("GBM needs sigma > 0, got alpha={alpha}, sigma={sigma}")));
        }
        Ok(DiffusionSpec {
            drift: RealFn::parse(&format!("{alpha:e}*x"))?,
            diffusion: RealFn::parse(&format!("{sigma:e}*x"))?,
            domain: Interval::positive_half_line(),
            catalog: Some(Catalog::Gbm { alpha, sigma }),
        })
    }

    pub fn arithmetic_bm(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() {
            return Err(Error::Invalid(format!("arithmetic BM needs sigma > 0, got mu={mu}, sigma={sigma}")));
        }
        Ok(DiffusionSpec {
            drift: RealFn::constant(mu),
            diffusion: RealFn::constant(sigma),
            domain: Interval::real_line(),
            catalog: Some(Catalog::ArithmeticBm { mu, sigma }),
        })
    }

    /// Attaches a catalog tag after checking that the coefficients agree with
    /// it at the given points.
    pub fn with_catalog(mut self, catalog: Catalog, points: &[f64]) -> Result<Self> {
        for &x in points {
            let (a, s) = match catalog {
                Catalog::Gbm { alpha, sigma } => (alpha * x, sigma * x),
                Catalog::ArithmeticBm { mu, sigma } => (mu, sigma),
            };
            let da = (self.drift(x) - a).abs();
            let ds = (self.sigma(x) - s).abs();
            if da > 1e-12 * a.abs().max(1.0) || ds > 1e-12 * s.abs().max(1.0) {
                return Err(Error::Invalid(format!(
                    "coefficients disagree with catalog tag `{}` at x = {x}",
                    catalog.name()
                )));
            }
        }
        self.catalog = Some(catalog);
        Ok(self)
    }

    pub fn domain(&self) -> &Interval {
        &self.domain
    }

    pub fn catalog(&self) -> Option<Catalog> {
        self.catalog
    }

    pub fn drift_fn(&self) -> &RealFn {
        &self.drift
    }

    pub fn diffusion_fn(&self) -> &RealFn {
        &self.diffusion
    }

    #[inline]
    pub fn drift(&self, x: f64) -> f64 {
        self.drift.eval(x)
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        self.diffusion.eval(x)
    }

    /// Jets of `a(x)` and `sigma(x)^2 / 2` at `x`.
    pub fn coefficient_jets(&self, x: f64) -> Result<(Jet, Jet)> {
        let a = self.drift.jet(x, Side::Center)?;
        let s = self.diffusion.jet(x, Side::Center)?;
        Ok((a, s * s * 0.5))
    }

    /// `L f(x)` from a jet of `f` at `x`.
    pub fn generator_on_jet(&self, x: f64, f: &Jet) -> f64 {
        let s = self.sigma(x);
        self.drift(x) * f.derivative(1) + 0.5 * s * s * f.derivative(2)
    }

    pub fn describe(&self) -> String {
        match self.catalog {
            Some(Catalog::Gbm { alpha, sigma }) => format!("gbm(alpha={alpha}, sigma={sigma})"),
            Some(Catalog::ArithmeticBm { mu, sigma }) => format!("arithmetic_bm(mu={mu}, sigma={sigma})"),
            None => format!("a(x) = {}, sigma(x) = {}", self.drift.describe(), self.diffusion.describe()),
        }
    }
}

/// Terminal payoff `g` (or `g0`), optional running payoff `g1`, declared kinks.
#[derive(Debug, Clone)]
pub struct PayoffSpec {
    terminal: RealFn,
    flow: Option<RealFn>,
    kinks: Vec<f64>,
}

impl PayoffSpec {
    pub fn terminal(g: RealFn) -> Self {
        PayoffSpec {
            terminal: g,
            flow: None,
            kinks: Vec::new(),
        }
    }

    pub fn with_flow(mut self, g1: RealFn) -> Self {
        self.flow = Some(g1);
        self
    }

    pub fn with_kinks(mut self, kinks: Vec<f64>) -> Self {
        self.kinks = kinks;
        self
    }

    pub fn g(&self) -> &RealFn {
        &self.terminal
    }

    pub fn flow(&self) -> Option<&RealFn> {
        self.flow.as_ref()
    }

    pub fn kinks(&self) -> &[f64] {
        &self.kinks
    }

    pub fn validate(&self, domain: &Interval) -> Result<()> {
        for w in self.kinks.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Invalid(format!("kinks must be strictly ascending: {:?}", self.kinks)));
            }
        }
        for &k in &self.kinks {
            if !domain.in_interior(k) {
                return Err(Error::Invalid(format!("kink {k} is not inside the state space")));
            }
        }
        Ok(())
    }

    /// Declared kink within `tol` of `x`, if any.
    pub fn kink_near(&self, x: f64, tol: f64) -> Option<f64> {
        self.kinks.iter().copied().find(|k| (k - x).abs() <= tol)
    }

    /// Jet of `g` at `x`, taking the requested side at declared kinks.
    pub fn g_jet(&self, x: f64, side: Side) -> Result<Jet> {
        self.terminal.jet(x, side)
    }

    /// Finds points on `[lo, hi]` where `g'` jumps but no kink was declared.
    ///
    /// Analytic payoffs report their switching points exactly. Native payoffs
    /// compare one-sided difference quotients at every grid point, flagging
    /// jumps larger than `1e-4 (1 + |g'|)`.
    pub fn undeclared_kinks(&self, grid: &[f64]) -> Vec<f64> {
        let (lo, hi) = match (grid.first(), grid.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Vec::new(),
        };
        let tol_x = 1e-9 * lo.abs().max(hi.abs()).max(1.0);
        let candidates: Vec<f64> = if self.terminal.is_analytic() {
            self.terminal.kinks_in(lo, hi)
        } else {
            let h = if grid.len() > 1 { (hi - lo) / (grid.len() - 1) as f64 } else { 1e-3 };
            let g = &self.terminal;
            let s = 0.25 * h;
            grid.iter()
                .copied()
                .filter(|&x| {
                    let right = (-3.0 * g.eval(x) + 4.0 * g.eval(x + s) - g.eval(x + 2.0 * s)) / (2.0 * s);
                    let left = (3.0 * g.eval(x) - 4.0 * g.eval(x - s) + g.eval(x - 2.0 * s)) / (2.0 * s);
                    (right - left).abs() > 1e-4 * (1.0 + right.abs().max(left.abs()))
                })
                .collect()
        };
        candidates
            .into_iter()
            .filter(|c| self.kink_near(*c, tol_x.max(if self.terminal.is_analytic() { 0.0 } else { grid_step(grid) })).is_none())
            .collect()
    }
}

fn grid_step(grid: &[f64]) -> f64 {
    if grid.len() > 1 {
        (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64
    } else {
        0.0
    }
}

/// Threshold family: `LInterval` stops at the first time `X >= p`,
/// `RInterval` at the first time `X <= p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "l")]
    LInterval,
    #[serde(rename = "r")]
    RInterval,
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::LInterval => "l",
            Direction::RInterval => "r",
        }
    }
}

/// Working-grid configuration. Missing bounds default to a window around
/// the reference point (see [`Problem::window`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_points: usize,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub reference: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_points: DEFAULT_GRID_POINTS,
            lo: None,
            hi: None,
            reference: None,
        }
    }
}

impl GridSpec {
    pub fn bounded(lo: f64, hi: f64) -> Self {
        GridSpec {
            lo: Some(lo),
            hi: Some(hi),
            ..GridSpec::default()
        }
    }

    pub fn with_points(mut self, n: usize) -> Self {
        self.n_points = n;
        self
    }
}

/// Closed working window `[lo, hi]` inside the open state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn points(&self, n: usize) -> Vec<f64> {
        let n = n.max(2);
        let h = (self.hi - self.lo) / (n - 1) as f64;
        (0..n)
            .map(|i| if i == n - 1 { self.hi } else { self.lo + h * i as f64 })
            .collect()
    }

    pub fn spacing(&self, n: usize) -> f64 {
        (self.hi - self.lo) / (n.max(2) - 1) as f64
    }

    /// Geometric midpoint for positive windows, arithmetic otherwise.
    pub fn midpoint(&self) -> f64 {
        if self.lo > 0.0 {
            (self.lo * self.hi).sqrt()
        } else {
            0.5 * (self.lo + self.hi)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// An optimal stopping problem `sup_tau E^x g(X_tau) exp(-rho tau)` restricted
/// to one threshold family.
#[derive(Debug, Clone)]
pub struct Problem {
    pub process: DiffusionSpec,
    pub payoff: PayoffSpec,
    pub discount: f64,
    pub direction: Direction,
    pub grid: GridSpec,
}

impl Problem {
    pub fn new(
        process: DiffusionSpec,
        payoff: PayoffSpec,
        discount: f64,
        direction: Direction,
        grid: GridSpec,
    ) -> Result<Self> {
        if !(discount > 0.0) || !discount.is_finite() {
            return Err(Error::Invalid(format!("discount rate must be positive, got {discount}")));
        }
        if grid.n_points < 3 {
            return Err(Error::Invalid("grid needs at least 3 points".into()));
        }
        payoff.validate(process.domain())?;
        let problem = Problem {
            process,
            payoff,
            discount,
            direction,
            grid,
        };
        let w = problem.window();
        let d = problem.process.domain();
        if !(d.lower < w.lo && w.lo < w.hi && w.hi < d.upper) {
            return Err(Error::Invalid(format!(
                "window [{}, {}] must satisfy l < lo < hi < r for ({}, {})",
                w.lo, w.hi, d.lower, d.upper
            )));
        }
        if let Some(r) = problem.grid.reference {
            d.check_interior(r)?;
        }
        Ok(problem)
    }

    pub fn with_payoff(&self, payoff: PayoffSpec) -> Result<Self> {
        Problem::new(self.process.clone(), payoff, self.discount, self.direction, self.grid)
    }

    pub fn with_grid(&self, grid: GridSpec) -> Result<Self> {
        Problem::new(self.process.clone(), self.payoff.clone(), self.discount, self.direction, grid)
    }

    pub fn domain(&self) -> &Interval {
        self.process.domain()
    }

    /// Reference point `x̄`: the configured one, else 1 when interior, else
    /// the middle of the state space.
    pub fn reference(&self) -> f64 {
        if let Some(r) = self.grid.reference {
            return r;
        }
        let d = self.domain();
        if d.in_interior(1.0) {
            return 1.0;
        }
        match (d.lower.is_finite(), d.upper.is_finite()) {
            (true, true) => 0.5 * (d.lower + d.upper),
            (true, false) => d.lower + 1.0,
            (false, true) => d.upper - 1.0,
            (false, false) => 0.0,
        }
    }

    /// The working window. Unset bounds are placed at `l + (x̄ - l)/50` and
    /// `r - (r - x̄)/50` for finite endpoints (giving `x̄/50, 50 x̄` on the
    /// positive half-line once `r` is infinite), and `x̄ ∓ 49 max(1, |x̄|)` for
    /// infinite ones.
    pub fn window(&self) -> Window {
        let d = self.domain();
        let x = self.reference();
        let span = 49.0 * x.abs().max(1.0);
        let lo = self.grid.lo.unwrap_or_else(|| {
            if d.lower.is_finite() {
                d.lower + (x - d.lower) / 50.0
            } else {
                x - span
            }
        });
        let hi = self.grid.hi.unwrap_or_else(|| {
            if d.upper.is_finite() {
                d.upper - (d.upper - x) / 50.0
            } else if d.lower.is_finite() && d.lower == 0.0 {
                50.0 * x
            } else {
                x + span
            }
        });
        Window { lo, hi }
    }

    pub fn grid_points(&self) -> Vec<f64> {
        self.window().points(self.grid.n_points)
    }

    pub fn grid_spacing(&self) -> f64 {
        self.window().spacing(self.grid.n_points)
    }

    /// Anchor `x0` of the scale density, `S'(x0) = 1`.
    pub fn scale_anchor(&self) -> f64 {
        self.reference()
    }

    pub fn g(&self, x: f64) -> f64 {
        self.payoff.g().eval(x)
    }
}

/// `L f(x) = a(x) f'(x) + sigma(x)^2 f''(x) / 2`.
pub fn generator_apply(problem: &Problem, f: &RealFn, x: f64) -> Result<f64> {
    problem.domain().check_interior(x)?;
    let jet = f.jet(x, Side::Center)?;
    Ok(problem.process.generator_on_jet(x, &jet))
}

fn log_scale_integral(process: &DiffusionSpec, a: f64, b: f64) -> Result<f64> {
    let integrand = |y: f64| {
        let s = process.sigma(y);
        2.0 * process.drift(y) / (s * s)
    };
    Ok(quad::integrate(integrand, a, b, 1e-15, 1e-13)?.value)
}

/// Scale density `S'(x) = exp(-int_{x0}^{x} 2 a(y)/sigma(y)^2 dy)`, `x0` the
/// problem's scale anchor.
pub fn scale_density(problem: &Problem, x: f64) -> Result<f64> {
    problem.domain().check_interior(x)?;
    let anchor = problem.scale_anchor();
    Ok((-log_scale_integral(&problem.process, anchor, x)?).exp())
}

/// `S'` tabulated on an ascending set of points by cumulative cell integrals.
#[derive(Debug, Clone)]
pub struct ScaleTable {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    anchor: f64,
}

impl ScaleTable {
    pub fn new(problem: &Problem, points: &[f64]) -> Result<Self> {
        let anchor = problem.scale_anchor();
        let n = points.len();
        let mut log_s = vec![0.0; n];
        // closest point to the anchor seeds the accumulation in both directions
        let start = points
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - anchor).abs().total_cmp(&(b.1 - anchor).abs()))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Invalid("empty point set".into()))?;
        log_s[start] = -log_scale_integral(&problem.process, anchor, points[start])?;
        for i in start + 1..n {
            log_s[i] = log_s[i - 1] - log_scale_integral(&problem.process, points[i - 1], points[i])?;
        }
        for i in (0..start).rev() {
            log_s[i] = log_s[i + 1] + log_scale_integral(&problem.process, points[i], points[i + 1])?;
        }
        Ok(ScaleTable {
            points: points.to_vec(),
            values: log_s.iter().map(|v| v.exp()).collect(),
            anchor,
        })
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }
}

/// One grid point of a regularity scan.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityPoint {
    pub x: f64,
    /// `int_{x-eps}^{x+eps} (1 + |a|)/sigma^2`, `None` when it failed to converge.
    pub integral: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub epsilon: f64,
    pub points: Vec<RegularityPoint>,
    pub largest: f64,
    pub failures: Vec<f64>,
    pub pass: bool,
}

/// Scans the working grid for local integrability of `(1 + |a|)/sigma^2` over
/// `[x - eps, x + eps]`, with `eps` one grid spacing.
pub fn check_regularity(problem: &Problem) -> RegularityReport {
    let grid = problem.grid_points();
    let eps = problem.grid_spacing();
    let d = *problem.domain();
    let process = &problem.process;
    let points: Vec<RegularityPoint> = grid
        .iter()
        .map(|&x| {
            let a = (x - eps).max(d.lower + 1e-12 * (x - d.lower).abs().max(1e-300));
            let b = (x + eps).min(d.upper - 1e-12 * (d.upper - x).abs().max(1e-300));
            let integrand = |y: f64| {
                let s = process.sigma(y);
                (1.0 + process.drift(y).abs()) / (s * s)
            };
            let integral = quad::integrate(integrand, a, b, 1e-12, 1e-9).ok().map(|q| q.value);
            let pass = matches!(integral, Some(v) if v.is_finite());
            RegularityPoint { x, integral, pass }
        })
        .collect();
    let failures: Vec<f64> = points.iter().filter(|p| !p.pass).map(|p| p.x).collect();
    let largest = points.iter().filter_map(|p| p.integral).fold(0.0, f64::max);
    RegularityReport {
        epsilon: eps,
        pass: failures.is_empty(),
        points,
        largest,
        failures,
    }
}
