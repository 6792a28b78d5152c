//! Fundamental solutions `psi` (increasing) and `phi` (decreasing) of `L u = rho u`.
//!
//! Catalog processes get closed forms. Everything else is integrated with
//! classical RK4: `psi` forward from a point `L` beyond the lower end of the
//! window where `u(L) = 0`, `phi` backward from a point beyond the upper end.
//! Pushing `L` towards the boundary converges to the solution that vanishes
//! there relative to the other one, which is `psi` up to a constant; the
//! extension is doubled until the normalized window values stop moving.

use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::diffusion::{scale_density, Catalog, DiffusionSpec, Direction, Interval, Problem, ScaleTable};
use crate::error::{Error, Result};
use crate::jet::{ode_jet, Jet};
use crate::report;

/// Roots of `sigma^2 beta (beta - 1)/2 + alpha beta = rho`, larger first.
pub fn beta_roots(alpha: f64, sigma: f64, rho: f64) -> (f64, f64) {
    let a = 0.5 * sigma * sigma;
    quadratic_roots(a, alpha - a, -rho)
}

/// Roots of `sigma^2 gamma^2 / 2 + mu gamma = rho`, larger first.
pub fn gamma_roots(mu: f64, sigma: f64, rho: f64) -> (f64, f64) {
    quadratic_roots(0.5 * sigma * sigma, mu, -rho)
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> (f64, f64) {
    let sq = (b * b - 4.0 * a * c).sqrt();
    let q = if b >= 0.0 { -0.5 * (b + sq) } else { -0.5 * (b - sq) };
    let (r1, r2) = (q / a, c / q);
    (r1.max(r2), r1.min(r2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Source {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Which {
    Psi,
    Phi,
}

impl Which {
    /// `psi` for l-intervals, `phi` for r-intervals.
    pub fn for_direction(direction: Direction) -> Self {
        match direction {
            Direction::LInterval => Which::Psi,
            Direction::RInterval => Which::Phi,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Which::Psi => "psi",
            Which::Phi => "phi",
        }
    }
}

#[derive(Debug)]
struct Tracks {
    nodes: Vec<f64>,
    psi: Vec<(f64, f64)>,
    phi: Vec<(f64, f64)>,
    /// Node indices of the window edges.
    lo: usize,
    hi: usize,
}

#[derive(Debug, Clone)]
enum Kind {
    /// `(x/x0)^beta`.
    Power { beta_plus: f64, beta_minus: f64 },
    /// `exp(gamma (x - x0))`.
    Exponential { gamma_plus: f64, gamma_minus: f64 },
    Numeric { tracks: Arc<Tracks>, psi_factor: f64, phi_factor: f64 },
}

/// The pair `(psi, phi)` normalized to 1 at `x0`, tabulated on the working grid.
#[derive(Debug, Clone)]
pub struct FundamentalPair {
    kind: Kind,
    process: DiffusionSpec,
    rho: f64,
    x0: f64,
    wronskian: f64,
    grid: Vec<f64>,
    scale: Vec<f64>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
    phi: Vec<f64>,
    dphi: Vec<f64>,
    problem: Problem,
}

impl FundamentalPair {
    pub fn source(&self) -> Source {
        match self.kind {
            Kind::Numeric { .. } => Source::Numeric,
            _ => Source::Analytic,
        }
    }

    pub fn normalization_point(&self) -> f64 {
        self.x0
    }

    /// `B = [psi' phi - psi phi'] / S'`, evaluated at the normalization point.
    pub fn wronskian(&self) -> f64 {
        self.wronskian
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn psi_values(&self) -> &[f64] {
        &self.psi
    }

    pub fn dpsi_values(&self) -> &[f64] {
        &self.dpsi
    }

    pub fn phi_values(&self) -> &[f64] {
        &self.phi
    }

    pub fn dphi_values(&self) -> &[f64] {
        &self.dphi
    }

    /// `S'` on the grid.
    pub fn scale_values(&self) -> &[f64] {
        &self.scale
    }

    /// Values of `psi` (or `phi`) on the grid.
    pub fn values(&self, which: Which) -> &[f64] {
        match which {
            Which::Psi => &self.psi,
            Which::Phi => &self.phi,
        }
    }

    pub fn derivative_values(&self, which: Which) -> &[f64] {
        match which {
            Which::Psi => &self.dpsi,
            Which::Phi => &self.dphi,
        }
    }

    /// Closed-form exponents `(beta_plus, beta_minus)` of a power pair.
    pub fn exponents(&self) -> Option<(f64, f64)> {
        match self.kind {
            Kind::Power { beta_plus, beta_minus } => Some((beta_plus, beta_minus)),
            Kind::Exponential { gamma_plus, gamma_minus } => Some((gamma_plus, gamma_minus)),
            Kind::Numeric { .. } => None,
        }
    }

    /// Value and first derivative at `x`; `NaN` outside the state space.
    pub fn eval(&self, which: Which, x: f64) -> (f64, f64) {
        if !self.process.domain().in_interior(x) {
            return (f64::NAN, f64::NAN);
        }
        match &self.kind {
            Kind::Power { beta_plus, beta_minus } => {
                let b = if which == Which::Psi { *beta_plus } else { *beta_minus };
                let u = (x / self.x0).powf(b);
                (u, b * u / x)
            }
            Kind::Exponential { gamma_plus, gamma_minus } => {
                let g = if which == Which::Psi { *gamma_plus } else { *gamma_minus };
                let u = (g * (x - self.x0)).exp();
                (u, g * u)
            }
            Kind::Numeric {
                tracks,
                psi_factor,
                phi_factor,
            } => {
                let (u, v) = numeric_state(&self.process, self.rho, tracks, which, x);
                let f = if which == Which::Psi { *psi_factor } else { *phi_factor };
                (u * f, v * f)
            }
        }
    }

    pub fn psi(&self, x: f64) -> f64 {
        self.eval(Which::Psi, x).0
    }

    pub fn dpsi(&self, x: f64) -> f64 {
        self.eval(Which::Psi, x).1
    }

    pub fn phi(&self, x: f64) -> f64 {
        self.eval(Which::Phi, x).0
    }

    pub fn dphi(&self, x: f64) -> f64 {
        self.eval(Which::Phi, x).1
    }

    /// Taylor jet at `x`. Numeric pairs expand the ODE around the integrated
    /// value and slope.
    pub fn jet(&self, which: Which, x: f64) -> Result<Jet> {
        self.process.domain().check_interior(x)?;
        match &self.kind {
            Kind::Power { beta_plus, beta_minus } => {
                let b = if which == Which::Psi { *beta_plus } else { *beta_minus };
                Ok((Jet::variable(x) * (1.0 / self.x0)).powf(b))
            }
            Kind::Exponential { gamma_plus, gamma_minus } => {
                let g = if which == Which::Psi { *gamma_plus } else { *gamma_minus };
                Ok(((Jet::variable(x) + (-self.x0)) * g).exp())
            }
            Kind::Numeric { .. } => {
                let (u, v) = self.eval(which, x);
                let (a, s) = self.process.coefficient_jets(x)?;
                Ok(ode_jet(&s, &a, &Jet::constant(0.0), self.rho, u, v))
            }
        }
    }

    /// `L u - rho u` at `x`. Analytic pairs use exact second derivatives;
    /// numeric pairs difference the integrated slope over a short local step.
    pub fn residual(&self, which: Which, x: f64) -> Result<f64> {
        let (u, v) = self.eval(which, x);
        let a = self.process.drift(x);
        let s = self.process.sigma(x);
        let u2 = match self.kind {
            Kind::Numeric { .. } => {
                let d = 1e-3 * local_scale(&self.process, self.rho, x);
                (self.eval(which, x + d).1 - self.eval(which, x - d).1) / (2.0 * d)
            }
            _ => self.jet(which, x)?.derivative(2),
        };
        Ok(a * v + 0.5 * s * s * u2 - self.rho * u)
    }

    /// `[psi' phi - psi phi'] / S'` at every grid point.
    pub fn wronskian_profile(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| (self.dpsi[i] * self.phi[i] - self.psi[i] * self.dphi[i]) / self.scale[i])
            .collect()
    }

    /// The same pair normalized at a different interior point.
    pub fn with_normalization(&self, x0: f64) -> Result<Self> {
        self.process.domain().check_interior(x0)?;
        let kind = match &self.kind {
            Kind::Numeric { tracks, .. } => {
                let p = numeric_state(&self.process, self.rho, tracks, Which::Psi, x0).0;
                let q = numeric_state(&self.process, self.rho, tracks, Which::Phi, x0).0;
                Kind::Numeric {
                    tracks: tracks.clone(),
                    psi_factor: 1.0 / p,
                    phi_factor: 1.0 / q,
                }
            }
            other => other.clone(),
        };
        assemble(&self.problem, kind, x0)
    }

    /// CSV with columns `x, psi, dpsi, phi, dphi, residual_psi, residual_phi`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let rows = self.grid.iter().enumerate().map(|(i, &x)| {
            vec![
                x,
                self.psi[i],
                self.dpsi[i],
                self.phi[i],
                self.dphi[i],
                self.residual(Which::Psi, x).unwrap_or(f64::NAN),
                self.residual(Which::Phi, x).unwrap_or(f64::NAN),
            ]
        });
        report::write_csv(w, &["x", "psi", "dpsi", "phi", "dphi", "residual_psi", "residual_phi"], rows)
    }
}

fn assemble(problem: &Problem, kind: Kind, x0: f64) -> Result<FundamentalPair> {
    let grid = problem.grid_points();
    let scale = ScaleTable::new(problem, &grid)?.values;
    let mut pair = FundamentalPair {
        kind,
        process: problem.process.clone(),
        rho: problem.discount,
        x0,
        wronskian: 0.0,
        psi: Vec::new(),
        dpsi: Vec::new(),
        phi: Vec::new(),
        dphi: Vec::new(),
        scale,
        grid,
        problem: problem.clone(),
    };
    let mut cols = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for &x in &pair.grid {
        let (p, dp) = pair.eval(Which::Psi, x);
        let (q, dq) = pair.eval(Which::Phi, x);
        cols[0].push(p);
        cols[1].push(dp);
        cols[2].push(q);
        cols[3].push(dq);
    }
    let [psi, dpsi, phi, dphi] = cols;
    pair.psi = psi;
    pair.dpsi = dpsi;
    pair.phi = phi;
    pair.dphi = dphi;
    let (p, dp) = pair.eval(Which::Psi, x0);
    let (q, dq) = pair.eval(Which::Phi, x0);
    pair.wronskian = (dp * q - p * dq) / scale_density(problem, x0)?;
    check_shape(&pair)?;
    Ok(pair)
}

fn check_shape(pair: &FundamentalPair) -> Result<()> {
    let n = pair.grid.len();
    for i in 0..n {
        let x = pair.grid[i];
        let psi_ok = pair.psi[i] > 0.0 && pair.dpsi[i] > 0.0 && (i == 0 || pair.psi[i] > pair.psi[i - 1]);
        if !psi_ok {
            return Err(Error::Monotonicity { which: "psi", x });
        }
        let phi_ok = pair.phi[i] > 0.0 && pair.dphi[i] < 0.0 && (i == 0 || pair.phi[i] < pair.phi[i - 1]);
        if !phi_ok {
            return Err(Error::Monotonicity { which: "phi", x });
        }
    }
    if !(pair.wronskian > 0.0 && pair.wronskian.is_finite()) {
        return Err(Error::Numerical(format!("Wronskian constant {} is not positive", pair.wronskian)));
    }
    Ok(())
}

/// Closed-form pair for catalog processes.
pub fn analytic_fundamental(problem: &Problem) -> Result<FundamentalPair> {
    let rho = problem.discount;
    let kind = match problem.process.catalog() {
        Some(Catalog::Gbm { alpha, sigma }) => {
            let (beta_plus, beta_minus) = beta_roots(alpha, sigma, rho);
            Kind::Power { beta_plus, beta_minus }
        }
        Some(Catalog::ArithmeticBm { mu, sigma }) => {
            let (gamma_plus, gamma_minus) = gamma_roots(mu, sigma, rho);
            Kind::Exponential { gamma_plus, gamma_minus }
        }
        None => return Err(Error::NotInCatalog(problem.process.describe())),
    };
    assemble(problem, kind, problem.window().midpoint())
}

/// Closed form for catalog processes, numeric integration otherwise.
pub fn fundamental_pair(problem: &Problem) -> Result<FundamentalPair> {
    if problem.process.catalog().is_some() {
        analytic_fundamental(problem)
    } else {
        numeric_fundamental(problem)
    }
}

/// Length over which the solutions change appreciably near `x`.
fn local_scale(process: &DiffusionSpec, rho: f64, x: f64) -> f64 {
    let s = process.sigma(x).abs();
    let a = process.drift(x).abs();
    let d = process.domain();
    let mut l = s / rho.sqrt();
    if a > 0.0 {
        l = l.min(s * s / a);
    }
    l.min(x - d.lower).min(d.upper - x)
}

const STEP_FRACTION: f64 = 0.01;

#[inline]
fn rhs(process: &DiffusionSpec, rho: f64, x: f64, u: f64, v: f64) -> (f64, f64) {
    let s = process.sigma(x);
    (v, 2.0 * (rho * u - process.drift(x) * v) / (s * s))
}

fn rk4(process: &DiffusionSpec, rho: f64, x: f64, (u, v): (f64, f64), h: f64) -> (f64, f64) {
    let k1 = rhs(process, rho, x, u, v);
    let k2 = rhs(process, rho, x + 0.5 * h, u + 0.5 * h * k1.0, v + 0.5 * h * k1.1);
    let k3 = rhs(process, rho, x + 0.5 * h, u + 0.5 * h * k2.0, v + 0.5 * h * k2.1);
    let k4 = rhs(process, rho, x + h, u + h * k3.0, v + h * k3.1);
    (
        u + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        v + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

/// Integrates from `x0` to `x1` in RK4 substeps no longer than a fixed
/// fraction of the local scale.
fn advance(process: &DiffusionSpec, rho: f64, x0: f64, x1: f64, state: (f64, f64)) -> (f64, f64) {
    advance_counted(process, rho, x0, x1, state).0
}

fn advance_counted(process: &DiffusionSpec, rho: f64, x0: f64, x1: f64, state: (f64, f64)) -> ((f64, f64), usize) {
    let mut s = state;
    let mut x = x0;
    let mut n = 0;
    while x != x1 && n < MAX_SUBSTEPS {
        let remaining = x1 - x;
        let limit = STEP_FRACTION * local_scale(process, rho, x);
        let h = if limit > 0.0 && limit.is_finite() && limit < remaining.abs() {
            limit.copysign(remaining)
        } else {
            remaining
        };
        s = rk4(process, rho, x, s, h);
        x = if h == remaining { x1 } else { x + h };
        n += 1;
    }
    (s, n)
}

const MAX_SUBSTEPS: usize = 10_000_000;

/// Upper bound on RK4 substeps per track before the solve is abandoned.
const STEP_BUDGET: usize = 4_000_000;

fn numeric_state(process: &DiffusionSpec, rho: f64, tracks: &Tracks, which: Which, x: f64) -> (f64, f64) {
    let nodes = &tracks.nodes;
    match which {
        Which::Psi if x < nodes[tracks.lo] => return recessive_beyond(process, rho, tracks, which, x),
        Which::Phi if x > nodes[tracks.hi] => return recessive_beyond(process, rho, tracks, which, x),
        _ => {}
    }
    let idx = nodes.partition_point(|&n| n <= x);
    match which {
        Which::Psi => {
            // from the node at or below x, moving right
            let i = idx.saturating_sub(1);
            advance(process, rho, nodes[i], x, tracks.psi[i])
        }
        Which::Phi => {
            let i = if idx > 0 && nodes[idx - 1] == x { idx - 1 } else { idx.min(nodes.len() - 1) };
            advance(process, rho, nodes[i], x, tracks.phi[i])
        }
    }
}

/// Recessive solution outside the window, where extrapolating the tracks
/// would integrate in the unstable direction. A fresh solution is started
/// past `x`, as far beyond it as the converged extension reached beyond the
/// window edge, and matched to the tracks at that edge.
fn recessive_beyond(process: &DiffusionSpec, rho: f64, tracks: &Tracks, which: Which, x: f64) -> (f64, f64) {
    let d = process.domain();
    let nodes = &tracks.nodes;
    let (edge, anchor, end, bound, start) = match which {
        Which::Psi => (tracks.lo, tracks.psi[tracks.lo], nodes[0], d.lower, (0.0, 1.0)),
        Which::Phi => (tracks.hi, tracks.phi[tracks.hi], nodes[nodes.len() - 1], d.upper, (0.0, -1.0)),
    };
    let a = nodes[edge];
    let far = if bound.is_finite() {
        bound + (x - bound) * (end - bound) / (a - bound)
    } else {
        let stretch = (local_scale(process, rho, x) / local_scale(process, rho, a)).max(1.0);
        x + (end - a) * stretch
    };
    let (sx, lx) = advance_rescaled(process, rho, far, x, start, 0.0);
    let (sa, la) = advance_rescaled(process, rho, x, a, sx, lx);
    let f = anchor.0 * (lx - la).exp() / sa.0;
    (sx.0 * f, sx.1 * f)
}

/// `advance` with the state renormalized whenever it grows past `1e100`;
/// returns the state and the accumulated log scale.
fn advance_rescaled(
    process: &DiffusionSpec,
    rho: f64,
    x0: f64,
    x1: f64,
    state: (f64, f64),
    log_scale: f64,
) -> ((f64, f64), f64) {
    const CHUNKS: usize = 64;
    let (mut s, mut l) = (state, log_scale);
    let mut x = x0;
    for k in 1..=CHUNKS {
        let next = if k == CHUNKS { x1 } else { x0 + (x1 - x0) * k as f64 / CHUNKS as f64 };
        s = advance(process, rho, x, next, s);
        x = next;
        let m = s.0.abs() + s.1.abs();
        if m > 1e100 {
            s = (s.0 / m, s.1 / m);
            l += m.ln();
        }
    }
    (s, l)
}

/// Extension nodes strictly below `lo` (ascending) at depth level `k`.
fn lower_extension(d: &Interval, lo: f64, hi: f64, spacing: f64, k: u32) -> Vec<f64> {
    let mut out = Vec::new();
    if d.lower.is_finite() {
        let decades = 4.0 * 2f64.powi(k as i32 - 1);
        let gap = lo - d.lower;
        let count = (decades * std::f64::consts::LN_10 / 0.05).ceil() as usize;
        for j in (1..=count).rev() {
            let x = d.lower + gap * (-0.05 * j as f64).exp();
            if x > d.lower && out.last().map_or(true, |&p| x > p) {
                out.push(x);
            }
        }
    } else {
        let len = (hi - lo) * 4f64.powi(k as i32 - 1);
        let m = ((len / spacing).ceil() as usize).clamp(1, 4000);
        for j in (1..=m).rev() {
            out.push(lo - len * j as f64 / m as f64);
        }
    }
    out
}

fn upper_extension(d: &Interval, lo: f64, hi: f64, spacing: f64, k: u32) -> Vec<f64> {
    let mirrored = Interval {
        lower: -d.upper,
        upper: -d.lower,
        lower_included: d.upper_included,
        upper_included: d.lower_included,
    };
    let mut out: Vec<f64> = lower_extension(&mirrored, -hi, -lo, spacing, k).into_iter().map(|x| -x).collect();
    out.reverse();
    out
}

/// Raw integration over `nodes`; values rescaled to 1 at `nodes[mid]`.
type Track = Vec<(f64, f64)>;

fn integrate_tracks(process: &DiffusionSpec, rho: f64, nodes: &[f64], mid: usize) -> Option<(Track, Track)> {
    let n = nodes.len();
    let run = |order: &mut dyn Iterator<Item = usize>, start: (f64, f64)| {
        let mut raw = vec![(0.0, 0.0, 0.0); n];
        let mut log_scale = 0.0;
        let mut prev: Option<usize> = None;
        let mut s = start;
        let mut steps = 0;
        for i in order {
            if let Some(p) = prev {
                let (next, k) = advance_counted(process, rho, nodes[p], nodes[i], s);
                s = next;
                steps += k;
                if steps > STEP_BUDGET {
                    return None;
                }
                let m = s.0.abs() + s.1.abs();
                if m > 1e100 {
                    s = (s.0 / m, s.1 / m);
                    log_scale += m.ln();
                }
            }
            raw[i] = (s.0, s.1, log_scale);
            prev = Some(i);
        }
        let (um, _, lm) = raw[mid];
        Some(
            raw.iter()
                .map(|&(u, v, l)| {
                    let f = (l - lm).exp() / um;
                    (u * f, v * f)
                })
                .collect::<Vec<_>>(),
        )
    };
    let psi = run(&mut (0..n), (0.0, 1.0))?;
    let phi = run(&mut (0..n).rev(), (0.0, -1.0))?;
    Some((psi, phi))
}

fn max_relative_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) / y.abs().max(f64::MIN_POSITIVE)).abs())
        .fold(0.0, f64::max)
}

/// Numeric pair by RK4 with recessive boundary conditions on an extended window.
pub fn numeric_fundamental(problem: &Problem) -> Result<FundamentalPair> {
    let process = &problem.process;
    let rho = problem.discount;
    let d = *process.domain();
    let w = problem.window();
    let grid = problem.grid_points();
    let spacing = problem.grid_spacing();
    const MAX_LEVEL: u32 = 12;
    const TOL: f64 = 1e-10;

    let (mut kl, mut kr) = (1u32, 1u32);
    let mut prev_psi: Option<Vec<f64>> = None;
    let mut prev_phi: Option<Vec<f64>> = None;
    loop {
        let left = lower_extension(&d, w.lo, w.hi, spacing, kl);
        let right = upper_extension(&d, w.lo, w.hi, spacing, kr);
        let offset = left.len();
        let mut nodes = left;
        nodes.extend_from_slice(&grid);
        nodes.extend_from_slice(&right);
        let mid = offset + grid.len() / 2;
        let Some((psi, phi)) = integrate_tracks(process, rho, &nodes, mid) else {
            return Err(Error::FundamentalSolve {
                which: "psi/phi",
                lo: nodes[0],
                hi: nodes[nodes.len() - 1],
            });
        };
        let psi_w: Vec<f64> = psi[offset..offset + grid.len()].iter().map(|s| s.0).collect();
        let phi_w: Vec<f64> = phi[offset..offset + grid.len()].iter().map(|s| s.0).collect();
        if psi_w.iter().chain(phi_w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::FundamentalSolve {
                which: "psi/phi",
                lo: nodes[0],
                hi: nodes[nodes.len() - 1],
            });
        }
        let psi_done = prev_psi.as_ref().is_some_and(|p| max_relative_change(&psi_w, p) < TOL);
        let phi_done = prev_phi.as_ref().is_some_and(|p| max_relative_change(&phi_w, p) < TOL);
        if psi_done && phi_done {
            let tracks = Tracks {
                nodes,
                psi,
                phi,
                lo: offset,
                hi: offset + grid.len() - 1,
            };
            let x0 = w.midpoint();
            let p = numeric_state(process, rho, &tracks, Which::Psi, x0).0;
            let q = numeric_state(process, rho, &tracks, Which::Phi, x0).0;
            let kind = Kind::Numeric {
                tracks: Arc::new(tracks),
                psi_factor: 1.0 / p,
                phi_factor: 1.0 / q,
            };
            return assemble(problem, kind, x0);
        }
        let stuck_left = d.lower.is_finite() && kl >= 7;
        let stuck_right = d.upper.is_finite() && kr >= 7;
        if !psi_done {
            if kl >= MAX_LEVEL || stuck_left {
                return Err(Error::FundamentalSolve {
                    which: "psi",
                    lo: nodes[0],
                    hi: w.lo,
                });
            }
            prev_psi = Some(psi_w);
            kl += 1;
        }
        if !phi_done {
            if kr >= MAX_LEVEL || stuck_right {
                return Err(Error::FundamentalSolve {
                    which: "phi",
                    lo: w.hi,
                    hi: nodes[nodes.len() - 1],
                });
            }
            prev_phi = Some(phi_w);
            kr += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GridSpec, PayoffSpec};
    use crate::func::RealFn;
    use approx::assert_relative_eq;

    fn problem(process: DiffusionSpec, rho: f64, grid: GridSpec) -> Problem {
        Problem::new(
            process,
            PayoffSpec::terminal(RealFn::parse("x").unwrap()),
            rho,
            Direction::LInterval,
            grid,
        )
        .unwrap()
    }

    fn strip_catalog(p: &DiffusionSpec) -> DiffusionSpec {
        DiffusionSpec::new(p.drift_fn().clone(), p.diffusion_fn().clone(), *p.domain())
    }

    #[test]
    fn beta_roots_examples() {
        let (bp, bm) = beta_roots(0.5, 1.0, 2.0);
        assert_relative_eq!(bp, 2.0, max_relative = 1e-15);
        assert_relative_eq!(bm, -2.0, max_relative = 1e-15);
        let (bp, bm) = beta_roots(0.0, 2f64.sqrt(), 1.0);
        assert_relative_eq!(bp, (1.0 + 5f64.sqrt()) / 2.0, max_relative = 1e-15);
        assert_relative_eq!(bm, (1.0 - 5f64.sqrt()) / 2.0, max_relative = 1e-14);
        let (bp, bm) = beta_roots(0.03, 0.2, 0.06);
        assert!(bp > 1.0 && bm < 0.0);
    }

    #[test]
    fn analytic_gbm_pair() {
        let p = problem(DiffusionSpec::gbm(0.5, 1.0).unwrap(), 2.0, GridSpec::bounded(0.5, 8.0));
        let pair = analytic_fundamental(&p).unwrap();
        assert_eq!(pair.source(), Source::Analytic);
        let x0 = pair.normalization_point();
        assert_eq!(pair.psi(x0), 1.0);
        assert_eq!(pair.phi(x0), 1.0);
        // psi is x^2 up to the normalization constant
        assert_relative_eq!(pair.psi(3.0) / pair.psi(1.0), 9.0, max_relative = 1e-14);
        assert_relative_eq!(pair.phi(3.0) / pair.phi(1.0), 1.0 / 9.0, max_relative = 1e-14);
    }

    #[test]
    fn analytic_wronskian_is_constant() {
        let (alpha, sigma, rho) = (0.05, 0.2, 0.1);
        let p = problem(DiffusionSpec::gbm(alpha, sigma).unwrap(), rho, GridSpec::default());
        let pair = analytic_fundamental(&p).unwrap();
        let (bp, bm) = beta_roots(alpha, sigma, rho);
        let x0 = pair.normalization_point();
        // psi' phi - psi phi' = (bp - bm)/x (x/x0)^(bp + bm) and S'(x) = x^(-2 alpha/sigma^2)
        let expected = (bp - bm) / x0 / x0.powf(-2.0 * alpha / (sigma * sigma));
        assert_relative_eq!(pair.wronskian(), expected, max_relative = 1e-8);
        let profile = pair.wronskian_profile();
        for i in [0, 400, 1000, 1600, 2000] {
            assert_relative_eq!(profile[i], pair.wronskian(), max_relative = 1e-8);
        }
    }

    #[test]
    fn analytic_residuals_vanish() {
        let p = problem(DiffusionSpec::arithmetic_bm(0.3, 0.7).unwrap(), 0.4, GridSpec::bounded(-3.0, 3.0));
        let pair = analytic_fundamental(&p).unwrap();
        for &x in pair.grid().iter().step_by(50) {
            for w in [Which::Psi, Which::Phi] {
                let u = pair.eval(w, x).0;
                assert!(pair.residual(w, x).unwrap().abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn non_catalog_process_is_rejected() {
        let p = problem(
            strip_catalog(&DiffusionSpec::gbm(0.05, 0.2).unwrap()),
            0.1,
            GridSpec::default(),
        );
        assert!(matches!(analytic_fundamental(&p), Err(Error::NotInCatalog(_))));
    }

    fn compare(p: &Problem) -> (f64, f64) {
        let a = analytic_fundamental(p).unwrap();
        let stripped = Problem::new(strip_catalog(&p.process), p.payoff.clone(), p.discount, p.direction, p.grid).unwrap();
        let n = numeric_fundamental(&stripped).unwrap();
        assert_eq!(n.source(), Source::Numeric);
        let psi = max_relative_change(n.psi_values(), a.psi_values());
        let phi = max_relative_change(n.phi_values(), a.phi_values());
        (psi, phi)
    }

    #[test]
    fn numeric_matches_gbm() {
        let p = problem(DiffusionSpec::gbm(0.05, 0.2).unwrap(), 0.1, GridSpec::bounded(0.1, 10.0));
        let (a, b) = compare(&p);
        assert!(a < 1e-4 && b < 1e-4, "{a} {b}");
    }

    #[test]
    fn numeric_matches_arithmetic_bm() {
        let p = problem(
            DiffusionSpec::arithmetic_bm(0.0, 2f64.sqrt()).unwrap(),
            1.0,
            GridSpec::bounded(-5.0, 5.0),
        );
        let (a, b) = compare(&p);
        assert!(a < 1e-4 && b < 1e-4, "{a} {b}");
    }

    #[test]
    fn numeric_pair_invariants() {
        // logistic drift, no closed form
        let proc = DiffusionSpec::new(
            RealFn::parse("0.5*x*(1 - x)").unwrap(),
            RealFn::parse("0.3*x").unwrap(),
            Interval::positive_half_line(),
        );
        let p = problem(proc, 0.2, GridSpec::bounded(0.2, 4.0));
        let pair = numeric_fundamental(&p).unwrap();
        let b = pair.wronskian();
        for w in pair.wronskian_profile() {
            assert!(((w - b) / b).abs() < 1e-5);
        }
        for &x in pair.grid().iter().step_by(25) {
            for which in [Which::Psi, Which::Phi] {
                let u = pair.eval(which, x).0;
                let r = pair.residual(which, x).unwrap();
                assert!(r.abs() <= 1e-3 * u.abs().max(1.0), "{which:?} {x} {r}");
            }
        }
        let j = pair.jet(Which::Psi, 1.3).unwrap();
        assert_relative_eq!(j.value(), pair.psi(1.3), max_relative = 1e-15);
    }

    #[test]
    fn renormalization_is_a_constant_factor() {
        let p = problem(DiffusionSpec::gbm(0.05, 0.3).unwrap(), 0.1, GridSpec::bounded(0.2, 5.0));
        let pair = analytic_fundamental(&p).unwrap();
        let moved = pair.with_normalization(2.0).unwrap();
        assert_eq!(moved.psi(2.0), 1.0);
        let c = pair.psi(2.0);
        for &x in &[0.3, 1.0, 4.0] {
            assert_relative_eq!(moved.psi(x) * c, pair.psi(x), max_relative = 1e-13);
        }
    }

    #[test]
    fn csv_dump_has_fixed_header() {
        let p = problem(DiffusionSpec::gbm(0.05, 0.2).unwrap(), 0.1, GridSpec::bounded(0.5, 2.0).with_points(11));
        let pair = analytic_fundamental(&p).unwrap();
        let mut out = Vec::new();
        pair.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "x,psi,dpsi,phi,dphi,residual_psi,residual_phi");
        assert_eq!(lines.count(), 11);
    }
}
