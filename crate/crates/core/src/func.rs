//! Real functions of one variable with derivative access.
//!
//! Drift, diffusion and payoff functions are either parsed expressions, which
//! differentiate exactly through [`Jet`] arithmetic, or native closures, which
//! fall back to finite differences.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::jet::{Jet, JET_ORDER};

/// Which one-sided expansion to take at a point where the function may kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Center,
    Right,
}

impl Side {
    pub(crate) fn direction(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Center | Side::Right => 1.0,
        }
    }
}

/// A function that can report its value and a Taylor jet at a point.
pub trait SmoothFn: Send + Sync {
    fn eval(&self, x: f64) -> f64;

    /// Taylor jet at `x`. At a kink, `Side::Center` fails with [`Error::Kink`].
    fn jet(&self, x: f64, side: Side) -> Result<Jet>;

    /// Whether [`SmoothFn::jet`] is exact rather than a finite-difference estimate.
    fn is_analytic(&self) -> bool;

    /// Points in `[lo, hi]` where the function is known to lose smoothness.
    fn kinks_in(&self, _lo: f64, _hi: f64) -> Vec<f64> {
        Vec::new()
    }

    fn describe(&self) -> String;
}

/// Shared handle to a [`SmoothFn`].
#[derive(Clone)]
pub struct RealFn(Arc<dyn SmoothFn>);

impl RealFn {
    pub fn new(f: impl SmoothFn + 'static) -> Self {
        RealFn(Arc::new(f))
    }

    /// Parses an expression in the variable `x`.
    pub fn parse(src: &str) -> Result<Self> {
        Ok(RealFn::new(Expr::parse(src)?))
    }

    pub fn constant(c: f64) -> Self {
        RealFn::new(Expr::constant(c))
    }

    /// Wraps a closure; derivatives use finite differences.
    pub fn native(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        RealFn::new(NativeFn {
            label: label.into(),
            f: Arc::new(f),
        })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.0.eval(x)
    }

    pub fn jet(&self, x: f64, side: Side) -> Result<Jet> {
        self.0.jet(x, side)
    }

    pub fn derivative(&self, x: f64, order: usize, side: Side) -> Result<f64> {
        Ok(self.jet(x, side)?.derivative(order))
    }

    pub fn is_analytic(&self) -> bool {
        self.0.is_analytic()
    }

    pub fn kinks_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.0.kinks_in(lo, hi)
    }

    pub fn describe(&self) -> String {
        self.0.describe()
    }
}

impl fmt::Debug for RealFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RealFn({})", self.describe())
    }
}

/// Closure-backed function with finite-difference derivatives.
#[derive(Clone)]
pub struct NativeFn {
    label: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// Step for first derivatives.
fn first_step(x: f64) -> f64 {
    1e-6f64.max(1e-6 * x.abs())
}

/// Step for derivatives of order `k >= 2`; balances truncation against
/// cancellation, which grows like `eps / h^k`.
fn higher_step(x: f64, k: usize) -> f64 {
    let base = f64::EPSILON.powf(1.0 / (k as f64 + 4.0));
    base * x.abs().max(1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

impl NativeFn {
    /// 5-point central first derivative.
    fn d1_central(&self, x: f64) -> f64 {
        let h = first_step(x);
        let f = &self.f;
        (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
    }

    /// 5-point central second derivative.
    fn d2_central(&self, x: f64) -> f64 {
        let h = higher_step(x, 2);
        let f = &self.f;
        (-f(x - 2.0 * h) + 16.0 * f(x - h) - 30.0 * f(x) + 16.0 * f(x + h) - f(x + 2.0 * h))
            / (12.0 * h * h)
    }

    /// Central `k`-th difference with one Richardson step (k >= 3).
    fn dk_central(&self, x: f64, k: usize) -> f64 {
        let raw = |h: f64| {
            let mut s = 0.0;
            for j in 0..=k {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let offset = (k as f64 / 2.0 - j as f64) * h;
                s += sign * binomial(k, j) * (self.f)(x + offset);
            }
            s / h.powi(k as i32)
        };
        let h = higher_step(x, k) * 2.0;
        (4.0 * raw(h / 2.0) - raw(h)) / 3.0
    }

    /// Second-order one-sided derivatives: first and second order.
    fn one_sided(&self, x: f64, dir: f64) -> (f64, f64) {
        let f = &self.f;
        let h = first_step(x) * 10.0 * dir;
        let d1 = (-3.0 * f(x) + 4.0 * f(x + h) - f(x + 2.0 * h)) / (2.0 * h);
        let h2 = higher_step(x, 2) * dir;
        let d2 = (2.0 * f(x) - 5.0 * f(x + h2) + 4.0 * f(x + 2.0 * h2) - f(x + 3.0 * h2)) / (h2 * h2);
        (d1, d2)
    }
}

impl SmoothFn for NativeFn {
    fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    fn jet(&self, x: f64, side: Side) -> Result<Jet> {
        let mut d = [0.0; JET_ORDER + 1];
        d[0] = (self.f)(x);
        match side {
            Side::Center => {
                d[1] = self.d1_central(x);
                d[2] = self.d2_central(x);
                for (k, slot) in d.iter_mut().enumerate().take(7).skip(3) {
                    *slot = self.dk_central(x, k);
                }
            }
            Side::Left | Side::Right => {
                let (d1, d2) = self.one_sided(x, side.direction());
                d[1] = d1;
                d[2] = d2;
            }
        }
        let jet = Jet::from_derivatives(&d);
        if !jet.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite finite-difference derivative of {} at x = {x}",
                self.label
            )));
        }
        Ok(jet)
    }

    fn is_analytic(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("native:{}", self.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn native_derivatives_track_analytic_ones() {
        let native = RealFn::native("cubic", |x| (x - 1.0).powi(3) + x.powi(4));
        let parsed = RealFn::parse("(x-1)^3 + x^4").unwrap();
        let x = 2.5;
        let a = parsed.jet(x, Side::Center).unwrap();
        let n = native.jet(x, Side::Center).unwrap();
        assert_relative_eq!(n.derivative(1), a.derivative(1), max_relative = 1e-8);
        assert_relative_eq!(n.derivative(2), a.derivative(2), max_relative = 1e-6);
        assert_relative_eq!(n.derivative(3), a.derivative(3), max_relative = 1e-3);
        assert!(!native.is_analytic());
        assert!(parsed.is_analytic());
    }

    #[test]
    fn native_one_sided_derivatives_see_kinks() {
        let f = RealFn::native("hinge", |x: f64| (x - 1.0).max(0.0));
        let left = f.derivative(1.0, 1, Side::Left).unwrap();
        let right = f.derivative(1.0, 1, Side::Right).unwrap();
        assert!(left.abs() < 1e-8);
        assert_relative_eq!(right, 1.0, max_relative = 1e-8);
    }
}
