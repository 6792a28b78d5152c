//! Truncated Taylor series ("jets") for exact higher-order derivatives.
//!
//! A [`Jet`] stores the Taylor coefficients `f(x), f'(x), f''(x)/2!, ...` of a
//! function at a point. Arithmetic on jets propagates derivatives exactly up
//! to order [`JET_ORDER`], which is what the free-boundary classifier needs
//! for its higher-order tests and what the generator needs for `f''`.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Highest derivative order carried by a [`Jet`].
pub const JET_ORDER: usize = 7;
const LEN: usize = JET_ORDER + 1;

/// Truncated Taylor expansion about a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    coef: [f64; LEN],
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

impl Jet {
    pub fn constant(c: f64) -> Self {
        let mut coef = [0.0; LEN];
        coef[0] = c;
        Jet { coef }
    }

    /// The identity function expanded at `x`.
    pub fn variable(x: f64) -> Self {
        let mut coef = [0.0; LEN];
        coef[0] = x;
        coef[1] = 1.0;
        Jet { coef }
    }

    pub fn from_coefficients(coef: [f64; LEN]) -> Self {
        Jet { coef }
    }

    /// Builds a jet from derivative values `f, f', f'', ...`; missing orders are zero.
    pub fn from_derivatives(derivs: &[f64]) -> Self {
        let mut coef = [0.0; LEN];
        for (k, d) in derivs.iter().take(LEN).enumerate() {
            coef[k] = d / factorial(k);
        }
        Jet { coef }
    }

    pub fn coefficients(&self) -> &[f64; LEN] {
        &self.coef
    }

    pub fn value(&self) -> f64 {
        self.coef[0]
    }

    /// The `k`-th derivative, `k <= JET_ORDER`.
    pub fn derivative(&self, k: usize) -> f64 {
        self.coef[k] * factorial(k)
    }

    pub fn is_finite(&self) -> bool {
        self.coef.iter().all(|c| c.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut coef = self.coef;
        coef.iter_mut().for_each(|c| *c *= s);
        Jet { coef }
    }

    /// Sign of `f(x + side * t)` for small `t > 0`, where `side` is +1 or -1.
    ///
    /// Returns 0 when every carried coefficient vanishes.
    pub fn directional_sign(&self, side: f64) -> f64 {
        let mut pow = 1.0;
        for c in self.coef.iter() {
            if *c != 0.0 {
                return (c * pow).signum();
            }
            pow *= side;
        }
        0.0
    }

    /// Index of the first non-zero coefficient, if any.
    pub fn leading_order(&self) -> Option<usize> {
        self.coef.iter().position(|c| *c != 0.0)
    }

    pub fn exp(&self) -> Self {
        let mut e = [0.0; LEN];
        e[0] = self.coef[0].exp();
        for k in 1..LEN {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.coef[j] * e[k - j];
            }
            e[k] = s / k as f64;
        }
        Jet { coef: e }
    }

    pub fn ln(&self) -> Self {
        let a0 = self.coef[0];
        let mut l = [0.0; LEN];
        l[0] = a0.ln();
        for k in 1..LEN {
            let mut s = 0.0;
            for j in 1..k {
                s += j as f64 * l[j] * self.coef[k - j];
            }
            l[k] = (self.coef[k] - s / k as f64) / a0;
        }
        Jet { coef: l }
    }

    /// Real power with a constant exponent. Requires a positive base unless
    /// `r` is a small integer, in which case repeated multiplication is used.
    pub fn powf(&self, r: f64) -> Self {
        if r.fract() == 0.0 && r.abs() <= 64.0 {
            return self.powi(r as i32);
        }
        let a0 = self.coef[0];
        let mut p = [0.0; LEN];
        p[0] = a0.powf(r);
        for k in 1..LEN {
            let mut s = 0.0;
            for j in 1..=k {
                s += ((r + 1.0) * j as f64 - k as f64) * self.coef[j] * p[k - j];
            }
            p[k] = s / (k as f64 * a0);
        }
        Jet { coef: p }
    }

    pub fn powi(&self, n: i32) -> Self {
        if n < 0 {
            return Jet::constant(1.0) / self.powi(-n);
        }
        let mut result = Jet::constant(1.0);
        let mut base = *self;
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                result = result * base;
            }
            base = base * base;
            e >>= 1;
        }
        result
    }

    pub fn sqrt(&self) -> Self {
        self.powf(0.5)
    }

    /// Joint sine and cosine expansions.
    pub fn sin_cos(&self) -> (Self, Self) {
        let mut s = [0.0; LEN];
        let mut c = [0.0; LEN];
        s[0] = self.coef[0].sin();
        c[0] = self.coef[0].cos();
        for k in 1..LEN {
            let mut ss = 0.0;
            let mut cc = 0.0;
            for j in 1..=k {
                let w = j as f64 * self.coef[j];
                ss += w * c[k - j];
                cc -= w * s[k - j];
            }
            s[k] = ss / k as f64;
            c[k] = cc / k as f64;
        }
        (Jet { coef: s }, Jet { coef: c })
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        let mut coef = self.coef;
        for (c, r) in coef.iter_mut().zip(rhs.coef.iter()) {
            *c += r;
        }
        Jet { coef }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        let mut coef = self.coef;
        for (c, r) in coef.iter_mut().zip(rhs.coef.iter()) {
            *c -= r;
        }
        Jet { coef }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut coef = [0.0; LEN];
        for k in 0..LEN {
            let mut s = 0.0;
            for j in 0..=k {
                s += self.coef[j] * rhs.coef[k - j];
            }
            coef[k] = s;
        }
        Jet { coef }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        let b0 = rhs.coef[0];
        let mut coef = [0.0; LEN];
        for k in 0..LEN {
            let mut s = self.coef[k];
            for j in 1..=k {
                s -= rhs.coef[j] * coef[k - j];
            }
            coef[k] = s / b0;
        }
        Jet { coef }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(self, rhs: f64) -> Jet {
        let mut coef = self.coef;
        coef[0] += rhs;
        Jet { coef }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, rhs: f64) -> Jet {
        self.scale(rhs)
    }
}

/// Taylor expansion of a solution of `S(x) u'' + A(x) u' - rho u = F(x)`
/// from its value and slope, with `S`, `A`, `F` given as jets at the same point.
///
/// The coefficients follow from matching powers of `t` in the ODE; `S(x)` must
/// be non-zero.
pub fn ode_jet(s: &Jet, a: &Jet, forcing: &Jet, rho: f64, u0: f64, u1: f64) -> Jet {
    let sc = s.coefficients();
    let ac = a.coefficients();
    let fc = forcing.coefficients();
    let mut u = [0.0; LEN];
    u[0] = u0;
    u[1] = u1;
    for k in 0..(LEN - 2) {
        let mut rhs = fc[k] + rho * u[k];
        for i in 1..=k {
            rhs -= sc[i] * ((k - i + 2) * (k - i + 1)) as f64 * u[k - i + 2];
        }
        for i in 0..=k {
            rhs -= ac[i] * (k - i + 1) as f64 * u[k - i + 1];
        }
        u[k + 2] = rhs / (sc[0] * ((k + 2) * (k + 1)) as f64);
    }
    Jet { coef: u }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_derivatives_are_exact() {
        // f(x) = x^3 - 2x at x = 2: f = 4, f' = 10, f'' = 12, f''' = 6
        let x = Jet::variable(2.0);
        let f = x * x * x - x * 2.0;
        assert_eq!(f.value(), 4.0);
        assert_eq!(f.derivative(1), 10.0);
        assert_eq!(f.derivative(2), 12.0);
        assert_eq!(f.derivative(3), 6.0);
        assert_eq!(f.derivative(4), 0.0);
    }

    #[test]
    fn exp_ln_roundtrip() {
        let x = Jet::variable(0.7);
        let f = x.exp().ln();
        assert_relative_eq!(f.value(), 0.7, epsilon = 1e-15);
        assert_relative_eq!(f.derivative(1), 1.0, epsilon = 1e-14);
        for k in 2..=JET_ORDER {
            assert!(f.derivative(k).abs() < 1e-10);
        }
    }

    #[test]
    fn powf_matches_closed_form() {
        let x = 1.3_f64;
        let r = 2.5_f64;
        let f = Jet::variable(x).powf(r);
        let mut falling = 1.0;
        for k in 0..=JET_ORDER {
            let expected = falling * x.powf(r - k as f64);
            assert_relative_eq!(f.derivative(k), expected, max_relative = 1e-12);
            falling *= r - k as f64;
        }
    }

    #[test]
    fn quotient_and_trig() {
        let x = Jet::variable(0.4);
        let (s, c) = x.sin_cos();
        let t = s / c;
        // d/dx tan = 1 + tan^2
        let tan = 0.4_f64.tan();
        assert_relative_eq!(t.derivative(1), 1.0 + tan * tan, max_relative = 1e-14);
    }

    #[test]
    fn directional_sign_reads_leading_term() {
        // (x - 1)^2 at x = 1 is positive on both sides
        let d = Jet::variable(1.0) + (-1.0);
        let sq = d * d;
        assert_eq!(sq.directional_sign(1.0), 1.0);
        assert_eq!(sq.directional_sign(-1.0), 1.0);
        assert_eq!(d.directional_sign(-1.0), -1.0);
        assert_eq!(Jet::constant(0.0).directional_sign(1.0), 0.0);
    }

    #[test]
    fn ode_jet_reproduces_power_solution() {
        // x^2 u'' / 2 + x u' / 2 = 2 u is solved by u = x^2.
        let x = 1.7;
        let xj = Jet::variable(x);
        let s = xj * xj * 0.5;
        let a = xj * 0.5;
        let u = ode_jet(&s, &a, &Jet::constant(0.0), 2.0, x * x, 2.0 * x);
        assert_relative_eq!(u.derivative(2), 2.0, max_relative = 1e-13);
        for k in 3..=JET_ORDER {
            assert!(u.derivative(k).abs() < 1e-9, "order {k}: {}", u.derivative(k));
        }
    }
}
