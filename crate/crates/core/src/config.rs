//! Problem files.
//!
//! ```toml
//! discount = 0.08
//! direction = "l"
//!
//! [params]
//! I = 1.0
//!
//! [process]
//! tag = "gbm"
//! alpha = 0.03
//! sigma = 0.25
//!
//! [payoff]
//! g = "x - I"
//!
//! [grid]
//! n_points = 2001
//! lo = 0.02
//! hi = 100
//! ```
//!
//! Without a `tag` the process is given by expressions `a` and `sigma` on
//! `(l, r)`, with `l_included` / `r_included` marking absorbing endpoints.
//! A running payoff uses `g0` and `g1` in place of `g`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSpec, Direction, GridSpec, Interval, PayoffSpec, Problem};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::func::RealFn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumOrExpr {
    Num(f64),
    Expr(String),
}

impl NumOrExpr {
    fn number(&self, field: &str, params: &BTreeMap<String, f64>) -> Result<f64> {
        match self {
            NumOrExpr::Num(v) => Ok(*v),
            NumOrExpr::Expr(s) => match s.trim().parse::<f64>() {
                Ok(v) => Ok(v),
                Err(_) => {
                    let e = Expr::parse_with(s, params).map_err(|e| Error::Config(format!("{field}: {e}")))?;
                    if !e.is_constant() {
                        return Err(Error::Config(format!("{field}: `{s}` must not depend on x")));
                    }
                    Ok(e.eval(0.0))
                }
            },
        }
    }

    fn function(&self, field: &str, params: &BTreeMap<String, f64>) -> Result<RealFn> {
        let src = match self {
            NumOrExpr::Num(v) => format!("{v:e}"),
            NumOrExpr::Expr(s) => s.clone(),
        };
        Expr::parse_with(&src, params)
            .map(RealFn::new)
            .map_err(|e| Error::Config(format!("{field}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSection {
    pub tag: Option<String>,
    pub alpha: Option<NumOrExpr>,
    pub mu: Option<NumOrExpr>,
    pub sigma: Option<NumOrExpr>,
    pub a: Option<NumOrExpr>,
    pub l: Option<NumOrExpr>,
    pub r: Option<NumOrExpr>,
    #[serde(default)]
    pub l_included: bool,
    #[serde(default)]
    pub r_included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    pub g: Option<String>,
    pub g0: Option<String>,
    pub g1: Option<String>,
    #[serde(default)]
    pub kinks: Vec<NumOrExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_points: Option<usize>,
    pub lo: Option<NumOrExpr>,
    pub hi: Option<NumOrExpr>,
    pub reference: Option<NumOrExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub discount: NumOrExpr,
    pub direction: Direction,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub process: ProcessSection,
    pub payoff: PayoffSection,
    pub grid: Option<GridSection>,
}

impl ProblemFile {
    /// Parses TOML; errors carry the line and column from the parser.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn process(&self) -> Result<DiffusionSpec> {
        let p = &self.process;
        let params = &self.params;
        let need = |v: &Option<NumOrExpr>, field: &str| -> Result<f64> {
            v.as_ref()
                .ok_or_else(|| Error::Config(format!("process.{field} is required")))?
                .number(&format!("process.{field}"), params)
        };
        match p.tag.as_deref() {
            Some(tag) => {
                if p.a.is_some() || p.l.is_some() || p.r.is_some() {
                    return Err(Error::Config(format!(
                        "process.tag = \"{tag}\" fixes the coefficients and state space; drop a, l, r"
                    )));
                }
                match tag {
                    "gbm" => DiffusionSpec::gbm(need(&p.alpha, "alpha")?, need(&p.sigma, "sigma")?),
                    "arithmetic_bm" | "abm" => DiffusionSpec::arithmetic_bm(need(&p.mu, "mu")?, need(&p.sigma, "sigma")?),
                    other => Err(Error::Config(format!("process.tag: unknown process `{other}`"))),
                }
                .map_err(|e| Error::Config(format!("process: {e}")))
            }
            None => {
                let a = p
                    .a
                    .as_ref()
                    .ok_or_else(|| Error::Config("process.a is required without a tag".into()))?
                    .function("process.a", params)?;
                let sigma = p
                    .sigma
                    .as_ref()
                    .ok_or_else(|| Error::Config("process.sigma is required".into()))?
                    .function("process.sigma", params)?;
                let l = match &p.l {
                    Some(v) => v.number("process.l", params)?,
                    None => f64::NEG_INFINITY,
                };
                let r = match &p.r {
                    Some(v) => v.number("process.r", params)?,
                    None => f64::INFINITY,
                };
                let domain = Interval::new(l, r, p.l_included, p.r_included)
                    .map_err(|e| Error::Config(format!("process: {e}")))?;
                Ok(DiffusionSpec::new(a, sigma, domain))
            }
        }
    }

    pub fn payoff(&self) -> Result<PayoffSpec> {
        let p = &self.payoff;
        let params = &self.params;
        let parse = |src: &str, field: &str| {
            Expr::parse_with(src, params)
                .map(RealFn::new)
                .map_err(|e| Error::Config(format!("payoff.{field}: {e}")))
        };
        let mut spec = match (&p.g, &p.g0) {
            (Some(g), None) => PayoffSpec::terminal(parse(g, "g")?),
            (None, Some(g0)) => PayoffSpec::terminal(parse(g0, "g0")?),
            (Some(_), Some(_)) => return Err(Error::Config("payoff: give either g or g0, not both".into())),
            (None, None) => return Err(Error::Config("payoff.g is required".into())),
        };
        if let Some(g1) = &p.g1 {
            spec = spec.with_flow(parse(g1, "g1")?);
        }
        let kinks = p
            .kinks
            .iter()
            .map(|k| k.number("payoff.kinks", params))
            .collect::<Result<Vec<_>>>()?;
        Ok(spec.with_kinks(kinks))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let mut spec = GridSpec::default();
        if let Some(g) = &self.grid {
            let params = &self.params;
            if let Some(n) = g.n_points {
                spec.n_points = n;
            }
            spec.lo = g.lo.as_ref().map(|v| v.number("grid.lo", params)).transpose()?;
            spec.hi = g.hi.as_ref().map(|v| v.number("grid.hi", params)).transpose()?;
            spec.reference = g.reference.as_ref().map(|v| v.number("grid.reference", params)).transpose()?;
        }
        Ok(spec)
    }

    pub fn discount(&self) -> Result<f64> {
        self.discount.number("discount", &self.params)
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(self.process()?, self.payoff()?, self.discount()?, self.direction, self.grid()?)
            .map_err(|e| match e {
                Error::Config(_) => e,
                other => Error::Config(other.to_string()),
            })
    }
}

/// Parses a problem file and builds the problem.
pub fn load_problem(text: &str) -> Result<Problem> {
    ProblemFile::parse(text)?.problem()
}
