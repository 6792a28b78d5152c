//! Arithmetic expressions in one variable `x`.
//!
//! Grammar (usual precedence, `^` right-associative, unary minus binds looser
//! than `^`):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'x' | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `exp ln log sqrt abs sin cos` (one argument), `max min` (two),
//! `pos(u) = max(u, 0)`. Names other than `x`, `pi` and `e` must be supplied as
//! parameters when parsing.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::func::{Side, SmoothFn};
use crate::jet::Jet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Builtin {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Max,
    Min,
    Pos,
}

impl Builtin {
    fn lookup(name: &str) -> Option<(Builtin, usize)> {
        Some(match name {
            "exp" => (Builtin::Exp, 1),
            "ln" | "log" => (Builtin::Ln, 1),
            "sqrt" => (Builtin::Sqrt, 1),
            "abs" => (Builtin::Abs, 1),
            "sin" => (Builtin::Sin, 1),
            "cos" => (Builtin::Cos, 1),
            "max" => (Builtin::Max, 2),
            "min" => (Builtin::Min, 2),
            "pos" => (Builtin::Pos, 1),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var,
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Builtin, Vec<Node>),
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Expr(format!("bad number `{text}` at column {}", start + 1)))?;
            out.push((start, Token::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(src[start..i].to_string())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Token::Op(c)));
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character `{c}` at column {}", i + 1)));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    params: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map(|(c, _)| c + 1).unwrap_or(0)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(Error::Expr(format!("expected `{op}` at column {}", self.column())))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Node::Bin(BinOp::Add, Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Node::Bin(BinOp::Sub, Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Node::Bin(BinOp::Mul, Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Node::Bin(BinOp::Div, Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            let exponent = self.unary()?;
            Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node> {
        let col = self.column();
        match self.tokens.get(self.pos).cloned() {
            Some((_, Token::Num(v))) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Some((_, Token::Op('('))) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some((_, Token::Ident(name))) => {
                self.pos += 1;
                if self.peek() == Some(&Token::Op('(')) {
                    let (func, arity) = Builtin::lookup(&name)
                        .ok_or_else(|| Error::Expr(format!("unknown function `{name}` at column {col}")))?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != arity {
                        return Err(Error::Expr(format!(
                            "`{name}` takes {arity} argument(s), got {} at column {col}",
                            args.len()
                        )));
                    }
                    return Ok(Node::Call(func, args));
                }
                match name.as_str() {
                    "x" => Ok(Node::Var),
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    other => self
                        .params
                        .get(other)
                        .map(|v| Node::Num(*v))
                        .ok_or_else(|| Error::Expr(format!("unknown name `{other}` at column {col}"))),
                }
            }
            Some((_, Token::Op(c))) => Err(Error::Expr(format!("unexpected `{c}` at column {col}"))),
            None => Err(Error::Expr("unexpected end of expression".into())),
        }
    }
}

impl Node {
    fn is_constant(&self) -> bool {
        match self {
            Node::Num(_) => true,
            Node::Var => false,
            Node::Neg(a) => a.is_constant(),
            Node::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            Node::Call(_, args) => args.iter().all(Node::is_constant),
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var => x,
            Node::Neg(a) => -a.eval(x),
            Node::Bin(op, a, b) => {
                let (u, v) = (a.eval(x), b.eval(x));
                match op {
                    BinOp::Add => u + v,
                    BinOp::Sub => u - v,
                    BinOp::Mul => u * v,
                    BinOp::Div => u / v,
                    BinOp::Pow => {
                        if v.fract() == 0.0 && v.abs() <= 64.0 {
                            u.powi(v as i32)
                        } else {
                            u.powf(v)
                        }
                    }
                }
            }
            Node::Call(f, args) => {
                let u = args[0].eval(x);
                match f {
                    Builtin::Exp => u.exp(),
                    Builtin::Ln => u.ln(),
                    Builtin::Sqrt => u.sqrt(),
                    Builtin::Abs => u.abs(),
                    Builtin::Sin => u.sin(),
                    Builtin::Cos => u.cos(),
                    Builtin::Max => u.max(args[1].eval(x)),
                    Builtin::Min => u.min(args[1].eval(x)),
                    Builtin::Pos => u.max(0.0),
                }
            }
        }
    }

    /// Picks the branch sign of a switching function `d` (positive selects the
    /// first branch) for the requested side; `None` is a genuine kink.
    fn branch(d: &Jet, side: Side) -> Option<f64> {
        let right = d.directional_sign(1.0);
        let left = d.directional_sign(-1.0);
        match side {
            Side::Right => Some(right),
            Side::Left => Some(left),
            Side::Center if d.value() != 0.0 || left == right => Some(right),
            Side::Center => None,
        }
    }

    fn jet(&self, x: f64, side: Side) -> std::result::Result<Jet, ()> {
        Ok(match self {
            Node::Num(v) => Jet::constant(*v),
            Node::Var => Jet::variable(x),
            Node::Neg(a) => -a.jet(x, side)?,
            Node::Bin(op, a, b) => {
                let u = a.jet(x, side)?;
                match op {
                    BinOp::Add => u + b.jet(x, side)?,
                    BinOp::Sub => u - b.jet(x, side)?,
                    BinOp::Mul => u * b.jet(x, side)?,
                    BinOp::Div => u / b.jet(x, side)?,
                    BinOp::Pow if b.is_constant() => u.powf(b.eval(x)),
                    BinOp::Pow => (b.jet(x, side)? * u.ln()).exp(),
                }
            }
            Node::Call(f, args) => {
                let u = args[0].jet(x, side)?;
                match f {
                    Builtin::Exp => u.exp(),
                    Builtin::Ln => u.ln(),
                    Builtin::Sqrt => u.sqrt(),
                    Builtin::Sin => u.sin_cos().0,
                    Builtin::Cos => u.sin_cos().1,
                    Builtin::Abs => {
                        let s = Self::branch(&u, side).ok_or(())?;
                        if s < 0.0 {
                            -u
                        } else {
                            u
                        }
                    }
                    Builtin::Pos => {
                        let s = Self::branch(&u, side).ok_or(())?;
                        if s > 0.0 {
                            u
                        } else {
                            Jet::constant(0.0)
                        }
                    }
                    Builtin::Max | Builtin::Min => {
                        let v = args[1].jet(x, side)?;
                        let s = Self::branch(&(u - v), side).ok_or(())?;
                        let first = if *f == Builtin::Max { s >= 0.0 } else { s <= 0.0 };
                        if first {
                            u
                        } else {
                            v
                        }
                    }
                }
            }
        })
    }

    /// Collects the switching functions of every non-smooth node.
    fn switches<'a>(&'a self, out: &mut Vec<Switch<'a>>) {
        match self {
            Node::Num(_) | Node::Var => {}
            Node::Neg(a) => a.switches(out),
            Node::Bin(_, a, b) => {
                a.switches(out);
                b.switches(out);
            }
            Node::Call(f, args) => {
                for a in args {
                    a.switches(out);
                }
                match f {
                    Builtin::Abs | Builtin::Pos => out.push(Switch::Single(&args[0])),
                    Builtin::Max | Builtin::Min => out.push(Switch::Pair(&args[0], &args[1])),
                    _ => {}
                }
            }
        }
    }
}

enum Switch<'a> {
    Single(&'a Node),
    Pair(&'a Node, &'a Node),
}

impl Switch<'_> {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Switch::Single(a) => a.eval(x),
            Switch::Pair(a, b) => a.eval(x) - b.eval(x),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        Self::parse_with(src, &BTreeMap::new())
    }

    /// Parses with named constants substituted at parse time.
    pub fn parse_with(src: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut parser = Parser { tokens, pos: 0, params };
        let root = parser.expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(Error::Expr(format!("trailing input at column {}", parser.column())));
        }
        Ok(Expr {
            source: src.trim().to_string(),
            root,
        })
    }

    pub fn constant(c: f64) -> Self {
        Expr {
            source: format!("{c}"),
            root: Node::Num(c),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_constant(&self) -> bool {
        self.root.is_constant()
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.root.eval(x)
    }

    /// Locates sign changes of every switching function (the arguments of
    /// `abs`/`pos`, the differences inside `max`/`min`) on `[lo, hi]` by a scan
    /// of `n` cells refined with bisection.
    pub fn kink_points(&self, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        let mut switches = Vec::new();
        self.root.switches(&mut switches);
        let mut found: Vec<f64> = Vec::new();
        let n = n.max(2);
        for sw in &switches {
            let mut prev_x = lo;
            let mut prev = sw.eval(lo);
            if prev == 0.0 {
                found.push(lo);
            }
            for i in 1..=n {
                let x = lo + (hi - lo) * i as f64 / n as f64;
                let v = sw.eval(x);
                if v == 0.0 {
                    found.push(x);
                } else if prev != 0.0 && v.signum() != prev.signum() {
                    let (mut a, mut b, mut fa) = (prev_x, x, prev);
                    for _ in 0..200 {
                        let m = 0.5 * (a + b);
                        if m <= a || m >= b {
                            break;
                        }
                        let fm = sw.eval(m);
                        if fm == 0.0 {
                            a = m;
                            b = m;
                            break;
                        }
                        if fm.signum() == fa.signum() {
                            a = m;
                            fa = fm;
                        } else {
                            b = m;
                        }
                    }
                    found.push(0.5 * (a + b));
                }
                prev_x = x;
                prev = v;
            }
        }
        found.sort_by(|a, b| a.total_cmp(b));
        found.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
        found
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl SmoothFn for Expr {
    fn eval(&self, x: f64) -> f64 {
        self.root.eval(x)
    }

    fn jet(&self, x: f64, side: Side) -> Result<Jet> {
        self.root.jet(x, side).map_err(|_| Error::Kink { x })
    }

    fn is_analytic(&self) -> bool {
        true
    }

    fn kinks_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.kink_points(lo, hi, 4000)
    }

    fn describe(&self) -> String {
        self.source.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn precedence_and_associativity() {
        let e = Expr::parse("-x^2 + 2*x - 3/4").unwrap();
        assert_eq!(e.eval(3.0), -9.0 + 6.0 - 0.75);
        let e = Expr::parse("2^3^2").unwrap();
        assert_eq!(e.eval(0.0), 512.0);
        let e = Expr::parse("x^-1").unwrap();
        assert_eq!(e.eval(4.0), 0.25);
        let e = Expr::parse("1.5e-1*x + e - pi").unwrap();
        assert_relative_eq!(e.eval(2.0), 0.3 + std::f64::consts::E - std::f64::consts::PI);
    }

    #[test]
    fn parameters_substitute() {
        let mut p = BTreeMap::new();
        p.insert("delta".to_string(), 4.0);
        let e = Expr::parse_with("(x-1)^3 + x^delta", &p).unwrap();
        assert_eq!(e.eval(2.0), 1.0 + 16.0);
        assert!(Expr::parse("x^delta").is_err());
    }

    #[test]
    fn syntax_errors_report_columns() {
        let err = Expr::parse("x + * 2").unwrap_err().to_string();
        assert!(err.contains("column 5"), "{err}");
        assert!(Expr::parse("max(x)").is_err());
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("(x").is_err());
        assert!(Expr::parse("x $ 2").is_err());
    }

    #[test]
    fn jets_of_kinked_functions() {
        let e = Expr::parse("max(x - 1, 0)").unwrap();
        assert!(matches!(e.jet(1.0, Side::Center), Err(Error::Kink { .. })));
        assert_eq!(e.jet(1.0, Side::Right).unwrap().derivative(1), 1.0);
        assert_eq!(e.jet(1.0, Side::Left).unwrap().derivative(1), 0.0);
        // smooth away from the kink
        assert_eq!(e.jet(2.0, Side::Center).unwrap().derivative(1), 1.0);
        // a tangential touch is not a kink
        let sq = Expr::parse("abs((x-1)^2)").unwrap();
        assert_eq!(sq.jet(1.0, Side::Center).unwrap().derivative(2), 2.0);
    }

    #[test]
    fn kink_points_are_located() {
        let e = Expr::parse("abs(x - 1.2345) + pos(3 - x) + min(x, 2*x - 1)").unwrap();
        let k = e.kink_points(0.0, 5.0, 100);
        assert_eq!(k.len(), 3, "{k:?}");
        assert_relative_eq!(k[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(k[1], 1.2345, epsilon = 1e-12);
        assert_relative_eq!(k[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn non_integer_powers_use_general_jets() {
        let e = Expr::parse("x^1.5").unwrap();
        let j = e.jet(4.0, Side::Center).unwrap();
        assert_relative_eq!(j.derivative(1), 1.5 * 2.0, max_relative = 1e-14);
        let e = Expr::parse("x^x").unwrap();
        let j = e.jet(2.0, Side::Center).unwrap();
        assert_relative_eq!(j.derivative(1), 4.0 * (2f64.ln() + 1.0), max_relative = 1e-13);
    }
}
