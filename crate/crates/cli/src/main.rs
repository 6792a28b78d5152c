use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use optstop::diffusion::{Catalog, DiffusionSpec, Direction, Problem};
use optstop::excessive::{verify_global_optimality, GlobalVerdict};
use optstop::fbp::{classify_by_propositions, find_stationary_points, write_landscape};
use optstop::fundsol::{beta_roots, fundamental_pair, FundamentalPair};
use optstop::green::{green_decompose, reduce_integral_problem, verify_theorem4, ReducedProblem};
use optstop::mcsim::{estimate_integral_value, estimate_refined, MCConfig, Scheme, StoppingRule};
use optstop::realopt::{
    abandonment_sigma_sweep, investment_sigma_sweep, log_spaced, solve_abandonment, solve_investment,
    write_sweep_csv, AbandonmentProblem, InvestmentProblem, DEFAULT_SWEEP_POINTS,
};
use optstop::threshold::{maximize_h, smooth_pasting_report, value_at, ThresholdSolution};
use optstop::{config, Error};

mod render;

use render::{render, to_value, Manifest, Outputs};

#[derive(Parser)]
#[command(name = "optstop", version, about = "Optimal stopping over threshold rules for 1-D diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print the report as JSON instead of `key = value` lines.
    #[arg(long, global = true)]
    json_report: bool,
    /// Directory for CSV tables and the run manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimal threshold with its certificate.
    Solve(ProblemArg),
    /// Optimality over all stopping times.
    Verify(ProblemArg),
    /// Free-boundary solutions and their classification.
    #[command(alias = "fbp-analyze")]
    Fbp(ProblemArg),
    /// Green representation of the running payoff.
    Green(ProblemArg),
    /// Investment timing: pay `cost` to receive the price.
    Invest(InvestArgs),
    /// Abandonment of a project earning `x - c`.
    Abandon(AbandonArgs),
    /// Monte Carlo value of a threshold rule against the analytic value.
    McCheck(McArgs),
    /// Thresholds over a range of volatilities.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct ProblemArg {
    /// Problem file (TOML).
    #[arg(long)]
    problem: PathBuf,
}

#[derive(Args, Clone)]
struct GbmArgs {
    /// Problem file supplying process, discount and grid.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    discount: Option<f64>,
}

#[derive(Args, Clone)]
struct InvestArgs {
    #[command(flatten)]
    process: GbmArgs,
    #[arg(long)]
    cost: f64,
}

#[derive(Args, Clone)]
struct AbandonArgs {
    #[command(flatten)]
    process: GbmArgs,
    /// Zero-profit price `c` of the flow `x - c`.
    #[arg(long)]
    revenue_cost: f64,
    /// Abandonment cost `L`.
    #[arg(long)]
    salvage: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Euler,
    ExactGbm,
}

#[derive(Args, Clone)]
struct McArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    threshold: f64,
    #[arg(long, allow_hyphen_values = true)]
    start: f64,
    #[arg(long, default_value_t = 200_000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Euler)]
    scheme: SchemeArg,
    /// Simulation horizon; defaults to `25 / rho`.
    #[arg(long)]
    horizon: Option<f64>,
    /// Also run at `dt/2` on shared increments and extrapolate.
    #[arg(long)]
    refine: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Invest,
    Abandon,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[arg(long, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long)]
    discount: f64,
    #[arg(long, default_value_t = 1.0)]
    cost: f64,
    #[arg(long, default_value_t = 1.0)]
    revenue_cost: f64,
    #[arg(long, default_value_t = 0.0)]
    salvage: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_min: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = DEFAULT_SWEEP_POINTS)]
    points: usize,
}

/// Result of a command: report, exit status and manifest details.
struct Run {
    report: Value,
    ok: bool,
    digest: Option<String>,
    parameters: Value,
}

enum Failure {
    Error(Error),
    Io(std::io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

type Outcome = std::result::Result<Run, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut outputs = match Outputs::new(cli.out.clone()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let name = command_name(&cli.command);
    let result = match &cli.command {
        Command::Solve(a) => solve(a, &mut outputs),
        Command::Verify(a) => verify(a),
        Command::Fbp(a) => fbp(a, &mut outputs),
        Command::Green(a) => green(a, &mut outputs),
        Command::Invest(a) => invest(a, &mut outputs),
        Command::Abandon(a) => abandon(a, &mut outputs),
        Command::McCheck(a) => mc_check(a),
        Command::Sweep(a) => sweep(a, &mut outputs),
    };
    match result {
        Ok(run) => {
            print!("{}", render(&run.report, cli.json_report));
            let manifest = Manifest {
                command: name.into(),
                tool_version: env!("CARGO_PKG_VERSION"),
                problem_digest: run.digest,
                parameters: run.parameters,
                outputs: Vec::new(),
            };
            if let Err(e) = outputs.finish(manifest) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            ExitCode::from(if run.ok { 0 } else { 2 })
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Solve(_) => "solve",
        Command::Verify(_) => "verify",
        Command::Fbp(_) => "fbp",
        Command::Green(_) => "green",
        Command::Invest(_) => "invest",
        Command::Abandon(_) => "abandon",
        Command::McCheck(_) => "mc-check",
        Command::Sweep(_) => "sweep",
    }
}

fn load(path: &PathBuf) -> std::result::Result<(Problem, String), Failure> {
    let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
    let problem = config::load_problem(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((problem, render::digest(&bytes)))
}

/// Terminal problem to optimize: the problem itself, or its reduction when a
/// running payoff is present.
fn target(problem: &Problem, pair: &FundamentalPair) -> optstop::Result<(Problem, Option<ReducedProblem>)> {
    if problem.payoff.flow().is_none() {
        return Ok((problem.clone(), None));
    }
    let g = green_decompose(problem, pair)?;
    let reduced = reduce_integral_problem(problem, g)?;
    Ok((reduced.problem.clone(), Some(reduced)))
}

fn threshold_summary(s: &ThresholdSolution) -> Value {
    json!({
        "direction": s.direction,
        "exists": s.exists,
        "p_star": s.p_star,
        "h_star": s.h_star,
        "diagnostic": s.diagnostic,
        "certificate": s.certificate,
    })
}

fn process_summary(problem: &Problem) -> Value {
    json!({
        "process": problem.process.describe(),
        "payoff": problem.payoff.g().describe(),
        "flow": problem.payoff.flow().map(|f| f.describe()),
        "discount": problem.discount,
        "direction": problem.direction,
        "window": problem.window(),
        "grid_points": problem.grid.n_points,
    })
}

/// `beta I / (beta - 1)` when the problem is investment timing under GBM.
fn investment_comparator(problem: &Problem) -> Option<f64> {
    let Some(Catalog::Gbm { alpha, sigma }) = problem.process.catalog() else { return None };
    if problem.direction != Direction::LInterval || problem.payoff.flow().is_some() || problem.discount <= alpha {
        return None;
    }
    let cost = 1.0 - problem.g(1.0);
    let affine = [2.0, 3.0, 5.0].iter().all(|&x| ((x - problem.g(x)) - cost).abs() <= 1e-12 * x);
    if !affine || cost <= 0.0 {
        return None;
    }
    let (b, _) = beta_roots(alpha, sigma, problem.discount);
    Some(b * cost / (b - 1.0))
}

fn solve(a: &ProblemArg, out: &mut Outputs) -> Outcome {
    let (problem, digest) = load(&a.problem)?;
    let pair = fundamental_pair(&problem)?;
    let (target, reduced) = target(&problem, &pair)?;
    let s = maximize_h(&target, &pair)?;
    let pasting = if s.exists { smooth_pasting_report(&target, &s).ok() } else { None };
    let comparator = investment_comparator(&problem);
    out.write("h_table.csv", |w| s.write_h_table(w))?;
    if s.exists {
        out.write("value_table.csv", |w| s.write_value_table(w, &target))?;
    }
    let report = json!({
        "problem": process_summary(&problem),
        "fundamental_pair": { "source": pair.source(), "wronskian": pair.wronskian() },
        "reduced_by_flow": reduced.is_some(),
        "solution": threshold_summary(&s),
        "smooth_pasting": pasting,
        "closed_form_p_star": comparator,
    });
    Ok(Run {
        report,
        ok: s.certified(),
        digest: Some(digest),
        parameters: json!({ "problem": a.problem }),
    })
}

fn verify(a: &ProblemArg) -> Outcome {
    let (problem, digest) = load(&a.problem)?;
    let pair = fundamental_pair(&problem)?;
    let (target, _) = target(&problem, &pair)?;
    let s = maximize_h(&target, &pair)?;
    let g = verify_global_optimality(&target, &s)?;
    let report = json!({
        "problem": process_summary(&problem),
        "solution": threshold_summary(&s),
        "global": g,
    });
    Ok(Run {
        report,
        ok: g.verdict == GlobalVerdict::GloballyOptimal,
        digest: Some(digest),
        parameters: json!({ "problem": a.problem }),
    })
}

fn fbp(a: &ProblemArg, out: &mut Outputs) -> Outcome {
    let (problem, digest) = load(&a.problem)?;
    let pair = fundamental_pair(&problem)?;
    let (target, _) = target(&problem, &pair)?;
    let points = find_stationary_points(&target, &pair)?;
    let rep = classify_by_propositions(&target, &pair, points)?;
    out.write("landscape.csv", |w| write_landscape(w, &target, &pair))?;
    let report = json!({
        "problem": process_summary(&problem),
        "fbp": rep,
        "selected_p": rep.selected_point().map(|s| s.p_bar),
    });
    Ok(Run {
        report,
        ok: rep.selected.is_some(),
        digest: Some(digest),
        parameters: json!({ "problem": a.problem }),
    })
}

fn green(a: &ProblemArg, out: &mut Outputs) -> Outcome {
    let (problem, digest) = load(&a.problem)?;
    if problem.payoff.flow().is_none() {
        return Err(Error::Config(format!("{}: payoff.g1 is required for `green`", a.problem.display())).into());
    }
    let pair = fundamental_pair(&problem)?;
    let g = green_decompose(&problem, &pair)?;
    out.write("green.csv", |w| g.write_csv(w))?;
    let residual = g.residuals().iter().zip(&g.r).filter(|(r, _)| r.is_finite()).fold(0.0f64, |m, (r, v)| {
        m.max(r.abs() / v.abs().max(1.0))
    });
    let mut report = json!({
        "problem": process_summary(&problem),
        "wronskian": g.b,
        "lower_tail": g.lower_tail,
        "upper_tail": g.upper_tail,
        "max_relative_residual": residual,
    });
    let mut ok = true;
    if problem.direction == Direction::RInterval {
        let reduced = reduce_integral_problem(&problem, g)?;
        let s = maximize_h(&reduced.problem, &pair)?;
        report["solution"] = threshold_summary(&s);
        if s.exists {
            match verify_theorem4(&problem, &reduced.green, s.p_star) {
                Ok(c) => {
                    ok = c.pass;
                    report["certificate"] = to_value(&c);
                }
                Err(e @ Error::HypothesisFailed { .. }) => {
                    ok = false;
                    report["certificate"] = json!({ "hypothesis_failed": e.to_string() });
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            ok = false;
        }
    }
    Ok(Run {
        report,
        ok,
        digest: Some(digest),
        parameters: json!({ "problem": a.problem }),
    })
}

/// Process, discount, optional grid and problem digest from flags or a file.
fn gbm_setup(g: &GbmArgs) -> std::result::Result<(DiffusionSpec, f64, Option<Problem>, Option<String>), Failure> {
    if let Some(path) = &g.problem {
        let (problem, digest) = load(path)?;
        let rho = g.discount.unwrap_or(problem.discount);
        return Ok((problem.process.clone(), rho, Some(problem), Some(digest)));
    }
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| Error::Config(format!("--{flag} is required without --problem")));
    let process = DiffusionSpec::gbm(need(g.alpha, "alpha")?, need(g.sigma, "sigma")?)?;
    Ok((process, need(g.discount, "discount")?, None, None))
}

fn invest(a: &InvestArgs, out: &mut Outputs) -> Outcome {
    let (process, rho, file, digest) = gbm_setup(&a.process)?;
    let mut ip = InvestmentProblem::new(a.cost, process, rho);
    if let Some(p) = &file {
        if p.grid.lo.is_some() || p.grid.hi.is_some() {
            ip = ip.with_grid(p.grid.clone());
        }
    }
    let s = solve_investment(&ip)?;
    if s.solution.exists {
        out.write("value_table.csv", |w| s.solution.write_value_table(w, &s.problem))?;
    }
    let report = json!({
        "problem": process_summary(&s.problem),
        "solution": threshold_summary(&s.solution),
        "certificate": s.certificate,
        "closed_form_p_star": s.closed_form,
        "positive_part_p_star": s.positive_part_p_star,
    });
    Ok(Run {
        report,
        ok: s.certificate.as_ref().is_some_and(|c| c.pass),
        digest,
        parameters: json!({ "cost": a.cost, "alpha": a.process.alpha, "sigma": a.process.sigma, "discount": rho,
            "problem": a.process.problem }),
    })
}

fn abandon(a: &AbandonArgs, out: &mut Outputs) -> Outcome {
    let (process, rho, file, digest) = gbm_setup(&a.process)?;
    let mut ap = AbandonmentProblem::linear(a.revenue_cost, a.salvage, process, rho)?;
    if let Some(p) = &file {
        if p.grid.lo.is_some() || p.grid.hi.is_some() {
            ap = ap.with_grid(p.grid.clone());
        }
    }
    let parameters = json!({ "revenue_cost": a.revenue_cost, "salvage": a.salvage, "alpha": a.process.alpha,
        "sigma": a.process.sigma, "discount": rho, "problem": a.process.problem });
    let s = match solve_abandonment(&ap) {
        Ok(s) => s,
        Err(e @ Error::HypothesisFailed { .. }) => {
            return Ok(Run {
                report: json!({ "hypothesis_failed": e.to_string() }),
                ok: false,
                digest,
                parameters,
            })
        }
        Err(e) => return Err(e.into()),
    };
    if s.solution.exists {
        out.write("value_table.csv", |w| {
            let rows = s.solution.grid.iter().map(|&x| vec![x, s.value(x).unwrap_or(f64::NAN), -a.salvage]);
            optstop::report::write_csv(w, &["x", "V", "g"], rows)
        })?;
    }
    let report = json!({
        "problem": process_summary(&s.problem),
        "solution": threshold_summary(&s.solution),
        "certificate": s.certificate,
        "breakeven": s.breakeven,
        "closed_form_p_star": s.closed_form,
    });
    Ok(Run {
        report,
        ok: s.certificate.as_ref().is_some_and(|c| c.pass),
        digest,
        parameters,
    })
}

fn mc_check(a: &McArgs) -> Outcome {
    let (problem, digest) = load(&a.problem)?;
    let cfg = MCConfig {
        n_paths: a.paths,
        dt: a.dt,
        horizon: a.horizon,
        seed: a.seed,
        scheme: match a.scheme {
            SchemeArg::Euler => Scheme::EulerMaruyama,
            SchemeArg::ExactGbm => Scheme::ExactGbm,
        },
    };
    let analytic = fundamental_pair(&problem).ok().and_then(|pair| {
        let (t, reduced) = target(&problem, &pair).ok()?;
        let v = value_at(&t, &pair, a.threshold, a.start).ok()?;
        Some(match reduced {
            Some(r) => r.total_value(a.start, v),
            None => v,
        })
    });
    let (estimate, refined) = if a.refine {
        let r = estimate_refined(&problem, StoppingRule::Threshold { p: a.threshold }, a.start, &cfg)?;
        (r.extrapolated, Some(r))
    } else {
        (estimate_integral_value(&problem, a.threshold, a.start, &cfg)?, None)
    };
    let agrees = analytic.map(|v| estimate.agrees_with(v, 3.0));
    let report = json!({
        "problem": process_summary(&problem),
        "estimate": estimate,
        "refinement": refined,
        "analytic": analytic,
        "agrees_within_3_stderr": agrees,
    });
    Ok(Run {
        report,
        ok: agrees.unwrap_or(true),
        digest: Some(digest),
        parameters: json!({ "problem": a.problem, "threshold": a.threshold, "start": a.start, "config": cfg,
            "refine": a.refine }),
    })
}

fn sweep(a: &SweepArgs, out: &mut Outputs) -> Outcome {
    if !(a.sigma_min > 0.0 && a.sigma_max >= a.sigma_min) || a.points == 0 {
        return Err(Error::Config("need 0 < sigma-min <= sigma-max and at least one point".into()).into());
    }
    let sigmas = log_spaced(a.sigma_min, a.sigma_max, a.points);
    let rows = match a.kind {
        SweepKind::Invest => investment_sigma_sweep(a.alpha, a.discount, a.cost, &sigmas)?,
        SweepKind::Abandon => abandonment_sigma_sweep(a.alpha, a.discount, a.revenue_cost, a.salvage, &sigmas)?,
    };
    out.write("sweep.csv", |w| write_sweep_csv(w, &rows))?;
    let kind = match a.kind {
        SweepKind::Invest => "invest",
        SweepKind::Abandon => "abandon",
    };
    let ok = rows.iter().all(|r| r.certified);
    Ok(Run {
        report: json!({ "kind": kind, "rows": rows }),
        ok,
        digest: None,
        parameters: json!({ "kind": kind, "alpha": a.alpha, "discount": a.discount, "cost": a.cost,
            "revenue_cost": a.revenue_cost, "salvage": a.salvage, "sigma_min": a.sigma_min,
            "sigma_max": a.sigma_max, "points": a.points }),
    })
}
