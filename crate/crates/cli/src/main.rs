use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relmc_core::checker::{CheckConfig, CheckError, CheckOutcome, Checker};
use relmc_core::model::{parse_model, RmdpModel};
use relmc_core::oracle::{
    compare, explicit_check, ground_model, CompareReport, EnumerateOptions, ExplicitOptions, GroundMdp, OracleError,
    DEFAULT_EXPLOSION_CAP,
};
use relmc_core::pctl::{parse_formula_with_warnings, StateFormula};
use relmc_core::term::{Sym, Term};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

const SCHEMA: u32 = 1;

#[derive(Parser)]
#[command(name = "relmc", version, about = "Lifted pCTL model checking for relational MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the abstract states satisfying a formula.
    Check(RunArgs),
    /// Enumerate the ground MDP over a constant pool.
    Ground(RunArgs),
    /// Check lifted results against the ground oracle.
    Compare(RunArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Output {
    Json,
    Text,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "formula_file")]
    formula: Option<String>,
    #[arg(long)]
    formula_file: Option<PathBuf>,
    /// Maximum number of objects per abstract state.
    #[arg(long)]
    state_bound: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    max_iterations: usize,
    /// Comma-separated constant pool.
    #[arg(long, value_delimiter = ',')]
    constants: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = Output::Text)]
    output: Output,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EXPLOSION_CAP)]
    explosion_cap: usize,
    #[arg(long, default_value_t = 0.0)]
    threshold_slack: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Failure {
        Failure { code: 1, message: message.into() }
    }
}

impl From<CheckError> for Failure {
    fn from(e: CheckError) -> Failure {
        let code = match e {
            CheckError::NonConvergence { .. } => 2,
            CheckError::UnsupportedNegation(_) => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Failure {
        let code = match e {
            OracleError::ExplosionGuard { .. } => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_env("REBEL_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let (args, run): (&RunArgs, fn(&RunArgs) -> Result<u8, Failure>) = match &cli.command {
        Command::Check(a) => (a, cmd_check),
        Command::Ground(a) => (a, cmd_ground),
        Command::Compare(a) => (a, cmd_compare),
    };
    if let Some(jobs) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(args) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_model(args: &RunArgs) -> Result<RmdpModel, Failure> {
    let path = args.model.display();
    let text = std::fs::read_to_string(&args.model).map_err(|e| Failure::input(format!("{path}: {e}")))?;
    parse_model(&text).map_err(|e| Failure::input(format!("{path}: {e}")))
}

fn load_formula(args: &RunArgs) -> Result<Option<(String, StateFormula)>, Failure> {
    let (origin, text) = match (&args.formula, &args.formula_file) {
        (Some(t), _) => ("--formula".to_string(), t.clone()),
        (None, Some(p)) => {
            let t = std::fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            (p.display().to_string(), t)
        }
        (None, None) => return Ok(None),
    };
    let (f, warnings) =
        parse_formula_with_warnings(text.trim()).map_err(|e| Failure::input(format!("{origin}: {e}")))?;
    for w in warnings {
        tracing::warn!("{w}");
    }
    Ok(Some((text.trim().to_string(), f)))
}

fn require_formula(args: &RunArgs) -> Result<(String, StateFormula), Failure> {
    load_formula(args)?.ok_or_else(|| Failure::input("a formula is required (--formula or --formula-file)"))
}

fn constant_pool(args: &RunArgs, model: &RmdpModel) -> Result<Vec<Sym>, Failure> {
    match (&args.constants, &model.constants) {
        (Some(cs), _) => {
            let mut out = Vec::new();
            for c in cs {
                let c = c.trim();
                if c.is_empty() || !c.starts_with(|ch: char| ch.is_ascii_lowercase() || ch.is_ascii_digit()) {
                    return Err(Failure::input(format!("invalid constant {c:?}")));
                }
                let sym = Sym::intern(c);
                if !out.contains(&sym) {
                    out.push(sym);
                }
            }
            Ok(out)
        }
        (None, Some(cs)) => Ok(cs.clone()),
        (None, None) => Err(Failure::input("a constant pool is required (--constants)")),
    }
}

fn formula_constants(f: &StateFormula, out: &mut BTreeSet<Sym>) {
    match f {
        StateFormula::Lit(a) | StateFormula::NegLit(a) => out.extend(a.args.iter().filter_map(|t| match t {
            Term::Const(c) => Some(*c),
            _ => None,
        })),
        _ => f.children().into_iter().for_each(|c| formula_constants(c, out)),
    }
}

fn validate(args: &RunArgs, f: Option<&StateFormula>, domain_declared: bool) -> Result<(), Failure> {
    if !(args.epsilon > 0.0) {
        return Err(Failure::input(format!("--epsilon must be positive, got {}", args.epsilon)));
    }
    if args.threshold_slack < 0.0 {
        return Err(Failure::input("--threshold-slack must not be negative"));
    }
    if args.state_bound == Some(0) {
        return Err(Failure::input("--state-bound must be positive"));
    }
    if let (Some(f), Some(b), false) = (f, args.state_bound, domain_declared) {
        let mut cs = BTreeSet::new();
        formula_constants(f, &mut cs);
        if cs.len() > b {
            return Err(Failure::input(format!("--state-bound {b} is smaller than the {} constants of the formula", cs.len())));
        }
    }
    Ok(())
}

fn check_config(args: &RunArgs, state_bound: Option<usize>) -> CheckConfig {
    CheckConfig {
        state_bound,
        epsilon: args.epsilon,
        max_iterations: args.max_iterations,
        threshold_slack: args.threshold_slack,
    }
}

fn explicit_options(args: &RunArgs) -> ExplicitOptions {
    ExplicitOptions { epsilon: args.epsilon, max_iterations: args.max_iterations, threshold_slack: args.threshold_slack }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable report"));
}

#[derive(Serialize)]
struct CheckJson<'a> {
    schema: u32,
    formula: &'a str,
    iterations: usize,
    converged: bool,
    sat: &'a relmc_core::checker::SatSet,
    nodes: &'a [relmc_core::checker::NodeReport],
}

fn print_outcome(text: &str, out: &CheckOutcome, output: Output) {
    if output == Output::Json {
        print_json(&CheckJson {
            schema: SCHEMA,
            formula: text,
            iterations: out.iterations(),
            converged: out.converged(),
            sat: &out.sat,
            nodes: &out.nodes,
        });
        return;
    }
    println!("formula: {text}");
    println!("iterations: {}", out.iterations());
    println!("converged: {}", out.converged());
    println!("sat: {} abstract states", out.sat.len());
    for e in &out.sat.entries {
        let value = e.value.map(|v| format!("{v} ")).unwrap_or_default();
        let unless = if e.unless.is_empty() {
            String::new()
        } else {
            format!("  unless {}", e.unless.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(" ; "))
        };
        println!("  {value}{}{unless}", e.state);
    }
    for n in &out.nodes {
        println!("node {} [{}] iterations {} converged {}", n.node, n.formula, n.iterations, n.converged);
        for r in n.value_function.rules() {
            println!("  {} <- {}", r.value, r.state);
        }
    }
}

fn cmd_check(args: &RunArgs) -> Result<u8, Failure> {
    let mut model = load_model(args)?;
    let (text, f) = require_formula(args)?;
    if let Some(cs) = &args.constants {
        if !cs.is_empty() {
            model.constants = Some(constant_pool(args, &model)?);
        }
    }
    validate(args, Some(&f), model.constants.is_some())?;
    let out = Checker::new(&model, check_config(args, args.state_bound)).check(&f)?;
    print_outcome(&text, &out, args.output);
    Ok(0)
}

fn enumerate_pool(args: &RunArgs, model: &RmdpModel, pool: &[Sym]) -> Result<GroundMdp, Failure> {
    let opts = EnumerateOptions { state_bound: args.state_bound, cap: args.explosion_cap };
    let g = ground_model(model, pool, opts)?;
    tracing::info!(states = g.len(), transitions = g.transition_count(), "ground model enumerated");
    Ok(g)
}

#[derive(Serialize)]
struct GroundJson {
    schema: u32,
    states: usize,
    transitions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<StateValue>>,
}

#[derive(Serialize)]
struct StateValue {
    state: String,
    value: f64,
}

fn cmd_ground(args: &RunArgs) -> Result<u8, Failure> {
    let model = load_model(args)?;
    let formula = load_formula(args)?;
    validate(args, formula.as_ref().map(|x| &x.1), true)?;
    let pool = constant_pool(args, &model)?;
    let g = enumerate_pool(args, &model, &pool)?;
    let values = formula.map(|(_, f)| {
        let r = explicit_check(&g, &f, explicit_options(args), &Default::default());
        let root = r.root();
        match &root.values {
            Some(v) => v.clone(),
            None => root.sat.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    });
    match args.output {
        Output::Json => {
            let mut listed: Option<Vec<StateValue>> = values.as_ref().map(|v| {
                g.states.iter().zip(v).map(|(s, &value)| StateValue { state: s.to_string(), value }).collect()
            });
            if let Some(l) = &mut listed {
                l.sort_by(|a, b| a.state.cmp(&b.state));
            }
            print_json(&GroundJson { schema: SCHEMA, states: g.len(), transitions: g.transition_count(), values: listed });
        }
        Output::Text => {
            println!("states: {}", g.len());
            println!("transitions: {}", g.transition_count());
            if let Some(v) = &values {
                print!("{}", g.to_csv(v));
            }
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct CompareJson<'a> {
    schema: u32,
    formula: &'a str,
    constants: Vec<String>,
    lifted_state_bound: usize,
    mismatches: usize,
    report: &'a CompareReport,
}

fn cmd_compare(args: &RunArgs) -> Result<u8, Failure> {
    let model = load_model(args)?;
    let (text, f) = require_formula(args)?;
    let pool = constant_pool(args, &model)?;
    validate(args, Some(&f), true)?;
    let mut cs = BTreeSet::new();
    formula_constants(&f, &mut cs);
    for c in cs.iter().filter(|c| !pool.contains(c)) {
        tracing::warn!("formula constant {c} is not in the constant pool; its atoms are false in every ground state");
    }
    // States of the pool world concern at most |pool| objects.
    let bound = args.state_bound.map_or(pool.len(), |b| b.min(pool.len()));
    let lifted = Checker::new(&model, check_config(args, Some(bound))).check(&f)?;
    let g = enumerate_pool(args, &model, &pool)?;
    let report = compare(&g, &f, &lifted, explicit_options(args), 1e-9);
    match args.output {
        Output::Json => print_json(&CompareJson {
            schema: SCHEMA,
            formula: &text,
            constants: pool.iter().map(|c| c.to_string()).collect(),
            lifted_state_bound: bound,
            mismatches: report.mismatch_count(),
            report: &report,
        }),
        Output::Text => print_report(&text, &report),
    }
    Ok(if report.is_clean() { 0 } else { 5 })
}

fn print_report(text: &str, report: &CompareReport) {
    println!("formula: {text}");
    println!("states: {}", report.states);
    println!("mismatches: {}", report.mismatch_count());
    println!("max deviation: {:e}", report.max_deviation);
    if !report.boolean_mismatches.is_empty() {
        println!("{:<8} {:<8} state", "lifted", "explicit");
        for m in &report.boolean_mismatches {
            println!("{:<8} {:<8} {}", m.lifted, m.explicit, m.state);
        }
    }
    if !report.value_mismatches.is_empty() {
        println!("{:<5} {:<12} {:<12} state", "node", "lifted", "explicit");
        for m in &report.value_mismatches {
            println!("{:<5} {:<12.9} {:<12.9} {}", m.node, m.lifted, m.explicit, m.state);
        }
    }
}
