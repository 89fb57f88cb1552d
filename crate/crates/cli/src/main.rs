use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nonlocal_acf::functionals::Outcome;
use nonlocal_acf::geometry::point;
use nonlocal_acf::operators::{energy_density_g, frac_gradient, frac_laplacian};
use nonlocal_acf::{cache_store, make_params, parse_field, QuadratureSpec};
use nonlocal_acf_cli::manifest::{verify_all, RunOptions};
use nonlocal_acf_cli::{CliError, ExperimentConfig, Result};
use serde_json::json;

const CACHE_ENV: &str = "NONLOCAL_ACF_CACHE_DIR";

#[derive(Parser)]
#[command(name = "nonlocal-acf", version, about = "Numerical experiments for nonlocal monotonicity functionals")]
struct Cli {
    /// Worker threads (defaults to the config value, then to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for randomized point sampling; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for the CSV and JSON reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run an `oracles` config instead of a single evaluation.
    #[arg(long, conflicts_with_all = ["field", "point"])]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Catalog field id, e.g. `gaussian:w=1`.
    #[arg(long)]
    field: Option<String>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    s: f64,
    /// Comma-separated coordinates.
    #[arg(long, default_value = "0")]
    point: String,
}

#[derive(Args)]
struct SuiteArgs {
    /// Manifest listing one config path per line.
    manifest: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Normalization constants and kernel masses.
    Constants(ExperimentArgs),
    /// Evaluate operators at a point, or run an `oracles` config.
    Eval(EvalArgs),
    Monotonicity(ExperimentArgs),
    Stability(ExperimentArgs),
    /// Scaling invariance and exterior/Kelvin route agreement.
    Scaling(ExperimentArgs),
    Bound(ExperimentArgs),
    Gradest(ExperimentArgs),
    Bochner(ExperimentArgs),
    Limits(ExperimentArgs),
    Moments(ExperimentArgs),
    Greens(ExperimentArgs),
    Meanvalue(ExperimentArgs),
    /// Run every config listed in a manifest.
    VerifyAll(SuiteArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Constants(_) => "constants",
            Command::Eval(_) => "eval",
            Command::Monotonicity(_) => "monotonicity",
            Command::Stability(_) => "stability",
            Command::Scaling(_) => "scaling",
            Command::Bound(_) => "bound",
            Command::Gradest(_) => "gradest",
            Command::Bochner(_) => "bochner",
            Command::Limits(_) => "limits",
            Command::Moments(_) => "moments",
            Command::Greens(_) => "greens",
            Command::Meanvalue(_) => "meanvalue",
            Command::VerifyAll(_) => "verify-all",
        }
    }
}

fn exit_code(status: Outcome) -> u8 {
    match status {
        Outcome::Pass => 0,
        Outcome::HypothesisNotMet => 2,
        Outcome::Fail => 1,
    }
}

fn run_config(sub: &str, config: &Path, out: &Path, opts: RunOptions) -> Result<u8> {
    let mut cfg = ExperimentConfig::load(config)?;
    if cfg.claim.subcommand() != sub {
        return Err(CliError::Invalid(format!(
            "claim `{}` runs under `{}`, not `{sub}`",
            cfg.claim,
            cfg.claim.subcommand()
        )));
    }
    opts.apply(&mut cfg);
    let report = nonlocal_acf_cli::run(&cfg)?;
    let (csv, json) = report.write(out)?;
    for c in report.failed_checks() {
        eprintln!("failed: {} ({:e} against {:e}; {})", c.name, c.value, c.tolerance, c.detail);
    }
    println!(
        "{} {:?} in {:.1}s -> {} {}",
        report.claim,
        report.status,
        report.wall_time_s,
        csv.display(),
        json.display()
    );
    Ok(exit_code(report.status))
}

fn eval_point(args: &EvalArgs) -> Result<u8> {
    let lib = |module: &'static str| move |source| CliError::Library { module, source };
    let id = args
        .field
        .as_deref()
        .ok_or_else(|| CliError::Invalid("eval needs --field or --config".into()))?;
    let p = make_params(args.n, args.s).map_err(lib("constants"))?;
    let spec = QuadratureSpec::for_dim(args.n);
    let u = parse_field(id, &p, &spec).map_err(lib("fields"))?;
    let coords = args
        .point
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Invalid(format!("bad --point: {e}")))?;
    let x = point(&coords).map_err(lib("geometry"))?;
    let value = u.eval(&x).map_err(lib("fields"))?;
    let lap = frac_laplacian(&u, &x, &p, &spec).map_err(lib("operators"))?;
    let g = energy_density_g(&u, &x, &p, &spec).map_err(lib("operators"))?;
    let grad = frac_gradient(&u, &x, &p, &spec).map_err(lib("operators"))?;
    let oracle = u.frac_laplacian_oracle(&x, &p).transpose().map_err(lib("fields"))?;
    let out = json!({
        "field": u.id(),
        "n": args.n,
        "s": args.s,
        "point": &x[..args.n],
        "value": value,
        "frac_laplacian": lap,
        "frac_laplacian_oracle": oracle,
        "energy_density": g,
        "frac_gradient": { "value": &grad.value[..args.n], "error": &grad.error[..args.n] },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    let opts = RunOptions {
        jobs: cli.jobs,
        seed: cli.seed,
    };
    let sub = cli.command.name();
    match &cli.command {
        Command::Eval(args) => match &args.config {
            Some(config) => run_config(sub, config, &args.out, opts),
            None => eval_point(args),
        },
        Command::VerifyAll(args) => {
            let summary = verify_all(&args.manifest, &args.out, opts, |e| match (&e.error, e.status) {
                (Some(err), _) => println!("ERROR {} ({:.1}s): {err}", e.name, e.wall_time_s),
                (None, Some(status)) => {
                    let mut line = format!("{:?} {} ({:.1}s)", status, e.name, e.wall_time_s);
                    if !e.failed_checks.is_empty() {
                        line.push_str(&format!(" failed: {}", e.failed_checks.join(", ")));
                    }
                    println!("{line}");
                }
                (None, None) => {}
            })?;
            println!(
                "{} experiments: {} passed, {} failed, {} hypothesis not met, {} errors",
                summary.experiments, summary.passed, summary.failed, summary.hypothesis_not_met, summary.errors
            );
            if !summary.ok() {
                println!("failing: {}", summary.failing().join(", "));
            }
            Ok(if summary.ok() { 0 } else { 1 })
        }
        Command::Constants(a)
        | Command::Monotonicity(a)
        | Command::Stability(a)
        | Command::Scaling(a)
        | Command::Bound(a)
        | Command::Gradest(a)
        | Command::Bochner(a)
        | Command::Limits(a)
        | Command::Moments(a)
        | Command::Greens(a)
        | Command::Meanvalue(a) => run_config(sub, &a.config, &a.out, opts),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cache_dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    if let Err(e) = cache_store::set_cache_dir(cache_dir.as_deref()) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let code = match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    if let Err(e) = cache_store::flush() {
        eprintln!("warning: could not persist caches: {e}");
    }
    ExitCode::from(code)
}
