use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use orthant_core::estimators::{derive_seed, estimate, smc_with_sample, EstimateReport, Method, RunConfig};
use orthant_core::expectations::{gibbs_truncated_sampler, original_mean, ChainConfig, OriginalScale};
use orthant_core::harness::{run_experiment, ExperimentConfig};
use orthant_core::linalg::Permutation;
use orthant_core::moves::{MoveConfig, MoveKind};
use orthant_core::problem::{
    gen_ar1_problem, gen_cauchy_problem, gen_probit_panel, gen_thurstonian, random_item_means, Ar1Spec, OrthantProblem, ProblemDocument,
    ProbitPanelSpec,
};
use orthant_core::student::{estimate_student, smc_student, StudentOptions, StudentOrthantProblem};

const EXIT_USAGE: u8 = 1;
const EXIT_DEAD: u8 = 2;

/// Gaussian and Student orthant probabilities by GHK, particle filtering and SMC.
#[derive(Parser)]
#[command(name = "orthant", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated problem as JSON.
    Generate(GenerateArgs),
    /// Estimate the probability of a problem file.
    Estimate(EstimateArgs),
    /// Run a batch experiment described by a JSON config.
    Experiment(ExperimentArgs),
    /// Weighted mean of the truncated variable, optionally against a Gibbs chain.
    Expectation(ExpectationArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Cauchy,
    Ar1,
    Thurstone,
    Probit,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(value_enum)]
    family: Family,
    /// Dimension, horizon, number of items or number of panel periods.
    #[arg(long, short = 'd')]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    rho: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lower: f64,
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    upper: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Comma-separated item means (thurstone); drawn from the seed otherwise.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    beta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    alternatives: usize,
    /// Attach Student degrees of freedom to the document.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "smc")]
    method: String,
    /// none, gibbs, overrelax[:auto|:small|:ALPHA], hmc[:TIME] or block:L.
    #[arg(long = "move", default_value = "gibbs")]
    kernel: String,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, default_value_t = 0.5)]
    ess: f64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    ordering: Switch,
    /// Student degrees of freedom; overrides a `nu` stored in the problem file.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    problem: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1)]
    replications: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Args)]
struct ExpectationArgs {
    problem: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Also run a Gibbs chain of this many sweeps on the same target.
    #[arg(long)]
    chain: Option<usize>,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Write the chain draws as CSV.
    #[arg(long)]
    draws: Option<PathBuf>,
}

struct Job {
    method: Method,
    config: RunConfig,
    nu: Option<f64>,
}

fn job(args: &RunArgs, file_nu: Option<f64>) -> Result<Job> {
    let mut method: Method = args.method.parse()?;
    let moves = match args.kernel.as_str() {
        "none" => None,
        k => Some(MoveConfig::new(k.parse::<MoveKind>()?)),
    };
    if method == Method::Smc && moves.is_none() {
        method = Method::Pf;
    }
    if args.particles < 2 {
        bail!("--particles must be >= 2");
    }
    if !(0.0..=1.0).contains(&args.ess) {
        bail!("--ess must be in [0, 1]");
    }
    let config = RunConfig::new(args.particles, args.seed)
        .with_threshold(args.ess)
        .with_moves(moves)
        .with_ordering(args.ordering == Switch::On);
    Ok(Job {
        method,
        config,
        nu: args.nu.or(file_nu),
    })
}

fn read_problem(path: &Path) -> Result<(OrthantProblem, Option<f64>)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read problem file {}", path.display()))?;
    let doc: ProblemDocument =
        serde_json::from_str(&text).with_context(|| format!("malformed problem file {}", path.display()))?;
    let problem = OrthantProblem::from_document(&doc).with_context(|| format!("invalid problem in {}", path.display()))?;
    Ok((problem, doc.nu))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn generate(args: &GenerateArgs) -> Result<u8> {
    let problem = match args.family {
        Family::Cauchy => gen_cauchy_problem(args.dim, args.seed)?,
        Family::Ar1 => {
            let mut spec = Ar1Spec::new(args.dim, args.rho, args.lower, args.upper);
            spec.sigma = args.sigma;
            gen_ar1_problem(&spec)?
        }
        Family::Thurstone => {
            let beta = match &args.beta {
                Some(b) => b.clone(),
                None => random_item_means(args.dim, args.seed),
            };
            if beta.len() != args.dim {
                bail!("--beta has {} entries but --dim is {}", beta.len(), args.dim);
            }
            gen_thurstonian(&beta, args.sigma)?
        }
        Family::Probit => gen_probit_panel(&ProbitPanelSpec::new(args.alternatives, args.dim), args.seed)?,
    };
    let mut doc = problem.to_document();
    doc.nu = args.nu;
    let mut out = output(args.out.as_deref())?;
    writeln!(out, "{}", serde_json::to_string(&doc)?)?;
    Ok(0)
}

fn run_once(problem: &OrthantProblem, job: &Job, config: &RunConfig) -> Result<EstimateReport> {
    Ok(match job.nu {
        Some(nu) => estimate_student(
            &StudentOrthantProblem::new(problem.clone(), nu)?,
            job.method,
            config,
            StudentOptions::default(),
        )?,
        None => estimate(problem, job.method, config)?,
    })
}

fn estimate_cmd(args: &EstimateArgs) -> Result<u8> {
    if args.replications == 0 {
        bail!("--replications must be >= 1");
    }
    let (problem, file_nu) = read_problem(&args.problem)?;
    let job = job(&args.run, file_nu)?;
    let mut out = output(args.run.out.as_deref())?;
    let mut dead = false;
    for r in 0..args.replications {
        let config = if args.replications == 1 {
            job.config.clone()
        } else {
            job.config.clone().with_seed(derive_seed(job.config.seed, r as u64))
        };
        let report = run_once(&problem, &job, &config)?;
        dead |= report.failed;
        writeln!(out, "{}", report.to_json_line()?)?;
    }
    out.flush()?;
    if dead {
        eprintln!("orthant: particle system died (all weights zero)");
        return Ok(EXIT_DEAD);
    }
    Ok(0)
}

fn experiment_cmd(args: &ExperimentArgs) -> Result<u8> {
    let mut config = ExperimentConfig::load(&args.config)
        .with_context(|| format!("bad experiment config {}", args.config.display()))?;
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(r) = args.replications {
        config.replications = r;
    }
    if config.output.is_none() {
        bail!("no output directory: set `output` in the config or pass --out");
    }
    let outcome = run_experiment(&config)?;
    let mut stdout = io::stdout().lock();
    for row in &outcome.summary {
        writeln!(stdout, "{}", row.csv_line())?;
    }
    Ok(0)
}

fn expectation_cmd(args: &ExpectationArgs) -> Result<u8> {
    let (problem, file_nu) = read_problem(&args.problem)?;
    let job = job(&args.run, file_nu)?;
    if job.method == Method::Ghk {
        bail!("expectation needs --method pf or smc");
    }
    let engine = match job.nu {
        Some(nu) => smc_student(&StudentOrthantProblem::new(problem.clone(), nu)?, &job.config, StudentOptions::default())?,
        None => smc_with_sample(&problem, &job.config)?,
    };
    if engine.report.failed {
        eprintln!("orthant: particle system died (all weights zero)");
        return Ok(EXIT_DEAD);
    }
    let mut record = serde_json::json!({
        "method": engine.report.method,
        "d": problem.dim(),
        "log_prob": engine.report.log_prob,
        "M": engine.report.particles,
        "seed": engine.report.seed,
        "mean": original_mean(&engine)?,
    });
    if let Some(iterations) = args.chain {
        let chain = gibbs_truncated_sampler(&problem, job.nu, &ChainConfig {
            iterations,
            thin: args.thin,
            seed: derive_seed(job.config.seed, u64::MAX),
            ..ChainConfig::default()
        })?;
        let std = problem.standardize();
        let order = Permutation::identity(problem.dim());
        let scale = OriginalScale::new(&std, &order, problem.mean(), job.nu)?;
        let n = chain.draws.len() as f64;
        let mut mean = vec![0.0; problem.dim()];
        for (k, draw) in chain.draws.iter().enumerate() {
            let u = chain.mixing.as_ref().map(|m| m[k]);
            for (m, y) in mean.iter_mut().zip(scale.map(draw, u)) {
                *m += y / n;
            }
        }
        let lag1: Vec<f64> = chain.autocorrelation.iter().map(|a| a.first().copied().unwrap_or(0.0)).collect();
        record["chain_mean"] = serde_json::json!(mean);
        record["chain_lag1_autocorrelation"] = serde_json::json!(lag1);
        record["chain_acceptance"] = serde_json::json!(chain.acceptance);
        if let Some(path) = &args.draws {
            let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            chain.write_csv(io::BufWriter::new(file))?;
        }
    }
    let mut out = output(args.run.out.as_deref())?;
    writeln!(out, "{}", serde_json::to_string(&record)?)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Expectation(a) => expectation_cmd(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("orthant: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
