//! `bpre`: run samplers, exact computations and Monte Carlo experiments from JSON configs.
//!
//! Exit codes: 0 success, 1 a configured check failed, 2 configuration
//! error, 3 runtime error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bpre_core::analysis::{check_conditions, survival_exact, ConditionParams};
use bpre_core::explore::{blocks, dfs_encode, excursions, write_excursions_csv};
use bpre_core::rng::{substream, tag};
use bpre_core::stats::{Experiment, ExperimentConfig, Report};
use bpre_core::tree::{sample_explored_prefix, sample_tree, tree_stats, DEFAULT_TREE_CAP};
use bpre_core::EnvStream;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bpre", version, about = "Branching processes in varying and random environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one complete tree and print its statistics.
    SampleTree(Common),
    /// Encode the first n explored vertices (Łukasiewicz path, height process).
    Explore(Common),
    /// Exact survival probability P(h >= n).
    Survival(Common),
    /// Numerical checks of the environment conditions on a prefix of length n.
    CheckConditions(Common),
    /// Rescaled Łukasiewicz path against Brownian marginals.
    Donsker(Common),
    /// Height process against the rescaled reflected path.
    Ratio(Common),
    /// Average of sigma^2 along the height process.
    VarianceAvg(Common),
    /// Law of large numbers for the spine statistic.
    SpineLln(Common),
    /// Geiger tree identity at small heights.
    GeigerId(Common),
    /// Conditioned-tree functionals against a reference environment.
    CrtTest(Common),
    /// Block decomposition of an explored forest.
    Blocks(Common),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files; results go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Path length, tree-size threshold or horizon, overriding the configuration.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Worker threads (default: all available).
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
    CheckFailed,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::CheckFailed => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(c: &Common, experiment: bool) -> Result<ExperimentConfig, Failure> {
    let path = c.config.display();
    let text = fs::read_to_string(&c.config).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.n {
        cfg.n = n;
    }
    if let Some(r) = c.replicates {
        cfg.replicates = r;
    }
    let checked = if experiment { cfg.validate() } else { cfg.validate_fields() };
    checked.map_err(|e| Failure::Config(format!("{path}: {e}")))?;
    Ok(cfg)
}

fn env_of(cfg: &ExperimentConfig, path: &Path) -> Result<EnvStream, Failure> {
    EnvStream::new(&cfg.env).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Writes `content` to `out/name`, or to stdout when no directory is given.
fn emit(out: Option<&Path>, name: &str, content: &[u8]) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(runtime)?;
            fs::write(dir.join(name), content).map_err(runtime)
        }
        None => io::stdout().write_all(content).map_err(runtime),
    }
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    wall_time_secs: f64,
    threads: usize,
    version: &'a str,
}

fn write_metadata(c: &Common, command: &str, start: Instant) -> Result<(), Failure> {
    if let Some(dir) = &c.out {
        let meta = Metadata {
            command,
            wall_time_secs: start.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            version: env!("CARGO_PKG_VERSION"),
        };
        emit(Some(dir), &format!("{command}.meta.json"), &json(&meta))?;
    }
    Ok(())
}

fn run_experiment(c: &Common, exp: Experiment) -> Result<(), Failure> {
    let cfg = load_config(c, true)?;
    let start = Instant::now();
    let report = exp.run(&cfg).map_err(|e| {
        if e.is_config_error() {
            Failure::Config(format!("{}: {e}", c.config.display()))
        } else {
            runtime(e)
        }
    })?;
    write_report(c, exp.name(), &report)?;
    write_metadata(c, exp.name(), start)?;
    for check in &report.checks {
        println!(
            "{} {}: {} (value {}, threshold {}) {}",
            exp.name(),
            check.name,
            if check.pass { "PASS" } else { "FAIL" },
            check.value,
            check.threshold,
            check.detail
        );
    }
    if report.all_pass() {
        Ok(())
    } else {
        Err(Failure::CheckFailed)
    }
}

fn write_report(c: &Common, name: &str, report: &Report) -> Result<(), Failure> {
    let Some(dir) = c.out.as_deref() else {
        return Ok(());
    };
    emit(Some(dir), &format!("{name}.json"), &json(report))?;
    if c.format == Format::Csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(runtime)?;
        emit(Some(dir), &format!("{name}.csv"), &buf)?;
    }
    Ok(())
}

fn sample_tree_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let env = env_of(&cfg, &c.config)?;
    let mut rng = substream(cfg.seed, &[tag("sample-tree")]);
    let t = sample_tree(&env, 0, DEFAULT_TREE_CAP, &mut rng).map_err(runtime)?;
    match c.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Out {
                stats: bpre_core::tree::TreeStats,
                degrees: String,
            }
            let out = Out { stats: tree_stats(t.as_forest()), degrees: t.degree_string() };
            emit(c.out.as_deref(), "tree.json", &json(&out))
        }
        Format::Csv => {
            let mut buf = b"label,parent,height,children\n".to_vec();
            let mut dump = Vec::new();
            t.write_dump(&mut dump).map_err(runtime)?;
            for line in String::from_utf8(dump).expect("ascii").lines() {
                buf.extend_from_slice(line.replace(' ', ",").as_bytes());
                buf.push(b'\n');
            }
            emit(c.out.as_deref(), "tree.csv", &buf)
        }
    }
}

fn explore_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let env = env_of(&cfg, &c.config)?;
    let mut rng = substream(cfg.seed, &[tag("explore")]);
    let f = sample_explored_prefix(&env, cfg.n, &mut rng);
    let path = dfs_encode(&f, None);
    let exc = excursions(&path);
    match c.format {
        Format::Csv => {
            let mut buf = Vec::new();
            path.write_csv(&mut buf).map_err(runtime)?;
            emit(c.out.as_deref(), "path.csv", &buf)?;
            if let Some(dir) = &c.out {
                let mut buf = Vec::new();
                write_excursions_csv(&exc, &mut buf).map_err(runtime)?;
                emit(Some(dir), "excursions.csv", &buf)?;
            }
            Ok(())
        }
        Format::Json => {
            let value = serde_json::json!({
                "L": path.l, "X": path.x, "I": path.i, "H": path.h, "excursions": exc,
            });
            emit(c.out.as_deref(), "path.json", &json(&value))
        }
    }
}

fn survival_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let env = env_of(&cfg, &c.config)?;
    let table = survival_exact(&env, cfg.n).map_err(|e| match e {
        bpre_core::analysis::AnalysisError::Env(_) => Failure::Config(format!("{}: {e}", c.config.display())),
        e => runtime(e),
    })?;
    println!("P(h>={})={}", cfg.n, table.survival_direct);
    if let Some(dir) = &c.out {
        emit(Some(dir), "survival.json", &json(&table))?;
    }
    Ok(())
}

fn check_conditions_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let env = env_of(&cfg, &c.config)?;
    let params = ConditionParams { seed: cfg.seed, sigma2: cfg.params.sigma2, ..Default::default() };
    let report = check_conditions(&env, cfg.n, &params).map_err(runtime)?;
    for r in &report.conditions {
        println!(
            "condition {:<3} {}  statistic {:.6}  target {:.6}  deviation {:.6}  tolerance {}",
            r.condition,
            if r.pass { "PASS" } else { "FAIL" },
            r.statistic,
            r.target,
            r.deviation,
            r.tolerance
        );
    }
    if let Some(dir) = &c.out {
        emit(Some(dir), "conditions.json", &json(&report))?;
    }
    if report.all_pass() {
        Ok(())
    } else {
        Err(Failure::CheckFailed)
    }
}

fn blocks_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let env = env_of(&cfg, &c.config)?;
    let mut rng = substream(cfg.seed, &[tag("blocks")]);
    let f = sample_explored_prefix(&env, cfg.n, &mut rng);
    let sigma2 = cfg.params.sigma2.unwrap_or_else(|| env.annealed_variance());
    let p = &cfg.params;
    let table = blocks(&f, &env, cfg.n, p.delta, p.gamma, sigma2, p.eps).map_err(runtime)?;
    match c.format {
        Format::Json => emit(c.out.as_deref(), "blocks.json", &json(&table)),
        Format::Csv => {
            let mut buf = b"i,k,size,weight,good\n".to_vec();
            for b in &table.blocks {
                buf.extend_from_slice(format!("{},{},{},{},{}\n", b.i, b.k, b.size, b.weight, b.good).as_bytes());
            }
            emit(c.out.as_deref(), "blocks.csv", &buf)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<(), Failure> {
    let common = match cmd {
        Command::SampleTree(c)
        | Command::Explore(c)
        | Command::Survival(c)
        | Command::CheckConditions(c)
        | Command::Donsker(c)
        | Command::Ratio(c)
        | Command::VarianceAvg(c)
        | Command::SpineLln(c)
        | Command::GeigerId(c)
        | Command::CrtTest(c)
        | Command::Blocks(c) => c,
    };
    if let Some(t) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(runtime)?;
    }
    match cmd {
        Command::SampleTree(c) => sample_tree_cmd(c),
        Command::Explore(c) => explore_cmd(c),
        Command::Survival(c) => survival_cmd(c),
        Command::CheckConditions(c) => check_conditions_cmd(c),
        Command::Donsker(c) => run_experiment(c, Experiment::Donsker),
        Command::Ratio(c) => run_experiment(c, Experiment::Ratio),
        Command::VarianceAvg(c) => run_experiment(c, Experiment::VarianceAveraging),
        Command::SpineLln(c) => run_experiment(c, Experiment::SpineLln),
        Command::GeigerId(c) => run_experiment(c, Experiment::GeigerIdentity),
        Command::CrtTest(c) => run_experiment(c, Experiment::CrtFunctional),
        Command::Blocks(c) => blocks_cmd(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("configuration error: {m}"),
                Failure::Runtime(m) => eprintln!("runtime error: {m}"),
                Failure::CheckFailed => eprintln!("one or more checks failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
