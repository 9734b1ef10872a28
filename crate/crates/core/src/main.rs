use clap::{Args, Parser, Subcommand};
use modinf::cli::{self, CliError, RunOptions};
use modinf::config::ScenarioConfig;
use modinf::experiments::{self, Report};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Markov-modulated infinite-server queues: analytics, exact moments and
/// Monte Carlo verification of the scaling limits.
#[derive(Parser)]
#[command(name = "modinf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form limit quantities (no sampling).
    Analyze(Common),
    /// Sample batches, one per N.
    Simulate(Common),
    /// Exact means and variances from the moment equations.
    Moments(Common),
    /// LLN, CLT and variance-scaling checks.
    Clt(Common),
    /// Cross-time covariance checks.
    Cov(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (must exist); overrides `out` in the scenario.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run the wrong-normalization control, which must fail.
    #[arg(long)]
    negative_control: bool,
}

fn emit(report: &Report, out: &Path, stem: &str) -> Result<i32, CliError> {
    let summary = experiments::emit_report(report, out, stem)?;
    for c in &summary.checks {
        let status = if c.ok() { "ok" } else { "FAIL" };
        let note = if c.expect_fail { " (negative control)" } else { "" };
        println!("{status:4} {:<28} {:<18} N={:<6} t={:<8.4} worst={:.3}{note}", c.scenario_id, c.check, c.n, c.t, c.worst);
    }
    Ok(if summary.all_ok { cli::EXIT_PASS } else { cli::EXIT_VERDICT_FAIL })
}

fn run(command: Command) -> Result<i32, CliError> {
    let (common, kind) = match command {
        Command::Analyze(c) => (c, "analyze"),
        Command::Simulate(c) => (c, "simulate"),
        Command::Moments(c) => (c, "moments"),
        Command::Clt(c) => (c, "clt"),
        Command::Cov(c) => (c, "cov"),
    };
    let mut config = ScenarioConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = common.out {
        config.out = Some(out);
    }
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let scenario = config.validate()?;
    cli::write_effective_config(&scenario.config, &out)?;
    let opts = RunOptions { negative_control: common.negative_control };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool.build().expect("thread pool");
    pool.install(|| match kind {
        "analyze" => {
            let a = cli::cmd_analyze(&scenario, &out)?;
            println!("pi = {:?}\nU = {}  Uhat = {}  Ucheck = {}\ngamma = {}  regime = {:?}", a.pi, a.u, a.uhat, a.ucheck, a.gamma, a.regime);
            for t in a.times.iter().chain(std::iter::once(&a.stationary)) {
                println!(
                    "t = {:<8} rho = {:.6}  sigma2 = {:.6} (modulation {:.6} + poisson {:.6})",
                    t.t, t.rho, t.sigma2, t.sigma2_modulation_term, t.sigma2_poisson_term
                );
            }
            Ok(cli::EXIT_PASS)
        }
        "simulate" => {
            let batches = cli::cmd_simulate(&scenario, &out)?;
            println!("wrote {} batches to {}", batches.len(), out.join("samples.csv").display());
            Ok(cli::EXIT_PASS)
        }
        "moments" => {
            let rows = cli::cmd_moments(&scenario, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join("moments.csv").display());
            Ok(cli::EXIT_PASS)
        }
        "clt" => emit(&cli::cmd_clt(&scenario, &opts)?, &out, "clt_report"),
        _ => emit(&cli::cmd_cov(&scenario, &opts)?, &out, "cov_report"),
    })
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
