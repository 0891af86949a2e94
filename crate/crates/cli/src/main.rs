use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use l2l::cost::CostParams;
use l2l::exec::{gradcheck, GRADCHECK_STEP};
use l2l::harness::{
    cmd_costmodel, cmd_run, cmd_sweep, cmd_verify, parse_config, parse_sweep, RunConfig,
};
use l2l::Error;

#[derive(Parser)]
#[command(
    name = "l2l",
    version,
    about = "Layer-to-layer training on a simulated device"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run or sweep configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSV reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured device budget, in bytes.
    #[arg(long, global = true)]
    budget: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write runs.csv, loss.csv and cost.csv.
    Run,
    /// Run a grid of configurations and write a consolidated runs.csv.
    Sweep,
    /// Evaluate the analytic cost model.
    Costmodel(CostArgs),
    /// Run the property suites and print a pass/fail table.
    Verify,
    /// Compare schedule gradients with finite differences.
    Gradcheck,
}

#[derive(Args)]
struct CostArgs {
    /// Smallest u whose overhead stays at or below this fraction.
    #[arg(long)]
    min_u: Option<f64>,
    #[arg(long)]
    n_layers: Option<u64>,
    /// Layer size in MB.
    #[arg(long)]
    layer_mb: Option<f64>,
    /// Host-to-device bandwidth in GB/s.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Giga-operations per layer forward on one microbatch.
    #[arg(long)]
    gops: Option<f64>,
    /// Compute rate in TFLOP/s.
    #[arg(long)]
    tflops: Option<f64>,
    #[arg(long)]
    ub: Option<u64>,
    #[arg(long)]
    u: Option<u64>,
    /// Write cost.csv to the output directory.
    #[arg(long)]
    csv: bool,
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Domain { .. } | Error::Plan(_) | Error::Io(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Check(other.to_string()),
        }
    }
}

fn load_text(path: Option<&Path>) -> Result<String, Failure> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display()))),
        None => Ok(String::new()),
    }
}

fn apply_overrides(cli: &Cli, config: &mut RunConfig) {
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(budget) = cli.budget {
        config.device_budget = Some(budget);
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config = parse_config(&load_text(cli.config.as_deref())?)?;
    apply_overrides(cli, &mut config);
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run => {
            let config = load_config(cli)?;
            let record = cmd_run(&config, &cli.out)?;
            let report = record
                .outcome
                .as_ref()
                .map_err(|e| Failure::Check(e.to_string()))?;
            println!(
                "{} N={} u={} ub={}: peak {} bytes, final loss {}",
                config.schedule(),
                config.n_layers,
                config.u,
                config.ub,
                record.peak_bytes,
                report.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Sweep => {
            let mut spec = parse_sweep(&load_text(cli.config.as_deref())?)?;
            apply_overrides(cli, &mut spec.base);
            let result = cmd_sweep(&spec, &cli.out)?;
            print!("{}", result.summary);
        }
        Command::Costmodel(args) => {
            let params = cost_params(cli, args)?;
            let out = args.csv.then_some(cli.out.as_path());
            print!("{}", cmd_costmodel(&params, args.min_u, out)?);
        }
        Command::Verify => {
            let report = cmd_verify();
            print!("{}", report.table());
            if !report.passed() {
                return Err(Failure::Check("verification failed".into()));
            }
        }
        Command::Gradcheck => {
            let config = match cli.config {
                Some(_) => load_config(cli)?,
                None => {
                    let mut c = parse_config("n_layers=2\nhidden=4\nintermediate=8\nub=2\nu=2")?;
                    apply_overrides(cli, &mut c);
                    c
                }
            };
            let r = gradcheck(
                &config.model(),
                config.plan(),
                config.schedule(),
                config.seed,
            )?;
            println!(
                "{} parameters, step {GRADCHECK_STEP:e}: max relative error {:.3e}, max absolute error {:.3e}",
                r.checked, r.max_rel_error, r.max_abs_error
            );
            if r.max_rel_error > 1e-6 {
                return Err(Failure::Check("gradient check above 1e-6".into()));
            }
        }
    }
    Ok(())
}

/// Explicit parameters when any of the per-layer figures is given, otherwise
/// derived from the run configuration.
fn cost_params(cli: &Cli, a: &CostArgs) -> Result<CostParams, Failure> {
    let config = load_config(cli)?;
    let mut p = config.cost_params()?;
    if a.layer_mb.is_some() || a.gops.is_some() {
        let missing =
            |name: &str| Failure::Usage(format!("--{name} is required with explicit parameters"));
        p.layer_mb = a.layer_mb.ok_or_else(|| missing("layer-mb"))?;
        p.layer_gops = a.gops.ok_or_else(|| missing("gops"))?;
    }
    p.n_layers = a.n_layers.unwrap_or(p.n_layers);
    p.bandwidth_gbps = a.bandwidth.unwrap_or(p.bandwidth_gbps);
    p.tflops = a.tflops.unwrap_or(p.tflops);
    p.ub = a.ub.unwrap_or(p.ub);
    p.u = a.u.unwrap_or(p.u);
    Ok(p)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
