use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfcal::hyperopt::Criterion;
use rfcal_cli::compare::compare;
use rfcal_cli::output::ReadTable;
use rfcal_cli::theory::all_ok;
use rfcal_cli::{gamp_run, load_spec, mc, theory, CliError, Format, Overrides, SweepSpec, Table};

#[derive(Parser)]
#[command(name = "rfcal", version, about = "Uncertainty asymptotics of classifiers on random features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// fig1, fig2, appE1, appE2 or fig1-points.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fixed points and metrics along the sweep axis.
    TheorySweep,
    /// Finite-size trials aggregated per grid point.
    McSweep,
    /// Optimal lambda at each p/n.
    Hyperopt {
        /// error, loss or evidence; overrides the config.
        #[arg(long)]
        criterion: Option<String>,
    },
    /// One GAMP run with its iteration trace.
    GampRun,
    /// Deviation of an MC table from a theory table in standard errors.
    Compare {
        #[arg(long)]
        theory: PathBuf,
        #[arg(long)]
        mc: PathBuf,
        /// Exit with 1 when some |z| exceeds this.
        #[arg(long, default_value_t = 3.0)]
        max_z: f64,
    },
}

fn emit(t: &Table, c: &Common) -> Result<(), CliError> {
    let fmt = match c.format {
        OutFormat::Csv => Format::Csv,
        OutFormat::Json => Format::Json,
    };
    match &c.out {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            t.write(fmt, &mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            t.write(fmt, &mut lock)?;
        }
    }
    Ok(())
}

fn spec(c: &Common) -> Result<SweepSpec, CliError> {
    load_spec(c.preset.as_deref(), c.config.as_deref(), &Overrides { seed: c.seed, trials: c.trials })
}

/// Ok(true) when every point succeeded.
fn run(cli: &Cli) -> Result<bool, CliError> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.cmd {
        Cmd::TheorySweep => {
            let t = theory::run_theory_sweep(&spec(c)?);
            emit(&t, c)?;
            Ok(all_ok(&t))
        }
        Cmd::McSweep => {
            let t = mc::run_mc_sweep(&spec(c)?)?;
            emit(&t, c)?;
            Ok(all_ok(&t))
        }
        Cmd::Hyperopt { criterion } => {
            let s = spec(c)?;
            let name = criterion.clone().unwrap_or_else(|| s.hyperopt.criterion.clone());
            let crit = Criterion::from_str(&name).map_err(|e| CliError::Usage(e.to_string()))?;
            let t = theory::run_hyperopt(&s, crit);
            emit(&t, c)?;
            Ok(all_ok(&t))
        }
        Cmd::GampRun => {
            let r = gamp_run::run(&spec(c)?)?;
            emit(&r.trace, c)?;
            let mut msg = format!("gamp: {:?} after {} iterations", r.run.status, r.run.iterations);
            if let Some(d) = r.newton_distance {
                msg.push_str(&format!(", relative distance to Newton {d:.3e}"));
            }
            eprintln!("{msg}");
            Ok(gamp_run::converged(&r))
        }
        Cmd::Compare { theory, mc, max_z } => {
            let read = |p: &PathBuf| -> Result<ReadTable, CliError> {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                ReadTable::parse(&text)
            };
            let cmp = compare(&read(theory)?, &read(mc)?)?;
            emit(&cmp.table, c)?;
            eprintln!("compare: max |z| = {:.3}, {} unmatched", cmp.max_abs_z, cmp.unmatched);
            Ok(cmp.unmatched == 0 && cmp.max_abs_z <= *max_z)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("rfcal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
