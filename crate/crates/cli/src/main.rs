mod config;
mod error;
mod manifest;
mod steps;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clonematch::design::{BinMethod, TrimRule};
use clonematch::matching::{Caliper, Direction, Method};
use clonematch::simulate::DgpConfig;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Run;
use crate::steps::Ctx;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage or configuration error
  3  missing prerequisite step (the error record names it)
  4  provenance failure: an input or artifact digest does not match the manifest
  5  escrow violation: outcomes requested without a frozen design
  6  design not ready (unbalanced without override) or already frozen
  7  data error: schema, validation, binning, support, singular fit
  8  i/o or file format error

Errors are written to stderr as one JSON record; results go to stdout as JSON.";

#[derive(Parser)]
#[command(name = "clonematch", version, about = "Propensity-score stratification and clone matching", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Analysis directory holding manifest.json and one subdirectory per step.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// TOML configuration. Defaults to the configuration of the last recorded step.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(clap::Args, Default)]
struct Overrides {
    /// Number of propensity bins.
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// quantile | fixed-width
    #[arg(long, global = true)]
    bin_method: Option<BinMethod>,
    /// Balance threshold on within-bin |standardized difference|.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// overlap, or an lp window LO:HI
    #[arg(long, global = true, value_parser = parse_trim, allow_hyphen_values = true)]
    trim: Option<TrimRule>,
    /// Freeze even when the balance check fails.
    #[arg(long, global = true)]
    override_balance: bool,
    /// Clones per focal unit.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// none, X (multiple of the pooled sd of lp), Xsd, or abs:X
    #[arg(long, global = true, value_parser = parse_caliper)]
    caliper: Option<Caliper>,
    /// greedy | optimal
    #[arg(long, global = true)]
    method: Option<Method>,
    /// treated-focal | control-focal | both
    #[arg(long, global = true)]
    direction: Option<Direction>,
    /// Allow a control to serve as a clone more than once.
    #[arg(long, global = true)]
    replacement: bool,
    /// Only match within propensity bins.
    #[arg(long, global = true)]
    within_bins: bool,
    /// Ridge penalty of the propensity fit.
    #[arg(long, global = true)]
    ridge: Option<f64>,
    /// Pre-period outcome column for before-after realized values.
    #[arg(long, global = true)]
    baseline: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Read and validate the data file; outcomes are sealed.
    Load {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the propensity model.
    Fit,
    /// Stratify units on the linear propensity score.
    Bin,
    /// Within-bin covariate balance diagnostics.
    Balance,
    /// Trim units outside common support.
    Trim,
    /// Freeze the design; only then can outcomes be released.
    Freeze,
    /// Clone matching under the frozen design.
    Match,
    /// Release outcomes and compute unit-level effects.
    Effects,
    /// Decile targeting list from estimated effects.
    Rank,
    /// Compare the causal list with an outcome-predictive list.
    Compare {
        /// Simulation truth file supplying realized effects.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Generate a synthetic population with known effects.
    Simulate {
        /// doctors | ferrari | misspecified
        #[arg(long, default_value = "doctors", conflicts_with = "dgp")]
        preset: String,
        /// Generator configuration in TOML.
        #[arg(long)]
        dgp: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimated effects against a truth file.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
    },
}

fn parse_trim(s: &str) -> Result<TrimRule, String> {
    if s == "overlap" {
        return Ok(TrimRule::ArmOverlap);
    }
    let (lo, hi) = s.split_once(':').ok_or("expected overlap or LO:HI")?;
    let lo: f64 = lo.parse().map_err(|_| format!("bad lower bound {lo:?}"))?;
    let hi: f64 = hi.parse().map_err(|_| format!("bad upper bound {hi:?}"))?;
    Ok(TrimRule::LpWindow { lo, hi })
}

fn parse_caliper(s: &str) -> Result<Caliper, String> {
    let num = |t: &str| t.parse::<f64>().map_err(|_| format!("bad caliper {s:?}"));
    if s == "none" {
        Ok(Caliper::None)
    } else if let Some(v) = s.strip_prefix("abs:") {
        Ok(Caliper::Absolute(num(v)?))
    } else {
        Ok(Caliper::SdMultiple(num(s.strip_suffix("sd").unwrap_or(s))?))
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.design;
        if let Some(v) = self.bins {
            d.bins = v;
        }
        if let Some(v) = self.bin_method {
            d.bin_method = v;
        }
        if let Some(v) = self.threshold {
            d.threshold = v;
        }
        if let Some(v) = self.trim {
            d.trim = v;
        }
        d.override_balance |= self.override_balance;
        let m = &mut cfg.matching;
        if let Some(v) = self.k {
            m.k = v;
        }
        if let Some(v) = self.caliper {
            m.caliper = v;
        }
        if let Some(v) = self.method {
            m.method = v;
        }
        if let Some(v) = self.direction {
            m.direction = v;
        }
        m.replacement |= self.replacement;
        m.within_bins |= self.within_bins;
        if let Some(v) = self.ridge {
            cfg.fit.ridge_lambda = v;
        }
        if let Some(v) = &self.baseline {
            cfg.compare.baseline_column = Some(v.clone());
        }
    }
}

fn resolve_config(cli: &Cli, run: &Run) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => match run.manifest.latest_config() {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| CliError::Usage(format!("manifest holds an unreadable configuration: {e}")))?,
            None => RunConfig::default(),
        },
    };
    cli.overrides.apply(&mut cfg);
    cfg.matching.validate()?;
    if cfg.design.bins == 0 {
        return Err(CliError::Usage("bins must be at least 1".into()));
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<serde_json::Value, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    }
    if let Command::Simulate { preset, dgp, seed, n, out } = &cli.command {
        let mut cfg = match dgp {
            Some(path) => DgpConfig::from_toml(&std::fs::read_to_string(path)?)?,
            None => DgpConfig::preset(preset)?,
        };
        if let Some(s) = seed {
            cfg = cfg.with_seed(*s);
        }
        if let Some(n) = n {
            cfg = cfg.with_n(*n);
        }
        return steps::simulate(cfg, out);
    }

    std::fs::create_dir_all(&cli.run_dir)?;
    let mut run = Run::open(&cli.run_dir)?;
    let cfg = resolve_config(cli, &run)?;
    let mut ctx = Ctx { run: &mut run, cfg: &cfg };
    match &cli.command {
        Command::Load { data } => steps::load(&mut ctx, data),
        Command::Fit => steps::fit(&mut ctx),
        Command::Bin => steps::bin(&mut ctx),
        Command::Balance => steps::balance(&mut ctx),
        Command::Trim => steps::trim(&mut ctx),
        Command::Freeze => steps::freeze(&mut ctx),
        Command::Match => steps::matching(&mut ctx),
        Command::Effects => steps::effects(&mut ctx),
        Command::Rank => steps::rank(&mut ctx),
        Command::Compare { truth } => steps::compare(&mut ctx, truth.as_deref()),
        Command::Evaluate { truth } => steps::evaluate(&mut ctx, truth),
        Command::Simulate { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            // a closed pipe downstream is not a failure of the step
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
