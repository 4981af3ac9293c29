//! Thin CLI over the experiment harness: each subcommand fills an
//! ExperimentConfig (file first, flags second) and hands it to
//! harness::run. Exit codes: 0 ok, 1 runtime failure, 2 invalid
//! input/config, 3 failed --check gate.

use clap::{Args, Parser, Subcommand};
use hawkes_npole::harness::{self, ExperimentConfig, Kind, ModelSource};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hawkes-npole",
    version,
    about = "Online nonparametric estimation of multivariate Hawkes processes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; trial t uses seed + t
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Horizon of simulated streams
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Worker thread cap (0 = library default); HAWKES_NPOLE_THREADS
    /// overrides
    #[arg(long)]
    threads: Option<usize>,
    /// Desk-scale preset: t-end 1e4, 10 trials
    #[arg(long, conflicts_with = "paper")]
    desk: bool,
    /// Full-scale preset: t-end 1e5, 100 trials
    #[arg(long)]
    paper: bool,
    /// Enforce this kind's pass/fail gates; failures exit 3
    #[arg(long)]
    check: bool,
    /// Events CSV input instead of simulating from the model section
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sort out-of-order input rows instead of rejecting them
    #[arg(long)]
    sort: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate an event stream from the configured model
    Simulate(Common),
    /// Fit one stream and export the estimated functions
    Fit {
        #[command(flatten)]
        common: Common,
        /// Estimator: npole (nonparametric) or exp (parametric baseline)
        #[arg(long, value_name = "ESTIMATOR")]
        model: Option<String>,
        /// Attach the comparator regret trace to the summary
        #[arg(long)]
        with_regret: bool,
    },
    /// Multi-trial estimation metrics against the generating model
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Estimator: npole or exp
        #[arg(long, value_name = "ESTIMATOR")]
        model: Option<String>,
    },
    /// Accuracy table over discretization steps and shrinkage levels
    Table1(Common),
    /// Discretization error bound check on random exponential models
    Prop1Check(Common),
    /// Comparator regret traces over several seeds
    Regret(Common),
    /// Nonparametric vs parametric-baseline error on a misspecified pair
    Mismatch(Common),
    /// Marked-process fit demo
    Marked(Common),
    /// Spatial-process fit demo
    Spatial(Common),
    /// One-event perturbation probe
    Stability(Common),
    /// Parse an events CSV and print summary stats
    Ingest {
        path: PathBuf,
        /// Sort out-of-order rows instead of rejecting them
        #[arg(long)]
        sort: bool,
        /// Observation horizon (defaults to the last event time)
        #[arg(long)]
        horizon: Option<f64>,
        /// Write the normalized stream to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print or validate experiment configs
    Config {
        /// Print the default config as TOML
        #[arg(long)]
        defaults: bool,
        /// Validate a config file and exit
        #[arg(long, value_name = "PATH")]
        validate: Option<PathBuf>,
    },
}

fn run_kind(kind: Kind, common: Common, estimator: Option<String>, with_regret: bool) -> i32 {
    let mut config = match &common.config {
        Some(path) => match harness::load_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return harness::exit_code(&e);
            }
        },
        None => ExperimentConfig::default(),
    };
    config.kind = kind;
    if common.desk {
        config.t_end = 1e4;
        config.trials = 10;
    }
    if common.paper {
        config.t_end = 1e5;
        config.trials = 100;
    }
    if let Some(v) = common.seed {
        config.seed = v;
    }
    if let Some(v) = common.trials {
        config.trials = v;
    }
    if let Some(v) = common.t_end {
        config.t_end = v;
    }
    if let Some(v) = common.threads {
        config.threads = v;
    }
    if let Some(p) = common.out {
        config.out_dir = p;
    }
    if let Some(p) = common.input {
        config.model.source = ModelSource::EventsFile;
        config.model.path = Some(p);
    }
    if common.sort {
        config.model.sort = true;
    }
    if let Some(m) = estimator {
        config.fit.estimator = m;
    }
    if with_regret {
        config.fit.with_regret = true;
    }
    if common.check {
        config.check = true;
    }
    harness::run(&config)
}

fn run_config(defaults: bool, validate: Option<PathBuf>) -> i32 {
    if defaults {
        print!("{}", harness::default_config_toml());
        return 0;
    }
    match validate {
        Some(path) => match harness::load_config(&path) {
            Ok(_) => {
                println!("ok");
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                harness::exit_code(&e)
            }
        },
        None => {
            eprintln!("error: pass --defaults or --validate <path>");
            2
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Simulate(c) => run_kind(Kind::Simulate, c, None, false),
        Cmd::Fit { common, model, with_regret } => run_kind(Kind::Fit, common, model, with_regret),
        Cmd::Evaluate { common, model } => run_kind(Kind::Evaluate, common, model, false),
        Cmd::Table1(c) => run_kind(Kind::Table1, c, None, false),
        Cmd::Prop1Check(c) => run_kind(Kind::Prop1Check, c, None, false),
        Cmd::Regret(c) => run_kind(Kind::Regret, c, None, false),
        Cmd::Mismatch(c) => run_kind(Kind::Mismatch, c, None, false),
        Cmd::Marked(c) => run_kind(Kind::Marked, c, None, false),
        Cmd::Spatial(c) => run_kind(Kind::Spatial, c, None, false),
        Cmd::Stability(c) => run_kind(Kind::Stability, c, None, false),
        Cmd::Ingest { path, sort, horizon, out } => {
            match harness::run_ingest(&path, sort, horizon, out.as_deref()) {
                Ok(_) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    harness::exit_code(&e)
                }
            }
        }
        Cmd::Config { defaults, validate } => run_config(defaults, validate),
    };
    ExitCode::from(code as u8)
}
