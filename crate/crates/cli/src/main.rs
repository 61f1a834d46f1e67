use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unrec::synth::SynthConfig;
use unrec::{Error, Mode, Result};
use unrec_cli::commands;
use unrec_cli::config::{ExperimentConfig, ViewChoice};

#[derive(Parser)]
#[command(name = "unrec", version, about = "Train, unlearn, and evaluate multi-modal graph recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value experiment configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical reruns
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one configuration key, e.g. --set alpha=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Mmrecun,
    Amun,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    User,
    Item,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster dataset
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        modalities: usize,
        #[arg(long, default_value_t = 0.05)]
        density: f64,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all training edges
    Train(Common),
    /// Retrain from scratch on the retain edges
    Gold(Common),
    /// Unlearn the forget edges from a trained checkpoint
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Comma-separated alphas; one run per value under alpha_<a>/
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Write metric reports for a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        view: Option<ViewArg>,
        /// Gold checkpoint; also writes property gaps
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Consolidate run directories into report.csv and timing.csv
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn configure(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for pair in &common.overrides {
        c.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(t) = common.threads {
        c.threads = t;
    }
    if let Some(o) = &common.out {
        c.out = Some(o.clone());
    }
    set_threads(c.threads)?;
    Ok(c)
}

fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth { users, items, modalities, density, groups, feature_dim, noise, seed, threads, out } => {
            set_threads(threads.unwrap_or(0))?;
            let d = SynthConfig::default();
            let config = SynthConfig {
                users,
                items,
                modalities,
                density,
                groups: groups.unwrap_or(d.groups),
                feature_dim: feature_dim.unwrap_or(d.feature_dim),
                noise: noise.unwrap_or(d.noise),
            };
            commands::cmd_synth(&config, seed, &out)
        }
        Command::Train(common) => commands::cmd_train(&configure(&common)?),
        Command::Gold(common) => commands::cmd_gold(&configure(&common)?),
        Command::Unlearn { common, method, alphas } => {
            let c = configure(&common)?;
            let method = match method {
                Some(Method::Mmrecun) => Mode::MmRecUn,
                Some(Method::Amun) => Mode::AmUn,
                None => c.method.ok_or_else(|| Error::Config("pass --method or set `method`".into()))?,
            };
            commands::cmd_unlearn(&c, method, &alphas)
        }
        Command::Evaluate { common, view, gold } => {
            let mut c = configure(&common)?;
            if let Some(v) = view {
                c.view = match v {
                    ViewArg::User => ViewChoice::User,
                    ViewArg::Item => ViewChoice::Item,
                    ViewArg::Both => ViewChoice::Both,
                };
            }
            if gold.is_some() {
                c.gold = gold;
            }
            commands::cmd_evaluate(&c)
        }
        Command::Report { runs, out } => commands::cmd_report(&runs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(unrec_cli::exit_code(&e))
        }
    }
}
