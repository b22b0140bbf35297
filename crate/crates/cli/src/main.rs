//! `collegial`: fit the NTK variance exponent, search ensemble shapes, and
//! check the ensemble-NTK dynamics claims from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use collegial::search::EfficiencyMetric;
use collegial::{DataError, DynamicsError, EntrySelector, McError, NtkError, SearchError, TopologyError};
use serde_json::json;

use config::{AlphaSpec, Objective, RunConfig, TopologySource, UsageError};

#[derive(Parser)]
#[command(
    name = "collegial",
    version,
    about = "Collegial-ensemble design from finite-width NTK statistics"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config, or an artifact written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (required here or in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Topology JSON file.
    #[arg(long, global = true)]
    topology: Option<PathBuf>,
    /// Artifact directory.
    #[arg(
        long,
        short = 'o',
        global = true,
        env = "CE_OUTPUT_DIR",
        default_value = "collegial-out"
    )]
    output_dir: PathBuf,
}

#[derive(Args, Default)]
struct McFlags {
    /// Monte Carlo trials per width.
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated widths for the fit.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<usize>>,
    /// NTK entry: `i` for a diagonal entry or `i,j`.
    #[arg(long)]
    entry: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo over a width ladder, then the log-linear fit of alpha.
    FitAlpha {
        #[command(flatten)]
        mc: McFlags,
    },
    /// Primal and dual grid search over the member width.
    Search {
        /// A positive number, or `fit` to run fit-alpha first.
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<AlphaSpec>,
        #[arg(long)]
        metric: Option<EfficiencyMetric>,
        #[arg(long, conflicts_with_all = ["dual", "both"])]
        primal: bool,
        #[arg(long, conflicts_with = "both")]
        dual: bool,
        #[arg(long)]
        both: bool,
        #[arg(long)]
        grid_min: Option<usize>,
        #[arg(long)]
        grid_max: Option<usize>,
        /// Unsearched parameters added to both sides of the network-level rho.
        #[arg(long)]
        overhead: Option<u64>,
        #[command(flatten)]
        mc: McFlags,
    },
    /// Gradient-descent drift sweep over (m, n) and the slope in m·n.
    VerifyDynamics {
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Seeds per (m, n) run.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Ensemble-NTK statistics at initialization versus m (and width).
    Nmk {
        #[arg(long, value_delimiter = ',')]
        m_values: Option<Vec<usize>>,
        #[arg(long)]
        seeds_per_point: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        entry: Option<String>,
    },
    /// Ensemble NTK matrix over the dataset as CSV.
    Export {
        #[arg(long)]
        multiplicity: Option<usize>,
    },
}

fn parse_entry(s: &str) -> Result<EntrySelector> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| config::usage(format!("bad entry {s:?}; expected `i` or `i,j`")))?;
    match parts.as_slice() {
        [i] => Ok(EntrySelector::Diagonal(*i)),
        [i, j] if i == j => Ok(EntrySelector::Diagonal(*i)),
        [i, j] => Ok(EntrySelector::OffDiagonal(*i, *j)),
        _ => Err(config::usage(format!("bad entry {s:?}; expected `i` or `i,j`"))),
    }
}

fn apply_mc(cfg: &mut RunConfig, mc: McFlags) -> Result<()> {
    if mc.trials.is_some() {
        cfg.trials = mc.trials;
    }
    if mc.ladder.is_some() {
        cfg.ladder = mc.ladder;
    }
    if let Some(e) = mc.entry {
        cfg.entry = Some(parse_entry(&e)?);
    }
    Ok(())
}

fn build_config(cli: Cli) -> Result<(RunConfig, &'static str, PathBuf)> {
    let mut cfg = match &cli.common.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if cli.common.seed.is_some() {
        cfg.seed = cli.common.seed;
    }
    if let Some(p) = cli.common.topology {
        cfg.topology = Some(TopologySource::Path(p));
    }
    let name = match cli.command {
        Command::FitAlpha { mc } => {
            apply_mc(&mut cfg, mc)?;
            "fit-alpha"
        }
        Command::Search {
            alpha,
            metric,
            primal,
            dual,
            both,
            grid_min,
            grid_max,
            overhead,
            mc,
        } => {
            apply_mc(&mut cfg, mc)?;
            if alpha.is_some() {
                cfg.alpha = alpha;
            }
            if metric.is_some() {
                cfg.metric = metric;
            }
            if primal {
                cfg.objective = Some(Objective::Primal);
            } else if dual {
                cfg.objective = Some(Objective::Dual);
            } else if both {
                cfg.objective = Some(Objective::Both);
            }
            if overhead.is_some() {
                cfg.network_overhead = overhead;
            }
            if grid_min.is_some() || grid_max.is_some() {
                let t = config::resolve_topology(cfg.topology.as_ref())?;
                let [lo, hi] = cfg.grid.unwrap_or([1, t.search_width().unwrap_or(1)]);
                cfg.grid = Some([grid_min.unwrap_or(lo), grid_max.unwrap_or(hi)]);
            }
            "search"
        }
        Command::VerifyDynamics {
            learning_rate,
            steps,
            seeds,
        } => {
            let sec = cfg.dynamics.get_or_insert_with(Default::default);
            if let Some(v) = learning_rate {
                sec.learning_rate = v;
            }
            if let Some(v) = steps {
                sec.steps = v;
            }
            if let Some(v) = seeds {
                sec.seeds = v;
            }
            "verify-dynamics"
        }
        Command::Nmk {
            m_values,
            seeds_per_point,
            widths,
            entry,
        } => {
            let sec = cfg.nmk.get_or_insert_with(Default::default);
            if let Some(v) = m_values {
                sec.m_values = v;
            }
            if let Some(v) = seeds_per_point {
                sec.seeds_per_point = v;
            }
            if let Some(v) = widths {
                sec.widths = v;
            }
            if let Some(e) = entry {
                cfg.entry = Some(parse_entry(&e)?);
            }
            "nmk"
        }
        Command::Export { multiplicity } => {
            if multiplicity.is_some() {
                cfg.multiplicity = multiplicity;
            }
            "export"
        }
    };
    Ok((cfg.resolve(name)?, name, cli.common.output_dir))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, name, out) = build_config(cli)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    log::info!("running {name} into {}", out.display());
    match name {
        "fit-alpha" => commands::fit_alpha(&cfg, &out),
        "search" => commands::search(&cfg, &out),
        "verify-dynamics" => commands::verify_dynamics(&cfg, &out),
        "nmk" => commands::nmk(&cfg, &out),
        "export" => commands::export(&cfg, &out),
        _ => unreachable!("clap restricts commands"),
    }
}

/// Machine-readable category of an error chain.
fn kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return "usage";
        }
        if cause.is::<TopologyError>() {
            return "topology";
        }
        if cause.is::<NtkError>() {
            return "ntk";
        }
        if cause.is::<McError>() {
            return "mc_variance";
        }
        if cause.is::<SearchError>() {
            return "search";
        }
        if cause.is::<DynamicsError>() {
            return "dynamics";
        }
        if cause.is::<DataError>() {
            return "dataio";
        }
    }
    "io"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = kind(&err);
            let body = json!({ "error": { "kind": kind, "message": format!("{err:#}") } });
            eprintln!("{body}");
            ExitCode::from(if kind == "usage" { 2 } else { 1 })
        }
    }
}
