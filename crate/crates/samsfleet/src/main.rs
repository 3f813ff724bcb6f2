use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveTime;
use clap::{Parser, Subcommand, ValueEnum};
use samsfleet::commands::{
    cmd_assign, cmd_evaluate, cmd_ingest, cmd_report, cmd_simulate, cmd_train, EvalManifest, PolicySpec, SimulateOptions, TrainOptions,
};
use samsfleet::config::{self, Extent, RegionSpec, DATA_ROOT_ENV, PRESETS, SCHEMA};
use samsfleet::ingest::IngestOptions;
use samsfleet::io::read_json;
use samsfleet::{Error, Result};
use samsfleet_core::assignment::AssignmentStrategy;
use serde::Serialize;

/// Fleet simulation and learned repositioning.
#[derive(Parser)]
#[command(name = "samsfleet", version)]
struct Cli {
    /// Directory that relative store and checkpoint paths resolve against.
    /// Defaults to $SAMSFLEET_DATA, then the current directory.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and project a trip CSV into a trip store.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        /// Region file with a geo extent.
        #[arg(long)]
        region: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Time of day at which service days start.
        #[arg(long, default_value = "00:00:00")]
        origin: NaiveTime,
        /// Abort on the first malformed row.
        #[arg(long)]
        strict: bool,
    },
    /// Run episodes with the configured policy and write traces and a report.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Also write JSON-lines event logs.
        #[arg(long)]
        events: bool,
    },
    /// Train a repositioning agent.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Save every this many updates (0: only at the end).
        #[arg(long, default_value_t = 10)]
        checkpoint_every: u64,
        #[arg(long)]
        quiet: bool,
    },
    /// Compare policies across scenarios on held-out seeds.
    Evaluate {
        /// Manifest written by an earlier evaluate run.
        #[arg(long, conflicts_with_all = ["scenario", "policy"])]
        manifest: Option<PathBuf>,
        /// Preset name or config file; repeatable.
        #[arg(long)]
        scenario: Vec<String>,
        /// `label=none` or `label=path/to/agent.ckpt`; repeatable, the first is the reference.
        #[arg(long)]
        policy: Vec<String>,
        /// Override applied to every scenario.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics, CSV/JSON reports and the zone heatmap from traces.
    Report {
        #[arg(long, required = true)]
        trace: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "trace")]
        scenario: String,
        #[arg(long, default_value = "unknown")]
        policy: String,
    },
    /// Solve one assignment instance from a JSON file.
    Assign {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::S2)]
        strategy: Strategy,
    },
    /// Print the JSON schema of scenario configs.
    Schema,
    /// List presets, or print one as a config document.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Preset name or config file.
    #[arg(long)]
    config: String,
    /// `dotted.key=value` override; the value is JSON or a bare string.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    /// First come first served.
    S1,
    /// Optimal matching.
    S2,
}

fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn region_spec(path: &Path) -> Result<RegionSpec> {
    read_json(path).map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let root = data_root(cli.data_root);
    match cli.command {
        Command::Ingest { input, region, out, origin, strict } => {
            let Extent::Geo(frame) = region_spec(&region)?.extent else {
                return Err(Error::Config(format!("{}: ingest needs a geo extent", region.display())));
            };
            let report = cmd_ingest(&input, IngestOptions { frame, origin, strict }, &out)?;
            print_json(&report)
        }
        Command::Simulate { cfg, out, episodes, events } => {
            let c = config::load(&cfg.config, &cfg.overrides)?;
            let report = cmd_simulate(&c, &root, &out, SimulateOptions { episodes, events })?;
            print_json(&report.summary)
        }
        Command::Train { cfg, out, resume, checkpoint_every, quiet } => {
            let c = config::load(&cfg.config, &cfg.overrides)?;
            let agent = cmd_train(&c, &root, &out, TrainOptions { resume, checkpoint_every }, |_, p| {
                if !quiet {
                    let eval = p.eval_mean_wait.map(|w| format!(" eval_wait {w:.1}")).unwrap_or_default();
                    eprintln!("episode {} mean_reward {:.4}{eval}", p.episode, p.mean_reward);
                }
            })?;
            eprintln!("trained {} episodes into {}", agent.episode, out.display());
            Ok(())
        }
        Command::Evaluate { manifest, scenario, policy, overrides, out } => {
            let m = match manifest {
                Some(p) => EvalManifest::read(&p)?,
                None => EvalManifest {
                    scenarios: scenario.iter().map(|s| config::load(s, &overrides)).collect::<Result<_>>()?,
                    policies: policy.iter().map(|p| PolicySpec::parse(p)).collect::<Result<_>>()?,
                },
            };
            let cmp = cmd_evaluate(&m, &root, &out)?;
            print_json(&cmp.rows)
        }
        Command::Report { trace, out, scenario, policy } => {
            let report = cmd_report(&trace, &scenario, &policy, &out)?;
            print_json(&report.summary)
        }
        Command::Assign { instance, strategy } => {
            let s = match strategy {
                Strategy::S1 => AssignmentStrategy::Fcfs,
                Strategy::S2 => AssignmentStrategy::Optimal,
            };
            print_json(&cmd_assign(&instance, s)?)
        }
        Command::Schema => {
            print!("{SCHEMA}");
            Ok(())
        }
        Command::Presets { show: None } => {
            PRESETS.iter().for_each(|p| println!("{p}"));
            Ok(())
        }
        Command::Presets { show: Some(name) } => {
            let c = config::preset(&name).ok_or_else(|| Error::Config(format!("no preset named {name}")))?;
            print_json(&c)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("samsfleet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
