use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};

use porch::consensus::{NodeId, TiePool};
use porch::dataset::{BusDataset, Partition};
use porch::harness::Latency;
use porch::ledger::HashMode;
use porch::metrics::{read_csv, summarize, write_csv};
use porch::nodes::{Behavior, ShareRoute};
use porch::runner::{run, RunConfig, RunReport, Transport};

const SEED_ENV: &str = "PORCH_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "porch",
    version,
    about = "Run blockchain-backed SCADA measurement cycles over simulated or TCP links",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute acquisition cycles (the default when no subcommand is given).
    Run(Box<RunArgs>),
    /// Summarize a metrics CSV written by a previous run.
    Report { metrics: PathBuf },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long, default_value_t = 4)]
    relays: usize,
    #[arg(long, default_value_t = 10)]
    cycles: u64,
    #[arg(long, default_value_t = 15_000)]
    period_ms: u64,
    /// Overridden by PORCH_SEED when that is set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    challenge_lo: u64,
    #[arg(long, default_value_t = 9)]
    challenge_hi: u64,
    /// Draw the challenge recipients from this many relays per cycle.
    #[arg(long)]
    k_eligible: Option<usize>,
    #[arg(long, value_enum, default_value_t = HashArg::Single)]
    hash_mode: HashArg,
    #[arg(long, value_enum, default_value_t = TransportArg::Sim)]
    transport: TransportArg,
    /// Per-link latency: `N` or an inclusive range `LO-HI`.
    #[arg(long, default_value = "1", value_parser = parse_latency)]
    latency_ms: Latency,
    /// Drop messages to and from a node with probability P. Repeatable.
    #[arg(long, num_args = 2, value_names = ["NODE", "P"], action = clap::ArgAction::Append)]
    drop: Vec<String>,
    /// Make a relay misbehave. Repeatable.
    #[arg(long, num_args = 2, value_names = ["RELAY", "KIND"], action = clap::ArgAction::Append)]
    behavior: Vec<String>,
    /// Bus-to-relay assignment, e.g. `1,2;3,4;5,6;7,8,9`.
    #[arg(long)]
    partition: Option<String>,
    #[arg(long, value_enum, default_value_t = TieArg::Tied)]
    tie_pool: TieArg,
    #[arg(long, value_enum, default_value_t = RouteArg::Direct)]
    share_route: RouteArg,
    #[arg(long, default_value_t = 2000)]
    phase_timeout_ms: u64,
    /// Dataset CSV (`bus,quantity,index,base,jitter`); the built-in 9-bus table otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    chain_out: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Honor wall-clock periods instead of virtual time.
    #[arg(long)]
    realtime: bool,
    /// First TCP port; 0 picks free ports.
    #[arg(long, default_value_t = 20_000)]
    base_port: u16,
    #[arg(long)]
    quiet: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HashArg {
    Single,
    Double,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TransportArg {
    Sim,
    Tcp,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TieArg {
    Tied,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RouteArg {
    Direct,
    ViaAggregator,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BehaviorArg {
    Honest,
    InflateCount,
    ForeignDigest,
    VoteForSelf,
    TamperBlock,
    ForgeBlock,
}

impl From<BehaviorArg> for Behavior {
    fn from(b: BehaviorArg) -> Self {
        match b {
            BehaviorArg::Honest => Behavior::Honest,
            BehaviorArg::InflateCount => Behavior::InflateCount,
            BehaviorArg::ForeignDigest => Behavior::ForeignDigest,
            BehaviorArg::VoteForSelf => Behavior::VoteForSelf,
            BehaviorArg::TamperBlock => Behavior::TamperBlock,
            BehaviorArg::ForgeBlock => Behavior::ForgeBlock,
        }
    }
}

fn parse_latency(s: &str) -> Result<Latency, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<u64>()
            .map_err(|e| format!("bad latency `{t}`: {e}"))
    };
    match s.split_once('-') {
        Some((lo, hi)) => Ok(Latency::Uniform {
            lo: num(lo)?,
            hi: num(hi)?,
        }),
        None => Ok(Latency::Fixed(num(s)?)),
    }
}

fn node(s: &str) -> anyhow::Result<NodeId> {
    NodeId::new(s).map_err(|e| anyhow!("bad node id `{s}`: {e}"))
}

fn build_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?,
        _ => args.seed,
    };
    let mut drops = BTreeMap::new();
    for pair in args.drop.chunks(2) {
        let p: f64 = pair[1]
            .parse()
            .with_context(|| format!("bad drop probability `{}`", pair[1]))?;
        drops.insert(node(&pair[0])?, p);
    }
    let mut behaviors = BTreeMap::new();
    for pair in args.behavior.chunks(2) {
        let kind = BehaviorArg::from_str(&pair[1], true).map_err(|e| anyhow!(e))?;
        behaviors.insert(node(&pair[0])?, kind.into());
    }
    let partition = args
        .partition
        .as_deref()
        .map(Partition::parse)
        .transpose()
        .context("bad partition")?;
    let cfg = RunConfig {
        relays: args.relays,
        cycles: args.cycles,
        period_ms: args.period_ms,
        seed,
        challenge_lo: args.challenge_lo,
        challenge_hi: args.challenge_hi,
        k_eligible: args.k_eligible,
        hash_mode: match args.hash_mode {
            HashArg::Single => HashMode::Single,
            HashArg::Double => HashMode::Double,
        },
        tie_pool: match args.tie_pool {
            TieArg::Tied => TiePool::Tied,
            TieArg::All => TiePool::AllEligible,
        },
        share_route: match args.share_route {
            RouteArg::Direct => ShareRoute::Direct,
            RouteArg::ViaAggregator => ShareRoute::ViaAggregator,
        },
        transport: match args.transport {
            TransportArg::Sim => Transport::Sim,
            TransportArg::Tcp => Transport::Tcp,
        },
        latency: args.latency_ms,
        drops,
        phase_timeout_ms: args.phase_timeout_ms,
        partition,
        behaviors,
        realtime: args.realtime,
        base_port: args.base_port,
        record_trace: args.trace_out.is_some(),
        ..RunConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: Option<&Path>) -> anyhow::Result<BusDataset> {
    match path {
        Some(p) => BusDataset::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(BusDataset::builtin()),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_outputs(args: &RunArgs, report: &RunReport) -> anyhow::Result<()> {
    if let Some(p) = &args.chain_out {
        std::fs::write(p, report.chain.to_json())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.metrics_out {
        write_csv(&report.metrics, create(p)?)?;
    }
    if let Some(p) = &args.trace_out {
        std::fs::write(p, report.trace.to_jsonl())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Problems that make the run a failure, empty when it succeeded.
fn violations(cfg: &RunConfig, report: &RunReport) -> Vec<String> {
    let mut out = Vec::new();
    if let Err((node, v)) = report.validate() {
        out.push(format!("{node} holds an invalid chain: {v:?}"));
    }
    if cfg.is_fault_injected() {
        if !report.replicas_consistent() {
            out.push("replicas diverged".into());
        }
    } else {
        if !report.replicas_identical() {
            out.push("replicas differ".into());
        }
        for m in report.metrics.iter().filter(|m| !m.committed()) {
            out.push(format!("cycle {} {}", m.cycle, m.outcome));
        }
        if report.outcomes.len() as u64 != cfg.cycles {
            out.push(format!(
                "{} of {} cycles finished",
                report.outcomes.len(),
                cfg.cycles
            ));
        }
    }
    out
}

fn run_command(args: &RunArgs) -> ExitCode {
    let (cfg, dataset) = match build_config(args)
        .and_then(|cfg| Ok((cfg, load_dataset(args.dataset.as_deref())?)))
    {
        Ok(v) => v,
        Err(e) => {
            eprintln!("porch: config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let report = match run(&cfg, Arc::new(dataset)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("porch: run failed: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = write_outputs(args, &report) {
        eprintln!("porch: {e:#}");
        return ExitCode::from(1);
    }
    if !args.quiet {
        match summarize(&report.metrics) {
            Ok(s) => print!("{s}"),
            Err(e) => eprintln!("porch: {e}"),
        }
        println!("chain length:           {}", report.chain.len());
    }
    let problems = violations(&cfg, &report);
    if problems.is_empty() {
        return ExitCode::SUCCESS;
    }
    for p in &problems {
        eprintln!("porch: {p}");
    }
    ExitCode::from(1)
}

fn report_command(path: &Path) -> anyhow::Result<()> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_csv(file)?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    print!("{}", summarize(&rows)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Some(Command::Report { metrics }) => match report_command(&metrics) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("porch: {e:#}");
                ExitCode::from(1)
            }
        },
        Some(Command::Run(args)) => run_command(&args),
        None => run_command(&cli.run),
    }
}
