//! `intentps`: benchmark runs, scenario replay and multi-process nodes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use intentps_bench::live::{conservation_errors, node_metrics, plan_worker};
use intentps_bench::report::{rate_csv, trace_csv};
use intentps_bench::run::expected_values;
use intentps_bench::workload::generate;
use intentps_bench::{metrics_csv, metrics_json, run, sweep_signal_offset, BenchConfig, MetricsReport};
use intentps_bench::{WorkloadKind, WorkloadSpec};
use intentps_core::node::Node;
use intentps_core::realtime::{run_node, RealtimeOptions};
use intentps_core::scenario::{run_scenario, timeline_csv, IntentScript};
use intentps_core::transport::socket::{parse_manifest, RetryPolicy, SocketTransport};
use intentps_core::{Error, Key, NodeId, PolicyMode, TimingConfig};

#[derive(Parser)]
#[command(name = "intentps", version, about = "Intent-driven parameter management")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload on the deterministic simulated cluster.
    Bench(BenchArgs),
    /// Replay an intent script and print its decision timeline.
    Replay(ReplayArgs),
    /// Run one node of a multi-process cluster over TCP.
    Node(NodeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    Loopback,
    Socket,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 4)]
    workers: u16,
    #[arg(long, default_value_t = 100_000)]
    keys: u64,
    #[arg(long, default_value_t = 8)]
    value_len: usize,
    #[arg(long, default_value = "zipf", value_parser = parse_from_str::<WorkloadKind>)]
    workload: WorkloadKind,
    #[arg(long, default_value = "adapm", value_parser = parse_from_str::<PolicyMode>)]
    mode: PolicyMode,
    /// Batches between signaling an intent and using it.
    #[arg(long, default_value_t = 16)]
    signal_offset: u64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    initial_rate: Option<f64>,
    #[arg(long)]
    rounds_per_sec: Option<f64>,
    #[arg(long, default_value_t = 4)]
    channels: u32,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Batches per worker and epoch.
    #[arg(long, default_value_t = 200)]
    batches: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.1)]
    zipf: f64,
    /// Per-node parameter memory, in bytes or with a K, M or G suffix.
    #[arg(long, value_parser = parse_bytes)]
    memory_budget: Option<u64>,
    /// Metrics CSV path; a `.json` twin is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    nodes: u32,
    #[command(flatten)]
    run: RunArgs,
    /// Keys whose holders are traced every round.
    #[arg(long, value_delimiter = ',')]
    trace_keys: Vec<u64>,
    /// Run AdaPM and immediate action at each of these offsets.
    #[arg(long, value_delimiter = ',', conflicts_with = "signal_offset")]
    sweep_offset: Vec<u64>,
    #[arg(long, value_enum, default_value = "loopback")]
    transport: TransportKind,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    script: PathBuf,
    #[arg(long, default_value = "adapm", value_parser = parse_from_str::<PolicyMode>)]
    mode: PolicyMode,
    /// Timeline CSV path; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NodeArgs {
    /// File of `node_id host:port` lines.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    node_id: u32,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value = "socket")]
    transport: TransportKind,
    #[arg(long, default_value_t = 60)]
    connect_attempts: u32,
    /// How long to wait for a peer within one round.
    #[arg(long, default_value_t = 30_000)]
    phase_timeout_ms: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    /// Classifies an error raised while checking the configuration.
    fn invalid(e: Error) -> Self {
        match e {
            Error::OutOfMemory { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, scale) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let scale = match c.to_ascii_uppercase() {
                'K' => 1u64 << 10,
                'M' => 1 << 20,
                'G' => 1 << 30,
                _ => return Err(format!("unknown size suffix `{c}`")),
            };
            (&s[..i], scale)
        }
        _ => (s, 1),
    };
    let n: u64 = digits.parse().map_err(|_| format!("`{s}` is not a byte count"))?;
    n.checked_mul(scale).ok_or_else(|| format!("`{s}` is too large"))
}

impl RunArgs {
    fn config(&self, nodes: u32) -> BenchConfig {
        let mut timing = TimingConfig::default();
        timing.alpha = self.alpha.unwrap_or(timing.alpha);
        timing.quantile = self.quantile.unwrap_or(timing.quantile);
        timing.initial_rate = self.initial_rate.unwrap_or(timing.initial_rate);
        let mut cfg = BenchConfig {
            spec: WorkloadSpec {
                kind: self.workload,
                num_keys: self.keys,
                value_len: self.value_len,
                batches_per_epoch: self.batches,
                batch_size: self.batch_size,
                zipf_exponent: self.zipf,
                signal_offset_batches: self.signal_offset,
                seed: self.seed,
            },
            mode: self.mode,
            nodes,
            workers_per_node: self.workers,
            epochs: self.epochs,
            timing,
            memory_budget: self.memory_budget,
            channels: self.channels,
            ..BenchConfig::default()
        };
        if let Some(rps) = self.rounds_per_sec {
            cfg.sim.min_round_us = 1e6 / rps;
        }
        cfg
    }

    fn validate(&self, cfg: &BenchConfig) -> Result<(), Failure> {
        if cfg.epochs == 0 {
            return Err(Failure::Usage("--epochs must be at least 1".into()));
        }
        if self.rounds_per_sec.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Failure::Usage("--rounds-per-sec must be positive".into()));
        }
        if cfg.channels == 0 {
            return Err(Failure::Usage("--channels must be at least 1".into()));
        }
        cfg.spec.validate().map_err(Failure::invalid)?;
        cfg.cluster_config().validate().map_err(Failure::invalid)
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_metrics(out: Option<&Path>, reports: &[MetricsReport]) -> Result<(), Failure> {
    let csv = metrics_csv(reports).map_err(Failure::runtime)?;
    match out {
        Some(path) => {
            write(path, &csv)?;
            write(
                &with_suffix(path, ".json"),
                &metrics_json(reports).map_err(Failure::runtime)?,
            )
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    if args.transport == TransportKind::Socket || args.manifest.is_some() {
        return Err(Failure::Usage(
            "bench runs on the in-process simulator; start one `intentps node` per manifest entry for socket runs"
                .into(),
        ));
    }
    let mut cfg = args.run.config(args.nodes);
    cfg.trace_keys = args.trace_keys.iter().map(|&k| Key(k)).collect();
    cfg.record_rates = !cfg.trace_keys.is_empty();
    args.run.validate(&cfg)?;
    if let Some(k) = args.trace_keys.iter().find(|&&k| k >= cfg.spec.num_keys) {
        return Err(Failure::Usage(format!("trace key {k} is outside the key space")));
    }
    let out = args.run.out.as_deref();

    if !args.sweep_offset.is_empty() {
        let points = sweep_signal_offset(&cfg, &args.sweep_offset).map_err(Failure::runtime)?;
        let reports: Vec<MetricsReport> = points.into_iter().flat_map(|p| [p.adapm, p.immediate]).collect();
        return write_metrics(out, &reports);
    }

    let report = run(&cfg).map_err(Failure::runtime)?;
    if let (Some(path), false) = (out, cfg.trace_keys.is_empty()) {
        write(&with_suffix(path, ".trace.csv"), &trace_csv(&report.trace))?;
        write(&with_suffix(path, ".rates.csv"), &rate_csv(&report.rate_trace))?;
    }
    write_metrics(out, std::slice::from_ref(&report))
}

fn cmd_replay(args: ReplayArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.script)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.script.display())))?;
    let script = IntentScript::parse(&text).map_err(Failure::invalid)?;
    let events = run_scenario(&script, args.mode).map_err(|e| match e {
        Error::Script { .. } => Failure::Usage(e.to_string()),
        e => Failure::runtime(e),
    })?;
    let csv = timeline_csv(&events);
    match &args.out {
        Some(path) => write(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_node(args: NodeArgs) -> Result<(), Failure> {
    if args.transport != TransportKind::Socket {
        return Err(Failure::Usage(
            "node processes talk over sockets; use `bench` for loopback runs".into(),
        ));
    }
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.manifest.display())))?;
    let manifest = parse_manifest(&text).map_err(Failure::invalid)?;
    let cfg = args.run.config(manifest.num_nodes());
    args.run.validate(&cfg)?;
    if args.node_id >= manifest.num_nodes() {
        return Err(Failure::Usage(format!(
            "--node-id {} is not in a manifest of {} nodes",
            args.node_id,
            manifest.num_nodes()
        )));
    }

    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone()).map_err(Failure::runtime)?;
    }

    let total_workers = manifest.num_nodes() as usize * cfg.workers_per_node as usize;
    let plans = generate(&cfg.spec, total_workers, cfg.epochs).map_err(Failure::runtime)?;
    let expected = expected_values(&cfg.spec, &plans);

    let id = NodeId(args.node_id);
    let retry = RetryPolicy {
        attempts: args.connect_attempts,
        ..RetryPolicy::default()
    };
    let transport = SocketTransport::start(id, &manifest, &retry).map_err(Failure::runtime)?;
    eprintln!("node {id}: connected to {} peers", manifest.num_nodes() - 1);
    let opts = RealtimeOptions {
        rounds_per_sec: args.run.rounds_per_sec,
        phase_timeout: Duration::from_millis(args.phase_timeout_ms),
        ..RealtimeOptions::default()
    };
    let node = Node::new(id, Arc::new(cfg.cluster_config()));
    let report = run_node(
        &node,
        &transport,
        &opts,
        plan_worker(&plans, &cfg.spec, cfg.workers_per_node, &stop),
    )
    .map_err(Failure::runtime)?;

    write_metrics(args.run.out.as_deref(), &[node_metrics(&cfg, &report, &expected)])?;
    if stop.load(Ordering::Relaxed) {
        eprintln!(
            "node {id}: drained after a stop signal; {} owned keys flushed, conservation not checked",
            report.owned.len()
        );
        return Ok(());
    }
    let bad = conservation_errors(&report, &expected);
    if bad.is_empty() {
        eprintln!("node {id}: conservation ok over {} owned keys", report.owned.len());
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "node {id}: {} of {} owned keys differ from the expected sums, first {}",
            bad.len(),
            report.owned.len(),
            bad[0]
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(a) => cmd_bench(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Node(a) => cmd_node(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
