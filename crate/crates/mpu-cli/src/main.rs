//! Operator-facing frontend: synthesize traces, track them into sketch
//! ensembles, query estimates, run the accuracy harness, and compute
//! exact oracle answers.
//!
//! Exit codes: 0 ok, 1 harness bound failure, 2 input/format error,
//! 3 internal/target error. Every run prints its seed so results can be
//! reproduced exactly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpu::adapters::{tuple_key, virtual_key_for, GroupMap};
use mpu::estimator::{plan_with_cap, MpuEnsemble, PlanInput};
use mpu::hashing::{digest_key, HashSeed};
use mpu::ingest::{
    self, EventSink, SlotConfig, TraceParser, TraceRecord, DEFAULT_MAX_ERROR_RATE,
};
use mpu::oracle::ExactTracker;
use mpu::sketch::EstimateBreakdown;
use mpu::{bench, Error, DEFAULT_MEMORY_CAP};

#[derive(Parser)]
#[command(name = "mpu", version, about = "Streaming pairwise flow-correlation sketches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic trace with planted correlations.
    Synth(SynthArgs),
    /// Plan an ensemble from accuracy targets and stream a trace into it.
    Track(TrackArgs),
    /// Query pairwise estimates from a stored ensemble.
    Query(QueryArgs),
    /// Run the Monte-Carlo accuracy harness against the analytic bounds.
    Bench(BenchArgs),
    /// Compute exact correlations with the brute-force oracle.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of flows (named f0..f{n-1}).
    #[arg(long)]
    flows: u64,
    /// Epoch length |T| in slots.
    #[arg(long)]
    epoch: u64,
    /// Background activity probability per (flow, slot).
    #[arg(long, default_value_t = 0.0)]
    q: f64,
    /// Planted pair as i:j:shared (repeatable).
    #[arg(long = "pair")]
    pairs: Vec<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Trace output path.
    #[arg(long)]
    out: PathBuf,
    /// Truth table output path (default: <out>.truth.tsv).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct TraceIo {
    /// Input trace path.
    #[arg(long)]
    trace: PathBuf,
    /// Epoch length |T| in slots.
    #[arg(long)]
    epoch: u64,
    /// Duration units per slot (ts-mode traces).
    #[arg(long, default_value_t = 1)]
    slot_width: u64,
    /// Timestamp origin (ts-mode traces).
    #[arg(long, default_value_t = 0)]
    epoch_start: u64,
    /// Tolerated malformed-line fraction before aborting.
    #[arg(long, default_value_t = DEFAULT_MAX_ERROR_RATE)]
    max_error_rate: f64,
}

#[derive(Args)]
struct AdapterFlags {
    /// Flow-to-group NDJSON map ({"flow":...,"group":...} per line).
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Treat flows missing from the group map as errors.
    #[arg(long, requires = "groups")]
    strict_groups: bool,
    /// Shadow a flow with a lagged virtual key, as flow:tau (repeatable).
    #[arg(long = "lag")]
    lags: Vec<String>,
    /// Related-service mode: item type is the (src_key, slot) tuple.
    #[arg(long)]
    related: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    io: TraceIo,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Rows per sketch block.
    #[arg(long, default_value_t = 2)]
    p: u64,
    /// Flow-count |F| for planning (default: first-pass distinct count).
    #[arg(long)]
    flows: Option<u64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ensemble output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    adapters: AdapterFlags,
    /// Print the ingest report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct QueryArgs {
    /// Stored ensemble path.
    #[arg(long)]
    ensemble: PathBuf,
    /// Query pair as i,j (repeatable).
    #[arg(long = "pair")]
    pairs: Vec<String>,
    /// Lag bound: query flow j's tau-lagged virtual key.
    #[arg(long, conflicts_with = "related")]
    tau: Option<u64>,
    /// Pairs name groups rather than flows (keys are digested the same).
    #[arg(long)]
    groups: bool,
    /// Pairs name services tracked in related mode.
    #[arg(long)]
    related: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Trials per cell (minimum 30).
    #[arg(long, default_value_t = 300)]
    trials: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Which cell to run.
    #[arg(long, default_value = "all")]
    cell: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    io: TraceIo,
    /// Query pair as i,j (repeatable).
    #[arg(long = "pair")]
    pairs: Vec<String>,
    /// Lagged correlation bound tau.
    #[arg(long)]
    tau: Option<u64>,
    /// Group query as a+b,c+d: union-activity correlation (repeatable).
    #[arg(long = "group-pair")]
    group_pairs: Vec<String>,
    #[command(flatten)]
    adapters: AdapterFlags,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Track(args) => cmd_track(args),
        Command::Query(args) => cmd_query(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::At { source, .. } => exit_code_for(source),
        Error::Parse(_)
        | Error::Format(_)
        | Error::InfeasibleSpec(_)
        | Error::InvalidParams(_)
        | Error::MemoryCap { .. }
        | Error::UnmappedFlow(_)
        | Error::Io(_) => 2,
        _ => 3,
    }
}

fn parse_planted_pair(raw: &str) -> mpu::Result<ingest::PlantedPair> {
    let parts: Vec<&str> = raw.split(':').collect();
    let [i, j, shared] = parts[..] else {
        return Err(Error::Parse(format!("--pair wants i:j:shared, got {raw:?}")));
    };
    let num = |v: &str| {
        v.parse::<u64>()
            .map_err(|_| Error::Parse(format!("bad number {v:?} in --pair {raw:?}")))
    };
    Ok(ingest::PlantedPair {
        i: num(i)?,
        j: num(j)?,
        shared: num(shared)?,
    })
}

fn parse_name_pair(raw: &str) -> mpu::Result<(String, String)> {
    match raw.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(Error::Parse(format!("--pair wants i,j, got {raw:?}"))),
    }
}

fn parse_lag(raw: &str) -> mpu::Result<(String, u64)> {
    match raw.rsplit_once(':') {
        Some((flow, tau)) if !flow.is_empty() => Ok((
            flow.to_string(),
            tau.parse()
                .map_err(|_| Error::Parse(format!("bad tau in --lag {raw:?}")))?,
        )),
        _ => Err(Error::Parse(format!("--lag wants flow:tau, got {raw:?}"))),
    }
}

fn cmd_synth(args: SynthArgs) -> mpu::Result<ExitCode> {
    let spec = ingest::SynthSpec {
        flow_count: args.flows,
        epoch_len: args.epoch,
        q: args.q,
        pairs: args
            .pairs
            .iter()
            .map(|p| parse_planted_pair(p))
            .collect::<mpu::Result<_>>()?,
        seed: args.seed,
    };
    let (trace, truth) = ingest::generate(&spec)?;
    let truth_path = args
        .truth
        .unwrap_or_else(|| args.out.with_extension("truth.tsv"));
    std::fs::write(&args.out, trace)?;
    std::fs::write(&truth_path, truth)?;
    eprintln!(
        "# seed: {} trace: {} truth: {}",
        args.seed,
        args.out.display(),
        truth_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Resolved adapter configuration shared by track and oracle.
struct Adapters {
    groups: Option<GroupMap>,
    lags: Vec<(String, u64)>,
    related: bool,
}

impl Adapters {
    fn load(flags: &AdapterFlags) -> mpu::Result<Self> {
        let groups = match &flags.groups {
            Some(path) => Some(GroupMap::from_ndjson(
                BufReader::new(File::open(path)?),
                flags.strict_groups,
            )?),
            None => None,
        };
        Ok(Self {
            groups,
            lags: flags
                .lags
                .iter()
                .map(|l| parse_lag(l))
                .collect::<mpu::Result<_>>()?,
            related: flags.related,
        })
    }
}

/// Anything the adapter pipeline can feed: plain keyed slots or typed
/// items.
trait KeyedTarget {
    fn hit(&mut self, key: u64, slot: u64) -> mpu::Result<()>;
    fn hit_typed(&mut self, key: u64, type_key: u64) -> mpu::Result<()>;
}

impl KeyedTarget for MpuEnsemble {
    fn hit(&mut self, key: u64, slot: u64) -> mpu::Result<()> {
        self.update(key, slot)
    }
    fn hit_typed(&mut self, key: u64, type_key: u64) -> mpu::Result<()> {
        self.update_typed(key, type_key);
        Ok(())
    }
}

impl KeyedTarget for ExactTracker {
    fn hit(&mut self, key: u64, slot: u64) -> mpu::Result<()> {
        self.record(key, slot)
    }
    fn hit_typed(&mut self, key: u64, type_key: u64) -> mpu::Result<()> {
        self.record(key, type_key)
    }
}

/// Applies group resolution, related-mode tuple typing, and lag
/// shadowing on the way into a target.
struct Pipeline<'a, T> {
    target: &'a mut T,
    adapters: &'a Adapters,
}

impl<T: KeyedTarget> EventSink for Pipeline<'_, T> {
    fn consume(&mut self, rec: &TraceRecord) -> mpu::Result<()> {
        let name: &str = match (&rec.group, &self.adapters.groups) {
            (Some(g), _) => g,
            (None, Some(map)) => map.resolve(&rec.flow)?,
            (None, None) => &rec.flow,
        };
        let key = digest_key(name.as_bytes());
        if self.adapters.related {
            let src = rec.src.as_deref().ok_or_else(|| {
                Error::Parse("related mode needs the src_key column".to_string())
            })?;
            self.target
                .hit_typed(key, tuple_key(digest_key(src.as_bytes()), rec.slot))?;
        } else {
            self.target.hit(key, rec.slot)?;
        }
        for (flow, tau) in &self.adapters.lags {
            if flow == &rec.flow {
                let vk = virtual_key_for(digest_key(rec.flow.as_bytes()), *tau);
                for omega in 0..=*tau {
                    match rec.slot.checked_sub(omega) {
                        Some(t) => self.target.hit(vk, t)?,
                        None => break,
                    }
                }
            }
        }
        Ok(())
    }
}

fn open_trace(io: &TraceIo) -> mpu::Result<TraceParser<BufReader<File>>> {
    let cfg = SlotConfig::new(io.slot_width, io.epoch_start, io.epoch)?;
    TraceParser::new(
        BufReader::new(File::open(&io.trace)?),
        cfg,
        io.max_error_rate,
    )
}

fn cmd_track(args: TrackArgs) -> mpu::Result<ExitCode> {
    let adapters = Adapters::load(&args.adapters)?;

    let flow_count = match args.flows {
        Some(n) => n,
        None => {
            // First pass: count distinct resolved keys for the planner.
            let mut keys = HashSet::new();
            let mut parser = open_trace(&args.io)?;
            while let Some(rec) = parser.next() {
                let rec = rec?;
                let name = match (&rec.group, &adapters.groups) {
                    (Some(g), _) => g.clone(),
                    (None, Some(map)) => map.resolve(&rec.flow)?.to_string(),
                    (None, None) => rec.flow,
                };
                keys.insert(name);
            }
            keys.len().max(1) as u64
        }
    };

    let plan = plan_with_cap(
        PlanInput {
            epsilon: args.epsilon,
            delta: args.delta,
            epoch_len: args.io.epoch,
            flow_count,
            p: args.p,
        },
        DEFAULT_MEMORY_CAP,
    )?;
    let mut ens = MpuEnsemble::new(plan, HashSeed(args.seed))?;
    eprintln!(
        "# seed: {} flows: {flow_count} plan: p={} m={} s={} w={} copies={} memory={} bytes",
        args.seed,
        plan.p,
        plan.m,
        plan.s,
        plan.w,
        plan.copies,
        ens.memory_bytes()
    );

    let mut parser = open_trace(&args.io)?;
    let mut pipeline = Pipeline {
        target: &mut ens,
        adapters: &adapters,
    };
    let report = ingest::stream_into(&mut parser, &mut pipeline)?;

    let mut out = BufWriter::new(File::create(&args.out)?);
    ens.save(&mut out)?;
    out.flush()?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report is plain data"));
    } else {
        println!(
            "tracked {} events ({} skipped, {} malformed) in {:.1} ms -> {}",
            report.events,
            report.skipped,
            report.errors,
            report.wall_ms,
            args.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_ensemble(path: &Path) -> mpu::Result<MpuEnsemble> {
    let mut reader = BufReader::new(File::open(path)?);
    let ens = MpuEnsemble::load(&mut reader)?;
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after ensemble".to_string()));
    }
    Ok(ens)
}

struct QueryRow {
    name_i: String,
    name_j: String,
    median: EstimateBreakdown,
    copies: Vec<EstimateBreakdown>,
}

fn cmd_query(args: QueryArgs) -> mpu::Result<ExitCode> {
    if args.pairs.is_empty() {
        return Err(Error::InvalidParams("no --pair given".to_string()));
    }
    let ens = load_ensemble(&args.ensemble)?;
    let mut rows = Vec::new();
    for raw in &args.pairs {
        let (name_i, name_j) = parse_name_pair(raw)?;
        let key_i = digest_key(name_i.as_bytes());
        let key_j = match args.tau {
            Some(tau) => virtual_key_for(digest_key(name_j.as_bytes()), tau),
            None => digest_key(name_j.as_bytes()),
        };
        let mut copies = ens.estimates(key_i, key_j);
        copies.sort_by(|x, y| x.cmp_value(y));
        rows.push(QueryRow {
            name_i,
            name_j,
            median: ens.estimate_median(key_i, key_j),
            copies,
        });
    }

    if args.json {
        let json: Vec<serde_json::Value> = rows
            .iter()
            .map(|r| {
                let (num, den) = r.median.fraction();
                serde_json::json!({
                    "pair": [r.name_i, r.name_j],
                    "estimate": r.median.value(),
                    "fraction": { "num": num.to_string(), "den": den.to_string() },
                    "breakdown": r.median,
                    "copies": r.copies.iter().map(|c| c.value()).collect::<Vec<f64>>(),
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&json).expect("plain data"));
    } else {
        println!("#flow_i\tflow_j\tnum\tden\testimate\tcopy_min\tcopy_median\tcopy_max\ta\tb\tc");
        for r in &rows {
            let (num, den) = r.median.fraction();
            let spread = (
                r.copies.first().map_or(0.0, |c| c.value()),
                r.copies[r.copies.len() / 2].value(),
                r.copies.last().map_or(0.0, |c| c.value()),
            );
            println!(
                "{}\t{}\t{num}\t{den}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
                r.name_i,
                r.name_j,
                r.median.value(),
                spread.0,
                spread.1,
                spread.2,
                r.median.a,
                r.median.b,
                r.median.c
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> mpu::Result<ExitCode> {
    eprintln!("# seed: {} trials: {} cell: {}", args.seed, args.trials, args.cell);
    let root = HashSeed(args.seed);
    let report = match args.cell.as_str() {
        "all" => bench::run_full(args.seed, args.trials)?,
        "deviation" | "variance" | "collision" | "discretization" => {
            // Single-cell runs reuse the full-report shape with the other
            // cells at the minimum trial count so verdicts stay cheap.
            let mut report = bench::run_full(args.seed, bench::MIN_TRIALS)?;
            match args.cell.as_str() {
                "deviation" => {
                    report.deviation = bench::theorem_cells(root.derive(0), args.trials)?
                }
                "variance" => {
                    report.bias_variance = bench::variance_cell(root.derive(1), args.trials)?
                }
                "collision" => {
                    report.collision = bench::collision_cells(root.derive(2), args.trials)?;
                    report.collision_decreasing =
                        bench::collision_sweep_decreasing(&report.collision);
                }
                _ => {
                    report.discretization =
                        bench::discretization_cells(root.derive(3), args.trials)?
                }
            }
            report.pass = report.deviation.iter().all(|r| r.deviation_pass)
                && report.bias_variance.bias_pass
                && report.bias_variance.variance_pass
                && report.collision.iter().all(|r| r.pass)
                && report.collision_decreasing
                && report.discretization.iter().all(|r| r.pass);
            report
        }
        other => {
            return Err(Error::InvalidParams(format!(
                "unknown cell {other:?} (all|deviation|variance|collision|discretization)"
            )))
        }
    };

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("plain data"));
    } else {
        println!("#cell\tdetail\tmeasured\tbound_or_target\tverdict");
        for r in &report.deviation {
            println!(
                "deviation\tcor={}\tfail_rate={:.4}\tdelta={}\t{}",
                r.cor_target,
                r.failure_rate,
                r.delta,
                verdict(r.deviation_pass)
            );
        }
        let bv = &report.bias_variance;
        println!(
            "bias\tcor={}\tbias={:.3}\tzero\t{}",
            bv.cor_target,
            bv.bias,
            verdict(bv.bias_pass)
        );
        println!(
            "variance\tcor={}\tvar={:.1}\tbound={:.1}\t{}",
            bv.cor_target,
            bv.sample_var,
            bv.var_bound,
            verdict(bv.variance_pass)
        );
        for r in &report.collision {
            println!(
                "collision\tm={}\trate={:.4}\tbound={:.4}\t{}",
                r.m,
                r.collision_rate,
                r.bound,
                verdict(r.pass)
            );
        }
        println!(
            "collision\tsweep\tdecreasing\t-\t{}",
            verdict(report.collision_decreasing)
        );
        for r in &report.discretization {
            println!(
                "discretization\tw={}\tgated_rate={:.4}\tbound={:.4}\t{}",
                r.w,
                r.gated_exceed_rate,
                r.bound,
                verdict(r.pass)
            );
        }
        println!("overall\t-\t-\t-\t{}", verdict(report.pass));
    }
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_oracle(args: OracleArgs) -> mpu::Result<ExitCode> {
    let adapters = Adapters::load(&args.adapters)?;
    let mut tracker = if adapters.related {
        // Tuple types live outside the slot domain.
        ExactTracker::unbounded()
    } else {
        ExactTracker::new(args.io.epoch)
    };
    let mut parser = open_trace(&args.io)?;
    let mut pipeline = Pipeline {
        target: &mut tracker,
        adapters: &adapters,
    };
    ingest::stream_into(&mut parser, &mut pipeline)?;

    let mut rows: Vec<(String, String, u64)> = Vec::new();
    for raw in &args.pairs {
        let (name_i, name_j) = parse_name_pair(raw)?;
        let key_i = digest_key(name_i.as_bytes());
        let key_j = digest_key(name_j.as_bytes());
        let value = match args.tau {
            Some(tau) => tracker.cor_tau(key_i, key_j, tau),
            None => tracker.cor(key_i, key_j),
        };
        rows.push((name_i, name_j, value));
    }
    for raw in &args.group_pairs {
        let (side_a, side_b) = parse_name_pair(raw)?;
        let digests = |side: &str| -> Vec<u64> {
            side.split('+').map(|n| digest_key(n.as_bytes())).collect()
        };
        let value = tracker.gcor_any(&digests(&side_a), &digests(&side_b));
        rows.push((side_a, side_b, value));
    }

    if args.json {
        let json: Vec<serde_json::Value> = rows
            .iter()
            .map(|(i, j, v)| serde_json::json!({ "pair": [i, j], "cor": v }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&json).expect("plain data"));
    } else {
        println!("#key_i\tkey_j\tcor");
        for (i, j, v) in &rows {
            println!("{i}\t{j}\t{v}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
