//! Batch front-end for the serving simulator: configuration ingestion,
//! simulation execution, report rendering, and expert-placement analysis.
//!
//! Exit codes: 0 success, 2 invalid configuration or missing inputs,
//! 3 simulation deadlock.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use podsim_core::config::{DeploymentMode, RunConfig};
use podsim_core::eplb::{analyze_layer, collect_load, LoadTable, RoutingEvent};
use podsim_core::pipeline::{
    dispatch_samples_with_jitter, expected_tokens_per_step, ma_pipeline, pd_workflow,
    tpot_ms, KernelStats, MaLatencies, PdConfig, RequestState,
};
use podsim_core::reliability::{
    heartbeat_monitor, parse_fault_schedule, recover, ClusterState, FaultKind, HeartbeatConfig,
    MonitoredActor, RecoveryPolicy, RecoveryStage,
};
use podsim_core::xccl_collectives::CollectiveCostModel;
use podsim_core::NS_PER_MS;

const EXIT_CONFIG: i32 = 2;
const EXIT_DEADLOCK: i32 = 3;

#[derive(Parser)]
#[command(name = "podsim", about = "Discrete-event simulator for disaggregated MoE serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation from a TOML config.
    Run(RunArgs),
    /// Render the report for a finished run.
    Report(ReportArgs),
    /// Expert-placement analysis tools.
    Eplb {
        #[command(subcommand)]
        command: EplbCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Fault schedule (JSON list), overriding the config's `faults` path.
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Run N independent seeds (seed, seed+1, ...) concurrently.
    #[arg(long)]
    parallel: Option<u32>,
}

#[derive(Args)]
struct ReportArgs {
    result_dir: PathBuf,
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Subcommand)]
enum EplbCommand {
    /// Analyze a routing trace and emit the selection/placement report.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 32)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        slots_per_node: usize,
    },
}

fn log_enabled() -> bool {
    matches!(
        std::env::var("SIM_LOG").as_deref(),
        Ok("info") | Ok("debug") | Ok("1")
    )
}

macro_rules! sim_log {
    ($($arg:tt)*) => {
        if log_enabled() {
            eprintln!($($arg)*);
        }
    };
}

/// The machine-readable result bundle. All request-derived metrics are null
/// when the workload is empty.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Results {
    seed: u64,
    mode: String,
    requests: usize,
    failed_requests: usize,
    tpot_ms: Option<f64>,
    ttft_ms: Option<f64>,
    tokens_per_step: Option<f64>,
    tokens_per_s_per_chip: Option<f64>,
    global_tokens_per_s: Option<f64>,
    global_batch: Option<u64>,
    breakdown: Vec<KernelStats>,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Eplb { command } => match command {
            EplbCommand::Analyze {
                trace,
                budget,
                nodes,
                slots_per_node,
            } => cmd_eplb_analyze(&trace, budget, nodes, slots_per_node),
        },
    };
    std::process::exit(code);
}

fn cmd_run(args: &RunArgs) -> i32 {
    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return EXIT_CONFIG;
        }
    };
    let mut cfg = match RunConfig::from_toml(&text) {
        Ok(c) => c,
        Err(e) => {
            // TOML parse errors carry line/column context
            eprintln!("error: invalid config {}: {e}", args.config.display());
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let faults_path = args
        .faults
        .clone()
        .or_else(|| cfg.faults.clone().map(PathBuf::from));
    let fault_schedule = match faults_path {
        Some(p) => match fs::read_to_string(&p).map_err(|e| e.to_string()).and_then(|t| {
            parse_fault_schedule(&t).map_err(|e| e.to_string())
        }) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: invalid fault schedule: {e}");
                return EXIT_CONFIG;
            }
        },
        None => Vec::new(),
    };

    let parallel = args.parallel.unwrap_or(1).max(1);
    if parallel == 1 {
        return run_one(&cfg, &fault_schedule, &args.out);
    }
    let mut handles = Vec::new();
    for i in 0..parallel {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        let faults = fault_schedule.clone();
        let out = args.out.join(format!("seed-{}", c.seed));
        handles.push(std::thread::spawn(move || run_one(&c, &faults, &out)));
    }
    let mut worst = 0;
    for h in handles {
        let code = h.join().unwrap_or(1);
        worst = worst.max(code);
    }
    worst
}

fn run_one(cfg: &RunConfig, faults: &[podsim_core::reliability::FaultEvent], out: &Path) -> i32 {
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return EXIT_CONFIG;
    }
    sim_log!("run: seed={} mode={:?} out={}", cfg.seed, cfg.deployment.mode, out.display());

    let n_requests = cfg.workload.requests.len();
    let mut ttft_ms_val = None;
    let mut failed = 0usize;

    // Workload execution: the prefill-decode workflow produces TTFT and the
    // request ledger; MoE-attention runs are steady-state decode only.
    if n_requests > 0 && cfg.deployment.mode != DeploymentMode::DisaggMa {
        let pd = PdConfig {
            prefill_tes: cfg.deployment.prefill_tes.unwrap_or(1),
            decode_tes: cfg.deployment.decode_tes.unwrap_or(1),
            kv_blocks_per_decode_te: cfg.scheduler.kv_blocks_per_group,
            block_size_tokens: cfg.scheduler.block_size_tokens,
            ..PdConfig::default()
        };
        let reqs: Vec<(u64, u64, u64)> = cfg
            .workload
            .requests
            .iter()
            .enumerate()
            .map(|(i, r)| (i as u64, r.prompt_len, r.max_output))
            .collect();
        let arrivals = build_arrivals(cfg, reqs.len());
        match pd_workflow(&reqs, &arrivals, &pd) {
            Ok(outcome) => {
                let stuck: Vec<_> = outcome
                    .requests
                    .iter()
                    .filter(|r| {
                        !matches!(r.state, RequestState::Done | RequestState::Failed)
                    })
                    .collect();
                if !stuck.is_empty() {
                    eprintln!("error: simulation deadlock; stuck requests:");
                    for r in stuck {
                        eprintln!("  request {} in state {:?}", r.id, r.state);
                    }
                    return EXIT_DEADLOCK;
                }
                failed = outcome.failed.len();
                let ttfts: Vec<f64> = outcome
                    .ttft_ns
                    .iter()
                    .flatten()
                    .map(|&t| t as f64 / NS_PER_MS as f64)
                    .collect();
                if !ttfts.is_empty() {
                    ttft_ms_val = Some(ttfts.iter().sum::<f64>() / ttfts.len() as f64);
                }
                let lines: Vec<String> = outcome
                    .steps
                    .iter()
                    .map(|s| serde_json::to_string(s).unwrap())
                    .collect();
                let _ = fs::write(out.join("workflow.jsonl"), lines.join("\n") + "\n");
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    }

    // Steady-state decode metrics from the configured operating point.
    let results = if n_requests == 0 {
        Results {
            seed: cfg.seed,
            mode: mode_name(cfg.deployment.mode),
            requests: 0,
            failed_requests: 0,
            tpot_ms: None,
            ttft_ms: None,
            tokens_per_step: None,
            tokens_per_s_per_chip: None,
            global_tokens_per_s: None,
            global_batch: None,
            breakdown: vec![],
        }
    } else {
        let mtp = cfg.mtp.build(cfg.seed).expect("validated");
        let tps = expected_tokens_per_step(&mtp);
        let (forward_ms, gap_ms, dies_per_chip, total_chips, batch) = match cfg.deployment.mode {
            DeploymentMode::DisaggMa => {
                let domains = cfg.deployment.domains.unwrap();
                let attention = cfg.deployment.attention_nodes.unwrap();
                let tl = ma_pipeline(
                    domains,
                    cfg.deployment.microbatches.unwrap_or(2),
                    cfg.deployment.layers.unwrap_or(61),
                    &MaLatencies::default(),
                )
                .expect("validated");
                // the timeline already contains the scheduler gap
                (
                    tl.total_ms(),
                    0.0,
                    domains as u64,
                    (attention / domains) as u64,
                    cfg.deployment.batch_per_die,
                )
            }
            _ => (
                cfg.deployment.forward_ms,
                cfg.deployment.gap_ms,
                cfg.topology.dies_per_chip as u64,
                cfg.topology.chips as u64,
                cfg.deployment.batch_per_die,
            ),
        };
        let tpot = tpot_ms(forward_ms, gap_ms, tps);
        let per_chip = dies_per_chip as f64 * batch as f64 * 1_000.0 / tpot;
        Results {
            seed: cfg.seed,
            mode: mode_name(cfg.deployment.mode),
            requests: n_requests,
            failed_requests: failed,
            tpot_ms: Some(tpot),
            ttft_ms: ttft_ms_val,
            tokens_per_step: Some(tps),
            tokens_per_s_per_chip: Some(per_chip),
            global_tokens_per_s: Some(per_chip * total_chips as f64),
            global_batch: Some(batch * dies_per_chip * total_chips),
            breakdown: kernel_breakdown(cfg, batch),
        }
    };

    if !faults.is_empty() {
        if let Err(e) = run_faults(cfg, faults, out) {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }

    let json = serde_json::to_string_pretty(&results).unwrap();
    if let Err(e) = fs::write(out.join("results.json"), json + "\n") {
        eprintln!("error: cannot write results: {e}");
        return EXIT_CONFIG;
    }
    sim_log!("run complete: {} requests, {} failed", results.requests, results.failed_requests);
    0
}

fn mode_name(mode: DeploymentMode) -> String {
    match mode {
        DeploymentMode::ColocatedPd => "colocated_pd",
        DeploymentMode::DisaggPd => "disagg_pd",
        DeploymentMode::DisaggMa => "disagg_ma",
    }
    .to_string()
}

fn build_arrivals(cfg: &RunConfig, n: usize) -> Vec<u64> {
    use rand::{Rng, SeedableRng};
    let gap_ns = (1e9 / cfg.workload.rate) as u64;
    match cfg.workload.arrival.as_str() {
        "poisson" => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut t = 0u64;
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen::<f64>().max(1e-12);
                    t += (-u.ln() * gap_ns as f64) as u64;
                    t
                })
                .collect()
        }
        _ => (0..n as u64).map(|i| i * gap_ns).collect(),
    }
}

/// Dispatch/combine kernel statistics at the configured batch, with seeded
/// per-die MLA jitter spreading the dispatch samples.
fn kernel_breakdown(cfg: &RunConfig, batch: u64) -> Vec<KernelStats> {
    use rand::{Rng, SeedableRng};
    let cost = CollectiveCostModel::default();
    let dies = (cfg.topology.chips * cfg.topology.dies_per_chip).min(64) as usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD15);
    let jitter: Vec<f64> = (0..dies).map(|_| rng.gen::<f64>() * 40.0).collect();
    let dispatch = dispatch_samples_with_jitter(cost.dispatch_latency_us(batch), &jitter);
    let combine = dispatch_samples_with_jitter(cost.combine_latency_us(batch), &jitter);
    vec![
        KernelStats::from_samples("dispatch", &dispatch),
        KernelStats::from_samples("combine", &combine),
    ]
}

fn run_faults(
    cfg: &RunConfig,
    faults: &[podsim_core::reliability::FaultEvent],
    out: &Path,
) -> anyhow::Result<()> {
    let hb = HeartbeatConfig::default();
    let experts = 288usize;
    let nodes = cfg.deployment.expert_nodes.unwrap_or(32);
    let mut hosts = vec![Vec::new(); nodes];
    for e in 0..experts {
        hosts[e % nodes].push(e);
    }
    let mut cluster = ClusterState {
        prefill_tes: cfg.deployment.prefill_tes.unwrap_or(4),
        decode_tes: cfg.deployment.decode_tes.unwrap_or(1),
        dp_groups: 16,
        ep_ranks: nodes,
        expert_replicas: vec![1; experts],
        node_hosts: hosts,
        slots_per_node: cfg.eplb.slots_per_node.max(10),
        active_requests: (0..cfg.workload.requests.len() as u64).collect(),
    };
    let mut lines = Vec::new();
    for f in faults {
        let policy = RecoveryPolicy {
            stage: match f.kind {
                FaultKind::NetTransient | FaultKind::MemFault => RecoveryStage::FineGrained,
                _ => RecoveryStage::PdFailover,
            },
            ..RecoveryPolicy::default()
        };
        // detection first for loop-stopping faults
        if matches!(f.kind, FaultKind::Crash | FaultKind::StuckLoop) {
            let det = heartbeat_monitor(
                &hb,
                &[MonitoredActor {
                    id: f.location.clone(),
                    fault: Some((f.kind, f.inject_time_ns)),
                }],
                f.inject_time_ns + 10 * hb.te_to_dp_interval_ns * hb.miss_threshold as u64,
            )?;
            for d in det {
                lines.push(serde_json::to_string(&d)?);
            }
        }
        let actions = recover(f, &policy, &mut cluster, f.inject_time_ns)?;
        for a in actions {
            lines.push(serde_json::to_string(&a)?);
        }
    }
    fs::write(out.join("recovery.jsonl"), lines.join("\n") + "\n")?;
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> i32 {
    let path = args.result_dir.join("results.json");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: missing result bundle {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let results: Results = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: corrupt results.json: {e}");
            return EXIT_CONFIG;
        }
    };
    match args.format.as_str() {
        "json" => {
            println!("{}", serde_json::to_string_pretty(&results).unwrap());
        }
        "csv" => {
            println!("metric,value");
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            println!("tpot_ms,{}", fmt_opt(results.tpot_ms));
            println!("ttft_ms,{}", fmt_opt(results.ttft_ms));
            println!("tokens_per_step,{}", fmt_opt(results.tokens_per_step));
            println!("tokens_per_s_per_chip,{}", fmt_opt(results.tokens_per_s_per_chip));
            println!("global_tokens_per_s,{}", fmt_opt(results.global_tokens_per_s));
            println!(
                "global_batch,{}",
                results.global_batch.map(|b| b.to_string()).unwrap_or_default()
            );
            println!("kernel,avg_us,min_us,max_us");
            for k in &results.breakdown {
                println!("{},{:.3},{:.3},{:.3}", k.name, k.avg_us, k.min_us, k.max_us);
            }
        }
        "table" => {
            println!("run summary (seed {}, mode {})", results.seed, results.mode);
            println!("  requests          {}", results.requests);
            let show = |name: &str, v: Option<f64>, unit: &str| match v {
                Some(x) => println!("  {name:<18}{x:.2} {unit}"),
                None => println!("  {name:<18}-"),
            };
            show("tpot", results.tpot_ms, "ms");
            show("ttft", results.ttft_ms, "ms");
            show("tokens/step", results.tokens_per_step, "");
            show("tokens/s/chip", results.tokens_per_s_per_chip, "");
            show("global tokens/s", results.global_tokens_per_s, "");
            if let Some(b) = results.global_batch {
                println!("  {:<18}{b}", "global batch");
            }
            if !results.breakdown.is_empty() {
                println!("kernel latency breakdown (us)");
                println!("  {:<10}{:>10}{:>10}{:>10}", "op", "avg", "min", "max");
                for k in &results.breakdown {
                    println!(
                        "  {:<10}{:>10.1}{:>10.1}{:>10.1}",
                        k.name, k.avg_us, k.min_us, k.max_us
                    );
                }
            }
        }
        other => {
            eprintln!("error: unknown format {other:?} (expected table|json|csv)");
            return EXIT_CONFIG;
        }
    }
    0
}

fn cmd_eplb_analyze(trace: &Path, budget: usize, nodes: usize, slots_per_node: usize) -> i32 {
    let text = match fs::read_to_string(trace) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", trace.display());
            return EXIT_CONFIG;
        }
    };
    // accept either a load table or a raw routing-event list
    let table = match LoadTable::from_json(&text) {
        Ok(t) => t,
        Err(_) => match serde_json::from_str::<Vec<RoutingEvent>>(&text) {
            Ok(events) => {
                let layers = events.iter().map(|e| e.layer + 1).max().unwrap_or(1);
                let experts = events.iter().map(|e| e.expert + 1).max().unwrap_or(1);
                match collect_load(&events, 60_000 * NS_PER_MS, layers, experts) {
                    Ok(t) => t,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return EXIT_CONFIG;
                    }
                }
            }
            Err(e) => {
                eprintln!("error: trace is neither a load table nor a routing-event list: {e}");
                return EXIT_CONFIG;
            }
        },
    };
    let mut plans = Vec::new();
    for layer in 0..table.num_layers {
        match analyze_layer(&table, layer, budget, nodes, slots_per_node) {
            Ok(p) => plans.push(p),
            Err(e) => {
                eprintln!("error: layer {layer}: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&plans).unwrap());
    0
}
