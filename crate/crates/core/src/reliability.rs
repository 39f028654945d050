//! Failure detection and recovery: multi-tier heartbeats, active link
//! probing, and staged recovery (restart-the-world, prefill/decode failover
//! with vertical scaling, fine-grained rollback, memory-fault masking).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{TimeNs, NS_PER_MS};
use crate::error::{Result, SimError};

/// Heartbeat cadence per tier. The two intervals are independent so each
/// tier can be tuned to its failure domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeartbeatConfig {
    pub control_to_te_interval_ns: TimeNs,
    pub te_to_dp_interval_ns: TimeNs,
    pub miss_threshold: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            control_to_te_interval_ns: 1_000 * NS_PER_MS,
            te_to_dp_interval_ns: 200 * NS_PER_MS,
            miss_threshold: 3,
        }
    }
}

impl HeartbeatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.control_to_te_interval_ns == 0
            || self.te_to_dp_interval_ns == 0
            || self.miss_threshold == 0
        {
            return Err(SimError::Config("heartbeat intervals and threshold must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Crash,
    StuckLoop,
    KvStall,
    NetTransient,
    MemFault,
}

/// One injected fault, from the external fault-schedule file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultEvent {
    pub kind: FaultKind,
    pub location: String,
    pub inject_time_ns: TimeNs,
}

/// Parse a fault schedule: a JSON list of fault events.
pub fn parse_fault_schedule(json: &str) -> Result<Vec<FaultEvent>> {
    Ok(serde_json::from_str(json)?)
}

/// A monitored actor at the TE->DP heartbeat tier. A stalled or crashed
/// actor stops responding from its fault instant onward: the heartbeat
/// responder only runs when the event loop is live, so a stuck loop and a
/// crash look identical at this tier.
#[derive(Debug, Clone)]
pub struct MonitoredActor {
    pub id: String,
    pub fault: Option<(FaultKind, TimeNs)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Detection {
    pub time_ns: TimeNs,
    pub actor: String,
    pub missed: u32,
}

/// Drive the TE->DP heartbeat tier for `horizon_ns` and report detections:
/// `miss_threshold` consecutive missed beats flags the actor.
pub fn heartbeat_monitor(
    cfg: &HeartbeatConfig,
    actors: &[MonitoredActor],
    horizon_ns: TimeNs,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let interval = cfg.te_to_dp_interval_ns;
    let mut detections = Vec::new();
    for actor in actors {
        let Some((_, t_fault)) = actor.fault else { continue };
        let mut missed = 0u32;
        let mut tick = (t_fault / interval + 1) * interval;
        while tick <= horizon_ns {
            // responder is down from t_fault on; every later beat is missed
            missed += 1;
            if missed >= cfg.miss_threshold {
                detections.push(Detection {
                    time_ns: tick,
                    actor: actor.id.clone(),
                    missed,
                });
                break;
            }
            tick += interval;
        }
    }
    detections.sort_by(|a, b| a.time_ns.cmp(&b.time_ns).then(a.actor.cmp(&b.actor)));
    Ok(detections)
}

/// What a link probe observes after injecting a dummy payload.
#[derive(Debug, Clone, Copy)]
pub struct ProbeObservation {
    /// Real KV transfers on the channel are making progress.
    pub kv_progress: bool,
    /// Dummy delivery latency; `None` means the dummy never arrived.
    pub dummy_latency_ns: Option<TimeNs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDiagnosis {
    Healthy,
    DecodeSaturation,
    LinkFault,
}

/// Baseline dummy round-trip used to judge "delivered slowly".
pub const PROBE_BASELINE_NS: TimeNs = 50_000;

/// Classify a channel from a probe observation. A blocked dummy means the
/// link itself is down; a delayed dummy while KV transfers stall means the
/// receiver is saturated, not the link.
pub fn link_probe(obs: &ProbeObservation) -> LinkDiagnosis {
    match obs.dummy_latency_ns {
        None => LinkDiagnosis::LinkFault,
        Some(lat) => {
            if !obs.kv_progress && lat > 4 * PROBE_BASELINE_NS {
                LinkDiagnosis::DecodeSaturation
            } else {
                LinkDiagnosis::Healthy
            }
        }
    }
}

/// Ground-truth channel condition for scenario generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelCondition {
    Healthy,
    Saturated,
    Cut,
}

/// What a probe would observe under a known condition.
pub fn observe(condition: ChannelCondition, jitter: u64) -> ProbeObservation {
    match condition {
        ChannelCondition::Healthy => ProbeObservation {
            kv_progress: true,
            dummy_latency_ns: Some(PROBE_BASELINE_NS / 2 + jitter % PROBE_BASELINE_NS),
        },
        ChannelCondition::Saturated => ProbeObservation {
            kv_progress: false,
            // queued behind the saturated receiver: delivered, but slowly
            dummy_latency_ns: Some(10 * PROBE_BASELINE_NS + jitter % (50 * PROBE_BASELINE_NS)),
        },
        ChannelCondition::Cut => ProbeObservation {
            kv_progress: false,
            dummy_latency_ns: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStage {
    RestartWorld,
    PdFailover,
    FineGrained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryPolicy {
    pub stage: RecoveryStage,
    pub kill_p_to_preserve_d: bool,
    pub min_replicas_per_expert: usize,
}

impl Default for RecoveryPolicy {
    fn default() -> Self {
        Self {
            stage: RecoveryStage::FineGrained,
            kill_p_to_preserve_d: true,
            min_replicas_per_expert: 1,
        }
    }
}

/// Live deployment state mutated by recovery.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub prefill_tes: usize,
    pub decode_tes: usize,
    pub dp_groups: usize,
    pub ep_ranks: usize,
    /// Live replica count per logical expert (routed + shared).
    pub expert_replicas: Vec<usize>,
    /// Which experts each expert node hosts.
    pub node_hosts: Vec<Vec<usize>>,
    pub slots_per_node: usize,
    pub active_requests: Vec<u64>,
}

impl ClusterState {
    pub fn replica_floor_holds(&self, min: usize) -> bool {
        self.expert_replicas.iter().all(|&r| r >= min)
    }
}

/// One recovery step, exported as JSON lines.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryAction {
    pub time: TimeNs,
    pub event: String,
    pub action: String,
    pub stage: RecoveryStage,
    pub affected: Vec<String>,
}

const RESTART_DECODE_NS: TimeNs = 20_000 * NS_PER_MS;
const RESTART_PREFILL_NS: TimeNs = 30_000 * NS_PER_MS;
const ROLLBACK_BROADCAST_NS: TimeNs = 5 * NS_PER_MS;
const MASK_PAUSE_NS: TimeNs = 50 * NS_PER_MS;

fn restart_world(now: TimeNs, event: &str, out: &mut Vec<RecoveryAction>) {
    // decode restarts first so queued KV transfers have a live receiver
    out.push(RecoveryAction {
        time: now,
        event: event.to_string(),
        action: "restart decode engines".into(),
        stage: RecoveryStage::RestartWorld,
        affected: vec!["decode".into()],
    });
    out.push(RecoveryAction {
        time: now + RESTART_DECODE_NS,
        event: event.to_string(),
        action: "decode ready".into(),
        stage: RecoveryStage::RestartWorld,
        affected: vec!["decode".into()],
    });
    out.push(RecoveryAction {
        time: now + RESTART_DECODE_NS,
        event: event.to_string(),
        action: "restart prefill engines".into(),
        stage: RecoveryStage::RestartWorld,
        affected: vec!["prefill".into()],
    });
    out.push(RecoveryAction {
        time: now + RESTART_DECODE_NS + RESTART_PREFILL_NS,
        event: event.to_string(),
        action: "prefill ready".into(),
        stage: RecoveryStage::RestartWorld,
        affected: vec!["prefill".into()],
    });
}

/// Execute recovery for one detected fault. Unreachable recoveries (e.g.
/// vertical scaling that would drop an expert below the replica floor)
/// escalate to the next-coarser stage.
pub fn recover(
    event: &FaultEvent,
    policy: &RecoveryPolicy,
    cluster: &mut ClusterState,
    now: TimeNs,
) -> Result<Vec<RecoveryAction>> {
    if policy.min_replicas_per_expert < 1 {
        return Err(SimError::Config("min_replicas_per_expert must be >= 1".into()));
    }
    let mut out = Vec::new();
    let ev = format!("{:?}@{}", event.kind, event.location);
    match policy.stage {
        RecoveryStage::RestartWorld => restart_world(now, &ev, &mut out),
        RecoveryStage::PdFailover => {
            if let Some(idx) = event.location.strip_prefix("prefill-") {
                // prefill failure never disturbs decode: independent restart
                out.push(RecoveryAction {
                    time: now,
                    event: ev.clone(),
                    action: "restart failed prefill te independently".into(),
                    stage: RecoveryStage::PdFailover,
                    affected: vec![format!("prefill-{idx}")],
                });
            } else if let Some(idx) = event.location.strip_prefix("expert-node-") {
                let node: usize = idx
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad node id {idx}")))?;
                if node >= cluster.node_hosts.len() {
                    return Err(SimError::Config(format!("unknown expert node {node}")));
                }
                let lost = cluster.node_hosts[node].clone();
                for &e in &lost {
                    cluster.expert_replicas[e] = cluster.expert_replicas[e].saturating_sub(1);
                }
                cluster.node_hosts[node].clear();
                let orphaned: Vec<usize> = (0..cluster.expert_replicas.len())
                    .filter(|&e| cluster.expert_replicas[e] < policy.min_replicas_per_expert)
                    .collect();
                if orphaned.is_empty() {
                    out.push(RecoveryAction {
                        time: now,
                        event: ev.clone(),
                        action: "replicas absorb lost node; no re-placement needed".into(),
                        stage: RecoveryStage::PdFailover,
                        affected: vec![event.location.clone()],
                    });
                } else {
                    // vertical scaling: fewer DP groups and EP ranks, experts
                    // re-placed onto surviving nodes
                    let live_nodes = cluster.node_hosts.iter().filter(|h| !h.is_empty()).count();
                    let capacity = live_nodes * cluster.slots_per_node;
                    let demand: usize = cluster
                        .expert_replicas
                        .iter()
                        .map(|&r| r.max(policy.min_replicas_per_expert))
                        .sum();
                    if capacity < demand {
                        // cannot hold the floor: escalate
                        out.push(RecoveryAction {
                            time: now,
                            event: ev.clone(),
                            action: "vertical scaling infeasible; escalating".into(),
                            stage: RecoveryStage::PdFailover,
                            affected: vec![event.location.clone()],
                        });
                        restart_world(now, &ev, &mut out);
                        for r in cluster.expert_replicas.iter_mut() {
                            *r = (*r).max(policy.min_replicas_per_expert);
                        }
                        return Ok(out);
                    }
                    cluster.dp_groups = cluster.dp_groups.saturating_sub(1).max(1);
                    cluster.ep_ranks = cluster.ep_ranks.saturating_sub(1).max(1);
                    let mut targets: Vec<usize> = (0..cluster.node_hosts.len())
                        .filter(|&nid| !cluster.node_hosts[nid].is_empty())
                        .collect();
                    targets.sort_by_key(|&nid| (cluster.node_hosts[nid].len(), nid));
                    let mut ti = 0;
                    for &e in &orphaned {
                        // least-occupied surviving node takes the re-placed copy
                        let nid = targets[ti % targets.len()];
                        ti += 1;
                        cluster.node_hosts[nid].push(e);
                        cluster.expert_replicas[e] = policy.min_replicas_per_expert;
                    }
                    out.push(RecoveryAction {
                        time: now,
                        event: ev.clone(),
                        action: format!(
                            "vertical scaling: dp_groups={}, ep_ranks={}, re-placed {} experts",
                            cluster.dp_groups,
                            cluster.ep_ranks,
                            orphaned.len()
                        ),
                        stage: RecoveryStage::PdFailover,
                        affected: orphaned.iter().map(|e| format!("expert-{e}")).collect(),
                    });
                }
                if policy.kill_p_to_preserve_d && cluster.prefill_tes > 1 {
                    cluster.prefill_tes -= 1;
                    out.push(RecoveryAction {
                        time: now,
                        event: ev.clone(),
                        action: "killed one prefill te to preserve decode capacity".into(),
                        stage: RecoveryStage::PdFailover,
                        affected: vec!["prefill".into()],
                    });
                }
            } else {
                out.push(RecoveryAction {
                    time: now,
                    event: ev.clone(),
                    action: "restart failed actor".into(),
                    stage: RecoveryStage::PdFailover,
                    affected: vec![event.location.clone()],
                });
            }
        }
        RecoveryStage::FineGrained => match event.kind {
            FaultKind::NetTransient => {
                out.push(RecoveryAction {
                    time: now,
                    event: ev.clone(),
                    action: "broadcast rollback signal".into(),
                    stage: RecoveryStage::FineGrained,
                    affected: vec!["all-dp-groups".into()],
                });
                out.push(RecoveryAction {
                    time: now + ROLLBACK_BROADCAST_NS,
                    event: ev.clone(),
                    action: "re-execute rolled-back iteration".into(),
                    stage: RecoveryStage::FineGrained,
                    affected: vec!["all-dp-groups".into()],
                });
            }
            FaultKind::MemFault => {
                // mask the faulty region; requests whose KV lived there fail
                let victims: Vec<u64> = event
                    .location
                    .strip_prefix("kv-of-")
                    .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
                    .unwrap_or_default();
                cluster.active_requests.retain(|r| !victims.contains(r));
                out.push(RecoveryAction {
                    time: now,
                    event: ev.clone(),
                    action: "masked faulty memory region".into(),
                    stage: RecoveryStage::FineGrained,
                    affected: victims.iter().map(|r| format!("request-{r}")).collect(),
                });
                out.push(RecoveryAction {
                    time: now + MASK_PAUSE_NS,
                    event: ev.clone(),
                    action: "remaining requests resumed".into(),
                    stage: RecoveryStage::FineGrained,
                    affected: vec!["survivors".into()],
                });
            }
            _ => {
                // fine-grained recovery cannot handle a dead actor: escalate
                out.push(RecoveryAction {
                    time: now,
                    event: ev.clone(),
                    action: "fine-grained recovery inapplicable; escalating".into(),
                    stage: RecoveryStage::FineGrained,
                    affected: vec![event.location.clone()],
                });
                restart_world(now, &ev, &mut out);
            }
        },
    }
    Ok(out)
}

/// Deterministic token content keyed by (seed, request, position): rollback
/// and re-execution reproduce exactly the same stream.
pub fn token_at(seed: u64, request: u64, position: u64) -> u32 {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ request.wrapping_mul(0x9E3779B97F4A7C15) ^ position.rotate_left(31),
    );
    rng.gen()
}

/// Emit `iterations` decode steps of `tokens_per_iter` tokens per request,
/// optionally hitting a transient fault at one iteration: the partial
/// iteration is discarded, the rollback signal broadcast, and the iteration
/// re-executed from the pre-iteration state.
pub fn decode_run_tokens(
    seed: u64,
    requests: &[u64],
    iterations: u64,
    tokens_per_iter: u64,
    fault_at_iteration: Option<u64>,
) -> BTreeMap<u64, Vec<u32>> {
    let mut streams: BTreeMap<u64, Vec<u32>> = requests.iter().map(|&r| (r, Vec::new())).collect();
    for it in 0..iterations {
        if fault_at_iteration == Some(it) {
            // partial emission, then discard on rollback
            let mut partial: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
            for &r in requests.iter().take(requests.len() / 2) {
                let pos = streams[&r].len() as u64;
                partial.entry(r).or_default().push(token_at(seed, r, pos));
            }
            drop(partial); // rollback: sampler state restored, nothing kept
        }
        for &r in requests {
            for _ in 0..tokens_per_iter {
                let pos = streams[&r].len() as u64;
                let tok = token_at(seed, r, pos);
                streams.get_mut(&r).unwrap().push(tok);
            }
        }
    }
    streams
}
