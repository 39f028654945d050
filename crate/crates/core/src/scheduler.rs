//! Request scheduling: self-contained DP groups, single-level collaborative
//! prefill scheduling, KV-aware decode routing, DP-domain token rotation,
//! and host-jitter mitigation toggles.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::engine::{us_to_ns, TimeNs, NS_PER_MS};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Serialize)]
pub struct Request {
    pub id: u64,
    pub prompt_len: u64,
    pub max_output_len: u64,
    /// Hash of the longest shared prompt prefix, for cache-hit scoring.
    pub prefix_hash: u64,
}

/// Snapshot of one data-parallel group, as gathered by the scheduling leader
/// at the start of a step.
#[derive(Debug, Clone)]
pub struct DpGroupState {
    pub id: usize,
    pub pending_requests: u64,
    pub pending_tokens: u64,
    pub active_batch: u64,
    pub batch_limit: u64,
    pub kv_used_blocks: u64,
    pub kv_total_blocks: u64,
    pub prefix_cache: BTreeSet<u64>,
}

impl DpGroupState {
    pub fn new(id: usize, batch_limit: u64, kv_total_blocks: u64) -> Self {
        Self {
            id,
            pending_requests: 0,
            pending_tokens: 0,
            active_batch: 0,
            batch_limit,
            kv_used_blocks: 0,
            kv_total_blocks,
            prefix_cache: BTreeSet::new(),
        }
    }

    pub fn kv_usage(&self) -> f64 {
        self.kv_used_blocks as f64 / self.kv_total_blocks.max(1) as f64
    }
}

/// Linear weighted cost over prefix-hit, length, and load factors.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub weight_prefix_hit: f64,
    pub weight_length: f64,
    pub weight_load: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            weight_prefix_hit: 1.0,
            weight_length: 1.0,
            weight_load: 1.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.weight_prefix_hit < 0.0 || self.weight_length < 0.0 || self.weight_load < 0.0 {
            return Err(SimError::Config("cost weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// One scheduling decision, exported to the audit log as JSON lines.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub time: TimeNs,
    pub request: u64,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub request: u64,
    /// `None` means deferred: every group was at its batch limit.
    pub group: Option<usize>,
}

/// Greedy minimum-cost assignment of queued prefill requests.
///
/// cost(r, dp) = w_hit * (1 - hit) + w_len * norm(pending_tokens + len)
///             + w_load * norm(active_batch + 1)
///
/// The leader view is updated as requests are placed, so token load couples
/// consecutive decisions (a long request steers later ones elsewhere).
pub fn prefill_schedule_step(
    leader_view: &mut [DpGroupState],
    queue: &[Request],
    cost: &CostModel,
    now: TimeNs,
    audit: &mut Vec<AuditRecord>,
) -> Result<Vec<Assignment>> {
    cost.validate()?;
    if leader_view.is_empty() {
        return Err(SimError::Config("no DP groups".into()));
    }
    let mut out = Vec::with_capacity(queue.len());
    for req in queue {
        let eligible: Vec<usize> = leader_view
            .iter()
            .enumerate()
            .filter(|(_, g)| g.active_batch < g.batch_limit)
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            audit.push(AuditRecord {
                time: now,
                request: req.id,
                candidates: vec![],
                scores: vec![],
                chosen: None,
            });
            out.push(Assignment {
                request: req.id,
                group: None,
            });
            continue;
        }
        let max_tokens = eligible
            .iter()
            .map(|&i| leader_view[i].pending_tokens + req.prompt_len)
            .max()
            .unwrap()
            .max(1) as f64;
        let max_load = eligible
            .iter()
            .map(|&i| leader_view[i].active_batch + 1)
            .max()
            .unwrap()
            .max(1) as f64;
        let scores: Vec<f64> = eligible
            .iter()
            .map(|&i| {
                let g = &leader_view[i];
                let hit = if g.prefix_cache.contains(&req.prefix_hash) {
                    1.0
                } else {
                    0.0
                };
                cost.weight_prefix_hit * (1.0 - hit)
                    + cost.weight_length * (g.pending_tokens + req.prompt_len) as f64 / max_tokens
                    + cost.weight_load * (g.active_batch + 1) as f64 / max_load
            })
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .min_by(|(ai, a), (bi, b)| a.partial_cmp(b).unwrap().then(ai.cmp(bi)))
            .map(|(i, _)| i)
            .unwrap();
        let chosen = eligible[best];
        audit.push(AuditRecord {
            time: now,
            request: req.id,
            candidates: eligible.iter().map(|&i| leader_view[i].id).collect(),
            scores: scores.clone(),
            chosen: Some(leader_view[chosen].id),
        });
        let g = &mut leader_view[chosen];
        g.pending_requests += 1;
        g.pending_tokens += req.prompt_len;
        g.active_batch += 1;
        debug_assert!(g.active_batch <= g.batch_limit);
        out.push(Assignment {
            request: req.id,
            group: Some(g.id),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteResult {
    Group(usize),
    Backpressure,
}

/// Decode placement: among groups below their batch limit that can still fit
/// the KV reservation, pick the lowest projected KV usage
/// `(kv_used + reserve) / kv_total`. Ties break to the lowest group id.
pub fn route_decode(groups: &[DpGroupState], reserve_blocks: u64) -> RouteResult {
    let mut best: Option<(f64, usize)> = None;
    for g in groups {
        if g.active_batch >= g.batch_limit {
            continue;
        }
        if g.kv_used_blocks + reserve_blocks > g.kv_total_blocks {
            continue;
        }
        let usage = (g.kv_used_blocks + reserve_blocks) as f64 / g.kv_total_blocks.max(1) as f64;
        let better = match best {
            None => true,
            Some((bu, bid)) => usage < bu || (usage == bu && g.id < bid),
        };
        if better {
            best = Some((usage, g.id));
        }
    }
    match best {
        Some((_, id)) => RouteResult::Group(id),
        None => RouteResult::Backpressure,
    }
}

/// Default KV reservation for a decode request.
pub fn default_reserve_blocks(max_output_len: u64, block_size: u64) -> u64 {
    max_output_len.div_ceil(block_size.max(1))
}

/// One exclusive MoE-access window granted to a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenHold {
    pub domain: usize,
    pub start_ns: TimeNs,
    pub end_ns: TimeNs,
}

/// Round-robin token rotation across DP domains. A domain holds the token
/// exactly for its A2E+MoE+E2A window and cannot reacquire it until its
/// attention phase finishes; the handoff instant is the releasing domain's
/// E2A completion.
pub fn domain_rotate(
    num_domains: usize,
    moe_window_ns: TimeNs,
    attention_window_ns: TimeNs,
    rounds: usize,
) -> Result<Vec<TokenHold>> {
    if num_domains == 0 {
        return Err(SimError::Config("need at least one domain".into()));
    }
    let mut ready = vec![0u64; num_domains];
    let mut holds = Vec::with_capacity(num_domains * rounds);
    let mut prev_end = 0u64;
    for i in 0..num_domains * rounds {
        let d = i % num_domains;
        let start = prev_end.max(ready[d]);
        let end = start + moe_window_ns;
        ready[d] = end + attention_window_ns;
        holds.push(TokenHold {
            domain: d,
            start_ns: start,
            end_ns: end,
        });
        prev_end = end;
    }
    Ok(holds)
}

/// MoE-node busy fraction over a token-hold schedule.
pub fn moe_occupancy(holds: &[TokenHold]) -> f64 {
    if holds.is_empty() {
        return 0.0;
    }
    let busy: u64 = holds.iter().map(|h| h.end_ns - h.start_ns).sum();
    let span = holds.last().unwrap().end_ns - holds[0].start_ns;
    busy as f64 / span.max(1) as f64
}

/// Host-side jitter mitigation toggles.
#[derive(Debug, Clone, Copy)]
pub struct JitterConfig {
    /// Pin scheduler threads: removes the scheduling-noise tail.
    pub core_pinning: bool,
    /// Cache launch graphs: removes the per-launch guard cost.
    pub graph_caching: bool,
    /// Force GC every N forward passes instead of random large pauses.
    pub gc_every: Option<u32>,
}

impl JitterConfig {
    pub fn all_off() -> Self {
        Self {
            core_pinning: false,
            graph_caching: false,
            gc_every: None,
        }
    }

    pub fn all_on() -> Self {
        Self {
            core_pinning: true,
            graph_caching: true,
            gc_every: Some(50),
        }
    }
}

/// Host jitter distribution parameters.
#[derive(Debug, Clone)]
pub struct JitterModel {
    /// Heavy-tail scheduling pause, occasionally above 100 ms.
    pub sched_tail_ms: f64,
    pub sched_tail_prob: f64,
    pub sched_base_us: f64,
    /// Per-launch graph-guard overhead.
    pub launch_guard_us: f64,
    /// Unmanaged GC: random large pause.
    pub gc_pause_ms: f64,
    pub gc_prob: f64,
    /// Managed GC: fixed small pause at known instants.
    pub forced_gc_ms: f64,
}

impl Default for JitterModel {
    fn default() -> Self {
        Self {
            sched_tail_ms: 120.0,
            sched_tail_prob: 0.01,
            sched_base_us: 30.0,
            launch_guard_us: 50.0,
            gc_pause_ms: 150.0,
            gc_prob: 0.02,
            forced_gc_ms: 5.0,
        }
    }
}

/// Host-side delay before the first dispatch of forward pass `pass_index`.
/// Each toggle removes or replaces one latency term; the compute cost is
/// untouched.
pub fn first_dispatch_delay_ns<R: Rng>(
    cfg: &JitterConfig,
    model: &JitterModel,
    rng: &mut R,
    pass_index: u64,
) -> TimeNs {
    let mut delay = 0u64;
    if cfg.core_pinning {
        delay += us_to_ns(model.sched_base_us);
    } else {
        delay += us_to_ns(model.sched_base_us);
        if rng.gen::<f64>() < model.sched_tail_prob {
            delay += (model.sched_tail_ms * NS_PER_MS as f64) as u64;
        }
    }
    if !cfg.graph_caching {
        delay += us_to_ns(model.launch_guard_us);
    }
    match cfg.gc_every {
        Some(n) => {
            if pass_index % n.max(1) as u64 == 0 {
                delay += (model.forced_gc_ms * NS_PER_MS as f64) as u64;
            }
        }
        None => {
            if rng.gen::<f64>() < model.gc_prob {
                delay += (model.gc_pause_ms * NS_PER_MS as f64) as u64;
            }
        }
    }
    delay
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn req(id: u64, len: u64) -> Request {
        Request {
            id,
            prompt_len: len,
            max_output_len: 128,
            prefix_hash: id,
        }
    }

    fn groups(n: usize) -> Vec<DpGroupState> {
        (0..n).map(|i| DpGroupState::new(i, 64, 10_000)).collect()
    }

    #[test]
    fn single_request_single_group() {
        let mut view = groups(1);
        let mut audit = Vec::new();
        let a = prefill_schedule_step(&mut view, &[req(1, 100)], &CostModel::default(), 0, &mut audit)
            .unwrap();
        assert_eq!(a, vec![Assignment { request: 1, group: Some(0) }]);
        assert_eq!(view[0].pending_tokens, 100);
    }

    #[test]
    fn prefix_hit_dominates_on_equal_load() {
        let mut view = groups(3);
        view[2].prefix_cache.insert(42);
        let mut r = req(9, 100);
        r.prefix_hash = 42;
        let mut audit = Vec::new();
        let a = prefill_schedule_step(&mut view, &[r], &CostModel::default(), 0, &mut audit).unwrap();
        assert_eq!(a[0].group, Some(2));
        assert_eq!(audit[0].chosen, Some(2));
        assert_eq!(audit[0].candidates.len(), 3);
    }

    /// Makespan when each group drains its queue sequentially.
    fn makespan(lens_per_group: &[Vec<u64>]) -> u64 {
        lens_per_group
            .iter()
            .map(|v| v.iter().sum::<u64>())
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn long_request_isolated_beats_two_level_baseline() {
        let queue: Vec<Request> = std::iter::once(req(0, 8_000))
            .chain((1..8).map(|i| req(i, 250)))
            .collect();
        let cost = CostModel {
            weight_prefix_hit: 0.0,
            weight_length: 10.0,
            weight_load: 0.1,
        };
        let mut view = groups(2);
        let mut audit = Vec::new();
        let assigned = prefill_schedule_step(&mut view, &queue, &cost, 0, &mut audit).unwrap();
        let mut per_group = vec![Vec::new(), Vec::new()];
        for (a, r) in assigned.iter().zip(&queue) {
            per_group[a.group.unwrap()].push(r.prompt_len);
        }
        // long request shares its group with no shorts
        let long_group = assigned[0].group.unwrap();
        assert_eq!(per_group[long_group], vec![8_000]);

        // naive two-level baseline: one global FIFO dealt round-robin
        let mut rr = vec![Vec::new(), Vec::new()];
        for (i, r) in queue.iter().enumerate() {
            rr[i % 2].push(r.prompt_len);
        }
        assert!(makespan(&per_group) < makespan(&rr));
    }

    #[test]
    fn deferral_when_all_groups_full() {
        let mut view = groups(2);
        for g in view.iter_mut() {
            g.active_batch = g.batch_limit;
        }
        let mut audit = Vec::new();
        let a = prefill_schedule_step(&mut view, &[req(5, 10)], &CostModel::default(), 0, &mut audit)
            .unwrap();
        assert_eq!(a[0].group, None);
        assert_eq!(audit[0].chosen, None);
    }

    #[test]
    fn audit_records_serialize_as_json_lines() {
        let rec = AuditRecord {
            time: 5,
            request: 7,
            candidates: vec![0, 1],
            scores: vec![0.5, 0.25],
            chosen: Some(1),
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"request\":7"));
        assert!(line.contains("\"chosen\":1"));
    }

    #[test]
    fn decode_picks_lowest_kv_usage() {
        let mut gs = groups(3);
        gs[0].kv_used_blocks = 9_000;
        gs[1].kv_used_blocks = 4_000;
        gs[2].kv_used_blocks = 7_000;
        assert_eq!(route_decode(&gs, 0), RouteResult::Group(1));
    }

    #[test]
    fn decode_backpressure_when_full() {
        let mut gs = groups(2);
        for g in gs.iter_mut() {
            g.active_batch = g.batch_limit;
        }
        assert_eq!(route_decode(&gs, 0), RouteResult::Backpressure);
    }

    #[test]
    fn decode_reservation_excludes_tight_groups() {
        let mut gs = groups(2);
        gs[0].kv_used_blocks = 9_990; // cannot fit reserve 100
        gs[1].kv_used_blocks = 9_000;
        assert_eq!(route_decode(&gs, 100), RouteResult::Group(1));
        assert_eq!(default_reserve_blocks(1_000, 16), 63);
    }

    #[test]
    fn decode_fuzz_matches_argmin_oracle() {
        let mut s = 0xD1B54A32u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            s >> 33
        };
        for _ in 0..200 {
            let n = 1 + (next() % 6) as usize;
            let reserve = next() % 200;
            let gs: Vec<DpGroupState> = (0..n)
                .map(|i| {
                    let mut g = DpGroupState::new(i, 8, 1_000 + next() % 1_000);
                    g.kv_used_blocks = next() % g.kv_total_blocks;
                    g.active_batch = next() % 10;
                    g
                })
                .collect();
            let got = route_decode(&gs, reserve);
            // independent recomputation
            let mut want = RouteResult::Backpressure;
            let mut best = f64::INFINITY;
            for g in &gs {
                if g.active_batch >= g.batch_limit
                    || g.kv_used_blocks + reserve > g.kv_total_blocks
                {
                    continue;
                }
                let u = (g.kv_used_blocks + reserve) as f64 / g.kv_total_blocks as f64;
                if u < best {
                    best = u;
                    want = RouteResult::Group(g.id);
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn one_domain_always_holds_token() {
        let holds = domain_rotate(1, 100, 0, 5).unwrap();
        assert!(holds.iter().all(|h| h.domain == 0));
        assert!((moe_occupancy(&holds) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_domains_keep_moe_saturated() {
        let w = 100_000;
        let holds = domain_rotate(3, w, 2 * w, 50).unwrap();
        // exclusivity: holds never overlap
        for pair in holds.windows(2) {
            assert!(pair[0].end_ns <= pair[1].start_ns);
        }
        // attention window of exactly 2w back-to-backs the rotation
        assert!(moe_occupancy(&holds) > 0.999);
        // each domain holds the token one third of the time
        let per: Vec<u64> = (0..3)
            .map(|d| {
                holds
                    .iter()
                    .filter(|h| h.domain == d)
                    .map(|h| h.end_ns - h.start_ns)
                    .sum()
            })
            .collect();
        assert_eq!(per[0], per[1]);
        assert_eq!(per[1], per[2]);
    }

    #[test]
    fn long_attention_leaves_moe_idle_gaps() {
        let w = 100_000;
        let holds = domain_rotate(2, w, 10 * w, 20).unwrap();
        assert!(moe_occupancy(&holds) < 0.5);
    }

    #[test]
    fn unmitigated_jitter_exceeds_100ms() {
        let cfg = JitterConfig::all_off();
        let model = JitterModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let max = (0..2_000)
            .map(|i| first_dispatch_delay_ns(&cfg, &model, &mut rng, i))
            .max()
            .unwrap();
        assert!(max > 100 * NS_PER_MS);
    }

    #[test]
    fn mitigated_jitter_bounded_and_low_variance() {
        let cfg = JitterConfig::all_on();
        let model = JitterModel::default();
        let bound = 6 * NS_PER_MS; // forced GC pause + base
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delays: Vec<u64> = (0..2_000)
                .map(|i| first_dispatch_delay_ns(&cfg, &model, &mut rng, i))
                .collect();
            assert!(delays.iter().all(|&d| d <= bound));
            // off the GC instants the delay is constant
            let off_gc: Vec<u64> = delays
                .iter()
                .enumerate()
                .filter(|(i, _)| *i % 50 != 0)
                .map(|(_, &d)| d)
                .collect();
            assert!(off_gc.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn gc_every_pass_is_constant_overhead() {
        let cfg = JitterConfig {
            gc_every: Some(1),
            ..JitterConfig::all_on()
        };
        let model = JitterModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let delays: Vec<u64> = (0..100)
            .map(|i| first_dispatch_delay_ns(&cfg, &model, &mut rng, i))
            .collect();
        assert!(delays.windows(2).all(|w| w[0] == w[1]));
    }
}
