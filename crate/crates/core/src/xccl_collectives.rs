//! All-to-all primitives: pull-based dispatch/combine for colocated expert
//! parallelism, and the trampoline-forwarded A2E/E2A pair for disaggregated
//! MoE-attention deployments.
//!
//! Bulk token data moves with DMA semantics (it avoids contention with the
//! compute streams sharing a die); the metadata phase uses memory semantics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::engine::{us_to_ns, TimeNs};
use crate::error::{Result, SimError};
use crate::fabric::{LatencyModel, NodeId};

/// Numeric tag of a token payload. Quantization in the simulator affects
/// payload size and a fixed quantize cost only; values stay at full
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp16,
    Int8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPayload {
    pub token_index: usize,
    pub hidden: Vec<f32>,
    pub precision: Precision,
}

impl TokenPayload {
    pub fn fp16(token_index: usize, hidden: Vec<f32>) -> Self {
        Self {
            token_index,
            hidden,
            precision: Precision::Fp16,
        }
    }

    /// Bytes this payload occupies on the wire. INT8 is half of FP16.
    pub fn wire_bytes(&self) -> u64 {
        let per = match self.precision {
            Precision::Fp16 => 2,
            Precision::Int8 => 1,
        };
        (self.hidden.len() * per) as u64
    }

    pub fn quantized(&self) -> Self {
        Self {
            token_index: self.token_index,
            hidden: self.hidden.clone(),
            precision: Precision::Int8,
        }
    }
}

/// Per-token top-k expert selection with gating scores.
#[derive(Debug, Clone)]
pub struct GatingOutput {
    pub num_logical_experts: usize,
    /// Indexed by global token id: list of (logical expert, score).
    pub topk: Vec<Vec<(usize, f64)>>,
}

impl GatingOutput {
    pub fn validate(&self) -> Result<()> {
        for (t, sel) in self.topk.iter().enumerate() {
            if sel.is_empty() {
                return Err(SimError::Config(format!("token {t} has k = 0")));
            }
            for &(e, s) in sel {
                if e >= self.num_logical_experts {
                    return Err(SimError::Config(format!(
                        "token {t} routed to expert {e} >= {}",
                        self.num_logical_experts
                    )));
                }
                if !s.is_finite() {
                    return Err(SimError::Config(format!("token {t} has non-finite score")));
                }
            }
        }
        Ok(())
    }
}

/// Expert-parallel layout: which rank hosts each logical expert.
#[derive(Debug, Clone)]
pub struct EpConfig {
    pub num_ranks: usize,
    pub experts_per_rank: usize,
    pub rank_of_expert: Vec<usize>,
}

impl EpConfig {
    /// Contiguous layout: experts `[r*e_per .. (r+1)*e_per)` live on rank `r`.
    pub fn uniform(num_ranks: usize, experts_per_rank: usize) -> Self {
        let rank_of_expert = (0..num_ranks * experts_per_rank)
            .map(|e| e / experts_per_rank)
            .collect();
        Self {
            num_ranks,
            experts_per_rank,
            rank_of_expert,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank_of_expert.len() != self.num_ranks * self.experts_per_rank {
            return Err(SimError::Config(
                "rank_of_expert must cover all physical expert slots exactly once".into(),
            ));
        }
        let mut per_rank = vec![0usize; self.num_ranks];
        for &r in &self.rank_of_expert {
            if r >= self.num_ranks {
                return Err(SimError::Config(format!("expert mapped to rank {r}")));
            }
            per_rank[r] += 1;
        }
        if per_rank.iter().any(|&c| c != self.experts_per_rank) {
            return Err(SimError::Config(
                "every rank must host exactly experts_per_rank slots".into(),
            ));
        }
        Ok(())
    }
}

/// Cost calibration for the collective timing model.
#[derive(Debug, Clone)]
pub struct CollectiveCostModel {
    pub latency: LatencyModel,
    /// FP16 wire size of one token's hidden state (DeepSeek-class default).
    pub bytes_per_token_fp16: u64,
    /// Fixed per-kernel quantize overhead; sets the dispatch/combine
    /// crossover at a per-die batch of ~32.
    pub quantize_fixed_us: f64,
}

impl Default for CollectiveCostModel {
    fn default() -> Self {
        Self {
            latency: LatencyModel::default(),
            bytes_per_token_fp16: 14_336,
            quantize_fixed_us: 0.46,
        }
    }
}

impl CollectiveCostModel {
    fn xfer_ns(&self, bytes: u64) -> TimeNs {
        self.latency.dma_latency_ns(bytes as usize)
    }

    /// Per-rank dispatch latency at a given per-die batch (quantized path).
    pub fn dispatch_latency_us(&self, batch_per_die: u64) -> f64 {
        let bytes = batch_per_die * self.bytes_per_token_fp16 / 2;
        self.quantize_fixed_us + self.latency.dma_latency_us(bytes as usize)
    }

    /// Per-rank combine latency at a given per-die batch (full precision).
    pub fn combine_latency_us(&self, batch_per_die: u64) -> f64 {
        let bytes = batch_per_die * self.bytes_per_token_fp16;
        self.latency.dma_latency_us(bytes as usize)
    }
}

/// Per-collective summary record, exported as JSON lines.
#[derive(Debug, Clone, Serialize)]
pub struct CollectiveSummary {
    pub collective: String,
    pub participants: usize,
    pub bytes: u64,
    pub t_start: TimeNs,
    pub t_end: TimeNs,
    pub straggler_node: Option<u32>,
}

/// A token delivered to a rank or node, with the metadata needed to route
/// the expert output back.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedToken {
    pub src_rank: usize,
    pub token_index: usize,
    pub expert: usize,
    pub score: f64,
    pub payload: TokenPayload,
}

#[derive(Debug)]
pub struct DispatchResult {
    pub per_rank: Vec<Vec<RoutedToken>>,
    /// Instant each rank finished publishing its token-count metadata.
    pub meta_published: Vec<TimeNs>,
    /// No rank begins bulk pulls before this instant.
    pub barrier_ns: TimeNs,
    pub per_rank_done: Vec<TimeNs>,
    pub bytes_on_wire: u64,
    pub summary: CollectiveSummary,
}

/// Pull-based all-to-all dispatch: metadata phase (token counts to every
/// rank), full barrier, then bulk pulls guided by the received counts.
pub fn dispatch(
    tokens_per_rank: &[Vec<TokenPayload>],
    gating: &GatingOutput,
    cfg: &EpConfig,
    quantize: bool,
    cost: &CollectiveCostModel,
    start_ns: TimeNs,
    straggler_delay_ns: &[TimeNs],
) -> Result<DispatchResult> {
    cfg.validate()?;
    gating.validate()?;
    if tokens_per_rank.len() != cfg.num_ranks {
        return Err(SimError::Config(format!(
            "dispatch requires all {} ranks to participate, got {}",
            cfg.num_ranks,
            tokens_per_rank.len()
        )));
    }
    let total_tokens: usize = tokens_per_rank.iter().map(|v| v.len()).sum();
    if gating.topk.len() < total_tokens {
        return Err(SimError::Config("gating must cover all tokens".into()));
    }

    let meta_cost = cost.latency.meta_write_ns();
    let tick = cost.latency.poll_interval_ns();
    let quant_ns = if quantize {
        us_to_ns(cost.quantize_fixed_us)
    } else {
        0
    };

    // Phase 1: every rank publishes per-destination token counts.
    let mut meta_published = vec![0u64; cfg.num_ranks];
    for r in 0..cfg.num_ranks {
        let delay = straggler_delay_ns.get(r).copied().unwrap_or(0);
        meta_published[r] = start_ns + delay + quant_ns + meta_cost * cfg.num_ranks as u64;
    }
    let barrier_ns = meta_published.iter().copied().max().unwrap_or(start_ns) + tick;
    let straggler = meta_published
        .iter()
        .enumerate()
        .max_by_key(|(i, t)| (**t, *i))
        .map(|(i, _)| i as u32);

    // Routing: each (token, expert) pair lands on the expert's host rank.
    let mut per_rank: Vec<Vec<RoutedToken>> = vec![Vec::new(); cfg.num_ranks];
    let mut bytes_on_wire = 0u64;
    for (src_rank, toks) in tokens_per_rank.iter().enumerate() {
        for tok in toks {
            let payload = if quantize { tok.quantized() } else { tok.clone() };
            for &(e, score) in &gating.topk[tok.token_index] {
                let dst = cfg.rank_of_expert[e];
                bytes_on_wire += payload.wire_bytes();
                per_rank[dst].push(RoutedToken {
                    src_rank,
                    token_index: tok.token_index,
                    expert: e,
                    score,
                    payload: payload.clone(),
                });
            }
        }
    }

    // Phase 2: bulk pulls after the barrier, DMA semantics.
    let mut per_rank_done = vec![barrier_ns; cfg.num_ranks];
    for r in 0..cfg.num_ranks {
        let bytes: u64 = per_rank[r].iter().map(|t| t.payload.wire_bytes()).sum();
        per_rank_done[r] = barrier_ns + cost.xfer_ns(bytes);
    }
    let t_end = per_rank_done.iter().copied().max().unwrap_or(barrier_ns);

    Ok(DispatchResult {
        summary: CollectiveSummary {
            collective: "dispatch".into(),
            participants: cfg.num_ranks,
            bytes: bytes_on_wire,
            t_start: start_ns,
            t_end,
            straggler_node: straggler,
        },
        per_rank,
        meta_published,
        barrier_ns,
        per_rank_done,
        bytes_on_wire,
    })
}

/// Expert outputs keyed by (token, logical expert).
#[derive(Debug, Default, Clone)]
pub struct ExpertOutputs {
    pub outputs: BTreeMap<(usize, usize), Vec<f32>>,
}

impl ExpertOutputs {
    pub fn insert(&mut self, token: usize, expert: usize, out: Vec<f32>) {
        self.outputs.insert((token, expert), out);
    }
}

#[derive(Debug)]
pub struct CombineResult {
    pub per_token: BTreeMap<usize, Vec<f32>>,
    pub summary: CollectiveSummary,
}

/// Score-weighted aggregation of expert outputs:
/// `output[t] = sum_e score(t, e) * expert_output(t, e)`.
pub fn combine(
    expert_outputs: &ExpertOutputs,
    gating: &GatingOutput,
    tokens: &[usize],
    cost: &CollectiveCostModel,
    start_ns: TimeNs,
) -> Result<CombineResult> {
    gating.validate()?;
    let mut per_token = BTreeMap::new();
    let mut bytes = 0u64;
    for &t in tokens {
        let sel = &gating.topk[t];
        let mut acc: Option<Vec<f32>> = None;
        for &(e, score) in sel {
            let out = expert_outputs
                .outputs
                .get(&(t, e))
                .ok_or(SimError::IncompleteCombine { token: t, expert: e })?;
            bytes += (out.len() * 2) as u64;
            match &mut acc {
                None => acc = Some(out.iter().map(|v| (score as f32) * v).collect()),
                Some(a) => {
                    for (av, v) in a.iter_mut().zip(out) {
                        *av += score as f32 * v;
                    }
                }
            }
        }
        per_token.insert(t, acc.expect("k >= 1"));
    }
    let t_end = start_ns + cost.xfer_ns(bytes);
    Ok(CombineResult {
        per_token,
        summary: CollectiveSummary {
            collective: "combine".into(),
            participants: tokens.len(),
            bytes,
            t_start: start_ns,
            t_end,
            straggler_node: None,
        },
    })
}

/// Two-stage routing map for asymmetric attention/expert allocations: the
/// first `|attention|` expert nodes act as trampolines; the rest are
/// partitioned into contiguous per-trampoline forwarding sets.
#[derive(Debug, Clone)]
pub struct TrampolineMap {
    pub attention_nodes: Vec<NodeId>,
    pub expert_nodes: Vec<NodeId>,
    /// Indices into `expert_nodes` forwarded by each trampoline.
    pub second_stage: Vec<Vec<usize>>,
}

impl TrampolineMap {
    pub fn build(attention_nodes: Vec<NodeId>, expert_nodes: Vec<NodeId>) -> Result<Self> {
        let a = attention_nodes.len();
        let e = expert_nodes.len();
        if a == 0 || e == 0 {
            return Err(SimError::Config("empty node set".into()));
        }
        if a > e {
            return Err(SimError::Config(format!(
                "asymmetric allocation requires |attention| <= |expert| ({a} > {e})"
            )));
        }
        let rest = e - a;
        let block = rest.div_ceil(a).max(1);
        let mut second_stage = vec![Vec::new(); a];
        for (i, node_idx) in (a..e).enumerate() {
            second_stage[i / block].push(node_idx);
        }
        Ok(Self {
            attention_nodes,
            expert_nodes,
            second_stage,
        })
    }

    pub fn num_trampolines(&self) -> usize {
        self.attention_nodes.len()
    }

    pub fn trampolines(&self) -> &[NodeId] {
        &self.expert_nodes[..self.num_trampolines()]
    }

    /// Which trampoline (index) relays traffic for an expert-node index.
    pub fn owner_trampoline(&self, expert_node_idx: usize) -> usize {
        let a = self.num_trampolines();
        if expert_node_idx < a {
            expert_node_idx
        } else {
            let block = (self.expert_nodes.len() - a).div_ceil(a).max(1);
            (expert_node_idx - a) / block
        }
    }
}

/// One token delivery in an A2E/E2A flow.
#[derive(Debug, Clone, PartialEq)]
pub struct A2eDelivery {
    pub src_attention: usize,
    pub via_trampoline: usize,
    pub token_index: usize,
    pub expert: usize,
    pub score: f64,
    pub payload: TokenPayload,
}

#[derive(Debug)]
pub struct A2eResult {
    pub per_expert_node: Vec<Vec<A2eDelivery>>,
    pub stage1_meta_updates: u64,
    pub stage2_meta_updates: u64,
    pub stage1_done_ns: TimeNs,
    pub summary: CollectiveSummary,
}

/// Attention-to-expert collective with trampoline forwarding. Stage 1 pushes
/// from attention nodes to trampolines only; stage 2 (A2E') forwards from
/// each trampoline to its second-stage set. Final placement equals a direct
/// dense dispatch.
pub fn a2e(
    tokens_per_attention: &[Vec<TokenPayload>],
    gating: &GatingOutput,
    expert_node_of_expert: &[usize],
    tmap: &TrampolineMap,
    cost: &CollectiveCostModel,
    start_ns: TimeNs,
) -> Result<A2eResult> {
    gating.validate()?;
    let a = tmap.attention_nodes.len();
    let e = tmap.expert_nodes.len();
    if tokens_per_attention.len() != a {
        return Err(SimError::Config(
            "tokens_per_attention must match attention node count".into(),
        ));
    }
    if gating.num_logical_experts != expert_node_of_expert.len() {
        return Err(SimError::Config(
            "expert_node_of_expert must cover every logical expert".into(),
        ));
    }

    let mut per_expert_node: Vec<Vec<A2eDelivery>> = vec![Vec::new(); e];
    let mut stage1_bytes = vec![0u64; a];
    let mut stage2_bytes = vec![0u64; a];
    let mut total_bytes = 0u64;
    for (att, toks) in tokens_per_attention.iter().enumerate() {
        for tok in toks {
            for &(ex, score) in &gating.topk[tok.token_index] {
                let node_idx = expert_node_of_expert[ex];
                if node_idx >= e {
                    return Err(SimError::Config(format!(
                        "expert {ex} mapped to node index {node_idx} >= {e}"
                    )));
                }
                let tram = tmap.owner_trampoline(node_idx);
                let b = tok.wire_bytes();
                stage1_bytes[att] += b;
                if node_idx != tram {
                    stage2_bytes[tram] += b;
                }
                total_bytes += b;
                per_expert_node[node_idx].push(A2eDelivery {
                    src_attention: att,
                    via_trampoline: tram,
                    token_index: tok.token_index,
                    expert: ex,
                    score,
                    payload: tok.clone(),
                });
            }
        }
    }

    // Stage 1: each attention node fans metadata out to trampolines only.
    let meta_cost = cost.latency.meta_write_ns();
    let tick = cost.latency.poll_interval_ns();
    let stage1_meta_updates = (a * tmap.num_trampolines()) as u64;
    let meta_done = start_ns + meta_cost * tmap.num_trampolines() as u64;
    let barrier = meta_done + tick;
    let stage1_done_ns = barrier
        + stage1_bytes
            .iter()
            .map(|&b| cost.xfer_ns(b))
            .max()
            .unwrap_or(0);

    // Stage 2 (A2E'): trampolines forward to their second-stage sets.
    let stage2_meta_updates: u64 = tmap
        .second_stage
        .iter()
        .map(|s| s.len() as u64)
        .sum::<u64>();
    let t_end = stage1_done_ns
        + stage2_bytes
            .iter()
            .map(|&b| if b > 0 { cost.xfer_ns(b) } else { 0 })
            .max()
            .unwrap_or(0);

    Ok(A2eResult {
        summary: CollectiveSummary {
            collective: "a2e".into(),
            participants: a + e,
            bytes: total_bytes,
            t_start: start_ns,
            t_end,
            straggler_node: None,
        },
        per_expert_node,
        stage1_meta_updates,
        stage2_meta_updates,
        stage1_done_ns,
    })
}

#[derive(Debug)]
pub struct E2aResult {
    /// Aggregated output per attention node, per token.
    pub per_attention: Vec<BTreeMap<usize, Vec<f32>>>,
    pub stage1_meta_updates: u64,
    pub summary: CollectiveSummary,
}

/// Expert-to-attention collective: outputs route expert-node -> trampoline
/// (E2A) -> owning attention node (E2A'), then aggregate with the same
/// gating weights as `combine`.
pub fn e2a(
    expert_outputs: &ExpertOutputs,
    gating: &GatingOutput,
    token_owner: &BTreeMap<usize, usize>,
    expert_node_of_expert: &[usize],
    tmap: &TrampolineMap,
    cost: &CollectiveCostModel,
    start_ns: TimeNs,
) -> Result<E2aResult> {
    gating.validate()?;
    let a = tmap.attention_nodes.len();
    let mut per_attention: Vec<BTreeMap<usize, Vec<f32>>> = vec![BTreeMap::new(); a];
    let mut tram_bytes = vec![0u64; tmap.num_trampolines()];
    let mut total_bytes = 0u64;

    for (&t, &owner) in token_owner {
        if owner >= a {
            return Err(SimError::Config(format!("token {t} owned by node {owner} >= {a}")));
        }
        let sel = &gating.topk[t];
        let mut acc: Option<Vec<f32>> = None;
        for &(e, score) in sel {
            let out = expert_outputs
                .outputs
                .get(&(t, e))
                .ok_or(SimError::IncompleteCombine { token: t, expert: e })?;
            let node_idx = expert_node_of_expert[e];
            let tram = tmap.owner_trampoline(node_idx);
            let b = (out.len() * 2) as u64;
            tram_bytes[tram] += b;
            total_bytes += b;
            match &mut acc {
                None => acc = Some(out.iter().map(|v| (score as f32) * v).collect()),
                Some(av) => {
                    for (x, v) in av.iter_mut().zip(out) {
                        *x += score as f32 * v;
                    }
                }
            }
        }
        per_attention[owner].insert(t, acc.expect("k >= 1"));
    }

    let meta_cost = cost.latency.meta_write_ns();
    let tick = cost.latency.poll_interval_ns();
    let stage1_meta_updates = (tmap.expert_nodes.len() * tmap.num_trampolines()) as u64;
    let stage1_done = start_ns
        + meta_cost * tmap.num_trampolines() as u64
        + tick
        + tram_bytes.iter().map(|&b| cost.xfer_ns(b)).max().unwrap_or(0);
    let t_end = stage1_done
        + tram_bytes
            .iter()
            .map(|&b| if b > 0 { cost.xfer_ns(b) } else { 0 })
            .max()
            .unwrap_or(0);

    Ok(E2aResult {
        summary: CollectiveSummary {
            collective: "e2a".into(),
            participants: a + tmap.expert_nodes.len(),
            bytes: total_bytes,
            t_start: start_ns,
            t_end,
            straggler_node: None,
        },
        per_attention,
        stage1_meta_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost() -> CollectiveCostModel {
        CollectiveCostModel::default()
    }

    fn tok(idx: usize, vals: &[f32]) -> TokenPayload {
        TokenPayload::fp16(idx, vals.to_vec())
    }

    #[test]
    fn single_token_routes_to_one_rank() {
        let cfg = EpConfig::uniform(4, 2);
        let gating = GatingOutput {
            num_logical_experts: 8,
            topk: vec![vec![(6, 1.0)]], // expert 6 lives on rank 3
        };
        let tokens = vec![vec![tok(0, &[1.0, 2.0])], vec![], vec![], vec![]];
        let r = dispatch(&tokens, &gating, &cfg, false, &cost(), 0, &[]).unwrap();
        assert_eq!(r.per_rank[3].len(), 1);
        assert_eq!(r.per_rank[0].len() + r.per_rank[1].len() + r.per_rank[2].len(), 0);
        assert_eq!(r.per_rank[3][0].expert, 6);
    }

    #[test]
    fn global_batch_accounting_ep128() {
        // batch-per-die 96 on EP128 puts 12,288 token copies in flight at k=1
        let cfg = EpConfig::uniform(128, 2);
        let per_die = 96usize;
        let mut tokens = Vec::new();
        let mut topk = Vec::new();
        let mut idx = 0;
        for _ in 0..128 {
            let mut v = Vec::new();
            for _ in 0..per_die {
                v.push(tok(idx, &[0.0]));
                topk.push(vec![(idx % 256, 1.0)]);
                idx += 1;
            }
            tokens.push(v);
        }
        let gating = GatingOutput {
            num_logical_experts: 256,
            topk,
        };
        let r = dispatch(&tokens, &gating, &cfg, false, &cost(), 0, &[]).unwrap();
        let delivered: usize = r.per_rank.iter().map(|v| v.len()).sum();
        assert_eq!(delivered, 96 * 128);
        assert_eq!(delivered, 12_288);
    }

    #[test]
    fn quantize_halves_wire_bytes() {
        let cfg = EpConfig::uniform(2, 1);
        let gating = GatingOutput {
            num_logical_experts: 2,
            topk: vec![vec![(0, 0.5), (1, 0.5)]; 8],
        };
        let tokens = vec![
            (0..8).map(|i| tok(i, &[0.0; 64])).collect::<Vec<_>>(),
            vec![],
        ];
        let full = dispatch(&tokens, &gating, &cfg, false, &cost(), 0, &[]).unwrap();
        let quant = dispatch(&tokens, &gating, &cfg, true, &cost(), 0, &[]).unwrap();
        assert_eq!(quant.bytes_on_wire * 2, full.bytes_on_wire);
    }

    #[test]
    fn barrier_precedes_all_pulls() {
        let cfg = EpConfig::uniform(4, 1);
        let gating = GatingOutput {
            num_logical_experts: 4,
            topk: vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)], vec![(3, 1.0)]],
        };
        let tokens: Vec<Vec<TokenPayload>> =
            (0..4).map(|i| vec![tok(i, &[1.0; 16])]).collect();
        // rank 2 straggles
        let r = dispatch(&tokens, &gating, &cfg, false, &cost(), 0, &[0, 0, 50_000, 0]).unwrap();
        assert_eq!(r.summary.straggler_node, Some(2));
        for &m in &r.meta_published {
            assert!(m < r.barrier_ns);
        }
        for &d in &r.per_rank_done {
            assert!(d > r.barrier_ns);
        }
    }

    #[test]
    fn combine_weighted_example() {
        // k=2, scores (0.25, 0.75), experts multiply by 2 and 4 -> 3.5x
        let gating = GatingOutput {
            num_logical_experts: 2,
            topk: vec![vec![(0, 0.25), (1, 0.75)]],
        };
        let x = vec![1.0f32, -2.0, 0.5];
        let mut outs = ExpertOutputs::default();
        outs.insert(0, 0, x.iter().map(|v| 2.0 * v).collect());
        outs.insert(0, 1, x.iter().map(|v| 4.0 * v).collect());
        let r = combine(&outs, &gating, &[0], &cost(), 0).unwrap();
        for (got, want) in r.per_token[&0].iter().zip(x.iter().map(|v| 3.5 * v)) {
            assert!((got - want).abs() / want.abs().max(1e-9) < 1e-6);
        }
    }

    #[test]
    fn combine_roundtrip_identity() {
        let cfg = EpConfig::uniform(2, 1);
        let gating = GatingOutput {
            num_logical_experts: 2,
            topk: vec![vec![(1, 1.0)]],
        };
        let x = vec![3.0f32, 4.0, 5.0];
        let tokens = vec![vec![tok(0, &x)], vec![]];
        let d = dispatch(&tokens, &gating, &cfg, false, &cost(), 0, &[]).unwrap();
        let mut outs = ExpertOutputs::default();
        for rank in &d.per_rank {
            for rt in rank {
                // identity expert
                outs.insert(rt.token_index, rt.expert, rt.payload.hidden.clone());
            }
        }
        let c = combine(&outs, &gating, &[0], &cost(), 0).unwrap();
        assert_eq!(c.per_token[&0], x);
    }

    #[test]
    fn combine_missing_output_faults() {
        let gating = GatingOutput {
            num_logical_experts: 2,
            topk: vec![vec![(0, 0.5), (1, 0.5)]],
        };
        let mut outs = ExpertOutputs::default();
        outs.insert(0, 0, vec![1.0]);
        assert!(matches!(
            combine(&outs, &gating, &[0], &cost(), 0),
            Err(SimError::IncompleteCombine { token: 0, expert: 1 })
        ));
    }

    #[test]
    fn dispatch_faster_than_combine_above_batch_32() {
        let c = cost();
        for b in [40u64, 48, 96, 128] {
            assert!(
                c.dispatch_latency_us(b) < c.combine_latency_us(b),
                "batch {b}: dispatch should win"
            );
        }
        for b in [4u64, 16, 32] {
            assert!(
                c.dispatch_latency_us(b) >= c.combine_latency_us(b),
                "batch {b}: combine should win (quantize overhead dominates)"
            );
        }
    }

    fn nodes(range: std::ops::Range<u32>) -> Vec<NodeId> {
        range.map(NodeId).collect()
    }

    #[test]
    fn trampoline_partition_covers_non_trampolines_exactly_once() {
        let tmap = TrampolineMap::build(nodes(0..160), nodes(480..768)).unwrap();
        assert_eq!(tmap.num_trampolines(), 160);
        let mut seen = vec![false; 288];
        for (t, set) in tmap.second_stage.iter().enumerate() {
            for &idx in set {
                assert!(idx >= 160);
                assert!(!seen[idx], "node forwarded twice");
                seen[idx] = true;
                assert_eq!(tmap.owner_trampoline(idx), t);
            }
        }
        assert_eq!(seen[160..].iter().filter(|&&s| s).count(), 128);
    }

    #[test]
    fn symmetric_layout_degenerates_to_direct_dispatch() {
        let tmap = TrampolineMap::build(nodes(0..4), nodes(4..8)).unwrap();
        assert!(tmap.second_stage.iter().all(|s| s.is_empty()));
        let gating = GatingOutput {
            num_logical_experts: 4,
            topk: vec![vec![(2, 1.0)]],
        };
        let toks = vec![vec![tok(0, &[1.0])], vec![], vec![], vec![]];
        let r = a2e(&toks, &gating, &[0, 1, 2, 3], &tmap, &cost(), 0).unwrap();
        assert_eq!(r.stage2_meta_updates, 0);
        assert_eq!(r.per_expert_node[2].len(), 1);
        assert_eq!(r.per_expert_node[2][0].via_trampoline, 2);
    }

    #[test]
    fn a2e_placement_matches_direct_oracle() {
        // asymmetric: 3 attention nodes, 8 expert nodes, 8 experts
        let tmap = TrampolineMap::build(nodes(0..3), nodes(3..11)).unwrap();
        let expert_node_of_expert: Vec<usize> = (0..8).collect();
        let gating = GatingOutput {
            num_logical_experts: 8,
            topk: vec![
                vec![(0, 0.3), (7, 0.7)],
                vec![(4, 1.0)],
                vec![(5, 0.5), (6, 0.5)],
            ],
        };
        let toks = vec![
            vec![tok(0, &[1.0]), tok(1, &[2.0])],
            vec![tok(2, &[3.0])],
            vec![],
        ];
        let r = a2e(&toks, &gating, &expert_node_of_expert, &tmap, &cost(), 0).unwrap();
        // direct oracle: every (token, expert) pair lands on its expert node
        let mut want: Vec<(usize, usize)> = Vec::new();
        for toks_a in &toks {
            for t in toks_a {
                for &(e, _) in &gating.topk[t.token_index] {
                    want.push((t.token_index, expert_node_of_expert[e]));
                }
            }
        }
        want.sort_unstable();
        let mut got: Vec<(usize, usize)> = Vec::new();
        for (node, dels) in r.per_expert_node.iter().enumerate() {
            for d in dels {
                got.push((d.token_index, node));
            }
        }
        got.sort_unstable();
        assert_eq!(got, want);
        // metadata fan-out is to trampolines, strictly fewer than experts
        assert_eq!(r.stage1_meta_updates, 3 * 3);
        assert!(r.stage1_meta_updates < (3 * 8) as u64);
    }

    #[test]
    fn e2a_identity_roundtrip_and_weighted_match() {
        let tmap = TrampolineMap::build(nodes(0..2), nodes(2..6)).unwrap();
        let expert_node_of_expert: Vec<usize> = vec![0, 1, 2, 3];
        let gating = GatingOutput {
            num_logical_experts: 4,
            topk: vec![vec![(3, 1.0)], vec![(0, 0.25), (1, 0.75)]],
        };
        let toks = vec![vec![tok(0, &[2.0, 4.0])], vec![tok(1, &[1.0, 1.0])]];
        let r = a2e(&toks, &gating, &expert_node_of_expert, &tmap, &cost(), 0).unwrap();

        let mut outs = ExpertOutputs::default();
        for dels in &r.per_expert_node {
            for d in dels {
                // identity experts
                outs.insert(d.token_index, d.expert, d.payload.hidden.clone());
            }
        }
        let owner: BTreeMap<usize, usize> = [(0, 0), (1, 1)].into();
        let back = e2a(
            &outs,
            &gating,
            &owner,
            &expert_node_of_expert,
            &tmap,
            &cost(),
            0,
        )
        .unwrap();
        // token 0: identity with weight 1 -> exact roundtrip
        assert_eq!(back.per_attention[0][&0], vec![2.0, 4.0]);
        // token 1: 0.25*x + 0.75*x = x for identity experts
        for v in &back.per_attention[1][&1] {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_cannot_exceed_expert_nodes() {
        assert!(TrampolineMap::build(nodes(0..5), nodes(5..8)).is_err());
    }
}
