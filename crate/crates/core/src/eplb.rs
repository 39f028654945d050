//! Expert-placement load balancing: load collection, greedy redundant-expert
//! selection, least-loaded placement, rotation mapping tables, and the
//! four-phase live reconfiguration state machine.

use serde::{Deserialize, Serialize};

use crate::engine::TimeNs;
use crate::error::{Result, SimError};

/// One (token -> expert) routing observation captured after gating.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoutingEvent {
    pub time_ns: TimeNs,
    pub layer: usize,
    pub expert: usize,
}

/// Per-layer, per-expert token counts bucketed into fixed-width timeslices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadTable {
    #[serde(rename = "layers")]
    pub num_layers: usize,
    #[serde(rename = "experts")]
    pub num_experts: usize,
    #[serde(rename = "slices")]
    pub num_slices: usize,
    /// `counts[layer][expert][slice]`
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl LoadTable {
    pub fn zeros(num_layers: usize, num_experts: usize, num_slices: usize) -> Self {
        Self {
            num_layers,
            num_experts,
            num_slices,
            counts: vec![vec![vec![0; num_slices]; num_experts]; num_layers],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts
            .iter()
            .flat_map(|l| l.iter())
            .flat_map(|e| e.iter())
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: LoadTable = serde_json::from_str(s)?;
        if t.counts.len() != t.num_layers
            || t.counts
                .iter()
                .any(|l| l.len() != t.num_experts || l.iter().any(|e| e.len() != t.num_slices))
        {
            return Err(SimError::Config("load table shape mismatch".into()));
        }
        Ok(t)
    }
}

/// Bucket routing events into a load table. Slice `t` covers
/// `[t * slice_width_ns, (t + 1) * slice_width_ns)`.
pub fn collect_load(
    events: &[RoutingEvent],
    slice_width_ns: TimeNs,
    num_layers: usize,
    num_experts: usize,
) -> Result<LoadTable> {
    if slice_width_ns == 0 {
        return Err(SimError::Config("slice width must be positive".into()));
    }
    let num_slices = events
        .iter()
        .map(|e| (e.time_ns / slice_width_ns) as usize + 1)
        .max()
        .unwrap_or(1);
    let mut table = LoadTable::zeros(num_layers, num_experts, num_slices);
    for ev in events {
        if ev.layer >= num_layers || ev.expert >= num_experts {
            return Err(SimError::Config(format!(
                "routing event out of range: layer {} expert {}",
                ev.layer, ev.expert
            )));
        }
        let t = (ev.time_ns / slice_width_ns) as usize;
        table.counts[ev.layer][ev.expert][t] += 1;
    }
    Ok(table)
}

/// Split `count` tokens evenly across `m` replicas, remainder going to the
/// lowest-index replicas. Shares always sum back to `count`.
pub fn split_evenly(count: u64, m: usize) -> Vec<u64> {
    debug_assert!(m >= 1);
    let base = count / m as u64;
    let rem = (count % m as u64) as usize;
    (0..m).map(|i| base + u64::from(i < rem)).collect()
}

/// The largest per-replica share after even splitting.
fn max_share(count: u64, m: usize) -> u64 {
    split_evenly(count, m)[0]
}

/// Argmax over experts for one slice; ties break to the lowest expert id.
pub fn hottest_expert(load: &LoadTable, layer: usize, slice: usize) -> usize {
    let mut best = 0usize;
    let mut best_count = load.counts[layer][0][slice];
    for e in 1..load.num_experts {
        let c = load.counts[layer][e][slice];
        if c > best_count {
            best = e;
            best_count = c;
        }
    }
    best
}

/// Layer load under a replica allocation: per slice, the hottest effective
/// (post-split) expert count, summed over slices.
pub fn layer_load_with_replicas(load: &LoadTable, layer: usize, replicas: &[usize]) -> u64 {
    (0..load.num_slices)
        .map(|t| {
            (0..load.num_experts)
                .map(|e| max_share(load.counts[layer][e][t], replicas[e]))
                .max()
                .unwrap_or(0)
        })
        .sum()
}

/// Layer load with no redundancy (one replica per expert).
pub fn layer_load(load: &LoadTable, layer: usize) -> u64 {
    layer_load_with_replicas(load, layer, &vec![1; load.num_experts])
}

/// Greedy redundant-expert selection: R iterations, each granting one extra
/// replica to the candidate (an expert hottest in at least one slice) whose
/// split minimizes the simulated layer load. An expert may be picked more
/// than once. Returns the selections in order.
pub fn select_redundant(load: &LoadTable, layer: usize, budget: usize) -> Vec<usize> {
    let mut replicas = vec![1usize; load.num_experts];
    let mut selected = Vec::with_capacity(budget);
    for _ in 0..budget {
        // candidates: hottest in >= 1 slice under current effective counts
        let mut candidates = Vec::new();
        for t in 0..load.num_slices {
            let h = (0..load.num_experts)
                .max_by(|&a, &b| {
                    max_share(load.counts[layer][a][t], replicas[a])
                        .cmp(&max_share(load.counts[layer][b][t], replicas[b]))
                        .then(b.cmp(&a)) // lowest index wins ties
                })
                .unwrap_or(0);
            if !candidates.contains(&h) {
                candidates.push(h);
            }
        }
        candidates.sort_unstable();
        let mut best: Option<(u64, usize)> = None;
        for &c in &candidates {
            replicas[c] += 1;
            let l = layer_load_with_replicas(load, layer, &replicas);
            replicas[c] -= 1;
            if best.map_or(true, |(bl, _)| l < bl) {
                best = Some((l, c));
            }
        }
        let Some((_, chosen)) = best else { break };
        replicas[chosen] += 1;
        selected.push(chosen);
    }
    selected
}

/// Where each replica of one MoE layer lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaAssignment {
    pub num_experts: usize,
    /// Physical slot ids per logical expert, primary first.
    pub slots_of_expert: Vec<Vec<usize>>,
}

impl ReplicaAssignment {
    /// Identity layout: expert e's primary occupies slot e, no redundancy.
    pub fn identity(num_experts: usize) -> Self {
        Self {
            num_experts,
            slots_of_expert: (0..num_experts).map(|e| vec![e]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut used = std::collections::BTreeSet::new();
        for (e, slots) in self.slots_of_expert.iter().enumerate() {
            if slots.is_empty() {
                return Err(SimError::Placement { unplaced: vec![e] });
            }
            for &s in slots {
                if !used.insert(s) {
                    return Err(SimError::Config(format!("slot {s} hosts two experts")));
                }
            }
        }
        Ok(())
    }

    /// Drop everything but the primary slots (the disable window of a live
    /// reconfiguration).
    pub fn primaries_only(&self) -> Self {
        Self {
            num_experts: self.num_experts,
            slots_of_expert: self.slots_of_expert.iter().map(|s| vec![s[0]]).collect(),
        }
    }

    pub fn replica_counts(&self) -> Vec<usize> {
        self.slots_of_expert.iter().map(|s| s.len()).collect()
    }
}

/// One placed redundant replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub expert: usize,
    pub node: usize,
    pub slot: usize,
}

/// Assign selected replicas (with their loads) to nodes: heaviest replica
/// first, each to the currently least-loaded node with a free redundancy
/// slot. Ties break to the lowest node id. Slot ids are globally unique:
/// `num_primary_slots + node * slots_per_node + local_index`.
pub fn place_replicas(
    selected: &[(usize, u64)],
    node_loads: &[u64],
    free_slots: &[usize],
    first_free_slot_id: usize,
) -> Result<Vec<Placement>> {
    if node_loads.len() != free_slots.len() {
        return Err(SimError::Config("node_loads/free_slots length mismatch".into()));
    }
    let slots_per_node = free_slots.iter().copied().max().unwrap_or(0);
    let mut loads = node_loads.to_vec();
    let mut free = free_slots.to_vec();
    let mut used = vec![0usize; free.len()];

    let mut order: Vec<usize> = (0..selected.len()).collect();
    // heaviest first; ties keep selection order
    order.sort_by(|&a, &b| selected[b].1.cmp(&selected[a].1).then(a.cmp(&b)));

    let mut out = vec![
        Placement {
            expert: 0,
            node: 0,
            slot: 0
        };
        selected.len()
    ];
    let mut unplaced = Vec::new();
    for i in order {
        let (expert, load) = selected[i];
        let node = (0..loads.len())
            .filter(|&n| free[n] > 0)
            .min_by(|&a, &b| loads[a].cmp(&loads[b]).then(a.cmp(&b)));
        match node {
            Some(n) => {
                let slot = first_free_slot_id + n * slots_per_node + used[n];
                used[n] += 1;
                free[n] -= 1;
                loads[n] += load;
                out[i] = Placement { expert, node: n, slot };
            }
            None => unplaced.push(expert),
        }
    }
    if !unplaced.is_empty() {
        return Err(SimError::Placement { unplaced });
    }
    Ok(out)
}

/// Attach placed replicas to an identity layout.
pub fn assignment_with_replicas(num_experts: usize, placements: &[Placement]) -> ReplicaAssignment {
    let mut a = ReplicaAssignment::identity(num_experts);
    for p in placements {
        a.slots_of_expert[p.expert].push(p.slot);
    }
    a
}

/// Position-deterministic routing table of shape (batch_size, num_experts).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    pub batch_size: usize,
    pub num_experts: usize,
    /// `entries[row][expert]` = physical slot id.
    pub entries: Vec<Vec<usize>>,
}

/// Build the rotation table: the column for an expert cycles through its
/// replica slots in ascending slot order, so every slot appears either
/// floor(batch/m) or ceil(batch/m) times.
pub fn build_mapping(assignment: &ReplicaAssignment, batch_size: usize) -> MappingTable {
    let rotation: Vec<Vec<usize>> = assignment
        .slots_of_expert
        .iter()
        .map(|slots| {
            let mut s = slots.clone();
            s.sort_unstable();
            s
        })
        .collect();
    let entries = (0..batch_size)
        .map(|r| rotation.iter().map(|s| s[r % s.len()]).collect())
        .collect();
    MappingTable {
        batch_size,
        num_experts: assignment.num_experts,
        entries,
    }
}

/// Resolve one token's physical slot without any communication.
pub fn route_token(token_pos: usize, logical_expert: usize, table: &MappingTable) -> usize {
    table.entries[token_pos % table.batch_size][logical_expert]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconfigPhase {
    /// New expert weights stream into spare memory; routing unchanged.
    Prefetch,
    /// Redundant slots disabled; every column falls back to its primary.
    DisableRedundant,
    /// Weights install into the now-idle redundant slots.
    AsyncLoad,
    /// New assignment takes effect; rotation resumes.
    Restore,
}

/// The mapping in force during one reconfiguration phase.
#[derive(Debug, Clone)]
pub struct PhaseMapping {
    pub phase: ReconfigPhase,
    pub mapping: MappingTable,
}

/// Live reconfiguration: four ordered phases during which inference never
/// stops and every logical expert always resolves to an enabled slot.
pub fn reconfigure(
    current: &ReplicaAssignment,
    next: &ReplicaAssignment,
    batch_size: usize,
) -> Result<Vec<PhaseMapping>> {
    current.validate()?;
    next.validate()?;
    if current.num_experts != next.num_experts {
        return Err(SimError::Config("expert count changed across reconfigure".into()));
    }
    Ok(vec![
        PhaseMapping {
            phase: ReconfigPhase::Prefetch,
            mapping: build_mapping(current, batch_size),
        },
        PhaseMapping {
            phase: ReconfigPhase::DisableRedundant,
            mapping: build_mapping(&current.primaries_only(), batch_size),
        },
        PhaseMapping {
            phase: ReconfigPhase::AsyncLoad,
            mapping: build_mapping(&current.primaries_only(), batch_size),
        },
        PhaseMapping {
            phase: ReconfigPhase::Restore,
            mapping: build_mapping(next, batch_size),
        },
    ])
}

/// Selection and placement report for one layer, as consumed by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub budget: usize,
    pub selected: Vec<usize>,
    pub placements: Vec<Placement>,
    pub native_load: u64,
    pub balanced_load: u64,
}

/// End-to-end per-layer balancing: greedy selection, then least-loaded
/// placement across `num_nodes` nodes with `slots_per_node` spare slots.
pub fn analyze_layer(
    load: &LoadTable,
    layer: usize,
    budget: usize,
    num_nodes: usize,
    slots_per_node: usize,
) -> Result<LayerPlan> {
    let selected = select_redundant(load, layer, budget);
    let native = layer_load(load, layer);
    let mut replicas = vec![1usize; load.num_experts];
    for &e in &selected {
        replicas[e] += 1;
    }
    let balanced = layer_load_with_replicas(load, layer, &replicas);

    // replica load estimate: the expert's post-split max share
    let with_loads: Vec<(usize, u64)> = selected
        .iter()
        .map(|&e| {
            let total: u64 = load.counts[layer][e].iter().sum();
            (e, max_share(total, replicas[e]))
        })
        .collect();
    let placements = place_replicas(
        &with_loads,
        &vec![0; num_nodes],
        &vec![slots_per_node; num_nodes],
        load.num_experts,
    )?;
    Ok(LayerPlan {
        layer,
        budget,
        selected,
        placements,
        native_load: native,
        balanced_load: balanced,
    })
}
