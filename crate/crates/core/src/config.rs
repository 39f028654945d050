//! Run configuration: the TOML schema consumed by the CLI, validated into
//! the simulator's native types.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fabric::{build_topology, LatencyModel, Topology};
use crate::pipeline::{Acceptance, MtpConfig};
use crate::scheduler::CostModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySection {
    pub chips: u32,
    pub dies_per_chip: u32,
    pub cores_per_die: u32,
}

impl TopologySection {
    pub fn build(&self) -> Result<Topology> {
        build_topology(self.chips, self.dies_per_chip, self.cores_per_die)
    }
}

fn default_latency() -> LatencyModel {
    LatencyModel::default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencySection {
    pub mem_startup_us: f64,
    pub dma_startup_us: f64,
    pub bandwidth_gbps: f64,
    pub dma_bandwidth_gbps: f64,
    pub core_efficiency: f64,
}

impl Default for LatencySection {
    fn default() -> Self {
        let m = default_latency();
        Self {
            mem_startup_us: m.mem_startup_us,
            dma_startup_us: m.dma_startup_us,
            bandwidth_gbps: m.bandwidth_gbps,
            dma_bandwidth_gbps: m.dma_bandwidth_gbps,
            core_efficiency: m.core_efficiency,
        }
    }
}

impl LatencySection {
    pub fn build(&self) -> Result<LatencyModel> {
        let model = LatencyModel {
            mem_startup_us: self.mem_startup_us,
            dma_startup_us: self.dma_startup_us,
            bandwidth_gbps: self.bandwidth_gbps,
            dma_bandwidth_gbps: self.dma_bandwidth_gbps,
            core_efficiency: self.core_efficiency,
            ..LatencyModel::default()
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentMode {
    ColocatedPd,
    DisaggPd,
    DisaggMa,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentSection {
    pub mode: DeploymentMode,
    // prefill-decode fields
    pub prefill_tes: Option<usize>,
    pub decode_tes: Option<usize>,
    // MoE-attention fields
    pub domains: Option<usize>,
    pub attention_nodes: Option<usize>,
    pub expert_nodes: Option<usize>,
    pub microbatches: Option<usize>,
    pub layers: Option<usize>,
    // decode timing inputs
    #[serde(default = "default_forward_ms")]
    pub forward_ms: f64,
    #[serde(default = "default_gap_ms")]
    pub gap_ms: f64,
    #[serde(default = "default_batch_per_die")]
    pub batch_per_die: u64,
}

fn default_forward_ms() -> f64 {
    93.0
}
fn default_gap_ms() -> f64 {
    2.0
}
fn default_batch_per_die() -> u64 {
    60
}

impl DeploymentSection {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            DeploymentMode::DisaggMa => {
                for (name, v) in [
                    ("deployment.domains", self.domains),
                    ("deployment.attention_nodes", self.attention_nodes),
                    ("deployment.expert_nodes", self.expert_nodes),
                ] {
                    match v {
                        None => {
                            return Err(SimError::Config(format!(
                                "disagg_ma requires {name}"
                            )))
                        }
                        Some(0) => {
                            return Err(SimError::Config(format!("{name} must be >= 1")))
                        }
                        _ => {}
                    }
                }
                let a = self.attention_nodes.unwrap();
                let e = self.expert_nodes.unwrap();
                let d = self.domains.unwrap();
                if a % d != 0 {
                    return Err(SimError::Config(
                        "attention_nodes must divide evenly across domains".into(),
                    ));
                }
                if a / d > e {
                    return Err(SimError::Config(
                        "per-domain attention nodes exceed expert nodes".into(),
                    ));
                }
            }
            DeploymentMode::DisaggPd => {
                if self.prefill_tes.unwrap_or(0) == 0 || self.decode_tes.unwrap_or(0) == 0 {
                    return Err(SimError::Config(
                        "disagg_pd requires prefill_tes and decode_tes >= 1".into(),
                    ));
                }
            }
            DeploymentMode::ColocatedPd => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerSection {
    pub weight_prefix_hit: f64,
    pub weight_length: f64,
    pub weight_load: f64,
    pub block_size_tokens: u64,
    pub batch_limit: u64,
    pub kv_blocks_per_group: u64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let c = CostModel::default();
        Self {
            weight_prefix_hit: c.weight_prefix_hit,
            weight_length: c.weight_length,
            weight_load: c.weight_load,
            block_size_tokens: 128,
            batch_limit: 64,
            kv_blocks_per_group: 4_096,
        }
    }
}

impl SchedulerSection {
    pub fn cost_model(&self) -> Result<CostModel> {
        let c = CostModel {
            weight_prefix_hit: self.weight_prefix_hit,
            weight_length: self.weight_length,
            weight_load: self.weight_load,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EplbSection {
    pub budget: usize,
    pub slice_width_ms: u64,
    pub slots_per_node: usize,
}

impl Default for EplbSection {
    fn default() -> Self {
        Self {
            budget: 8,
            // one simulated minute per slice
            slice_width_ms: 60_000,
            slots_per_node: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MtpSection {
    pub num_mtp_layers: usize,
    pub drafts_per_step: usize,
    pub acceptance_rate: f64,
    pub bernoulli: bool,
}

impl Default for MtpSection {
    fn default() -> Self {
        Self {
            num_mtp_layers: 1,
            drafts_per_step: 1,
            acceptance_rate: 0.9,
            bernoulli: false,
        }
    }
}

impl MtpSection {
    pub fn build(&self, seed: u64) -> Result<MtpConfig> {
        let cfg = MtpConfig {
            num_mtp_layers: self.num_mtp_layers,
            drafts_per_step: self.drafts_per_step,
            acceptance: if self.bernoulli {
                Acceptance::Bernoulli {
                    rate: self.acceptance_rate,
                    seed,
                }
            } else {
                Acceptance::Fixed(self.acceptance_rate)
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadRequest {
    pub prompt_len: u64,
    pub max_output: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSection {
    /// "fixed" spaces arrivals evenly at `rate` req/s; "poisson" draws
    /// exponential gaps from the run seed.
    pub arrival: String,
    pub rate: f64,
    pub requests: Vec<WorkloadRequest>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            arrival: "fixed".into(),
            rate: 100.0,
            requests: Vec::new(),
        }
    }
}

impl WorkloadSection {
    pub fn validate(&self) -> Result<()> {
        if self.arrival != "fixed" && self.arrival != "poisson" {
            return Err(SimError::Config(format!(
                "workload.arrival must be \"fixed\" or \"poisson\", got {:?}",
                self.arrival
            )));
        }
        if self.rate <= 0.0 {
            return Err(SimError::Config("workload.rate must be positive".into()));
        }
        if self.requests.iter().any(|r| r.prompt_len == 0) {
            return Err(SimError::Config("prompt_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Top-level run configuration, one TOML document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologySection,
    #[serde(default)]
    pub latency: LatencySection,
    pub deployment: DeploymentSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub eplb: EplbSection,
    #[serde(default)]
    pub mtp: MtpSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    /// Optional path to a fault-schedule JSON file.
    #[serde(default)]
    pub faults: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.build()?;
        self.latency.build()?;
        self.deployment.validate()?;
        self.scheduler.cost_model()?;
        self.mtp.build(self.seed)?;
        self.workload.validate()?;
        Ok(())
    }
}
