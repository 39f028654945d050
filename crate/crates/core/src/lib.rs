//! podsim-core — deterministic discrete-event simulator for disaggregated
//! MoE serving over a shared-memory NPU fabric.
//!
//! The crate models a SuperPod-style deployment at desk scale: per-die
//! memory areas with ring-buffer messaging, point-to-point and all-to-all
//! collectives, expert placement load balancing, DP-group scheduling,
//! prefill/decode and MoE/attention disaggregation pipelines, speculative
//! decode, and failure detection/recovery. Kernels are cost functions driven
//! by a calibrated latency model; protocol semantics (chunking, ring-buffer
//! windows, acknowledgment ordering, token routing) are executed exactly.
//!
//! Time is carried as integer nanoseconds; every run is deterministic given
//! a topology, config, and seed.

pub mod config;
pub mod engine;
pub mod eplb;
pub mod error;
pub mod fabric;
pub mod pipeline;
pub mod reliability;
pub mod scheduler;
pub mod xccl_collectives;
pub mod xccl_p2p;

pub use engine::{EventQueue, TimeNs, Trace, TraceRow, NS_PER_MS, NS_PER_US};
pub use error::SimError;
pub use fabric::{FabricSim, LatencyModel, NodeId, Topology};
