//! Discrete-event simulator of a rack-scale pool of multi-tenant FPGA
//! SmartNICs.
//!
//! Tenants submit DAGs of network tasks (NTs); the pool cuts them into
//! chains, places chains into partially reconfigurable regions across the
//! rack, schedules packets through them with credit-based whole-chain
//! dispatch, and shares everything fairly in space (dominant-resource
//! fairness over FPGA area-bandwidth, memory and port bandwidth) and in time
//! (per-instance bandwidth shares from monitored intended load, enforced at
//! the ingress ports). Runs are deterministic: one config plus one seed give
//! byte-identical reports.
//!
//! Start with the `examples/` directory — each file is a runnable tour of
//! one capability (`cargo run --example chain_scheduling`, etc.). The same
//! machinery is scriptable through the thin `nicpool` binary
//! (`run`, `sweep`, `capex`, `validate`, `dump-defaults`).

pub mod capex;
pub mod config;
pub mod engine;
pub mod fairness;
pub mod ids;
pub mod metrics;
pub mod model;
pub mod nt;
pub mod planner;
pub mod rack;
pub mod region;
pub mod scheduler;
pub mod sim;
pub mod units;
pub mod vmem;
pub mod workload;
