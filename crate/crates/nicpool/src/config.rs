//! Scenario configuration: one TOML file describes a whole run.
//!
//! Everything has a default, `deny_unknown_fields` rejects typos, and a
//! parsed config serializes back to TOML that parses to the same value, so
//! configs can be generated, edited and round-tripped safely. String names
//! are resolved into dense ids by [`ScenarioConfig::compile`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capex::CostParams;
use crate::ids::{NtId, UserId};
use crate::model::{NetworkTask, NtDag};
use crate::nt::BehaviorSpec;
use crate::units::{self, Cycles};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub seed: u64,
    pub duration_us: f64,
    /// Monitoring/allocation epoch.
    pub epoch_us: f64,
    /// Epochs excluded from summary statistics.
    pub warmup_epochs: u32,
    /// Emit one CSV row per delivered/dropped packet.
    pub packet_trace: bool,
    /// Also report on-chip latency projected to a 2 GHz ASIC clock.
    pub asic_projection: bool,
    /// Safety valve: abort a runaway run after this many events (0 = off).
    pub max_events: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_us: 10_000.0,
            epoch_us: 20.0,
            warmup_epochs: 25,
            packet_trace: false,
            asic_projection: false,
            max_events: 200_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Ring,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RackSection {
    pub nics: u32,
    pub topology: Topology,
    /// NIC-to-NIC link.
    pub link_gbps: f64,
    pub link_latency_ns: f64,
    /// Endpoint-to-NIC access link.
    pub endpoint_gbps: f64,
    pub endpoint_latency_ns: f64,
    /// Ingress/egress port rate of each NIC.
    pub port_gbps: f64,
    pub gossip_period_us: f64,
    /// Rack-level load balancing (redirection and migration).
    pub distribution: bool,
    /// Test-only: drop this fraction of endpoint-to-NIC data packets.
    pub loss_rate: f64,
}

impl Default for RackSection {
    fn default() -> Self {
        Self {
            nics: 1,
            topology: Topology::Ring,
            link_gbps: 100.0,
            link_latency_ns: 1_000.0,
            endpoint_gbps: 100.0,
            endpoint_latency_ns: 200.0,
            port_gbps: 100.0,
            gossip_period_us: 100.0,
            distribution: false,
            loss_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMode {
    /// Equal static region split, no cross-tenant sharing.
    Static,
    /// DRF space allocation, still no cross-tenant time sharing.
    Drf,
    /// DRF space allocation plus shared NTs and harvested bandwidth.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingMode {
    /// Reserve credits for a whole chain in one scheduler visit when
    /// possible, falling back to per-NT dispatch under credit pressure.
    Chain,
    /// Always one scheduler visit per NT (the conservative baseline).
    PerNt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpgaDemandForm {
    /// requested_gbps x total DAG area.
    BandwidthArea,
    /// sum over NTs of area x requested_gbps / nt max_gbps.
    AreaRatio,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NicSection {
    pub regions: u32,
    /// Area units per region.
    pub region_area: u32,
    /// Bandwidth one region sustains end to end.
    pub region_gbps: f64,
    /// Full-region bitstream size (MiB); chains scale by area fraction.
    pub region_bitstream_mb: f64,
    /// Partial reconfiguration throughput (MiB/s).
    pub pr_mb_per_s: f64,
    pub credits_per_nt: u32,
    pub scheduler_visit_cycles: u64,
    /// On-board memory for NT state (GiB).
    pub memory_gb: f64,
    /// Bandwidth for spilling/restoring NT state on a context switch (Gbps).
    pub state_save_gbps: f64,
    /// Payload buffer.
    pub packet_store_mb: f64,
    /// Max de-scheduled chains kept warm (0 disables the victim cache).
    pub victim_capacity: u32,
    /// Start PR for planned chains at deploy time instead of first packet.
    pub prelaunch: bool,
    pub sharing_enabled: bool,
    pub dag_parallelism: bool,
    pub remote_swap: bool,
    pub fairness: FairnessMode,
    pub scheduling: SchedulingMode,
    pub fpga_demand_form: FpgaDemandForm,
    pub ewma_alpha: f64,
    /// Add an instance when measured load exceeds this fraction of capacity.
    pub autoscale_up: f64,
    /// Drop an instance when measured load falls below this fraction.
    pub autoscale_down: f64,
}

impl Default for NicSection {
    fn default() -> Self {
        Self {
            regions: 3,
            region_area: 2,
            region_gbps: 100.0,
            region_bitstream_mb: 4.0,
            pr_mb_per_s: 800.0,
            credits_per_nt: 8,
            scheduler_visit_cycles: 16,
            memory_gb: 10.0,
            state_save_gbps: 80.0,
            packet_store_mb: 64.0,
            victim_capacity: 16,
            prelaunch: true,
            sharing_enabled: true,
            dag_parallelism: true,
            remote_swap: false,
            fairness: FairnessMode::Full,
            scheduling: SchedulingMode::Chain,
            fpga_demand_form: FpgaDemandForm::BandwidthArea,
            ewma_alpha: 0.25,
            autoscale_up: 0.9,
            autoscale_down: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NtEntry {
    pub name: String,
    pub area: u32,
    pub max_gbps: f64,
    pub latency_cycles: u64,
    pub stateful: bool,
    /// State spilled on context switch / migration (bytes).
    pub state_bytes: u64,
    /// On-board memory reserved per instance (bytes).
    pub mem_footprint_bytes: u64,
    pub shareable: bool,
    pub egress_factor: f64,
    pub behavior: BehaviorSpec,
}

impl Default for NtEntry {
    fn default() -> Self {
        Self {
            name: "nt".into(),
            area: 1,
            max_gbps: 100.0,
            latency_cycles: 50,
            stateful: false,
            state_bytes: 0,
            mem_footprint_bytes: 0,
            shareable: true,
            egress_factor: 1.0,
            behavior: BehaviorSpec::PassThrough,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UserEntry {
    pub name: String,
}

impl Default for UserEntry {
    fn default() -> Self {
        Self { name: "tenant".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelismChoice {
    Auto,
    Serial,
    Parallel,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DagEntry {
    pub name: String,
    pub user: String,
    /// NT names, in node order.
    pub nts: Vec<String>,
    /// Edges between node indices. Empty means a linear chain.
    pub edges: Vec<(u16, u16)>,
    pub requested_gbps: f64,
    /// Home NIC the DAG deploys on.
    pub nic: u32,
    pub deploy_at_us: f64,
    /// 0 disables the timed de-schedule.
    pub deschedule_at_us: f64,
    /// Re-deploy after a timed de-schedule (victim-cache exercises).
    pub redeploy_at_us: f64,
    pub parallelism: ParallelismChoice,
    /// Fixed instance count per chain (0 = start at 1, autoscale).
    pub instances: u32,
}

impl Default for DagEntry {
    fn default() -> Self {
        Self {
            name: "dag".into(),
            user: "tenant".into(),
            nts: Vec::new(),
            edges: Vec::new(),
            requested_gbps: 10.0,
            nic: 0,
            deploy_at_us: 0.0,
            deschedule_at_us: 0.0,
            redeploy_at_us: 0.0,
            parallelism: ParallelismChoice::Auto,
            instances: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arrival {
    /// Paced at exactly `gbps`.
    Constant { gbps: f64 },
    /// Exponential inter-arrivals averaging `gbps`.
    Poisson { gbps: f64 },
    /// Alternate `on_us` at `gbps` and `off_us` silent.
    OnOff { gbps: f64, on_us: f64, off_us: f64 },
    /// Replay timestamp_ns,user,dag,size_bytes rows from a CSV file.
    Trace { file: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeDist {
    Fixed { bytes: u64 },
    /// Piecewise-constant inverse CDF: (size_bytes, cumulative_prob) rows,
    /// last row at probability 1.0.
    Empirical { cdf: Vec<(u64, f64)> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyDist {
    Uniform,
    Zipf { theta: f64 },
    Sequential,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadEntry {
    pub user: String,
    pub dag: String,
    pub arrival: Arrival,
    pub size: SizeDist,
    /// Distinct flows this generator cycles through.
    pub flows: u64,
    /// Key space for KV-style behaviors.
    pub keyspace: u64,
    pub key_dist: KeyDist,
    /// Go-back-N reliable sender in front of the generator.
    pub reliable: bool,
    /// Sender window when `reliable`.
    pub window: u64,
    pub start_us: f64,
    /// 0 = run until the end of the simulation.
    pub stop_us: f64,
    /// Offered-load timeline: rate changes at absolute times.
    pub steps: Vec<LoadStep>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    pub at_us: f64,
    pub gbps: f64,
}

impl Default for WorkloadEntry {
    fn default() -> Self {
        Self {
            user: "tenant".into(),
            dag: "dag".into(),
            arrival: Arrival::Constant { gbps: 8.0 },
            size: SizeDist::Fixed { bytes: 1024 },
            flows: 16,
            keyspace: 100_000,
            key_dist: KeyDist::Uniform,
            reliable: false,
            window: 64,
            start_us: 0.0,
            stop_us: 0.0,
            steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub sim: SimSection,
    pub rack: RackSection,
    pub nic: NicSection,
    #[serde(rename = "nt")]
    pub nts: Vec<NtEntry>,
    #[serde(rename = "user")]
    pub users: Vec<UserEntry>,
    #[serde(rename = "dag")]
    pub dags: Vec<DagEntry>,
    #[serde(rename = "workload")]
    pub workloads: Vec<WorkloadEntry>,
    pub capex: CostParams,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Dag(#[from] crate::model::DagError),
}

/// A config with names resolved and times converted to cycles.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    pub catalog: Vec<NetworkTask>,
    pub dags: Vec<CompiledDag>,
    pub workloads: Vec<CompiledWorkload>,
    pub duration: Cycles,
    pub epoch: Cycles,
}

#[derive(Debug, Clone)]
pub struct CompiledDag {
    pub dag: NtDag,
    pub home_nic: u32,
    pub deploy_at: Cycles,
    pub deschedule_at: Option<Cycles>,
    pub redeploy_at: Option<Cycles>,
    pub parallelism: ParallelismChoice,
    pub fixed_instances: u32,
}

#[derive(Debug, Clone)]
pub struct CompiledWorkload {
    pub user: UserId,
    pub dag: usize,
    pub entry: WorkloadEntry,
    pub start: Cycles,
    pub stop: Option<Cycles>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigError::Io { path: path.into(), err })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A minimal runnable scenario: one pass-through NT, one tenant, one
    /// linear DAG, one constant-rate workload. `dump-defaults` prints this.
    pub fn example() -> Self {
        let mut cfg = ScenarioConfig { name: "example".into(), ..Default::default() };
        cfg.nts.push(NtEntry { name: "fwd".into(), ..Default::default() });
        cfg.users.push(UserEntry { name: "tenant-a".into() });
        cfg.dags.push(DagEntry {
            name: "forward".into(),
            user: "tenant-a".into(),
            nts: vec!["fwd".into()],
            requested_gbps: 10.0,
            ..Default::default()
        });
        cfg.workloads.push(WorkloadEntry {
            user: "tenant-a".into(),
            dag: "forward".into(),
            ..Default::default()
        });
        cfg
    }

    fn err(msg: String) -> ConfigError {
        ConfigError::Invalid(msg)
    }

    /// Validates everything and resolves names to ids.
    pub fn compile(&self) -> Result<Scenario, ConfigError> {
        if self.sim.duration_us <= 0.0 {
            return Err(Self::err("sim.duration_us must be positive".into()));
        }
        if self.sim.epoch_us <= 0.0 {
            return Err(Self::err("sim.epoch_us must be positive".into()));
        }
        if self.rack.nics == 0 {
            return Err(Self::err("rack.nics must be at least 1".into()));
        }
        if self.nic.regions == 0 || self.nic.region_area == 0 {
            return Err(Self::err("nic.regions and nic.region_area must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rack.loss_rate) {
            return Err(Self::err("rack.loss_rate must be within [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.nic.ewma_alpha) && self.nic.ewma_alpha != 1.0 {
            return Err(Self::err("nic.ewma_alpha must be within (0, 1]".into()));
        }
        if self.nts.is_empty() {
            return Err(Self::err("at least one [[nt]] entry is required".into()));
        }

        let mut catalog = Vec::new();
        for nt in &self.nts {
            if catalog.iter().any(|t: &NetworkTask| t.name == nt.name) {
                return Err(Self::err(format!("duplicate nt name {}", nt.name)));
            }
            if nt.max_gbps <= 0.0 {
                return Err(Self::err(format!("nt {}: max_gbps must be positive", nt.name)));
            }
            if nt.area == 0 {
                return Err(Self::err(format!("nt {}: area must be positive", nt.name)));
            }
            if nt.area > self.nic.region_area {
                return Err(ConfigError::Dag(crate::model::DagError::NtTooLarge {
                    nt: nt.name.clone(),
                    area: nt.area,
                    capacity: self.nic.region_area,
                }));
            }
            catalog.push(NetworkTask {
                name: nt.name.clone(),
                area: nt.area,
                max_gbps: nt.max_gbps,
                latency_cycles: nt.latency_cycles,
                stateful: nt.stateful,
                state_bytes: nt.state_bytes,
                mem_footprint_bytes: nt.mem_footprint_bytes,
                shareable: nt.shareable,
                egress_factor: nt.egress_factor,
                behavior: nt.behavior.clone(),
            });
        }

        let mut user_names = Vec::new();
        for u in &self.users {
            if user_names.contains(&u.name) {
                return Err(Self::err(format!("duplicate user name {}", u.name)));
            }
            user_names.push(u.name.clone());
        }
        if user_names.is_empty() {
            return Err(Self::err("at least one [[user]] entry is required".into()));
        }

        let find_nt = |name: &str| -> Option<NtId> {
            catalog.iter().position(|t| t.name == name).map(|i| NtId(i as u32))
        };
        let find_user = |name: &str| -> Option<UserId> {
            user_names.iter().position(|n| n == name).map(|i| UserId(i as u32))
        };

        let mut dags = Vec::new();
        for d in &self.dags {
            if self.dags.iter().filter(|o| o.name == d.name).count() > 1 {
                return Err(Self::err(format!("duplicate dag name {}", d.name)));
            }
            let owner = find_user(&d.user)
                .ok_or_else(|| Self::err(format!("dag {}: unknown user {}", d.name, d.user)))?;
            let mut nodes = Vec::new();
            for name in &d.nts {
                let nt = find_nt(name).ok_or(crate::model::DagError::UnknownNt {
                    dag: d.name.clone(),
                    nt: name.clone(),
                })?;
                nodes.push(nt);
            }
            let edges = if d.edges.is_empty() && nodes.len() > 1 {
                (0..nodes.len() as u16 - 1).map(|i| (i, i + 1)).collect()
            } else {
                d.edges.clone()
            };
            let dag = NtDag {
                name: d.name.clone(),
                owner,
                nodes,
                edges,
                requested_gbps: d.requested_gbps,
            };
            dag.validate(catalog.len())?;
            if d.nic >= self.rack.nics {
                return Err(Self::err(format!("dag {}: nic {} out of range", d.name, d.nic)));
            }
            let deschedule_at = if d.deschedule_at_us > 0.0 {
                Some(units::us_to_cycles(d.deschedule_at_us))
            } else {
                None
            };
            let redeploy_at = if d.redeploy_at_us > 0.0 {
                if deschedule_at.map_or(true, |t| units::us_to_cycles(d.redeploy_at_us) <= t) {
                    return Err(Self::err(format!(
                        "dag {}: redeploy_at_us must come after deschedule_at_us",
                        d.name
                    )));
                }
                Some(units::us_to_cycles(d.redeploy_at_us))
            } else {
                None
            };
            dags.push(CompiledDag {
                dag,
                home_nic: d.nic,
                deploy_at: units::us_to_cycles(d.deploy_at_us),
                deschedule_at,
                redeploy_at,
                parallelism: d.parallelism,
                fixed_instances: d.instances,
            });
        }

        let mut workloads = Vec::new();
        for (wi, w) in self.workloads.iter().enumerate() {
            let user = find_user(&w.user)
                .ok_or_else(|| Self::err(format!("workload {wi}: unknown user {}", w.user)))?;
            let dag_idx = self
                .dags
                .iter()
                .position(|d| d.name == w.dag)
                .ok_or_else(|| Self::err(format!("workload {wi}: unknown dag {}", w.dag)))?;
            if dags[dag_idx].dag.owner != user {
                return Err(Self::err(format!(
                    "workload {wi}: dag {} belongs to {}, not {}",
                    w.dag, self.dags[dag_idx].user, w.user
                )));
            }
            match &w.arrival {
                Arrival::Constant { gbps } | Arrival::Poisson { gbps } => {
                    if *gbps <= 0.0 {
                        return Err(Self::err(format!("workload {wi}: rate must be positive")));
                    }
                }
                Arrival::OnOff { gbps, on_us, off_us } => {
                    if *gbps <= 0.0 || *on_us <= 0.0 || *off_us < 0.0 {
                        return Err(Self::err(format!("workload {wi}: bad on/off parameters")));
                    }
                }
                Arrival::Trace { file } => {
                    if file.is_empty() {
                        return Err(Self::err(format!("workload {wi}: empty trace path")));
                    }
                }
            }
            match &w.size {
                SizeDist::Fixed { bytes } => {
                    if *bytes == 0 {
                        return Err(Self::err(format!("workload {wi}: packet size must be > 0")));
                    }
                }
                SizeDist::Empirical { cdf } => {
                    if cdf.is_empty() {
                        return Err(Self::err(format!("workload {wi}: empty size cdf")));
                    }
                    let mut prev = 0.0;
                    for &(bytes, p) in cdf {
                        if bytes == 0 || p <= prev || p > 1.0 {
                            return Err(Self::err(format!(
                                "workload {wi}: size cdf must be strictly increasing in (0, 1]"
                            )));
                        }
                        prev = p;
                    }
                    if (prev - 1.0).abs() > 1e-9 {
                        return Err(Self::err(format!(
                            "workload {wi}: size cdf must end at probability 1.0"
                        )));
                    }
                }
            }
            if let KeyDist::Zipf { theta } = w.key_dist {
                if theta <= 0.0 {
                    return Err(Self::err(format!("workload {wi}: zipf theta must be > 0")));
                }
            }
            let mut prev = 0.0;
            for s in &w.steps {
                if s.at_us < prev || s.gbps < 0.0 {
                    return Err(Self::err(format!(
                        "workload {wi}: steps must be time-sorted with non-negative rates"
                    )));
                }
                prev = s.at_us;
            }
            if w.flows == 0 || w.keyspace == 0 {
                return Err(Self::err(format!("workload {wi}: flows and keyspace must be > 0")));
            }
            if w.reliable && w.window == 0 {
                return Err(Self::err(format!("workload {wi}: reliable sender needs window > 0")));
            }
            workloads.push(CompiledWorkload {
                user,
                dag: dag_idx,
                entry: w.clone(),
                start: units::us_to_cycles(w.start_us),
                stop: if w.stop_us > 0.0 { Some(units::us_to_cycles(w.stop_us)) } else { None },
            });
        }

        Ok(Scenario {
            cfg: self.clone(),
            catalog,
            dags,
            workloads,
            duration: units::us_to_cycles(self.sim.duration_us),
            epoch: units::us_to_cycles(self.sim.epoch_us),
        })
    }
}

impl Scenario {
    pub fn users(&self) -> usize {
        self.cfg.users.len()
    }

    pub fn user_name(&self, u: UserId) -> &str {
        &self.cfg.users[u.idx()].name
    }

    /// Total FPGA bandwidth-area of one NIC.
    pub fn fpga_capacity(&self) -> f64 {
        self.cfg.nic.regions as f64 * self.cfg.nic.region_area as f64 * self.cfg.nic.region_gbps
    }

    pub fn memory_bytes(&self) -> u64 {
        (self.cfg.nic.memory_gb * 1024.0 * 1024.0 * 1024.0) as u64
    }

    pub fn packet_store_bytes(&self) -> u64 {
        (self.cfg.nic.packet_store_mb * 1024.0 * 1024.0) as u64
    }

    pub fn region_bitstream_bytes(&self) -> u64 {
        (self.cfg.nic.region_bitstream_mb * 1024.0 * 1024.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ScenarioConfig::example();
        let text = cfg.to_toml();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // And again, byte-identical the second time.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn example_compiles() {
        let sc = ScenarioConfig::example().compile().unwrap();
        assert_eq!(sc.catalog.len(), 1);
        assert_eq!(sc.dags.len(), 1);
        assert_eq!(sc.workloads.len(), 1);
        assert_eq!(sc.epoch, 5_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ScenarioConfig::from_toml("[sim]\nsped = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn linear_edges_are_implied() {
        let mut cfg = ScenarioConfig::example();
        cfg.nts.push(NtEntry { name: "second".into(), ..Default::default() });
        cfg.dags[0].nts = vec!["fwd".into(), "second".into()];
        let sc = cfg.compile().unwrap();
        assert_eq!(sc.dags[0].dag.edges, vec![(0, 1)]);
    }

    #[test]
    fn bad_references_are_caught() {
        let mut cfg = ScenarioConfig::example();
        cfg.dags[0].nts = vec!["nope".into()];
        assert!(cfg.compile().is_err());

        let mut cfg = ScenarioConfig::example();
        cfg.workloads[0].dag = "nope".into();
        assert!(cfg.compile().is_err());

        let mut cfg = ScenarioConfig::example();
        cfg.users.push(UserEntry { name: "other".into() });
        cfg.workloads[0].user = "other".into();
        let err = cfg.compile().unwrap_err();
        assert!(err.to_string().contains("belongs to"));
    }

    #[test]
    fn oversized_nt_rejected_at_compile() {
        let mut cfg = ScenarioConfig::example();
        cfg.nts[0].area = 5;
        cfg.nic.region_area = 2;
        assert!(matches!(cfg.compile(), Err(ConfigError::Dag(_))));
    }

    #[test]
    fn empirical_cdf_is_validated() {
        let mut cfg = ScenarioConfig::example();
        cfg.workloads[0].size = SizeDist::Empirical { cdf: vec![(64, 0.5), (256, 0.9)] };
        assert!(cfg.compile().is_err());
        cfg.workloads[0].size = SizeDist::Empirical { cdf: vec![(64, 0.5), (256, 1.0)] };
        assert!(cfg.compile().is_ok());
    }
}
