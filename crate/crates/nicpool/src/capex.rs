//! Rack-level network CapEx model.
//!
//! Compares the cost of giving every endpoint a full NIC against pooled
//! deployments where a few consolidated devices run the offloaded NTs and
//! endpoints keep only a down-scaled NIC. Two pool topologies: `ring` puts
//! the pool between endpoints and the ToR switch; `direct` attaches pool
//! devices and endpoints to the switch separately. Pool devices come in two
//! flavors: an auto-scaling device provisioned for the peak-of-sums, and a
//! multi-host NIC provisioned for the sum-of-peaks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DeploymentModel {
    /// One full NIC, cable and switch port per endpoint.
    Traditional,
    /// Auto-scaling pool devices chained between endpoints and the switch.
    SnicRing,
    /// Auto-scaling pool devices; endpoints also keep their own switch port.
    SnicDirect,
    /// Multi-host NIC pool, ring topology.
    MhnicRing,
    /// Multi-host NIC pool, direct topology.
    MhnicDirect,
}

impl DeploymentModel {
    pub const ALL: [DeploymentModel; 5] = [
        DeploymentModel::Traditional,
        DeploymentModel::SnicRing,
        DeploymentModel::SnicDirect,
        DeploymentModel::MhnicRing,
        DeploymentModel::MhnicDirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeploymentModel::Traditional => "traditional",
            DeploymentModel::SnicRing => "snic-ring",
            DeploymentModel::SnicDirect => "snic-direct",
            DeploymentModel::MhnicRing => "mhnic-ring",
            DeploymentModel::MhnicDirect => "mhnic-direct",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub cost_switch_port: f64,
    pub cost_nic: f64,
    pub cost_cable: f64,
    /// Down-scaled endpoint NIC, as a fraction of a full NIC.
    pub ds_nic_factor: f64,
    /// Down-scaled (less reliable) cable, as a fraction of a full cable.
    pub ds_cable_factor: f64,
    /// Endpoints per pool device.
    pub consolid_ratio: u32,
    /// Fraction of a pool device's cost that goes to NT logic (the rest is
    /// shell and cannot be scaled down).
    pub nt_cost_ratio: f64,
    /// Peak-of-sums over sum-of-peaks: how much NT capacity auto-scaling
    /// lets the pool shed.
    pub capex_consolid_ratio: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            cost_switch_port: 250.0,
            cost_nic: 500.0,
            cost_cable: 100.0,
            ds_nic_factor: 0.2,
            ds_cable_factor: 0.6,
            consolid_ratio: 4,
            nt_cost_ratio: 0.9,
            capex_consolid_ratio: 0.23,
        }
    }
}

impl CostParams {
    /// Cost of an auto-scaling pool device relative to a multi-host NIC:
    /// the shell is paid in full, the NT portion shrinks by the
    /// consolidation ratio of the workload.
    pub fn capex_ratio(&self) -> f64 {
        (1.0 - self.nt_cost_ratio) + self.nt_cost_ratio * self.capex_consolid_ratio
    }

    fn ds_nic(&self) -> f64 {
        self.cost_nic * self.ds_nic_factor
    }

    fn ds_cable(&self) -> f64 {
        self.cost_cable * self.ds_cable_factor
    }

    /// A multi-host pool device replaces `consolid_ratio` full NICs.
    fn mhnic_device(&self) -> f64 {
        self.cost_nic * self.consolid_ratio as f64
    }

    fn snic_device(&self) -> f64 {
        self.mhnic_device() * self.capex_ratio()
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CostBreakdown {
    pub model: String,
    pub endpoints: u32,
    pub pool_devices: u32,
    /// Per-endpoint spend (NICs, endpoint cables, endpoint switch ports).
    pub endpoint_cost: f64,
    /// Pool spend (pool devices, their cables and switch ports).
    pub pool_cost: f64,
    pub total: f64,
    /// Fraction saved relative to the traditional model at the same scale.
    pub saving_vs_traditional: f64,
}

/// Network CapEx to attach `n` endpoints under `model`.
pub fn capex(model: DeploymentModel, n: u32, p: &CostParams) -> CostBreakdown {
    let m = n.div_ceil(p.consolid_ratio.max(1));
    let per_endpoint_full = p.cost_nic + p.cost_cable + p.cost_switch_port;
    let traditional_total = n as f64 * per_endpoint_full;

    let (endpoint_cost, pool_cost, pool_devices) = match model {
        DeploymentModel::Traditional => (traditional_total, 0.0, 0),
        DeploymentModel::SnicRing => (
            n as f64 * (p.ds_nic() + p.ds_cable()),
            m as f64 * (p.snic_device() + p.cost_cable + p.cost_switch_port),
            m,
        ),
        DeploymentModel::MhnicRing => (
            n as f64 * (p.ds_nic() + p.ds_cable()),
            m as f64 * (p.mhnic_device() + p.cost_cable + p.cost_switch_port),
            m,
        ),
        DeploymentModel::SnicDirect => (
            n as f64 * (p.ds_nic() + p.cost_cable + p.cost_switch_port),
            m as f64 * (p.snic_device() + p.cost_cable + p.cost_switch_port),
            m,
        ),
        DeploymentModel::MhnicDirect => (
            n as f64 * (p.ds_nic() + p.cost_cable + p.cost_switch_port),
            m as f64 * (p.mhnic_device() + p.cost_cable + p.cost_switch_port),
            m,
        ),
    };

    let total = endpoint_cost + pool_cost;
    CostBreakdown {
        model: model.name().to_string(),
        endpoints: n,
        pool_devices,
        endpoint_cost,
        pool_cost,
        total,
        saving_vs_traditional: 1.0 - total / traditional_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capex_ratio_from_defaults() {
        let p = CostParams::default();
        assert!((p.capex_ratio() - 0.307).abs() < 1e-12);
        assert!((p.snic_device() - 614.0).abs() < 1e-9);
    }

    #[test]
    fn rack_of_32_under_all_models() {
        let p = CostParams::default();
        // Hand-summed from the formulas: per endpoint 850 traditional;
        // ring endpoints 160 each; direct endpoints 450 each; pool devices
        // 964 (auto-scaling) or 2350 (multi-host) with cable + port.
        let t = capex(DeploymentModel::Traditional, 32, &p);
        assert!((t.total - 27_200.0).abs() < 1e-6);
        assert_eq!(t.pool_devices, 0);

        let sr = capex(DeploymentModel::SnicRing, 32, &p);
        assert_eq!(sr.pool_devices, 8);
        assert!((sr.endpoint_cost - 5_120.0).abs() < 1e-6);
        assert!((sr.pool_cost - 7_712.0).abs() < 1e-6);
        assert!((sr.total - 12_832.0).abs() < 1e-6);
        assert!((sr.saving_vs_traditional - (1.0 - 12_832.0 / 27_200.0)).abs() < 1e-12);
        assert!((sr.saving_vs_traditional - 0.528).abs() < 5e-4);

        let sd = capex(DeploymentModel::SnicDirect, 32, &p);
        assert!((sd.total - 22_112.0).abs() < 1e-6);

        let mr = capex(DeploymentModel::MhnicRing, 32, &p);
        assert!((mr.total - 23_920.0).abs() < 1e-6);

        let md = capex(DeploymentModel::MhnicDirect, 32, &p);
        assert!((md.total - 33_200.0).abs() < 1e-6);
        assert!(md.saving_vs_traditional < 0.0);
    }

    #[test]
    fn pool_count_rounds_up() {
        let p = CostParams::default();
        assert_eq!(capex(DeploymentModel::SnicRing, 30, &p).pool_devices, 8);
        assert_eq!(capex(DeploymentModel::SnicRing, 33, &p).pool_devices, 9);
    }
}
