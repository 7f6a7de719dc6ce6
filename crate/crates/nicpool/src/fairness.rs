//! Joint space/time fair sharing.
//!
//! Space step: dominant-resource fairness (DRF) by progressive filling over
//! the pool's resource vector (FPGA bandwidth-area, on-board memory, ingress
//! and egress port bandwidth). It runs only when a DAG launches or leaves,
//! and its output is an entitlement: granted ingress Gbps per user plus the
//! matching region/memory reservation.
//!
//! Time step: every monitoring epoch, each NT instance position divides its
//! capacity among the users that want it. The rule is a two-round split:
//! an entitled round gives each user min(monitored intent, entitlement),
//! scaled proportionally when entitlements oversubscribe the instance, and a
//! harvest round hands any leftover to users whose intent is not yet met.
//! Enforcement happens exclusively at the ingress ports via per-user rate
//! limits, so the datapath never reorders packets for fairness.

use crate::units::{bytes_over_cycles_to_gbps, Cycles};

/// What one user asks of the pool, linearized per granted unit (one unit =
/// 1 Gbps of admitted ingress).
#[derive(Debug, Clone)]
pub struct UserDemand {
    pub per_unit: Vec<f64>,
    /// Demand cap in units; progressive filling freezes the user here.
    pub max_units: f64,
}

#[derive(Debug, Clone)]
pub struct DrfOutcome {
    /// Granted units per user.
    pub units: Vec<f64>,
    /// Granted resource vector per user.
    pub grants: Vec<Vec<f64>>,
    /// Dominant share each user ends at.
    pub dominant_share: Vec<f64>,
}

/// Index of the first resource where a single user's full demand exceeds
/// capacity outright; such a DAG is rejected at deploy time.
pub fn infeasible_resource(demand: &UserDemand, totals: &[f64]) -> Option<usize> {
    (0..totals.len()).find(|&r| demand.per_unit[r] * demand.max_units > totals[r] + 1e-9)
}

/// Progressive filling: every unfrozen user's dominant share grows at the
/// same rate; a user freezes when its demand cap is met or a resource it
/// needs saturates.
pub fn progressive_fill(demands: &[UserDemand], totals: &[f64]) -> DrfOutcome {
    let n = demands.len();
    let nr = totals.len();
    let mut units = vec![0.0; n];
    let mut used = vec![0.0; nr];

    // Dominant per-unit share of each user; zero-demand users freeze at 0.
    let dom: Vec<f64> = demands
        .iter()
        .map(|d| {
            (0..nr)
                .map(|r| if totals[r] > 0.0 { d.per_unit[r] / totals[r] } else { 0.0 })
                .fold(0.0, f64::max)
        })
        .collect();

    let mut active: Vec<usize> =
        (0..n).filter(|&u| dom[u] > 0.0 && demands[u].max_units > 0.0).collect();
    let mut s = 0.0f64;

    while !active.is_empty() {
        // Earliest event: a demand cap is met, or a resource saturates. At a
        // common dominant share x, active user u holds x/dom[u] units, so
        // resource r carries used[r] + sum over active of per_unit[r]*x/dom.
        // When both events coincide the cap freeze wins; it frees capacity.
        let mut next = f64::INFINITY;
        let mut sat_resource = None;
        for &u in &active {
            let cap_s = demands[u].max_units * dom[u];
            if cap_s < next {
                next = cap_s;
                sat_resource = None;
            }
        }
        for r in 0..nr {
            let coef: f64 = active.iter().map(|&u| demands[u].per_unit[r] / dom[u]).sum();
            if coef > 1e-12 {
                let s_r = (totals[r] - used[r]) / coef;
                if s_r < next - 1e-12 {
                    next = s_r;
                    sat_resource = Some(r);
                }
            }
        }

        if !next.is_finite() {
            break;
        }
        s = next.max(s);

        for &u in &active {
            units[u] = s / dom[u];
        }

        match sat_resource {
            None => {
                // Freeze every user whose cap is met at s.
                let (frozen, rest): (Vec<usize>, Vec<usize>) = active
                    .iter()
                    .partition(|&&u| units[u] >= demands[u].max_units - 1e-12);
                for &u in &frozen {
                    units[u] = demands[u].max_units;
                    for r in 0..nr {
                        used[r] += demands[u].per_unit[r] * units[u];
                    }
                }
                active = rest;
            }
            Some(r) => {
                // Users touching the saturated resource stop growing.
                let (frozen, rest): (Vec<usize>, Vec<usize>) =
                    active.iter().partition(|&&u| demands[u].per_unit[r] > 1e-12);
                for &u in &frozen {
                    for rr in 0..nr {
                        used[rr] += demands[u].per_unit[rr] * units[u];
                    }
                }
                active = rest;
                if frozen.is_empty() {
                    break;
                }
            }
        }
    }

    let grants: Vec<Vec<f64>> = (0..n)
        .map(|u| (0..nr).map(|r| demands[u].per_unit[r] * units[u]).collect())
        .collect();
    let dominant_share: Vec<f64> = (0..n).map(|u| units[u] * dom[u]).collect();
    DrfOutcome { units, grants, dominant_share }
}

/// One user's claim on one NT instance position.
#[derive(Debug, Clone, Copy)]
pub struct InstanceClaim {
    /// Monitored intended load, Gbps (pre-throttle).
    pub intent: f64,
    /// Entitlement assigned to this instance for this user, Gbps.
    pub entitlement: f64,
}

/// Splits `capacity` Gbps of one NT position among claimants.
///
/// Entitled round: each claim gets min(intent, entitlement); if those sums
/// oversubscribe the position, they scale proportionally and nothing is left
/// to harvest. Otherwise the leftover is water-filled over residual intent.
pub fn split_instance_capacity(capacity: f64, claims: &[InstanceClaim]) -> Vec<f64> {
    let n = claims.len();
    let mut shares = vec![0.0; n];
    if capacity <= 0.0 || n == 0 {
        return shares;
    }
    let entitled: Vec<f64> = claims.iter().map(|c| c.intent.min(c.entitlement).max(0.0)).collect();
    let entitled_sum: f64 = entitled.iter().sum();
    if entitled_sum > capacity {
        let scale = capacity / entitled_sum;
        for u in 0..n {
            shares[u] = entitled[u] * scale;
        }
        return shares;
    }
    shares.copy_from_slice(&entitled);
    let mut leftover = capacity - entitled_sum;
    // Harvest: hand leftover to unmet intent, proportionally, until either
    // the leftover or the residual intent runs out.
    for _ in 0..n {
        if leftover <= 1e-12 {
            break;
        }
        let residual: Vec<f64> = (0..n).map(|u| (claims[u].intent - shares[u]).max(0.0)).collect();
        let total: f64 = residual.iter().sum();
        if total <= 1e-12 {
            break;
        }
        let mut granted = 0.0;
        for u in 0..n {
            if residual[u] > 0.0 {
                let give = (leftover * residual[u] / total).min(residual[u]);
                shares[u] += give;
                granted += give;
            }
        }
        if granted <= 1e-12 {
            break;
        }
        leftover -= granted;
    }
    shares
}

/// Exponentially weighted intended-load averages, one slot per key.
#[derive(Debug, Clone)]
pub struct EwmaBank {
    alpha: f64,
    pub values: Vec<f64>,
    pending_bytes: Vec<u64>,
}

impl EwmaBank {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, values: Vec::new(), pending_bytes: Vec::new() }
    }

    pub fn ensure(&mut self, len: usize) {
        if self.values.len() < len {
            self.values.resize(len, 0.0);
            self.pending_bytes.resize(len, 0);
        }
    }

    pub fn record(&mut self, key: usize, bytes: u64) {
        self.ensure(key + 1);
        self.pending_bytes[key] += bytes;
    }

    /// Folds the bytes seen this epoch into the averages.
    pub fn tick(&mut self, epoch: Cycles) {
        for k in 0..self.values.len() {
            let rate = bytes_over_cycles_to_gbps(self.pending_bytes[k], epoch);
            self.values[k] = self.alpha * rate + (1.0 - self.alpha) * self.values[k];
            self.pending_bytes[k] = 0;
        }
    }

    pub fn get(&self, key: usize) -> f64 {
        self.values.get(key).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::us_to_cycles;

    fn fill(demands: &[(&[f64], f64)], totals: &[f64]) -> DrfOutcome {
        let d: Vec<UserDemand> = demands
            .iter()
            .map(|(p, m)| UserDemand { per_unit: p.to_vec(), max_units: *m })
            .collect();
        progressive_fill(&d, totals)
    }

    #[test]
    fn classic_two_user_cpu_memory_split() {
        // Per-task demands (1 CPU, 4 GB) and (3 CPU, 1 GB) over (9 CPU, 18 GB)
        // must come out at exactly 3 and 2 tasks.
        let out = fill(&[(&[1.0, 4.0], f64::INFINITY), (&[3.0, 1.0], f64::INFINITY)], &[9.0, 18.0]);
        assert_eq!(out.units[0].round() as i64, 3);
        assert_eq!(out.units[1].round() as i64, 2);
        assert!((out.units[0] - 3.0).abs() < 1e-9);
        assert!((out.units[1] - 2.0).abs() < 1e-9);
        // Dominant shares equalize: 3 tasks * 4 GB / 18 = 2/3 = 2 tasks * 3 CPU / 9.
        assert!((out.dominant_share[0] - out.dominant_share[1]).abs() < 1e-9);
    }

    #[test]
    fn two_tenant_pool_grants_both_demands() {
        // Tenant 1: 4-NT DAG, 8 Gbps requested, 1 GB footprint.
        // Tenant 2: 2-NT DAG, 14 Gbps requested, 2 GB footprint.
        // Pool: 60 bandwidth-area, 10 GB, 100 Gbps ports.
        let out = fill(
            &[
                (&[4.0, 1.0 / 8.0, 1.0, 1.0], 8.0),
                (&[2.0, 2.0 / 14.0, 1.0, 1.0], 14.0),
            ],
            &[60.0, 10.0, 100.0, 100.0],
        );
        let fpga1 = out.grants[0][0];
        let fpga2 = out.grants[1][0];
        assert!((fpga1 - 32.0).abs() < 1e-9, "got {fpga1}");
        assert!((fpga2 - 28.0).abs() < 1e-9, "got {fpga2}");
        assert!((out.dominant_share[0] - 8.0 / 15.0).abs() < 1e-9);
        assert!((out.dominant_share[1] - 7.0 / 15.0).abs() < 1e-9);
    }

    #[test]
    fn uncapped_users_split_the_bottleneck_evenly() {
        let out = fill(
            &[(&[1.0], f64::INFINITY), (&[1.0], f64::INFINITY)],
            &[10.0],
        );
        assert!((out.units[0] - 5.0).abs() < 1e-9);
        assert!((out.units[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn capped_user_frees_capacity_for_the_other() {
        let out = fill(&[(&[1.0], 2.0), (&[1.0], f64::INFINITY)], &[10.0]);
        assert!((out.units[0] - 2.0).abs() < 1e-9);
        assert!((out.units[1] - 8.0).abs() < 1e-9);
    }

    #[test]
    fn user_not_touching_saturated_resource_keeps_growing() {
        // User 0 only needs resource A, user 1 only resource B.
        let out = fill(
            &[(&[1.0, 0.0], f64::INFINITY), (&[0.0, 1.0], 3.0)],
            &[4.0, 9.0],
        );
        assert!((out.units[0] - 4.0).abs() < 1e-9);
        assert!((out.units[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_demand_is_flagged() {
        let d = UserDemand { per_unit: vec![4.0, 1.0], max_units: 20.0 };
        assert_eq!(infeasible_resource(&d, &[60.0, 10.0]), Some(0));
        let ok = UserDemand { per_unit: vec![4.0, 1.0], max_units: 8.0 };
        assert_eq!(infeasible_resource(&ok, &[60.0, 10.0]), None);
    }

    #[test]
    fn oversubscribed_entitlements_split_proportionally_to_intent() {
        // The shared-NT worked example: capacity 10, owner intends 8 with
        // entitlement 8, guest intends 3 with entitlement 4 (entitled sum 11).
        let shares = split_instance_capacity(
            10.0,
            &[
                InstanceClaim { intent: 8.0, entitlement: 8.0 },
                InstanceClaim { intent: 3.0, entitlement: 14.0 },
            ],
        );
        assert!((shares[0] - 80.0 / 11.0).abs() < 1e-9, "got {}", shares[0]);
        assert!((shares[1] - 30.0 / 11.0).abs() < 1e-9, "got {}", shares[1]);
        assert!((shares[0] - 7.27).abs() < 0.01);
        assert!((shares[1] - 2.73).abs() < 0.01);
    }

    #[test]
    fn entitled_traffic_is_protected_from_guests() {
        let shares = split_instance_capacity(
            10.0,
            &[
                InstanceClaim { intent: 10.0, entitlement: 10.0 },
                InstanceClaim { intent: 25.0, entitlement: 0.0 },
            ],
        );
        assert!((shares[0] - 10.0).abs() < 1e-9);
        assert!(shares[1].abs() < 1e-9);
    }

    #[test]
    fn leftover_capacity_is_harvested_beyond_entitlement() {
        let shares = split_instance_capacity(
            10.0,
            &[
                InstanceClaim { intent: 4.0, entitlement: 10.0 },
                InstanceClaim { intent: 9.0, entitlement: 2.0 },
            ],
        );
        assert!((shares[0] - 4.0).abs() < 1e-9);
        assert!((shares[1] - 6.0).abs() < 1e-9);
        let total: f64 = shares.iter().sum();
        assert!(total <= 10.0 + 1e-9);
    }

    #[test]
    fn harvest_never_exceeds_intent() {
        let shares = split_instance_capacity(
            10.0,
            &[
                InstanceClaim { intent: 2.0, entitlement: 5.0 },
                InstanceClaim { intent: 3.0, entitlement: 5.0 },
            ],
        );
        assert!((shares[0] - 2.0).abs() < 1e-9);
        assert!((shares[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn ewma_approaches_offered_rate() {
        let epoch = us_to_cycles(20.0);
        let mut bank = EwmaBank::new(0.25);
        // 8 Gbps worth of bytes per 20 us epoch.
        let bytes = (8.0e9 / 8.0 * 20e-6) as u64;
        let mut prev = 0.0;
        for k in 1..=20 {
            bank.record(0, bytes);
            bank.tick(epoch);
            let v = bank.get(0);
            assert!(v > prev);
            let expect = 8.0 * (1.0 - 0.75f64.powi(k));
            assert!((v - expect).abs() < 0.05, "epoch {k}: {v} vs {expect}");
            prev = v;
        }
        assert!((bank.get(0) - 8.0).abs() < 0.05);
    }
}
