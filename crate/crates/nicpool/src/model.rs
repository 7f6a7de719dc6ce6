//! Core data model: network tasks, NT DAGs, chains and skip plans.
//!
//! A network task (NT) is one packet-processing function with a synthesized
//! area and a bandwidth/latency envelope. Users submit DAGs of NTs; the
//! planner cuts DAGs into chains, where a chain is a contiguous sub-path that
//! fits into one reconfigurable region and is loaded as a single bitstream.
//! A packet can traverse a deployed chain while skipping a subset of its NTs
//! (a skip mask); that is what lets one physical chain serve several DAGs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ChainKindId, NtId, RegionId, UserId};
use crate::nt::BehaviorSpec;
use crate::units::Cycles;

/// One catalog entry: a packet-processing function that can be placed in a
/// region, alone or as part of a chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkTask {
    pub name: String,
    /// Area units consumed inside a region.
    pub area: u32,
    /// Saturation bandwidth of one instance.
    pub max_gbps: f64,
    /// Pipeline latency a packet spends inside the NT.
    pub latency_cycles: Cycles,
    pub stateful: bool,
    /// Bytes of state to spill/restore on a context switch or migration.
    pub state_bytes: u64,
    /// On-board memory the NT reserves per instance.
    pub mem_footprint_bytes: u64,
    /// Whether other tenants may send packets through a deployed instance.
    pub shareable: bool,
    /// Egress bytes produced per ingress byte (replication is > 1).
    pub egress_factor: f64,
    pub behavior: BehaviorSpec,
}

impl Default for NetworkTask {
    fn default() -> Self {
        NetworkTask {
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

/// A user-submitted DAG of network tasks. Nodes are positions, so one NT type
/// may appear more than once.
#[derive(Debug, Clone)]
pub struct NtDag {
    pub name: String,
    pub owner: UserId,
    pub nodes: Vec<NtId>,
    /// Directed edges between node positions.
    pub edges: Vec<(u16, u16)>,
    /// Ingress bandwidth the user asks the pool to sustain.
    pub requested_gbps: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DagError {
    #[error("dag {0}: contains a cycle")]
    CyclicDag(String),
    #[error("dag {dag}: unknown network task {nt}")]
    UnknownNt { dag: String, nt: String },
    #[error("dag {0}: requested bandwidth must be positive")]
    NonPositiveBandwidth(String),
    #[error("dag {0}: has no nodes")]
    Empty(String),
    #[error("dag {dag}: edge ({a}, {b}) references a missing node")]
    BadEdge { dag: String, a: u16, b: u16 },
    #[error("nt {nt} needs {area} area units but a region holds {capacity}")]
    NtTooLarge { nt: String, area: u32, capacity: u32 },
}

impl NtDag {
    /// Checks shape and catalog references. Returns the topological order of
    /// node positions, which later passes reuse.
    pub fn validate(&self, catalog_len: usize) -> Result<Vec<usize>, DagError> {
        if self.nodes.is_empty() {
            return Err(DagError::Empty(self.name.clone()));
        }
        if self.requested_gbps <= 0.0 {
            return Err(DagError::NonPositiveBandwidth(self.name.clone()));
        }
        for nt in &self.nodes {
            if nt.idx() >= catalog_len {
                return Err(DagError::UnknownNt {
                    dag: self.name.clone(),
                    nt: format!("#{nt}"),
                });
            }
        }
        for &(a, b) in &self.edges {
            if a as usize >= self.nodes.len() || b as usize >= self.nodes.len() {
                return Err(DagError::BadEdge { dag: self.name.clone(), a, b });
            }
        }

        // Kahn's algorithm; leftover nodes mean a cycle.
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            indeg[b as usize] += 1;
            succ[a as usize].push(b as usize);
        }
        for s in &mut succ {
            s.sort_unstable();
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        ready.sort_unstable_by(|a, b| b.cmp(a));
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
            ready.sort_unstable_by(|a, b| b.cmp(a));
        }
        if order.len() != n {
            return Err(DagError::CyclicDag(self.name.clone()));
        }
        Ok(order)
    }

    pub fn sources(&self) -> Vec<usize> {
        let mut has_in = vec![false; self.nodes.len()];
        for &(_, b) in &self.edges {
            has_in[b as usize] = true;
        }
        (0..self.nodes.len()).filter(|&i| !has_in[i]).collect()
    }

    pub fn sinks(&self) -> Vec<usize> {
        let mut has_out = vec![false; self.nodes.len()];
        for &(a, _) in &self.edges {
            has_out[a as usize] = true;
        }
        (0..self.nodes.len()).filter(|&i| !has_out[i]).collect()
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            succ[a as usize].push(b as usize);
        }
        for s in &mut succ {
            s.sort_unstable();
        }
        succ
    }

    /// Every source-to-sink path, as node-position sequences, in DFS order.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        let succ = self.successors();
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for s in self.sources() {
            walk(s, &succ, &mut stack, &mut out);
        }
        fn walk(i: usize, succ: &[Vec<usize>], stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            stack.push(i);
            if succ[i].is_empty() {
                out.push(stack.clone());
            } else {
                for &j in &succ[i] {
                    walk(j, succ, stack, out);
                }
            }
            stack.pop();
        }
        out
    }

    pub fn total_area(&self, catalog: &[NetworkTask]) -> u32 {
        self.nodes.iter().map(|nt| catalog[nt.idx()].area).sum()
    }
}

/// A loadable chain: a contiguous sub-path of some source-to-sink path, small
/// enough for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub nts: Vec<NtId>,
    pub total_area: u32,
    /// Synthesized partial bitstream size, proportional to the region area
    /// the chain occupies.
    pub bitstream_bytes: u64,
}

impl ChainSpec {
    pub fn new(nts: Vec<NtId>, catalog: &[NetworkTask], capacity: u32, region_bitstream_bytes: u64) -> Self {
        let total_area: u32 = nts.iter().map(|nt| catalog[nt.idx()].area).sum();
        let bitstream_bytes =
            (region_bitstream_bytes as f64 * total_area as f64 / capacity as f64).round() as u64;
        Self { nts, total_area, bitstream_bytes }
    }
}

/// All chains a DAG could be deployed with: every contiguous sub-path of
/// every source-to-sink path whose area fits a region. Duplicate NT sequences
/// (e.g. from overlapping paths) are emitted once.
pub fn enumerate_chain_subsets(
    dag: &NtDag,
    catalog: &[NetworkTask],
    capacity: u32,
    region_bitstream_bytes: u64,
) -> Result<Vec<ChainSpec>, DagError> {
    for nt in &dag.nodes {
        let t = &catalog[nt.idx()];
        if t.area > capacity {
            return Err(DagError::NtTooLarge {
                nt: t.name.clone(),
                area: t.area,
                capacity,
            });
        }
    }
    let mut seen: Vec<Vec<NtId>> = Vec::new();
    let mut out = Vec::new();
    for path in dag.paths() {
        for i in 0..path.len() {
            let mut area = 0;
            for j in i..path.len() {
                area += catalog[dag.nodes[path[j]].idx()].area;
                if area > capacity {
                    break;
                }
                let nts: Vec<NtId> = path[i..=j].iter().map(|&p| dag.nodes[p]).collect();
                if !seen.contains(&nts) {
                    seen.push(nts.clone());
                    out.push(ChainSpec::new(nts, catalog, capacity, region_bitstream_bytes));
                }
            }
        }
    }
    Ok(out)
}

/// A deployed chain as the skip planner sees it: where it lives, what it
/// runs, and which positions this tenant may actually use.
#[derive(Debug, Clone)]
pub struct DeployedChainView {
    pub region: RegionId,
    pub kind: ChainKindId,
    pub nts: Vec<NtId>,
    /// Position is shareable for this tenant and has spare bandwidth.
    pub usable: Vec<bool>,
}

/// One hop of a skip plan: traverse `region`'s chain with `skip[i]` NTs
/// bypassed.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipStep {
    pub region: RegionId,
    pub kind: ChainKindId,
    pub skip: Vec<bool>,
}

/// Covers `path` with deployed chains, greedily taking the chain that covers
/// the longest prefix of what remains (as an in-order subsequence of the
/// chain, using only usable positions). Ties go to the lowest region id.
/// Returns `None` when some NT on the path has no usable occurrence anywhere.
pub fn compute_skip_plan(path: &[NtId], deployed: &[DeployedChainView]) -> Option<Vec<SkipStep>> {
    let mut plan = Vec::new();
    let mut p = 0;
    while p < path.len() {
        let mut best: Option<(usize, usize)> = None; // (covered, deployed idx)
        for (di, chain) in deployed.iter().enumerate() {
            let covered = cover_len(&path[p..], chain);
            let better = match best {
                None => covered > 0,
                Some((bc, bi)) => {
                    covered > bc
                        || (covered == bc && chain.region < deployed[bi].region)
                }
            };
            if better {
                best = Some((covered, di));
            }
        }
        let (covered, di) = best?;
        let chain = &deployed[di];
        let mut skip = vec![true; chain.nts.len()];
        let mut q = p;
        for (k, nt) in chain.nts.iter().enumerate() {
            if q < p + covered && chain.usable[k] && *nt == path[q] {
                skip[k] = false;
                q += 1;
            }
        }
        debug_assert_eq!(q, p + covered);
        plan.push(SkipStep { region: chain.region, kind: chain.kind, skip });
        p += covered;
    }
    Some(plan)
}

/// Longest prefix of `rest` matchable in order inside `chain`. Matching the
/// earliest usable occurrence is optimal for a fixed chain.
fn cover_len(rest: &[NtId], chain: &DeployedChainView) -> usize {
    let mut q = 0;
    for (k, nt) in chain.nts.iter().enumerate() {
        if q < rest.len() && chain.usable[k] && *nt == rest[q] {
            q += 1;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn task(name: &str, area: u32) -> NetworkTask {
        NetworkTask {
            name: name.into(),
            area,
            max_gbps: 10.0,
            latency_cycles: 50,
            stateful: false,
            state_bytes: 0,
            mem_footprint_bytes: 0,
            shareable: true,
            egress_factor: 1.0,
            behavior: BehaviorSpec::PassThrough,
        }
    }

    fn catalog4() -> Vec<NetworkTask> {
        vec![task("a", 1), task("b", 1), task("c", 1), task("d", 1)]
    }

    fn diamond() -> NtDag {
        // a -> (b | c) -> d
        NtDag {
            name: "diamond".into(),
            owner: UserId(0),
            nodes: vec![NtId(0), NtId(1), NtId(2), NtId(3)],
            edges: vec![(0, 1), (0, 2), (1, 3), (2, 3)],
            requested_gbps: 10.0,
        }
    }

    #[test]
    fn validate_catches_cycles() {
        let mut dag = diamond();
        dag.edges.push((3, 0));
        assert_eq!(dag.validate(4), Err(DagError::CyclicDag("diamond".into())));
    }

    #[test]
    fn validate_catches_bad_refs_and_bandwidth() {
        let mut dag = diamond();
        dag.nodes[0] = NtId(9);
        assert!(matches!(dag.validate(4), Err(DagError::UnknownNt { .. })));
        let mut dag = diamond();
        dag.requested_gbps = 0.0;
        assert!(matches!(dag.validate(4), Err(DagError::NonPositiveBandwidth(_))));
    }

    #[test]
    fn diamond_paths() {
        let dag = diamond();
        assert_eq!(dag.paths(), vec![vec![0, 1, 3], vec![0, 2, 3]]);
    }

    /// Dumb reference enumerator: every window of every path, deduped.
    fn brute_force_subsets(dag: &NtDag, catalog: &[NetworkTask], capacity: u32) -> Vec<Vec<NtId>> {
        let mut seqs: Vec<Vec<NtId>> = Vec::new();
        for path in dag.paths() {
            for i in 0..path.len() {
                for j in i..path.len() {
                    let nts: Vec<NtId> = path[i..=j].iter().map(|&p| dag.nodes[p]).collect();
                    let area: u32 = nts.iter().map(|nt| catalog[nt.idx()].area).sum();
                    if area <= capacity && !seqs.contains(&nts) {
                        seqs.push(nts);
                    }
                }
            }
        }
        seqs
    }

    #[test]
    fn diamond_has_eight_chains_at_capacity_two() {
        let catalog = catalog4();
        let dag = diamond();
        let chains = enumerate_chain_subsets(&dag, &catalog, 2, 4 << 20).unwrap();
        let seqs: Vec<Vec<NtId>> = chains.iter().map(|c| c.nts.clone()).collect();
        let expect = brute_force_subsets(&dag, &catalog, 2);
        assert_eq!(seqs.len(), 8);
        assert_eq!(seqs, expect);
        // Half-region chains get half the region bitstream.
        let single = chains.iter().find(|c| c.nts == vec![NtId(0)]).unwrap();
        assert_eq!(single.bitstream_bytes, 2 << 20);
        let pair = chains.iter().find(|c| c.nts == vec![NtId(0), NtId(1)]).unwrap();
        assert_eq!(pair.bitstream_bytes, 4 << 20);
    }

    #[test]
    fn oversized_nt_is_rejected() {
        let mut catalog = catalog4();
        catalog[2].area = 3;
        let dag = diamond();
        let err = enumerate_chain_subsets(&dag, &catalog, 2, 4 << 20).unwrap_err();
        assert!(matches!(err, DagError::NtTooLarge { area: 3, capacity: 2, .. }));
    }

    fn view(region: u32, nts: &[u32], usable: &[bool]) -> DeployedChainView {
        DeployedChainView {
            region: RegionId(region),
            kind: ChainKindId(region),
            nts: nts.iter().map(|&n| NtId(n)).collect(),
            usable: usable.to_vec(),
        }
    }

    #[test]
    fn skip_plan_two_hops() {
        // path 0->1->2 over deployed [0,1] and [1,2]
        let deployed = vec![view(0, &[0, 1], &[true, true]), view(1, &[1, 2], &[true, true])];
        let path = [NtId(0), NtId(1), NtId(2)];
        let plan = compute_skip_plan(&path, &deployed).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0].region, RegionId(0));
        assert_eq!(plan[0].skip, vec![false, false]);
        assert_eq!(plan[1].region, RegionId(1));
        assert_eq!(plan[1].skip, vec![true, false]);
    }

    #[test]
    fn skip_plan_prefers_lowest_region_on_tie() {
        let deployed = vec![view(7, &[0], &[true]), view(3, &[0], &[true])];
        let plan = compute_skip_plan(&[NtId(0)], &deployed).unwrap();
        assert_eq!(plan[0].region, RegionId(3));
    }

    #[test]
    fn skip_plan_needs_usable_positions() {
        let deployed = vec![view(0, &[0, 1], &[true, false]), view(1, &[1], &[true])];
        let plan = compute_skip_plan(&[NtId(0), NtId(1)], &deployed).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0].skip, vec![false, true]);
        assert_eq!(plan[1].region, RegionId(1));

        let deployed = vec![view(0, &[0, 1], &[true, false])];
        assert_eq!(compute_skip_plan(&[NtId(0), NtId(1)], &deployed), None);
    }

    proptest! {
        /// Unmasked NTs across the plan, in order, always reproduce the path.
        #[test]
        fn skip_plan_round_trip(
            path in proptest::collection::vec(0u32..4, 1..8),
            chains in proptest::collection::vec(
                (0u32..8, proptest::collection::vec((0u32..4, prop::bool::ANY), 1..5)),
                1..6
            ),
        ) {
            let path: Vec<NtId> = path.into_iter().map(NtId).collect();
            let deployed: Vec<DeployedChainView> = chains
                .iter()
                .enumerate()
                .map(|(i, (region, body))| DeployedChainView {
                    region: RegionId(*region),
                    kind: ChainKindId(i as u32),
                    nts: body.iter().map(|&(n, _)| NtId(n)).collect(),
                    usable: body.iter().map(|&(_, u)| u).collect(),
                })
                .collect();

            let coverable = path.iter().all(|nt| {
                deployed.iter().any(|c| {
                    c.nts.iter().zip(&c.usable).any(|(n, &u)| u && n == nt)
                })
            });

            match compute_skip_plan(&path, &deployed) {
                None => prop_assert!(!coverable),
                Some(plan) => {
                    prop_assert!(coverable);
                    let mut walked = Vec::new();
                    for step in &plan {
                        let chain = deployed.iter().find(|c| c.kind == step.kind).unwrap();
                        prop_assert_eq!(step.skip.len(), chain.nts.len());
                        for (k, skipped) in step.skip.iter().enumerate() {
                            if !skipped {
                                prop_assert!(chain.usable[k]);
                                walked.push(chain.nts[k]);
                            }
                        }
                    }
                    prop_assert_eq!(walked, path);
                }
            }
        }
    }
}
