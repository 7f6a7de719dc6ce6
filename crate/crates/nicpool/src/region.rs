//! Physical region state on one NIC: what occupies each partially
//! reconfigurable slot, the de-scheduled-but-still-configured victim set,
//! and reconfiguration timing.

use crate::ids::{ChainKindId, InstanceId, RegionId};
use crate::units::{Cycles, CLOCK_HZ};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionState {
    /// Blank or scrubbed; launching here costs one PR.
    Free,
    /// Serving a live chain instance.
    Active { instance: InstanceId },
    /// Holds the bitstream of a de-scheduled chain. Relaunching the same
    /// kind here skips the PR entirely.
    Victim { kind: ChainKindId, stamp: u64 },
    /// PR in flight; becomes Active when it completes.
    Loading { instance: InstanceId, done_at: Cycles },
    /// Context switch in progress: old state is draining/spilling before
    /// the PR for the new tenant starts.
    Switching { instance: InstanceId },
}

#[derive(Debug)]
pub struct RegionTable {
    pub regions: Vec<RegionState>,
    /// Max victim entries kept before the oldest is scrubbed.
    victim_capacity: usize,
    stamp: u64,
}

/// Cycles one partial reconfiguration takes for a bitstream of this size.
pub fn pr_cycles(bitstream_bytes: u64, pr_mb_per_s: f64) -> Cycles {
    if bitstream_bytes == 0 {
        return 0;
    }
    let bytes_per_sec = pr_mb_per_s * 1024.0 * 1024.0;
    let secs = bitstream_bytes as f64 / bytes_per_sec;
    (secs * CLOCK_HZ as f64).round() as Cycles
}

impl RegionTable {
    pub fn new(regions: usize, victim_capacity: usize) -> Self {
        RegionTable {
            regions: vec![RegionState::Free; regions],
            victim_capacity,
            stamp: 0,
        }
    }

    pub fn get(&self, r: RegionId) -> &RegionState {
        &self.regions[r.idx()]
    }

    /// Lowest-id free region, if any.
    pub fn find_free(&self) -> Option<RegionId> {
        self.regions
            .iter()
            .position(|s| matches!(s, RegionState::Free))
            .map(|i| RegionId(i as u32))
    }

    /// Victim region already configured with `kind` (the victim hit).
    pub fn find_victim_of(&self, kind: ChainKindId) -> Option<RegionId> {
        self.regions
            .iter()
            .position(|s| matches!(s, RegionState::Victim { kind: k, .. } if *k == kind))
            .map(|i| RegionId(i as u32))
    }

    /// Least recently de-scheduled victim, for eviction.
    pub fn oldest_victim(&self) -> Option<RegionId> {
        self.regions
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                RegionState::Victim { stamp, .. } => Some((*stamp, i)),
                _ => None,
            })
            .min()
            .map(|(_, i)| RegionId(i as u32))
    }

    pub fn count_victims(&self) -> usize {
        self.regions
            .iter()
            .filter(|s| matches!(s, RegionState::Victim { .. }))
            .count()
    }

    pub fn count_free(&self) -> usize {
        self.regions
            .iter()
            .filter(|s| matches!(s, RegionState::Free))
            .count()
    }

    pub fn set_loading(&mut self, r: RegionId, instance: InstanceId, done_at: Cycles) {
        self.regions[r.idx()] = RegionState::Loading { instance, done_at };
    }

    pub fn set_active(&mut self, r: RegionId, instance: InstanceId) {
        self.regions[r.idx()] = RegionState::Active { instance };
    }

    pub fn set_switching(&mut self, r: RegionId, instance: InstanceId) {
        self.regions[r.idx()] = RegionState::Switching { instance };
    }

    pub fn set_free(&mut self, r: RegionId) {
        self.regions[r.idx()] = RegionState::Free;
    }

    /// De-schedules a region into the victim set. Returns true if it was
    /// kept as a victim, false if capacity forced a scrub to Free (the
    /// region itself is always released either way). When the victim set
    /// is over capacity the oldest entry is scrubbed, preferring to keep
    /// the newly retired chain.
    pub fn retire_to_victim(&mut self, r: RegionId, kind: ChainKindId) -> bool {
        if self.victim_capacity == 0 {
            self.regions[r.idx()] = RegionState::Free;
            return false;
        }
        self.stamp += 1;
        self.regions[r.idx()] = RegionState::Victim { kind, stamp: self.stamp };
        if self.count_victims() > self.victim_capacity {
            let oldest = self.oldest_victim().expect("over capacity implies victims");
            self.regions[oldest.idx()] = RegionState::Free;
            return oldest != r;
        }
        true
    }

    /// Marks a victim as reused (refreshes recency on a hit).
    pub fn touch_victim(&mut self, r: RegionId) {
        if let RegionState::Victim { kind, .. } = self.regions[r.idx()] {
            self.stamp += 1;
            self.regions[r.idx()] = RegionState::Victim { kind, stamp: self.stamp };
        }
    }
}

/// Where a chain launch landed and what it costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchPath {
    /// A free region: pay one PR.
    FreeRegion(RegionId),
    /// A victim still holding this kind: no PR at all.
    VictimHit(RegionId),
    /// Evict the stalest victim of another kind, then PR.
    VictimEvict(RegionId),
    /// Nothing local; caller escalates (remote NIC or context switch).
    NoRoom,
}

/// The local-launch decision ladder: free region first, then a victim hit,
/// then evicting the oldest victim.
pub fn pick_launch_region(table: &RegionTable, kind: ChainKindId) -> LaunchPath {
    if let Some(r) = table.find_victim_of(kind) {
        return LaunchPath::VictimHit(r);
    }
    if let Some(r) = table.find_free() {
        return LaunchPath::FreeRegion(r);
    }
    if let Some(r) = table.oldest_victim() {
        return LaunchPath::VictimEvict(r);
    }
    LaunchPath::NoRoom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::ms_to_cycles;

    #[test]
    fn pr_time_matches_bitstream_size() {
        // 4 MiB at 800 MiB/s is exactly 5 ms.
        assert_eq!(pr_cycles(4 << 20, 800.0), ms_to_cycles(5.0));
        // Half the bitstream, half the time.
        assert_eq!(pr_cycles(2 << 20, 800.0), ms_to_cycles(2.5));
        assert_eq!(pr_cycles(0, 800.0), 0);
    }

    #[test]
    fn ladder_prefers_hit_then_free_then_evict() {
        let mut t = RegionTable::new(3, 4);
        let kind_a = ChainKindId(0);
        let kind_b = ChainKindId(1);

        // All free: lowest free region.
        assert_eq!(pick_launch_region(&t, kind_a), LaunchPath::FreeRegion(RegionId(0)));

        t.set_active(RegionId(0), InstanceId(0));
        t.retire_to_victim(RegionId(1), kind_a);
        // Victim of the same kind wins over the free region 2.
        assert_eq!(pick_launch_region(&t, kind_a), LaunchPath::VictimHit(RegionId(1)));
        // Different kind takes the free region.
        assert_eq!(pick_launch_region(&t, kind_b), LaunchPath::FreeRegion(RegionId(2)));

        t.set_active(RegionId(2), InstanceId(1));
        // Only victims left: evict for a kind with no hit.
        assert_eq!(pick_launch_region(&t, kind_b), LaunchPath::VictimEvict(RegionId(1)));

        t.set_active(RegionId(1), InstanceId(2));
        assert_eq!(pick_launch_region(&t, kind_b), LaunchPath::NoRoom);
    }

    #[test]
    fn victim_eviction_is_lru() {
        let mut t = RegionTable::new(4, 4);
        t.retire_to_victim(RegionId(0), ChainKindId(0));
        t.retire_to_victim(RegionId(1), ChainKindId(1));
        t.retire_to_victim(RegionId(2), ChainKindId(2));
        assert_eq!(t.oldest_victim(), Some(RegionId(0)));
        // A hit refreshes recency.
        t.touch_victim(RegionId(0));
        assert_eq!(t.oldest_victim(), Some(RegionId(1)));
    }

    #[test]
    fn victim_capacity_scrubs_oldest() {
        let mut t = RegionTable::new(4, 2);
        assert!(t.retire_to_victim(RegionId(0), ChainKindId(0)));
        assert!(t.retire_to_victim(RegionId(1), ChainKindId(1)));
        // Third victim exceeds capacity: region 0 is scrubbed.
        assert!(t.retire_to_victim(RegionId(2), ChainKindId(2)));
        assert_eq!(t.count_victims(), 2);
        assert_eq!(*t.get(RegionId(0)), RegionState::Free);

        // Capacity zero disables the cache entirely.
        let mut t = RegionTable::new(2, 0);
        assert!(!t.retire_to_victim(RegionId(0), ChainKindId(0)));
        assert_eq!(t.count_victims(), 0);
    }
}
