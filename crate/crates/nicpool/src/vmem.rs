//! Paged virtual memory for NT state.
//!
//! Every stateful NT instance gets a private 1 GB virtual address space with
//! 2 MB pages, so a page table is a flat 512-entry array (4 KB at 8 bytes per
//! entry, small enough to pin on-chip). Frames are allocated on first write;
//! a read of an unmapped page is a fault, not silent zero-fill, because no NT
//! has a reason to read state it never wrote. Frames are never shared across
//! spaces: tenant isolation is a structural property here, not a policy.

use thiserror::Error;

use crate::ids::UserId;
use crate::units::Cycles;

pub const PAGE_BYTES: u64 = 2 * 1024 * 1024;
pub const VA_BYTES: u64 = 1024 * 1024 * 1024;
pub const TABLE_ENTRIES: usize = (VA_BYTES / PAGE_BYTES) as usize;
pub const TABLE_ENTRY_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpaceId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageState {
    Unmapped,
    Resident { frame: u32, last_touch: u64 },
    /// Contents live on a peer NIC; touching the page stalls for a swap-in.
    SwappedOut,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VmemError {
    #[error("virtual address {0:#x} outside the 1 GB space")]
    OutOfRange(u64),
    #[error("read of unmapped page {0}")]
    UnmappedRead(usize),
    #[error("page {0} is swapped out")]
    SwappedOut(usize),
    #[error("user {0} memory quota exhausted")]
    QuotaExceeded(UserId),
    #[error("no free frames on this NIC")]
    OutOfMemory,
    #[error("no such space")]
    BadSpace,
}

#[derive(Debug)]
pub struct AddressSpace {
    pub owner: UserId,
    pub table: Vec<PageState>,
    pub resident_pages: u32,
    pub live: bool,
}

impl AddressSpace {
    /// On-chip bytes the flat table itself occupies.
    pub fn table_bytes() -> u64 {
        TABLE_ENTRIES as u64 * TABLE_ENTRY_BYTES
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct VmemCounters {
    pub demand_allocations: u64,
    pub unmapped_read_faults: u64,
    pub quota_rejections: u64,
    pub swap_outs: u64,
    pub swap_ins: u64,
}

/// All memory state of one NIC: the frame pool plus every address space.
#[derive(Debug)]
pub struct Vmem {
    total_frames: u32,
    /// Free frame ids, kept sorted descending so `pop` hands out the lowest
    /// id first (deterministic and easy to eyeball in traces).
    free: Vec<u32>,
    spaces: Vec<AddressSpace>,
    user_quota_frames: Vec<u32>,
    user_frames: Vec<u32>,
    lru_clock: u64,
    pub counters: VmemCounters,
}

impl Vmem {
    pub fn new(total_bytes: u64, users: usize) -> Self {
        let total_frames = (total_bytes / PAGE_BYTES) as u32;
        let mut free: Vec<u32> = (0..total_frames).collect();
        free.reverse();
        Self {
            total_frames,
            free,
            spaces: Vec::new(),
            user_quota_frames: vec![total_frames; users],
            user_frames: vec![0; users],
            lru_clock: 0,
            counters: VmemCounters::default(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_frames as u64 * PAGE_BYTES
    }

    /// Fair-share step output lands here: `bytes` of on-board memory for
    /// `user`. Already-resident pages are not revoked; the quota binds new
    /// allocations.
    pub fn set_quota(&mut self, user: UserId, bytes: u64) {
        self.user_quota_frames[user.idx()] = (bytes / PAGE_BYTES) as u32;
    }

    pub fn quota_bytes(&self, user: UserId) -> u64 {
        self.user_quota_frames[user.idx()] as u64 * PAGE_BYTES
    }

    pub fn resident_bytes(&self, user: UserId) -> u64 {
        self.user_frames[user.idx()] as u64 * PAGE_BYTES
    }

    pub fn free_frames(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn allocate_space(&mut self, owner: UserId) -> SpaceId {
        let id = SpaceId(self.spaces.len() as u32);
        self.spaces.push(AddressSpace {
            owner,
            table: vec![PageState::Unmapped; TABLE_ENTRIES],
            resident_pages: 0,
            live: true,
        });
        id
    }

    /// Tears down a space and returns every frame to the pool.
    pub fn free_space(&mut self, space: SpaceId) -> Result<(), VmemError> {
        let sp = self.spaces.get_mut(space.0 as usize).ok_or(VmemError::BadSpace)?;
        if !sp.live {
            return Err(VmemError::BadSpace);
        }
        sp.live = false;
        let owner = sp.owner;
        let mut released = Vec::new();
        for entry in sp.table.iter_mut() {
            if let PageState::Resident { frame, .. } = *entry {
                released.push(frame);
            }
            *entry = PageState::Unmapped;
        }
        self.user_frames[owner.idx()] -= released.len() as u32;
        self.spaces[space.0 as usize].resident_pages = 0;
        self.free.extend(released);
        self.free.sort_unstable_by(|a, b| b.cmp(a));
        Ok(())
    }

    /// Walks the flat table. Writes map pages on demand; reads of unmapped
    /// pages fault. Returns the physical byte address.
    pub fn translate(&mut self, space: SpaceId, va: u64, write: bool) -> Result<u64, VmemError> {
        if va >= VA_BYTES {
            return Err(VmemError::OutOfRange(va));
        }
        let page = (va / PAGE_BYTES) as usize;
        let offset = va % PAGE_BYTES;
        let sp = self.spaces.get(space.0 as usize).ok_or(VmemError::BadSpace)?;
        if !sp.live {
            return Err(VmemError::BadSpace);
        }
        let owner = sp.owner;
        self.lru_clock += 1;
        let clock = self.lru_clock;
        match self.spaces[space.0 as usize].table[page] {
            PageState::Resident { frame, .. } => {
                self.spaces[space.0 as usize].table[page] =
                    PageState::Resident { frame, last_touch: clock };
                Ok(frame as u64 * PAGE_BYTES + offset)
            }
            PageState::SwappedOut => Err(VmemError::SwappedOut(page)),
            PageState::Unmapped => {
                if !write {
                    self.counters.unmapped_read_faults += 1;
                    return Err(VmemError::UnmappedRead(page));
                }
                let frame = self.grab_frame(owner)?;
                self.spaces[space.0 as usize].table[page] =
                    PageState::Resident { frame, last_touch: clock };
                self.spaces[space.0 as usize].resident_pages += 1;
                self.counters.demand_allocations += 1;
                Ok(frame as u64 * PAGE_BYTES + offset)
            }
        }
    }

    fn grab_frame(&mut self, owner: UserId) -> Result<u32, VmemError> {
        if self.user_frames[owner.idx()] >= self.user_quota_frames[owner.idx()] {
            self.counters.quota_rejections += 1;
            return Err(VmemError::QuotaExceeded(owner));
        }
        let frame = self.free.pop().ok_or(VmemError::OutOfMemory)?;
        self.user_frames[owner.idx()] += 1;
        Ok(frame)
    }

    /// Least-recently-touched resident page on the whole NIC, for swap-out.
    pub fn coldest_page(&self) -> Option<(SpaceId, usize)> {
        let mut best: Option<(u64, SpaceId, usize)> = None;
        for (si, sp) in self.spaces.iter().enumerate() {
            if !sp.live {
                continue;
            }
            for (page, entry) in sp.table.iter().enumerate() {
                if let PageState::Resident { last_touch, .. } = entry {
                    if best.map_or(true, |(t, _, _)| *last_touch < t) {
                        best = Some((*last_touch, SpaceId(si as u32), page));
                    }
                }
            }
        }
        best.map(|(_, s, p)| (s, p))
    }

    /// Evicts a resident page to a remote NIC. Returns the page size, which
    /// the caller puts on the wire.
    pub fn swap_out(&mut self, space: SpaceId, page: usize) -> Result<u64, VmemError> {
        let sp = self.spaces.get_mut(space.0 as usize).ok_or(VmemError::BadSpace)?;
        match sp.table[page] {
            PageState::Resident { frame, .. } => {
                sp.table[page] = PageState::SwappedOut;
                sp.resident_pages -= 1;
                let owner = sp.owner;
                self.user_frames[owner.idx()] -= 1;
                self.free.push(frame);
                self.free.sort_unstable_by(|a, b| b.cmp(a));
                self.counters.swap_outs += 1;
                Ok(PAGE_BYTES)
            }
            _ => Err(VmemError::BadSpace),
        }
    }

    /// Lands a page back after the remote round trip.
    pub fn swap_in(&mut self, space: SpaceId, page: usize) -> Result<(), VmemError> {
        let sp = self.spaces.get(space.0 as usize).ok_or(VmemError::BadSpace)?;
        if sp.table[page] != PageState::SwappedOut {
            return Err(VmemError::BadSpace);
        }
        let owner = sp.owner;
        let frame = self.grab_frame(owner)?;
        self.lru_clock += 1;
        let clock = self.lru_clock;
        let sp = &mut self.spaces[space.0 as usize];
        sp.table[page] = PageState::Resident { frame, last_touch: clock };
        sp.resident_pages += 1;
        self.counters.swap_ins += 1;
        Ok(())
    }

    pub fn space(&self, space: SpaceId) -> &AddressSpace {
        &self.spaces[space.0 as usize]
    }

    /// Every (space, frame) pair currently mapped; test hook for isolation
    /// checks.
    pub fn frame_map(&self) -> Vec<(SpaceId, u32)> {
        let mut out = Vec::new();
        for (si, sp) in self.spaces.iter().enumerate() {
            for entry in &sp.table {
                if let PageState::Resident { frame, .. } = entry {
                    out.push((SpaceId(si as u32), *frame));
                }
            }
        }
        out
    }
}

/// Cycles a swapped page stall lasts: page out + page back over the rack link.
pub fn swap_round_trip_cycles(link_gbps: f64, link_latency: Cycles) -> Cycles {
    2 * (crate::units::transfer_cycles(PAGE_BYTES, link_gbps) + link_latency)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_512_entries_4kb() {
        assert_eq!(TABLE_ENTRIES, 512);
        assert_eq!(AddressSpace::table_bytes(), 4096);
    }

    #[test]
    fn write_allocates_read_faults() {
        let mut vm = Vmem::new(64 * PAGE_BYTES, 1);
        let sp = vm.allocate_space(UserId(0));
        assert_eq!(vm.translate(sp, 123, false), Err(VmemError::UnmappedRead(0)));
        let pa = vm.translate(sp, 123, true).unwrap();
        assert_eq!(pa % PAGE_BYTES, 123);
        assert_eq!(vm.space(sp).resident_pages, 1);
        // Same page again: no new frame.
        vm.translate(sp, PAGE_BYTES - 1, false).unwrap();
        assert_eq!(vm.counters.demand_allocations, 1);
        // Next page is a fresh frame.
        vm.translate(sp, PAGE_BYTES, true).unwrap();
        assert_eq!(vm.space(sp).resident_pages, 2);
        assert_eq!(vm.translate(sp, VA_BYTES, true), Err(VmemError::OutOfRange(VA_BYTES)));
    }

    #[test]
    fn quota_binds_allocation() {
        let mut vm = Vmem::new(64 * PAGE_BYTES, 2);
        vm.set_quota(UserId(0), 2 * PAGE_BYTES);
        let sp = vm.allocate_space(UserId(0));
        vm.translate(sp, 0, true).unwrap();
        vm.translate(sp, PAGE_BYTES, true).unwrap();
        let e = vm.translate(sp, 2 * PAGE_BYTES, true);
        assert_eq!(e, Err(VmemError::QuotaExceeded(UserId(0))));
        assert_eq!(vm.resident_bytes(UserId(0)), 2 * PAGE_BYTES);
        assert!(vm.resident_bytes(UserId(0)) <= vm.quota_bytes(UserId(0)));
        assert_eq!(vm.counters.quota_rejections, 1);
    }

    #[test]
    fn spaces_never_share_frames() {
        let mut vm = Vmem::new(32 * PAGE_BYTES, 2);
        let a = vm.allocate_space(UserId(0));
        let b = vm.allocate_space(UserId(1));
        // Deliberately colliding virtual addresses.
        for page in 0..8u64 {
            vm.translate(a, page * PAGE_BYTES, true).unwrap();
            vm.translate(b, page * PAGE_BYTES, true).unwrap();
        }
        let map = vm.frame_map();
        let a_frames: Vec<u32> = map.iter().filter(|(s, _)| *s == a).map(|&(_, f)| f).collect();
        let b_frames: Vec<u32> = map.iter().filter(|(s, _)| *s == b).map(|&(_, f)| f).collect();
        for f in &a_frames {
            assert!(!b_frames.contains(f));
        }
        assert_eq!(a_frames.len() + b_frames.len(), 16);
    }

    #[test]
    fn free_space_returns_frames() {
        let mut vm = Vmem::new(4 * PAGE_BYTES, 1);
        let sp = vm.allocate_space(UserId(0));
        for page in 0..4u64 {
            vm.translate(sp, page * PAGE_BYTES, true).unwrap();
        }
        assert_eq!(vm.free_frames(), 0);
        vm.free_space(sp).unwrap();
        assert_eq!(vm.free_frames(), 4);
        assert_eq!(vm.resident_bytes(UserId(0)), 0);
        assert_eq!(vm.translate(sp, 0, true), Err(VmemError::BadSpace));
    }

    #[test]
    fn swap_out_picks_lru_and_swap_in_restores() {
        let mut vm = Vmem::new(8 * PAGE_BYTES, 1);
        let sp = vm.allocate_space(UserId(0));
        for page in 0..3u64 {
            vm.translate(sp, page * PAGE_BYTES, true).unwrap();
        }
        // Touch pages 0 and 2; page 1 is now coldest.
        vm.translate(sp, 0, false).unwrap();
        vm.translate(sp, 2 * PAGE_BYTES, false).unwrap();
        let (vs, page) = vm.coldest_page().unwrap();
        assert_eq!((vs, page), (sp, 1));

        vm.swap_out(vs, page).unwrap();
        assert_eq!(vm.translate(sp, PAGE_BYTES, false), Err(VmemError::SwappedOut(1)));
        vm.swap_in(vs, page).unwrap();
        vm.translate(sp, PAGE_BYTES, false).unwrap();
        assert_eq!(vm.counters.swap_outs, 1);
        assert_eq!(vm.counters.swap_ins, 1);
    }

    #[test]
    fn swap_stall_is_one_round_trip() {
        // 2 MB each way at 100 Gbps plus two link hops of 250 cycles.
        let c = swap_round_trip_cycles(100.0, 250);
        let one_way = crate::units::transfer_cycles(PAGE_BYTES, 100.0);
        assert_eq!(c, 2 * (one_way + 250));
    }
}
