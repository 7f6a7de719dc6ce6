//! Rack-level coordination: the periodically gossiped per-NIC statistics
//! view and the peer-selection policy used when a NIC overloads.
//!
//! Gossip is broadcast on a period and arrives after the link latency, so
//! every NIC acts on a slightly stale picture of its peers. All policy here
//! is pure functions over that view, which keeps the tie-breaking rules
//! (fewest hops, then lowest id) easy to test.

use crate::config::Topology;
use crate::ids::{ChainKindId, NicId};
use crate::units::Cycles;

/// One NIC's advertised state, as its peers see it.
#[derive(Debug, Clone, PartialEq)]
pub struct NicAdvert {
    pub nic: NicId,
    /// When the advert was generated (senders side).
    pub generated_at: Cycles,
    pub free_regions: u32,
    pub victim_regions: u32,
    /// Sum of last-epoch intended load across all chains (Gbps).
    pub intended_gbps: f64,
    /// Ingress port headroom (Gbps).
    pub port_headroom_gbps: f64,
    /// Chain kinds this NIC currently serves, with spare capacity each
    /// (capacity minus intended load, clamped at zero).
    pub chains: Vec<(ChainKindId, f64)>,
}

impl NicAdvert {
    pub fn spare_for(&self, kind: ChainKindId) -> Option<f64> {
        self.chains.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s)
    }
}

/// Hop count between two NICs for the configured wiring.
pub fn hops(topology: Topology, n: u32, a: NicId, b: NicId) -> u32 {
    if a == b {
        return 0;
    }
    match topology {
        Topology::Full => 1,
        Topology::Ring => {
            let d = (a.0 as i64 - b.0 as i64).unsigned_abs() as u32 % n;
            d.min(n - d)
        }
    }
}

/// How an overloaded NIC offloads onto the chosen peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteMode {
    /// Peer already runs the chain: redirect packets into its instance.
    RedirectExisting,
    /// Peer has room: ship the bitstream and launch a new instance there.
    RemoteLaunch,
}

/// Picks the peer to absorb `needed_gbps` of a chain's overflow.
///
/// Preference order:
/// 1. peers already serving the same chain kind with spare bandwidth,
///    fewest hops first, then lowest NIC id;
/// 2. peers with a free (or victim) region to launch into, same ordering;
/// 3. nobody (`None`): the overload stays local.
pub fn select_remote(
    view: &[NicAdvert],
    topology: Topology,
    rack_size: u32,
    me: NicId,
    kind: ChainKindId,
    needed_gbps: f64,
) -> Option<(NicId, RemoteMode)> {
    let mut best: Option<(u32, u32, NicId, RemoteMode)> = None;
    let mut consider = |cand: (u32, u32, NicId, RemoteMode)| {
        let better = match &best {
            None => true,
            // RedirectExisting (rank 0) always beats RemoteLaunch (rank 1);
            // within a rank: fewest hops, then lowest id.
            Some(b) => (cand.0, cand.1, cand.2 .0) < (b.0, b.1, b.2 .0),
        };
        if better {
            best = Some(cand);
        }
    };
    for ad in view {
        if ad.nic == me {
            continue;
        }
        let h = hops(topology, rack_size, me, ad.nic);
        if let Some(spare) = ad.spare_for(kind) {
            if spare >= needed_gbps {
                consider((0, h, ad.nic, RemoteMode::RedirectExisting));
                continue;
            }
        }
        if ad.free_regions > 0 || ad.victim_regions > 0 {
            consider((1, h, ad.nic, RemoteMode::RemoteLaunch));
        }
    }
    best.map(|(_, _, nic, mode)| (nic, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn advert(nic: u32, free: u32, chains: Vec<(ChainKindId, f64)>) -> NicAdvert {
        NicAdvert {
            nic: NicId(nic),
            generated_at: 0,
            free_regions: free,
            victim_regions: 0,
            intended_gbps: 0.0,
            port_headroom_gbps: 100.0,
            chains,
        }
    }

    #[test]
    fn ring_hops_wrap() {
        assert_eq!(hops(Topology::Ring, 8, NicId(0), NicId(1)), 1);
        assert_eq!(hops(Topology::Ring, 8, NicId(0), NicId(7)), 1);
        assert_eq!(hops(Topology::Ring, 8, NicId(0), NicId(4)), 4);
        assert_eq!(hops(Topology::Ring, 8, NicId(2), NicId(2)), 0);
        assert_eq!(hops(Topology::Full, 8, NicId(0), NicId(5)), 1);
    }

    #[test]
    fn same_chain_peer_wins_over_free_region() {
        let kind = ChainKindId(3);
        let view = vec![
            advert(0, 3, vec![]),
            advert(1, 2, vec![]),
            advert(2, 0, vec![(kind, 5.0)]),
        ];
        let got = select_remote(&view, Topology::Ring, 3, NicId(0), kind, 4.0);
        assert_eq!(got, Some((NicId(2), RemoteMode::RedirectExisting)));
    }

    #[test]
    fn insufficient_spare_falls_back_to_launch() {
        let kind = ChainKindId(3);
        let view = vec![
            advert(0, 0, vec![]),
            advert(1, 1, vec![]),
            advert(2, 0, vec![(kind, 2.0)]),
        ];
        // Needs 4, peer 2 only spares 2: launch on peer 1 instead.
        let got = select_remote(&view, Topology::Ring, 3, NicId(0), kind, 4.0);
        assert_eq!(got, Some((NicId(1), RemoteMode::RemoteLaunch)));
    }

    #[test]
    fn ties_break_on_hops_then_id() {
        let kind = ChainKindId(0);
        let view = vec![
            advert(0, 0, vec![]),
            advert(1, 0, vec![(kind, 9.0)]), // 1 hop
            advert(2, 0, vec![(kind, 9.0)]), // 2 hops
            advert(3, 0, vec![(kind, 9.0)]), // 1 hop (ring of 4)
        ];
        let got = select_remote(&view, Topology::Ring, 4, NicId(0), kind, 1.0);
        assert_eq!(got, Some((NicId(1), RemoteMode::RedirectExisting)));

        // Full mesh: all 1 hop, lowest id wins.
        let got = select_remote(&view, Topology::Full, 4, NicId(0), kind, 1.0);
        assert_eq!(got, Some((NicId(1), RemoteMode::RedirectExisting)));
    }

    #[test]
    fn no_candidate_returns_none() {
        let view = vec![advert(0, 0, vec![]), advert(1, 0, vec![])];
        assert_eq!(
            select_remote(&view, Topology::Ring, 2, NicId(0), ChainKindId(0), 1.0),
            None
        );
    }
}
