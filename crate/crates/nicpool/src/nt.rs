//! Built-in network-task behaviors.
//!
//! Each deployed NT instance owns one `BehaviorState`. Behaviors see only the
//! packet head (flow/seq/key) and decide what happens to the packet; latency
//! and bandwidth envelopes are modeled by the scheduler, not here. Pure
//! transform NTs (encryption, load balancing, compression) use `PassThrough`,
//! which is exactly "spend the catalog latency, forward".

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Fields of a packet the behaviors can see or rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHead {
    pub flow: u64,
    /// Transport sequence number (go-back-N).
    pub seq: u64,
    /// Application key (KV workloads).
    pub key: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    PassThrough,
    /// Drop packets whose flow id is on the deny list.
    Firewall { deny: Vec<u64> },
    /// Stateful flow rewrite; each flow gets a stable translated id.
    Nat,
    /// FIFO-replacement key cache; a hit answers the request directly.
    KvCache { entries: usize },
    /// Emit `copies` egress packets per ingress packet.
    KvReplicate { copies: u32 },
    /// Go-back-N receiver: deliver in order, NACK on a gap.
    GbnReceiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    FirewallDeny,
    OutOfOrder,
    DuplicateSeq,
}

/// What the instance did with the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtAction {
    Forward,
    Drop(DropReason),
    /// Short-circuit the rest of the DAG and egress a response now.
    RespondEarly,
    /// Forward, amplified to this many egress copies.
    Duplicate(u32),
}

/// Receiver-to-sender transport feedback, delivered out of band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// Cumulative: everything up to and including `upto` arrived.
    Ack { upto: u64 },
    /// Gap seen; retransmit everything after `last_acked`.
    Nack { last_acked: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NtOutcome {
    pub action: NtAction,
    pub feedback: Option<Feedback>,
    /// Virtual address of state written by this packet, if any. Drives
    /// on-demand paging for stateful NTs.
    pub state_write: Option<u64>,
}

impl NtOutcome {
    fn forward() -> Self {
        Self { action: NtAction::Forward, feedback: None, state_write: None }
    }
}

/// Slot size used when hashing flows/keys into a state table address.
const STATE_SLOT_BYTES: u64 = 64;

fn slot_addr(key: u64, state_bytes: u64) -> Option<u64> {
    if state_bytes < STATE_SLOT_BYTES {
        return None;
    }
    let slots = state_bytes / STATE_SLOT_BYTES;
    Some((key % slots) * STATE_SLOT_BYTES)
}

#[derive(Debug, Clone)]
pub enum BehaviorState {
    PassThrough,
    Firewall { deny: Vec<u64> },
    Nat { map: Vec<(u64, u64)>, next: u64 },
    KvCache { entries: usize, fifo: VecDeque<u64>, hits: u64, misses: u64 },
    KvReplicate { copies: u32 },
    GbnReceiver { flows: Vec<(u64, u64)> },
}

impl BehaviorState {
    pub fn new(spec: &BehaviorSpec) -> Self {
        match spec {
            BehaviorSpec::PassThrough => Self::PassThrough,
            BehaviorSpec::Firewall { deny } => Self::Firewall { deny: deny.clone() },
            BehaviorSpec::Nat => Self::Nat { map: Vec::new(), next: 1 },
            BehaviorSpec::KvCache { entries } => Self::KvCache {
                entries: (*entries).max(1),
                fifo: VecDeque::new(),
                hits: 0,
                misses: 0,
            },
            BehaviorSpec::KvReplicate { copies } => Self::KvReplicate { copies: (*copies).max(1) },
            BehaviorSpec::GbnReceiver => Self::GbnReceiver { flows: Vec::new() },
        }
    }

    /// Runs the behavior on one packet. `state_bytes` is the catalog's state
    /// reservation for the NT and bounds where state writes land.
    pub fn apply(&mut self, head: &mut PacketHead, state_bytes: u64) -> NtOutcome {
        match self {
            Self::PassThrough => NtOutcome::forward(),

            Self::Firewall { deny } => {
                if deny.contains(&head.flow) {
                    NtOutcome {
                        action: NtAction::Drop(DropReason::FirewallDeny),
                        feedback: None,
                        state_write: None,
                    }
                } else {
                    NtOutcome::forward()
                }
            }

            Self::Nat { map, next } => {
                let orig = head.flow;
                let translated = match map.iter().find(|(f, _)| *f == orig) {
                    Some(&(_, t)) => t,
                    None => {
                        let t = u64::MAX - *next;
                        *next += 1;
                        map.push((orig, t));
                        t
                    }
                };
                head.flow = translated;
                NtOutcome {
                    action: NtAction::Forward,
                    feedback: None,
                    state_write: slot_addr(orig, state_bytes),
                }
            }

            Self::KvCache { entries, fifo, hits, misses } => {
                if fifo.contains(&head.key) {
                    *hits += 1;
                    NtOutcome {
                        action: NtAction::RespondEarly,
                        feedback: None,
                        state_write: None,
                    }
                } else {
                    *misses += 1;
                    if fifo.len() == *entries {
                        fifo.pop_front();
                    }
                    fifo.push_back(head.key);
                    NtOutcome {
                        action: NtAction::Forward,
                        feedback: None,
                        state_write: slot_addr(head.key, state_bytes),
                    }
                }
            }

            Self::KvReplicate { copies } => NtOutcome {
                action: NtAction::Duplicate(*copies),
                feedback: None,
                state_write: None,
            },

            Self::GbnReceiver { flows } => {
                let expected = match flows.iter_mut().find(|(f, _)| *f == head.flow) {
                    Some(entry) => &mut entry.1,
                    None => {
                        flows.push((head.flow, 1));
                        &mut flows.last_mut().unwrap().1
                    }
                };
                if head.seq == *expected {
                    *expected += 1;
                    NtOutcome {
                        action: NtAction::Forward,
                        feedback: Some(Feedback::Ack { upto: head.seq }),
                        state_write: slot_addr(head.flow, state_bytes),
                    }
                } else if head.seq < *expected {
                    // Retransmit overshoot: already delivered, re-ack.
                    NtOutcome {
                        action: NtAction::Drop(DropReason::DuplicateSeq),
                        feedback: Some(Feedback::Ack { upto: *expected - 1 }),
                        state_write: None,
                    }
                } else {
                    NtOutcome {
                        action: NtAction::Drop(DropReason::OutOfOrder),
                        feedback: Some(Feedback::Nack { last_acked: *expected - 1 }),
                        state_write: None,
                    }
                }
            }
        }
    }

    pub fn cache_stats(&self) -> Option<(u64, u64)> {
        match self {
            Self::KvCache { hits, misses, .. } => Some((*hits, *misses)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(flow: u64, seq: u64, key: u64) -> PacketHead {
        PacketHead { flow, seq, key }
    }

    #[test]
    fn firewall_denies_listed_flows() {
        let mut fw = BehaviorState::new(&BehaviorSpec::Firewall { deny: vec![7, 9] });
        assert_eq!(fw.apply(&mut head(7, 0, 0), 0).action, NtAction::Drop(DropReason::FirewallDeny));
        assert_eq!(fw.apply(&mut head(8, 0, 0), 0).action, NtAction::Forward);
    }

    #[test]
    fn nat_is_a_stable_bijection() {
        let mut nat = BehaviorState::new(&BehaviorSpec::Nat);
        let mut a1 = head(100, 0, 0);
        let mut a2 = head(100, 0, 0);
        let mut b = head(200, 0, 0);
        nat.apply(&mut a1, 4096);
        nat.apply(&mut b, 4096);
        nat.apply(&mut a2, 4096);
        assert_eq!(a1.flow, a2.flow);
        assert_ne!(a1.flow, b.flow);
        assert_ne!(a1.flow, 100);
    }

    /// Replay a key sequence against a plain-vector FIFO to cross-check the
    /// cache's hit pattern.
    fn fifo_oracle(keys: &[u64], cap: usize) -> Vec<bool> {
        let mut store: Vec<u64> = Vec::new();
        keys.iter()
            .map(|k| {
                if store.contains(k) {
                    true
                } else {
                    if store.len() == cap {
                        store.remove(0);
                    }
                    store.push(*k);
                    false
                }
            })
            .collect()
    }

    #[test]
    fn kv_cache_fifo_matches_oracle() {
        let keys = [1u64, 2, 3, 1, 4, 1, 2, 5, 3, 3, 2, 1, 4, 4, 5, 1];
        let mut cache = BehaviorState::new(&BehaviorSpec::KvCache { entries: 3 });
        let got: Vec<bool> = keys
            .iter()
            .map(|&k| cache.apply(&mut head(0, 0, k), 1 << 20).action == NtAction::RespondEarly)
            .collect();
        assert_eq!(got, fifo_oracle(&keys, 3));
        let (hits, misses) = cache.cache_stats().unwrap();
        assert_eq!(hits + misses, keys.len() as u64);
        assert_eq!(hits, got.iter().filter(|&&h| h).count() as u64);
    }

    #[test]
    fn replication_duplicates() {
        let mut rep = BehaviorState::new(&BehaviorSpec::KvReplicate { copies: 3 });
        assert_eq!(rep.apply(&mut head(0, 0, 0), 0).action, NtAction::Duplicate(3));
    }

    #[test]
    fn gbn_receiver_acks_in_order_and_nacks_gaps() {
        let mut rx = BehaviorState::new(&BehaviorSpec::GbnReceiver);
        let st = 4096;
        let o1 = rx.apply(&mut head(1, 1, 0), st);
        let o2 = rx.apply(&mut head(1, 2, 0), st);
        assert_eq!(o1.action, NtAction::Forward);
        assert_eq!(o2.feedback, Some(Feedback::Ack { upto: 2 }));

        // Gap: 4 arrives while 3 is expected.
        let o4 = rx.apply(&mut head(1, 4, 0), st);
        assert_eq!(o4.action, NtAction::Drop(DropReason::OutOfOrder));
        assert_eq!(o4.feedback, Some(Feedback::Nack { last_acked: 2 }));

        // Sender goes back: 3 then 4 deliver exactly once.
        assert_eq!(rx.apply(&mut head(1, 3, 0), st).action, NtAction::Forward);
        assert_eq!(rx.apply(&mut head(1, 4, 0), st).action, NtAction::Forward);

        // A duplicate of 3 is re-acked but not re-delivered.
        let dup = rx.apply(&mut head(1, 3, 0), st);
        assert_eq!(dup.action, NtAction::Drop(DropReason::DuplicateSeq));
        assert_eq!(dup.feedback, Some(Feedback::Ack { upto: 4 }));
    }

    #[test]
    fn gbn_flows_are_independent() {
        let mut rx = BehaviorState::new(&BehaviorSpec::GbnReceiver);
        assert_eq!(rx.apply(&mut head(1, 1, 0), 0).action, NtAction::Forward);
        assert_eq!(rx.apply(&mut head(2, 1, 0), 0).action, NtAction::Forward);
        assert_eq!(rx.apply(&mut head(2, 2, 0), 0).action, NtAction::Forward);
        let gap = rx.apply(&mut head(1, 3, 0), 0);
        assert_eq!(gap.feedback, Some(Feedback::Nack { last_acked: 1 }));
    }
}
