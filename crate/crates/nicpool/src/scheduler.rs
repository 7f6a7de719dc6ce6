//! Packet scheduling machinery: pacing token buckets, per-DAG route tables
//! with round-robin instance selection and overflow spill, whole-chain
//! versus per-NT credit dispatch decisions, and fork/join bookkeeping.
//!
//! The event loop in `sim` owns the state; everything here is small enough
//! to unit-test in isolation.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use crate::ids::{InstanceId, NicId, PktId};
use crate::units::{self, Cycles};

/// Continuous-refill token bucket. `take_partial` splits fluid demand
/// across routes so monitored loads are exact; `take_packet` gates whole
/// packets (level may overdraw, then recovers before the next accept).
#[derive(Debug, Clone)]
pub struct TokenBucket {
    /// Bytes per cycle.
    rate: f64,
    burst: f64,
    level: f64,
    last: Cycles,
}

impl TokenBucket {
    pub fn new(gbps: f64, burst_bytes: f64) -> Self {
        TokenBucket {
            rate: units::gbps_to_bytes_per_cycle(gbps),
            burst: burst_bytes,
            level: burst_bytes,
            last: 0,
        }
    }

    fn refill(&mut self, now: Cycles) {
        if now > self.last {
            self.level = (self.level + self.rate * (now - self.last) as f64).min(self.burst);
            self.last = now;
        }
    }

    pub fn set_rate_gbps(&mut self, now: Cycles, gbps: f64) {
        self.refill(now);
        self.rate = units::gbps_to_bytes_per_cycle(gbps);
    }

    pub fn rate_gbps(&self) -> f64 {
        self.rate * units::CLOCK_HZ as f64 * 8.0 / 1e9
    }

    /// Takes up to `bytes` of fluid demand; returns how much fit.
    pub fn take_partial(&mut self, now: Cycles, bytes: f64) -> f64 {
        self.refill(now);
        let take = bytes.min(self.level.max(0.0));
        self.level -= take;
        take
    }

    /// Admits one whole packet if the bucket is not in deficit.
    pub fn take_packet(&mut self, now: Cycles, bytes: u64) -> bool {
        self.refill(now);
        if self.level >= 0.0 {
            self.level -= bytes as f64;
            true
        } else {
            false
        }
    }

    /// Earliest cycle `take_packet` could succeed. None while the rate is
    /// zero and the bucket is in deficit.
    pub fn next_ready(&self, now: Cycles) -> Option<Cycles> {
        let mut level = self.level;
        if now > self.last {
            level = (level + self.rate * (now - self.last) as f64).min(self.burst);
        }
        if level >= 0.0 {
            return Some(now);
        }
        if self.rate <= 0.0 {
            return None;
        }
        Some(now + ((-level) / self.rate).ceil() as Cycles)
    }
}

/// How packets of one (user, DAG) reach a set of deployed chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteClass {
    /// The user's own instances.
    Dedicated,
    /// Skip-plan path through another tenant's shareable chains.
    Shared,
    /// Served by a peer NIC.
    Remote(NicId),
}

/// One scheduler hop: a chain instance plus which of its positions to skip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteStep {
    pub instance: InstanceId,
    pub skip: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Route {
    pub steps: Vec<RouteStep>,
    pub class: RouteClass,
    /// Split bucket at route capacity: decides where demand wants to go.
    pub intent: TokenBucket,
    /// Admission bucket at the allocated share: decides what gets in.
    pub admit: TokenBucket,
    /// Packets admitted-pending-tokens, FIFO.
    pub backlog: VecDeque<PktId>,
    /// Whether a release event for this backlog is already scheduled.
    pub release_armed: bool,
    /// All unskipped (instance, position) pairs along the route.
    pub positions: Vec<(InstanceId, u8)>,
}

impl Route {
    pub fn new(steps: Vec<RouteStep>, class: RouteClass, capacity_gbps: f64) -> Self {
        let positions = steps
            .iter()
            .flat_map(|s| {
                let inst = s.instance;
                s.skip
                    .iter()
                    .enumerate()
                    .filter(|(_, &sk)| !sk)
                    .map(move |(p, _)| (inst, p as u8))
            })
            .collect();
        Route {
            steps,
            class,
            intent: TokenBucket::new(capacity_gbps, 4096.0),
            admit: TokenBucket::new(capacity_gbps, 4096.0),
            backlog: VecDeque::new(),
            release_armed: false,
            positions,
        }
    }
}

/// Route choice for one arriving packet plus the fluid intent split.
#[derive(Debug, Clone, PartialEq)]
pub struct Picked {
    pub route: usize,
    /// (route index, intent bytes) pairs; sums to the packet size.
    pub intents: Vec<(usize, f64)>,
}

/// Alternative routes for one branch of one (user, DAG).
#[derive(Debug, Clone, Default)]
pub struct BranchRoutes {
    pub routes: Vec<Route>,
    rr: usize,
}

impl BranchRoutes {
    pub fn new(routes: Vec<Route>) -> Self {
        BranchRoutes { routes, rr: 0 }
    }

    fn dedicated(&self) -> Vec<usize> {
        (0..self.routes.len())
            .filter(|&i| self.routes[i].class == RouteClass::Dedicated)
            .collect()
    }

    /// Splits one packet's worth of demand across routes (own instances in
    /// round-robin order first, then shared/remote spill) and picks the
    /// route that absorbed the most of it.
    pub fn select(&mut self, now: Cycles, bytes: u64) -> Option<Picked> {
        if self.routes.is_empty() {
            return None;
        }
        let ded = self.dedicated();
        let mut order = Vec::with_capacity(self.routes.len());
        if !ded.is_empty() {
            for k in 0..ded.len() {
                order.push(ded[(self.rr + k) % ded.len()]);
            }
        }
        for i in 0..self.routes.len() {
            if self.routes[i].class != RouteClass::Dedicated {
                order.push(i);
            }
        }

        let mut remaining = bytes as f64;
        let mut intents: Vec<(usize, f64)> = Vec::new();
        for &i in &order {
            if remaining <= 1e-9 {
                break;
            }
            let got = self.routes[i].intent.take_partial(now, remaining);
            if got > 0.0 {
                intents.push((i, got));
                remaining -= got;
            }
        }
        if remaining > 1e-9 {
            // Everything saturated: the leftover demand still wants the
            // first-choice route.
            let first = order[0];
            match intents.iter_mut().find(|(i, _)| *i == first) {
                Some(e) => e.1 += remaining,
                None => intents.push((first, remaining)),
            }
        }

        let mut best = intents[0].0;
        let mut best_bytes = intents[0].1;
        for &(i, b) in &intents[1..] {
            if b > best_bytes {
                best = i;
                best_bytes = b;
            }
        }
        // Advance the round-robin cursor past a dedicated pick.
        if let Some(pos) = ded.iter().position(|&i| i == best) {
            self.rr = (pos + 1) % ded.len();
        }
        Some(Picked { route: best, intents })
    }
}

/// Whether a scheduler visit can reserve credits, and how far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    /// Credits reserved for every remaining unskipped NT: one visit covers
    /// the whole chain.
    Whole,
    /// Only the next NT's credit was available; the packet revisits the
    /// scheduler at each subsequent NT.
    Partial,
    /// Not even the next NT has credit: wait in its queue.
    Wait,
}

/// `credits[p]` is the free credit count of position `p`; decremented by
/// the caller according to the returned decision.
pub fn dispatch_decision(
    credits: &[u32],
    skip: &[bool],
    from: usize,
    whole_chain: bool,
) -> Dispatch {
    debug_assert_eq!(credits.len(), skip.len());
    let mut first_unskipped = None;
    for p in from..credits.len() {
        if !skip[p] {
            first_unskipped = Some(p);
            break;
        }
    }
    let Some(first) = first_unskipped else {
        // Nothing left to execute; treat as trivially dispatchable.
        return Dispatch::Whole;
    };
    if credits[first] == 0 {
        return Dispatch::Wait;
    }
    if !whole_chain {
        return Dispatch::Partial;
    }
    for p in first + 1..credits.len() {
        if !skip[p] && credits[p] == 0 {
            return Dispatch::Partial;
        }
    }
    Dispatch::Whole
}

/// Join bookkeeping for forked packets: the parent parks here until every
/// branch leg lands.
#[derive(Debug, Default)]
pub struct SyncBuffer {
    waiting: BTreeMap<PktId, u32>,
}

impl SyncBuffer {
    /// Registers a parent expecting `legs` arrivals.
    pub fn expect(&mut self, parent: PktId, legs: u32) {
        assert!(legs > 0);
        let prev = self.waiting.insert(parent, legs);
        assert!(prev.is_none(), "parent {parent:?} already waiting");
    }

    /// Records one leg's arrival; true when the join is complete.
    pub fn arrive(&mut self, parent: PktId) -> bool {
        let remaining = self.waiting.get_mut(&parent).expect("unknown join parent");
        *remaining -= 1;
        if *remaining == 0 {
            self.waiting.remove(&parent);
            true
        } else {
            false
        }
    }

    pub fn pending(&self) -> usize {
        self.waiting.len()
    }
}
