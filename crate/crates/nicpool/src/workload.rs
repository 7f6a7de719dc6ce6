//! Traffic generation: arrival pacing, packet sizes, flow/key selection and
//! an optional go-back-N sender sitting between generator and NIC.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use std::collections::VecDeque;

use crate::config::{Arrival, CompiledWorkload, KeyDist, LoadStep, SizeDist};
use crate::nt::PacketHead;
use crate::units::{self, Cycles};

/// One line of a replayable arrival trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub timestamp_ns: u64,
    pub user: String,
    pub dag: String,
    pub size_bytes: u64,
}

/// Parses `timestamp_ns,user,dag_uid,size_bytes` CSV (header optional).
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, String> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.starts_with("timestamp_ns") {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let err = |what: &str| format!("trace line {}: {what}", lineno + 1);
        let ts: u64 = fields
            .next()
            .ok_or_else(|| err("missing timestamp"))?
            .parse()
            .map_err(|_| err("bad timestamp_ns"))?;
        let user = fields.next().ok_or_else(|| err("missing user"))?.to_string();
        let dag = fields.next().ok_or_else(|| err("missing dag_uid"))?.to_string();
        let size: u64 = fields
            .next()
            .ok_or_else(|| err("missing size"))?
            .parse()
            .map_err(|_| err("bad size_bytes"))?;
        if fields.next().is_some() {
            return Err(err("too many fields"));
        }
        if size == 0 {
            return Err(err("size_bytes must be positive"));
        }
        rows.push(TraceRow { timestamp_ns: ts, user, dag, size_bytes: size });
    }
    let mut prev = 0;
    for r in &rows {
        if r.timestamp_ns < prev {
            return Err("trace timestamps must be non-decreasing".into());
        }
        prev = r.timestamp_ns;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
enum Sizer {
    Fixed(u64),
    Empirical(Vec<(u64, f64)>),
}

impl Sizer {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            Sizer::Fixed(b) => *b,
            Sizer::Empirical(cdf) => {
                let p: f64 = rng.random();
                for &(bytes, cum) in cdf {
                    if p <= cum {
                        return bytes;
                    }
                }
                cdf.last().unwrap().0
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Keyer {
    Uniform(u64),
    Zipf { dist: Zipf<f64> },
    Sequential { n: u64, next: u64 },
}

impl Keyer {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            Keyer::Uniform(n) => rng.random_range(0..*n),
            Keyer::Zipf { dist } => dist.sample(rng) as u64 - 1,
            Keyer::Sequential { n, next } => {
                let k = *next % *n;
                *next += 1;
                k
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Pacing {
    Constant,
    Poisson(Exp<f64>),
    OnOff { on: Cycles, off: Cycles },
}

/// What the generator wants the harness to do next.
#[derive(Debug, Clone, PartialEq)]
pub enum GenOut {
    /// Inject this packet now and call back at `next`.
    Send { head: PacketHead, bytes: u64, next: Cycles },
    /// Nothing to send now; call back at `next`.
    Idle { next: Cycles },
    /// Source exhausted (stop time reached or trace drained, and no
    /// retransmissions can ever be pending).
    Done,
}

/// Per-workload generator state. Deterministic given the workload seed.
#[derive(Debug, Clone)]
pub struct Generator {
    rng: ChaCha8Rng,
    pacing: Pacing,
    rate_gbps: f64,
    steps: Vec<LoadStep>,
    next_step: usize,
    sizer: Sizer,
    keyer: Keyer,
    flows: u64,
    next_flow: u64,
    stop: Option<Cycles>,
    on_until: Cycles,
    off_until: Cycles,
    /// Go-back-N sender, if the workload is reliable.
    pub gbn: Option<GbnSender>,
    seq_per_flow: Vec<u64>,
}

impl Generator {
    pub fn new(w: &CompiledWorkload, seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1)));
        // Warm the stream so adjacent workload seeds decorrelate.
        for _ in 0..4 {
            let _: u64 = rng.random();
        }
        let (pacing, rate) = match &w.entry.arrival {
            Arrival::Constant { gbps } => (Pacing::Constant, *gbps),
            Arrival::Poisson { gbps } => (Pacing::Poisson(Exp::new(1.0).unwrap()), *gbps),
            Arrival::OnOff { gbps, on_us, off_us } => (
                Pacing::OnOff {
                    on: units::us_to_cycles(*on_us),
                    off: units::us_to_cycles(*off_us),
                },
                *gbps,
            ),
            Arrival::Trace { .. } => (Pacing::Constant, 1.0),
        };
        let sizer = match &w.entry.size {
            SizeDist::Fixed { bytes } => Sizer::Fixed(*bytes),
            SizeDist::Empirical { cdf } => Sizer::Empirical(cdf.clone()),
        };
        let keyer = match w.entry.key_dist {
            KeyDist::Uniform => Keyer::Uniform(w.entry.keyspace),
            KeyDist::Zipf { theta } => Keyer::Zipf {
                dist: Zipf::new(w.entry.keyspace as f64, theta).expect("valid zipf"),
            },
            KeyDist::Sequential => Keyer::Sequential { n: w.entry.keyspace, next: 0 },
        };
        let on_until = match pacing {
            Pacing::OnOff { on, .. } => w.start + on,
            _ => Cycles::MAX,
        };
        Generator {
            rng,
            pacing,
            rate_gbps: rate,
            steps: w.entry.steps.clone(),
            next_step: 0,
            sizer,
            keyer,
            flows: w.entry.flows,
            next_flow: 0,
            stop: w.stop,
            on_until,
            off_until: 0,
            gbn: if w.entry.reliable { Some(GbnSender::new(w.entry.window)) } else { None },
            seq_per_flow: vec![0; w.entry.flows as usize],
        }
    }

    /// Current offered rate, stepping through the load timeline.
    fn rate_at(&mut self, now: Cycles) -> f64 {
        while self.next_step < self.steps.len()
            && units::us_to_cycles(self.steps[self.next_step].at_us) <= now
        {
            self.rate_gbps = self.steps[self.next_step].gbps;
            self.next_step += 1;
        }
        self.rate_gbps
    }

    /// Cycle of the next pending rate step, for re-arming idle periods.
    fn next_step_at(&self) -> Option<Cycles> {
        self.steps.get(self.next_step).map(|s| units::us_to_cycles(s.at_us))
    }

    pub fn fire(&mut self, now: Cycles) -> GenOut {
        if let Some(stop) = self.stop {
            if now >= stop {
                return GenOut::Done;
            }
        }
        let rate = self.rate_at(now);
        if rate <= 0.0 {
            // Parked until a step raises the rate again.
            return match self.next_step_at() {
                Some(at) => GenOut::Idle { next: at.max(now + 1) },
                None => GenOut::Done,
            };
        }
        if let Pacing::OnOff { on, off } = self.pacing {
            if now >= self.on_until {
                self.off_until = self.on_until + off;
                self.on_until = self.off_until + on;
            }
            if now < self.off_until {
                return GenOut::Idle { next: self.off_until };
            }
        }
        // Reliable senders only emit when the window allows.
        if let Some(gbn) = &self.gbn {
            if !gbn.can_send() {
                // Window closed: the harness re-fires the generator on ack.
                return GenOut::Idle { next: Cycles::MAX };
            }
        }
        let bytes = self.sizer.sample(&mut self.rng);
        let flow = self.next_flow % self.flows;
        self.next_flow += 1;
        let key = self.keyer.sample(&mut self.rng);
        let seq = match &mut self.gbn {
            Some(gbn) => gbn.emit(flow),
            None => {
                let s = self.seq_per_flow[flow as usize];
                self.seq_per_flow[flow as usize] += 1;
                s
            }
        };
        let gap_target = bytes as f64 / units::gbps_to_bytes_per_cycle(rate);
        let gap = match &self.pacing {
            Pacing::Constant | Pacing::OnOff { .. } => gap_target,
            Pacing::Poisson(exp) => exp.sample(&mut self.rng) * gap_target,
        };
        GenOut::Send {
            head: PacketHead { flow, seq, key },
            bytes,
            next: now + (gap.round() as Cycles).max(1),
        }
    }
}

/// Go-back-N sender state: a sliding window per workload (sequence numbers
/// are global across its flows; the receiver NT tracks each flow
/// separately, so reliable workloads should use `flows = 1`).
#[derive(Debug, Clone)]
pub struct GbnSender {
    window: u64,
    next_seq: u64,
    base: u64,
    /// Sequences sent but not yet acknowledged, in flight order.
    outstanding: VecDeque<u64>,
    /// Pending retransmissions after a nack.
    resend: VecDeque<u64>,
    pub retransmits: u64,
    pub acked: u64,
}

impl GbnSender {
    pub fn new(window: u64) -> Self {
        // Sequences are 1-based, matching the receiver's expected-seq init.
        GbnSender {
            window,
            next_seq: 1,
            base: 1,
            outstanding: VecDeque::new(),
            resend: VecDeque::new(),
            retransmits: 0,
            acked: 0,
        }
    }

    pub fn can_send(&self) -> bool {
        !self.resend.is_empty() || self.next_seq - self.base < self.window
    }

    /// Next sequence to put on the wire (retransmissions first).
    fn emit(&mut self, _flow: u64) -> u64 {
        if let Some(seq) = self.resend.pop_front() {
            self.retransmits += 1;
            return seq;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.outstanding.push_back(seq);
        seq
    }

    /// Cumulative ack: everything up to and including `upto` is done.
    pub fn on_ack(&mut self, upto: u64) {
        while let Some(&head) = self.outstanding.front() {
            if head <= upto {
                self.outstanding.pop_front();
                self.acked += 1;
            } else {
                break;
            }
        }
        if upto + 1 > self.base {
            self.base = upto + 1;
        }
        // An ack covering nacked sequences supersedes the pending resend.
        self.resend.retain(|&s| s > upto);
    }

    /// Nack with the last in-order sequence: go back and resend the rest.
    pub fn on_nack(&mut self, last_acked: u64) {
        self.on_ack(last_acked);
        self.resend.clear();
        for &seq in &self.outstanding {
            self.resend.push_back(seq);
        }
    }

    pub fn in_flight(&self) -> usize {
        self.outstanding.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ScenarioConfig, WorkloadEntry};

    fn wl(entry: WorkloadEntry) -> CompiledWorkload {
        let mut cfg = ScenarioConfig::example();
        cfg.workloads[0] = WorkloadEntry {
            user: "tenant-a".into(),
            dag: "forward".into(),
            ..entry
        };
        cfg.compile().unwrap().workloads.remove(0)
    }

    #[test]
    fn constant_arrivals_are_exactly_paced() {
        let w = wl(WorkloadEntry {
            arrival: Arrival::Constant { gbps: 100.0 },
            size: SizeDist::Fixed { bytes: 1050 },
            ..Default::default()
        });
        let mut g = Generator::new(&w, 7, 0);
        // 1050 bytes at 50 B/cycle = 21 cycles between sends.
        let mut t = 0;
        for _ in 0..5 {
            match g.fire(t) {
                GenOut::Send { next, bytes, .. } => {
                    assert_eq!(bytes, 1050);
                    assert_eq!(next, t + 21);
                    t = next;
                }
                other => panic!("expected send, got {other:?}"),
            }
        }
    }

    #[test]
    fn poisson_converges_to_rate() {
        let w = wl(WorkloadEntry {
            arrival: Arrival::Poisson { gbps: 10.0 },
            size: SizeDist::Fixed { bytes: 1000 },
            ..Default::default()
        });
        let mut g = Generator::new(&w, 11, 0);
        let mut t = 0;
        let mut sent = 0u64;
        let n = 20_000;
        for _ in 0..n {
            match g.fire(t) {
                GenOut::Send { next, bytes, .. } => {
                    sent += bytes;
                    t = next;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        let gbps = crate::units::bytes_over_cycles_to_gbps(sent, t);
        assert!((gbps - 10.0).abs() < 0.3, "measured {gbps}");
    }

    #[test]
    fn determinism_same_seed_same_stream() {
        let w = wl(WorkloadEntry {
            arrival: Arrival::Poisson { gbps: 10.0 },
            size: SizeDist::Empirical { cdf: vec![(64, 0.3), (512, 0.8), (1500, 1.0)] },
            key_dist: KeyDist::Zipf { theta: 0.99 },
            ..Default::default()
        });
        let mut a = Generator::new(&w, 42, 3);
        let mut b = Generator::new(&w, 42, 3);
        let mut t = 0;
        for _ in 0..500 {
            let (x, y) = (a.fire(t), b.fire(t));
            assert_eq!(x, y);
            if let GenOut::Send { next, .. } = x {
                t = next;
            }
        }
    }

    #[test]
    fn load_steps_change_pacing() {
        let w = wl(WorkloadEntry {
            arrival: Arrival::Constant { gbps: 50.0 },
            size: SizeDist::Fixed { bytes: 1000 },
            steps: vec![LoadStep { at_us: 4.0, gbps: 100.0 }],
            ..Default::default()
        });
        let mut g = Generator::new(&w, 1, 0);
        // Before the step: 1000 B at 25 B/cyc = 40 cycles.
        match g.fire(0) {
            GenOut::Send { next, .. } => assert_eq!(next, 40),
            other => panic!("{other:?}"),
        }
        // After 4 us (1000 cycles): gap halves to 20.
        match g.fire(1000) {
            GenOut::Send { next, .. } => assert_eq!(next, 1020),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn onoff_goes_quiet_during_off_periods() {
        let w = wl(WorkloadEntry {
            arrival: Arrival::OnOff { gbps: 100.0, on_us: 1.0, off_us: 1.0 },
            size: SizeDist::Fixed { bytes: 1000 },
            ..Default::default()
        });
        let mut g = Generator::new(&w, 1, 0);
        // on period = 250 cycles; sends at 20-cycle gaps until then.
        let mut t = 0;
        loop {
            match g.fire(t) {
                GenOut::Send { next, .. } => {
                    assert!(t < 250);
                    t = next;
                }
                GenOut::Idle { next } => {
                    assert_eq!(next, 500); // off ends one period later
                    break;
                }
                GenOut::Done => panic!("early done"),
            }
        }
    }

    #[test]
    fn gbn_window_blocks_and_acks_release() {
        let mut s = GbnSender::new(4);
        let flow = 0;
        for expect in 1..=4 {
            assert!(s.can_send());
            assert_eq!(s.emit(flow), expect);
        }
        assert!(!s.can_send());
        s.on_ack(2);
        assert!(s.can_send());
        assert_eq!(s.emit(flow), 5);
        assert_eq!(s.in_flight(), 3);
        assert_eq!(s.acked, 2);
    }

    #[test]
    fn gbn_nack_goes_back() {
        let mut s = GbnSender::new(8);
        for _ in 0..5 {
            s.emit(0);
        }
        // Receiver saw 1,2 then a gap.
        s.on_nack(2);
        assert_eq!(s.emit(0), 3);
        assert_eq!(s.emit(0), 4);
        assert_eq!(s.emit(0), 5);
        assert_eq!(s.retransmits, 3);
        // New data resumes after the resends.
        assert_eq!(s.emit(0), 6);
    }

    #[test]
    fn gbn_ack_supersedes_pending_resend() {
        let mut s = GbnSender::new(8);
        for _ in 0..4 {
            s.emit(0);
        }
        s.on_nack(1); // resend 2,3,4
        s.on_ack(3); // late ack: only 4 still needs resending
        assert_eq!(s.emit(0), 4);
        assert_eq!(s.retransmits, 1);
    }

    #[test]
    fn trace_parsing_and_validation() {
        let text = "timestamp_ns,user,dag_uid,size_bytes\n0,a,d,64\n100,a,d,128\n";
        let rows = parse_trace(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], TraceRow {
            timestamp_ns: 100,
            user: "a".into(),
            dag: "d".into(),
            size_bytes: 128,
        });
        assert!(parse_trace("5,a,d,64\n1,a,d,64\n").is_err());
        assert!(parse_trace("1,a,d\n").is_err());
        assert!(parse_trace("1,a,d,0\n").is_err());
    }

    #[test]
    fn sequential_keys_wrap() {
        let w = wl(WorkloadEntry {
            key_dist: KeyDist::Sequential,
            keyspace: 3,
            ..Default::default()
        });
        let mut g = Generator::new(&w, 1, 0);
        let mut keys = Vec::new();
        let mut t = 0;
        for _ in 0..6 {
            if let GenOut::Send { head, next, .. } = g.fire(t) {
                keys.push(head.key);
                t = next;
            }
        }
        assert_eq!(keys, vec![0, 1, 2, 0, 1, 2]);
    }
}
