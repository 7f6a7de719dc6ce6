//! Time and bandwidth conversions.
//!
//! All simulator state advances in whole clock cycles of the NIC fabric
//! (250 MHz, 4 ns per cycle). Reports convert to nanoseconds or Gbps at the
//! edges; nothing inside the event loop deals in floating-point time.

/// One simulated clock tick of the NIC fabric.
pub type Cycles = u64;

/// Fabric clock frequency in Hz.
pub const CLOCK_HZ: u64 = 250_000_000;

/// Nanoseconds per fabric cycle.
pub const NS_PER_CYCLE: u64 = 4;

/// Clock the ASIC projection mode assumes for on-chip components.
pub const ASIC_CLOCK_HZ: u64 = 2_000_000_000;

/// How many fabric cycles fit in one ASIC-clock slice of the same wall time.
pub const ASIC_SPEEDUP: u64 = ASIC_CLOCK_HZ / CLOCK_HZ;

pub fn us_to_cycles(us: f64) -> Cycles {
    (us * 1e-6 * CLOCK_HZ as f64).round() as Cycles
}

pub fn ms_to_cycles(ms: f64) -> Cycles {
    us_to_cycles(ms * 1e3)
}

pub fn cycles_to_ns(c: Cycles) -> u64 {
    c * NS_PER_CYCLE
}

pub fn cycles_to_us(c: Cycles) -> f64 {
    c as f64 * NS_PER_CYCLE as f64 * 1e-3
}

/// Fractional cycle counts (means) to nanoseconds.
pub fn cycles_to_ns_f(c: f64) -> f64 {
    c * NS_PER_CYCLE as f64
}

pub fn cycles_to_secs(c: Cycles) -> f64 {
    c as f64 / CLOCK_HZ as f64
}

/// Nanoseconds the same number of on-chip cycles would take at the ASIC clock.
pub fn cycles_to_asic_ns(c: Cycles) -> f64 {
    c as f64 * 1e9 / ASIC_CLOCK_HZ as f64
}

/// Bytes a flow at `gbps` moves per fabric cycle (fractional).
pub fn gbps_to_bytes_per_cycle(gbps: f64) -> f64 {
    gbps * 1e9 / 8.0 / CLOCK_HZ as f64
}

/// Whole cycles needed to push `bytes` through a `gbps` pipe. At least 1 for
/// any non-empty transfer so back-to-back events keep distinct timestamps.
pub fn transfer_cycles(bytes: u64, gbps: f64) -> Cycles {
    if bytes == 0 || gbps <= 0.0 {
        return 0;
    }
    let c = bytes as f64 / gbps_to_bytes_per_cycle(gbps);
    (c.ceil() as Cycles).max(1)
}

/// Gbps equivalent of `bytes` moved over `window` cycles.
pub fn bytes_over_cycles_to_gbps(bytes: u64, window: Cycles) -> f64 {
    if window == 0 {
        return 0.0;
    }
    bytes as f64 * 8.0 / (window as f64 / CLOCK_HZ as f64) / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_is_4ns() {
        assert_eq!(cycles_to_ns(1), 4);
        assert_eq!(cycles_to_ns(16), 64);
    }

    #[test]
    fn us_round_trip() {
        assert_eq!(us_to_cycles(20.0), 5_000);
        assert_eq!(us_to_cycles(100.0), 25_000);
        assert_eq!(ms_to_cycles(5.0), 1_250_000);
        assert!((cycles_to_us(5_000) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn bandwidth_conversions() {
        // 100 Gbps moves 50 bytes per 4 ns cycle.
        assert!((gbps_to_bytes_per_cycle(100.0) - 50.0).abs() < 1e-12);
        // 1 KB at 100 Gbps: 1024 / 50 = 20.48 -> 21 cycles.
        assert_eq!(transfer_cycles(1024, 100.0), 21);
        assert_eq!(transfer_cycles(0, 100.0), 0);
        // 4 MB bitstream at 800 MB/s (6.4 Gbps) is 5 ms = 1.25M cycles.
        let mb = 4 * 1024 * 1024;
        let eight_hundred_mbps = 800.0 * 1024.0 * 1024.0 * 8.0 / 1e9;
        let c = transfer_cycles(mb, eight_hundred_mbps);
        assert_eq!(c, ms_to_cycles(5.0));
    }

    #[test]
    fn rate_measurement_inverts() {
        let window = us_to_cycles(20.0);
        let per_cycle = gbps_to_bytes_per_cycle(10.0);
        let bytes = (per_cycle * window as f64) as u64;
        let gbps = bytes_over_cycles_to_gbps(bytes, window);
        assert!((gbps - 10.0).abs() < 0.01);
    }

    #[test]
    fn asic_projection_scales_core_cycles() {
        // 16 cycles is 64 ns on the fabric, 8 ns at 2 GHz.
        assert_eq!(cycles_to_ns(16), 64);
        assert!((cycles_to_asic_ns(16) - 8.0).abs() < 1e-12);
    }
}
