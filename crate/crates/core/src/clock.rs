//! Shared monotonic clock.
//!
//! Samples and phase events must be stamped on the same clock. Timestamps are
//! nanoseconds since a run epoch taken from `CLOCK_MONOTONIC`, which is
//! system-wide, so an external workload process can stamp its events against
//! the epoch it receives in the protocol handshake.

/// Raw `CLOCK_MONOTONIC` reading in nanoseconds.
pub fn monotonic_now_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and CLOCK_MONOTONIC is always
    // supported on the platforms we build for.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_MONOTONIC) failed");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonotonicClock {
    epoch_ns: u64,
}

impl MonotonicClock {
    /// Starts a clock whose epoch is now.
    pub fn start() -> Self {
        Self {
            epoch_ns: monotonic_now_ns(),
        }
    }

    pub fn from_epoch(epoch_ns: u64) -> Self {
        Self { epoch_ns }
    }

    /// Absolute `CLOCK_MONOTONIC` value of the epoch; sent in the handshake.
    pub fn epoch_ns(&self) -> u64 {
        self.epoch_ns
    }

    /// Nanoseconds since the epoch.
    pub fn now_ns(&self) -> u64 {
        monotonic_now_ns().saturating_sub(self.epoch_ns)
    }
}
