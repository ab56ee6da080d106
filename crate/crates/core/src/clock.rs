//! Time sources. The server stamps every event; the simulator swaps in a
//! virtual clock so runs are reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::model::Timestamp;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> Timestamp;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> Timestamp {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as Timestamp)
            .unwrap_or(0)
    }
}

/// Manually advanced clock.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        VirtualClock {
            now: AtomicU64::new(start),
        }
    }

    /// Moves time forward to `t`; earlier values are ignored.
    pub fn advance_to(&self, t: Timestamp) {
        self.now.fetch_max(t, Ordering::SeqCst);
    }

    pub fn advance_by(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> Timestamp {
        self.now.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_never_goes_back() {
        let c = VirtualClock::new(10);
        c.advance_to(5);
        assert_eq!(c.now_ms(), 10);
        c.advance_by(3);
        c.advance_to(20);
        assert_eq!(c.now_ms(), 20);
    }
}
