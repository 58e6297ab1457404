use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Shared virtual time in microseconds. Only the driver moves it, and only
/// forward.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.0.load(Ordering::Acquire)
    }

    /// Move to `t`. Earlier times are ignored.
    pub fn set(&self, t: u64) {
        self.0.fetch_max(t, Ordering::AcqRel);
    }

    pub fn advance(&self, delta: u64) -> u64 {
        self.0.fetch_add(delta, Ordering::AcqRel) + delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_goes_backwards() {
        let c = VirtualClock::new();
        c.set(10);
        c.set(5);
        assert_eq!(c.now(), 10);
        assert_eq!(c.advance(3), 13);
        let shared = c.clone();
        shared.set(20);
        assert_eq!(c.now(), 20);
    }
}
