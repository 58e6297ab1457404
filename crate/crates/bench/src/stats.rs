/// p50, p99 and p99.9 of a latency sample, in virtual microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatencyRecord {
    pub samples: usize,
    pub p50: u64,
    pub p99: u64,
    pub p999: u64,
    pub max: u64,
}

pub const PERCENTILE_LABELS: [&str; 3] = ["p50", "p99", "p99.9"];

/// Nearest-rank percentile of sorted data, in integer arithmetic.
/// `per_mille` is in (0, 1000]: 500 is the median, 999 is p99.9.
pub fn percentile(sorted: &[u64], per_mille: usize) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (per_mille * sorted.len()).div_ceil(1000);
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyRecord {
    pub fn from_samples(samples: &[u64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        Self {
            samples: sorted.len(),
            p50: percentile(&sorted, 500),
            p99: percentile(&sorted, 990),
            p999: percentile(&sorted, 999),
            max: sorted.last().copied().unwrap_or(0),
        }
    }

    pub fn values(&self) -> [u64; 3] {
        [self.p50, self.p99, self.p999]
    }

    pub fn is_monotonic(&self) -> bool {
        self.p50 <= self.p99 && self.p99 <= self.p999 && self.p999 <= self.max
    }
}
