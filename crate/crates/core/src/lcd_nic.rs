//! The least-common-denominator NIC: Ethernet frame I/O over a fixed number
//! of RX/TX queue pairs with 256 descriptors each.
//!
//! This is the only surface the stack touches. It deliberately has no way to
//! read or program RSS, install flow rules, coalesce descriptors, or register
//! application memory for DMA.

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam::queue::ArrayQueue;
use thiserror::Error;

/// Descriptors per RX and TX ring.
pub const QUEUE_DEPTH: usize = 256;
/// Largest Ethernet frame, excluding FCS.
pub const MTU: usize = 1514;
pub const ETH_HEADER_LEN: usize = 14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NicError {
    #[error("frame of {0} bytes is shorter than an Ethernet header")]
    Runt(usize),
    #[error("frame of {0} bytes exceeds the {MTU}-byte MTU")]
    Oversized(usize),
    #[error("queue depth must be exactly {QUEUE_DEPTH}, got {0}")]
    QueueDepth(usize),
    #[error("queue count {requested} outside 1..={max}")]
    QueueCount { requested: usize, max: usize },
    #[error("queue {0} does not exist")]
    InvalidQueue(u16),
}

/// A raw Ethernet frame.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    bytes: Vec<u8>,
}

impl Frame {
    pub fn new(bytes: Vec<u8>) -> Result<Self, NicError> {
        if bytes.len() < ETH_HEADER_LEN {
            return Err(NicError::Runt(bytes.len()));
        }
        if bytes.len() > MTU {
            return Err(NicError::Oversized(bytes.len()));
        }
        Ok(Self { bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({} bytes)", self.bytes.len())
    }
}

/// Index of an RX/TX queue pair. One per engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueueId(pub u16);

impl QueueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for QueueId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "q{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct NicConfig {
    num_queues: usize,
    queue_depth: usize,
    mtu: usize,
    local_mac: [u8; 6],
    local_ip: Ipv4Addr,
}

impl NicConfig {
    /// `max_queues` plays the role of the VM's core count.
    pub fn new(num_queues: usize, max_queues: usize, local_ip: Ipv4Addr) -> Result<Self, NicError> {
        if num_queues == 0 || num_queues > max_queues || num_queues > u16::MAX as usize {
            return Err(NicError::QueueCount { requested: num_queues, max: max_queues });
        }
        let ip = local_ip.octets();
        Ok(Self {
            num_queues,
            queue_depth: QUEUE_DEPTH,
            mtu: MTU,
            local_mac: [0x02, 0x00, ip[0], ip[1], ip[2], ip[3]],
            local_ip,
        })
    }

    /// Rejects anything but the fixed ring size the LCD model guarantees.
    pub fn with_queue_depth(mut self, depth: usize) -> Result<Self, NicError> {
        if depth != QUEUE_DEPTH {
            return Err(NicError::QueueDepth(depth));
        }
        self.queue_depth = depth;
        Ok(self)
    }

    pub fn num_queues(&self) -> usize {
        self.num_queues
    }

    pub fn queue_depth(&self) -> usize {
        self.queue_depth
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn local_mac(&self) -> [u8; 6] {
        self.local_mac
    }

    pub fn local_ip(&self) -> Ipv4Addr {
        self.local_ip
    }
}

/// What the stack may do with a NIC. Nothing else.
pub trait LcdNic: Send + Sync {
    /// Enqueue a prefix of `frames` on the queue's TX ring. Accepted frames are
    /// removed from the front of `frames`; the rest stay with the caller.
    fn tx_burst(&self, queue: QueueId, frames: &mut Vec<Frame>) -> Result<usize, NicError>;

    /// Dequeue up to `max` frames in arrival order.
    fn rx_burst(&self, queue: QueueId, max: usize) -> Result<Vec<Frame>, NicError>;

    fn num_queues(&self) -> usize;

    fn config(&self) -> &NicConfig;
}

/// A simulated vNIC. The fabric is the other end of its rings.
pub struct Nic {
    config: NicConfig,
    rx: Vec<ArrayQueue<Frame>>,
    tx: Vec<ArrayQueue<Frame>>,
    rx_drops: Vec<AtomicU64>,
}

impl Nic {
    pub fn new(config: NicConfig) -> Self {
        let n = config.num_queues;
        Self {
            rx: (0..n).map(|_| ArrayQueue::new(config.queue_depth)).collect(),
            tx: (0..n).map(|_| ArrayQueue::new(config.queue_depth)).collect(),
            rx_drops: (0..n).map(|_| AtomicU64::new(0)).collect(),
            config,
        }
    }

    fn check(&self, queue: QueueId) -> Result<usize, NicError> {
        if queue.index() < self.config.num_queues {
            Ok(queue.index())
        } else {
            Err(NicError::InvalidQueue(queue.0))
        }
    }

    /// Frames dropped because the RX ring was full when they arrived.
    pub fn rx_drops(&self, queue: QueueId) -> u64 {
        self.rx_drops
            .get(queue.index())
            .map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn rx_occupancy(&self, queue: QueueId) -> usize {
        self.rx.get(queue.index()).map_or(0, ArrayQueue::len)
    }

    pub fn tx_occupancy(&self, queue: QueueId) -> usize {
        self.tx.get(queue.index()).map_or(0, ArrayQueue::len)
    }

    /// Wire side: place an arriving frame on an RX ring, dropping it when full.
    pub(crate) fn deliver_rx(&self, queue: QueueId, frame: Frame) -> bool {
        let Some(ring) = self.rx.get(queue.index()) else {
            return false;
        };
        if ring.push(frame).is_err() {
            self.rx_drops[queue.index()].fetch_add(1, Ordering::Relaxed);
            return false;
        }
        true
    }

    /// Wire side: take everything currently on the TX rings, queue by queue.
    pub(crate) fn drain_tx(&self, out: &mut Vec<Frame>) {
        for ring in &self.tx {
            while let Some(f) = ring.pop() {
                out.push(f);
            }
        }
    }
}

impl LcdNic for Nic {
    fn tx_burst(&self, queue: QueueId, frames: &mut Vec<Frame>) -> Result<usize, NicError> {
        let ring = &self.tx[self.check(queue)?];
        let free = ring.capacity() - ring.len();
        let accepted = frames
            .iter()
            .take(free)
            .take_while(|f| f.len() <= self.config.mtu)
            .count();
        for frame in frames.drain(..accepted) {
            // Single producer per queue, so the capacity check above holds.
            let _ = ring.push(frame);
        }
        Ok(accepted)
    }

    fn rx_burst(&self, queue: QueueId, max: usize) -> Result<Vec<Frame>, NicError> {
        let ring = &self.rx[self.check(queue)?];
        let mut out = Vec::with_capacity(max.min(ring.len()));
        while out.len() < max {
            match ring.pop() {
                Some(f) => out.push(f),
                None => break,
            }
        }
        Ok(out)
    }

    fn num_queues(&self) -> usize {
        self.config.num_queues
    }

    fn config(&self) -> &NicConfig {
        &self.config
    }
}
