//! Deterministic simulated datapath between vNICs.
//!
//! Each attached host gets a secret 40-byte Toeplitz key and a 128-entry
//! indirection table. Neither is reachable from stack code; tests that need
//! to check steering go through the `oracle` feature.

mod toeplitz;

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clock::VirtualClock;
use crate::lcd_nic::{Frame, Nic, QueueId};
use crate::wire;

pub use crate::wire::FourTuple;
pub use toeplitz::{toeplitz_hash, RSS_KEY_LEN};

pub const INDIRECTION_ENTRIES: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("{name} = {value} is not a probability")]
    Probability { name: &'static str, value: f64 },
    #[error("a host with address {0} is already attached")]
    DuplicateHost(Ipv4Addr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FabricConfig {
    pub loss_probability: f64,
    /// Chance that a newly scheduled frame swaps places with the previous
    /// pending frame to the same host.
    pub reorder_probability: f64,
    pub base_delay_us: u64,
    pub delay_jitter_us: u64,
    pub rng_seed: u64,
    /// Byte-swap the computed hash before table lookup, as some vNICs do.
    pub hash_byte_swap: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            loss_probability: 0.0,
            reorder_probability: 0.0,
            base_delay_us: 10,
            delay_jitter_us: 0,
            rng_seed: 0,
            hash_byte_swap: false,
        }
    }
}

impl FabricConfig {
    pub fn validate(&self) -> Result<(), FabricError> {
        for (name, value) in [
            ("loss_probability", self.loss_probability),
            ("reorder_probability", self.reorder_probability),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(FabricError::Probability { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HostId(pub usize);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub frames_lost: u64,
    pub frames_dropped_ring_full: u64,
    pub frames_dropped_unroutable: u64,
    /// Indexed by host, then queue.
    pub delivered_per_queue: Vec<Vec<u64>>,
}

struct RssState {
    key: [u8; RSS_KEY_LEN],
    table: [QueueId; INDIRECTION_ENTRIES],
}

impl RssState {
    fn generate(rng: &mut ChaCha8Rng, num_queues: usize) -> Self {
        let mut key = [0u8; RSS_KEY_LEN];
        rng.fill_bytes(&mut key);
        let table = std::array::from_fn(|i| QueueId((i % num_queues) as u16));
        Self { key, table }
    }

    fn queue_for(&self, tuple: &FourTuple, byte_swap: bool) -> QueueId {
        let mut hash = toeplitz_hash(&self.key, tuple);
        if byte_swap {
            hash = hash.swap_bytes();
        }
        self.table[hash as usize % INDIRECTION_ENTRIES]
    }
}

struct HostPort {
    ip: Ipv4Addr,
    nic: Arc<Nic>,
    rss: RssState,
}

struct InFlight {
    dest: usize,
    frame: Frame,
}

/// Event key: delivery time, then scheduling order.
type Slot = (u64, u64);

/// Fault injection: return true to lose the frame.
pub type DropFilter = Box<dyn FnMut(&Frame) -> bool + Send>;

pub struct Fabric {
    config: FabricConfig,
    clock: VirtualClock,
    rng: ChaCha8Rng,
    hosts: Vec<HostPort>,
    by_ip: HashMap<Ipv4Addr, usize>,
    pending: BTreeMap<Slot, InFlight>,
    last_slot: HashMap<usize, Slot>,
    next_order: u64,
    stats: FabricStats,
    scratch: Vec<Frame>,
    drop_filter: Option<DropFilter>,
}

impl Fabric {
    pub fn new(config: FabricConfig, clock: VirtualClock) -> Result<Self, FabricError> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            clock,
            hosts: Vec::new(),
            by_ip: HashMap::new(),
            pending: BTreeMap::new(),
            last_slot: HashMap::new(),
            next_order: 0,
            stats: FabricStats::default(),
            scratch: Vec::new(),
            drop_filter: None,
        })
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn set_drop_filter(&mut self, filter: Option<DropFilter>) {
        self.drop_filter = filter;
    }

    /// Change the loss rate mid-run.
    pub fn set_loss_probability(&mut self, p: f64) -> Result<(), FabricError> {
        let config = FabricConfig { loss_probability: p, ..self.config.clone() };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    /// Connect a vNIC. Its RSS key comes from a per-host stream of the
    /// fabric seed, so it is fixed for a given seed and unknown otherwise.
    pub fn attach_host(&mut self, nic: Arc<Nic>) -> Result<HostId, FabricError> {
        use crate::lcd_nic::LcdNic;
        let ip = nic.config().local_ip();
        if self.by_ip.contains_key(&ip) {
            return Err(FabricError::DuplicateHost(ip));
        }
        let idx = self.hosts.len();
        let mut key_rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        key_rng.set_stream(idx as u64 + 1);
        let rss = RssState::generate(&mut key_rng, nic.num_queues());
        self.stats.delivered_per_queue.push(vec![0; nic.num_queues()]);
        self.hosts.push(HostPort { ip, nic, rss });
        self.by_ip.insert(ip, idx);
        Ok(HostId(idx))
    }

    pub fn host_ip(&self, host: HostId) -> Ipv4Addr {
        self.hosts[host.0].ip
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn in_flight(&self) -> u64 {
        self.pending.len() as u64
    }

    /// sent = delivered + lost + ring-full drops + unroutable + in flight.
    pub fn conserved(&self) -> bool {
        let s = &self.stats;
        s.frames_sent
            == s.frames_delivered
                + s.frames_lost
                + s.frames_dropped_ring_full
                + s.frames_dropped_unroutable
                + self.in_flight()
    }

    fn steer_to(&self, dest: usize, frame: &Frame) -> QueueId {
        match wire::parse_udp(frame.as_bytes()) {
            Ok((tuple, _)) => self.hosts[dest].rss.queue_for(&tuple, self.config.hash_byte_swap),
            Err(_) => QueueId(0),
        }
    }

    /// Put a frame on the wire at the current time.
    pub fn send(&mut self, frame: Frame) {
        self.stats.frames_sent += 1;
        let dest = wire::parse_udp(frame.as_bytes())
            .ok()
            .and_then(|(t, _)| self.by_ip.get(&t.dst_ip).copied());
        let Some(dest) = dest else {
            self.stats.frames_dropped_unroutable += 1;
            return;
        };
        // Draw every sample for every frame so one knob never shifts the
        // random stream seen by another.
        let lost = self.rng.gen_bool(self.config.loss_probability);
        let jitter = self.config.delay_jitter_us as i64;
        let offset = if jitter > 0 { self.rng.gen_range(-jitter..=jitter) } else { 0 };
        let swap = self.rng.gen_bool(self.config.reorder_probability);
        let lost = lost || self.drop_filter.as_mut().is_some_and(|f| f(&frame));
        if lost {
            self.stats.frames_lost += 1;
            return;
        }

        let now = self.clock.now();
        let at = (now + self.config.base_delay_us).saturating_add_signed(offset).max(now);
        let slot = (at, self.next_order);
        self.next_order += 1;
        let entry = InFlight { dest, frame };

        let previous = self.last_slot.get(&dest).copied().filter(|s| self.pending.contains_key(s));
        match previous {
            Some(prev) if swap => {
                // The earlier frame takes the later slot; both slots are >= now.
                let earlier = self.pending.remove(&prev).unwrap();
                self.pending.insert(prev, entry);
                self.pending.insert(slot, earlier);
                self.last_slot.insert(dest, slot.max(prev));
            }
            _ => {
                self.pending.insert(slot, entry);
                self.last_slot.insert(dest, slot);
            }
        }
    }

    /// Move everything sitting on the attached NICs' TX rings onto the wire.
    pub fn pump_tx(&mut self) -> usize {
        let mut frames = std::mem::take(&mut self.scratch);
        for host in &self.hosts {
            host.nic.drain_tx(&mut frames);
        }
        let n = frames.len();
        for f in frames.drain(..) {
            self.send(f);
        }
        self.scratch = frames;
        n
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.pending.keys().next().map(|&(t, _)| t)
    }

    /// Deliver every frame due at or before the current time, in order.
    pub fn deliver_due(&mut self) -> usize {
        let now = self.clock.now();
        let mut delivered = 0;
        while let Some(entry) = self.pending.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let InFlight { dest, frame } = entry.remove();
            let queue = self.steer_to(dest, &frame);
            if self.hosts[dest].nic.deliver_rx(queue, frame) {
                self.stats.frames_delivered += 1;
                self.stats.delivered_per_queue[dest][queue.index()] += 1;
            } else {
                self.stats.frames_dropped_ring_full += 1;
            }
            delivered += 1;
        }
        delivered
    }

    /// Run every delivery due in `[now, now + delta]` in timestamp order and
    /// leave the clock at `now + delta`. Returns the number of delivery events.
    pub fn advance(&mut self, delta: u64) -> usize {
        let target = self.clock.now() + delta;
        let mut events = 0;
        while let Some(t) = self.next_event_time() {
            if t > target {
                break;
            }
            self.clock.set(t);
            events += self.deliver_due();
        }
        self.clock.set(target);
        events
    }

    /// Ground-truth steering, for test oracles only.
    #[cfg(any(test, feature = "oracle"))]
    pub fn oracle_queue(&self, dest_ip: Ipv4Addr, tuple: &FourTuple) -> Option<QueueId> {
        let idx = *self.by_ip.get(&dest_ip)?;
        Some(self.hosts[idx].rss.queue_for(tuple, self.config.hash_byte_swap))
    }

    #[cfg(any(test, feature = "oracle"))]
    pub fn oracle_steer(&self, dest: HostId, frame: &Frame) -> QueueId {
        self.steer_to(dest.0, frame)
    }
}
