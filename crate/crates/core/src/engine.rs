//! Per-core engines.
//!
//! An engine owns one NIC queue pair, the channels bound to it, and every
//! flow and handshake whose traffic lands on that queue. It never looks at
//! another engine's state. Outgoing flows get a local flow port from the
//! engine's own slice of the port space, so any engine can tell which engine
//! a misdelivered frame belongs to without asking.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{ChannelCore, ChannelError, ConnectReport, ConnectStatus, Delivery, FlowHandle, Message};
use crate::handshake::{
    ClientHandshake, HandshakeError, MachnetPortPair, ServerHandshake, SprayConfig, SynAckOutcome,
};
use crate::lcd_nic::{Frame, LcdNic, QueueId};
use crate::transport::{unpack_pair, FlowState, FlowStats, TransportConfig};
use crate::wire::{self, FourTuple, PacketType, Segment, UdpPortPair, WireHeader, FLAG_HANDSHAKE};

pub const BURST: usize = 32;
pub const CTRL_INTERVAL_US: u64 = 50;
pub const REAP_AFTER_US: u64 = 3_000_000;
/// Outgoing flows use local ports `FLOW_PORT_BASE + k * n + engine`.
pub const FLOW_PORT_BASE: u16 = 49152;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnginePolicy {
    RoundRobin,
    Pinned(QueueId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub burst: usize,
    pub ctrl_interval_us: u64,
    /// Virtual time one unit of work (a frame, message or timer) keeps the
    /// engine busy. Zero in real-time mode.
    pub per_item_cost_us: u64,
    pub reap_after_us: u64,
    pub transport: TransportConfig,
    pub spray: SprayConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            burst: BURST,
            ctrl_interval_us: CTRL_INTERVAL_US,
            per_item_cost_us: 1,
            reap_after_us: REAP_AFTER_US,
            transport: TransportConfig::default(),
            spray: SprayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub remote_ip: Ipv4Addr,
    pub ports: MachnetPortPair,
}

/// Snapshot of one established flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowInfo {
    pub handle: FlowHandle,
    pub key: FlowKey,
    pub engine: QueueId,
    pub tx_udp: UdpPortPair,
    pub rx_udp: UdpPortPair,
    pub outgoing: bool,
}

macro_rules! engine_stats {
    ($($field:ident),* $(,)?) => {
        #[derive(Debug, Clone, Default, PartialEq, Eq)]
        pub struct EngineStats {
            $(pub $field: u64,)*
        }

        impl EngineStats {
            pub const COLUMNS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn values(&self) -> Vec<u64> {
                vec![$(self.$field),*]
            }

            pub fn add(&mut self, other: &Self) {
                $(self.$field += other.$field;)*
            }
        }
    };
}

engine_stats!(
    iterations,
    idle_iterations,
    frames_rx,
    frames_tx,
    parse_errors,
    syns_sent,
    synacks_sent,
    handshake_acks_sent,
    handshake_retries,
    handshakes_established,
    handshakes_accepted,
    handshakes_failed,
    handshakes_reaped,
    syn_no_listener,
    syn_wrong_engine,
    duplicate_syn,
    synack_wrong_engine,
    synack_discarded,
    unknown_handshake,
    misrouted,
    data_before_established,
    unknown_flow,
    stale_sends,
    rx_backpressure_drops,
    messages_in,
    messages_out,
    flows_closed,
    flow_resets,
    retransmissions,
    tx_ring_full,
    timers_fired,
    channel_tx_high_water,
    channel_rx_high_water,
);

/// Requests from application threads, handled at the control interval.
pub(crate) enum Command {
    Attach(Arc<ChannelCore>),
    Listen { port: u16, target: QueueId, channel: u32 },
    Connect { channel: u32, handle: FlowHandle, remote_ip: Ipv4Addr, ports: MachnetPortPair },
    Close { handle: FlowHandle },
}

/// Per-host control state reachable from application threads.
pub(crate) struct HostShared {
    pub local_ip: Ipv4Addr,
    pub num_engines: u16,
    pub initialized: AtomicBool,
    inboxes: Vec<Mutex<VecDeque<Command>>>,
    round_robin: AtomicUsize,
    next_channel: AtomicU32,
    next_handle: AtomicU64,
    listeners: Mutex<HashMap<u16, QueueId>>,
    ports: Vec<Mutex<BTreeSet<u16>>>,
}

impl HostShared {
    pub fn new(local_ip: Ipv4Addr, num_engines: u16) -> Self {
        Self {
            local_ip,
            num_engines,
            initialized: AtomicBool::new(false),
            inboxes: (0..num_engines).map(|_| Mutex::new(VecDeque::new())).collect(),
            round_robin: AtomicUsize::new(0),
            next_channel: AtomicU32::new(0),
            next_handle: AtomicU64::new(1),
            listeners: Mutex::new(HashMap::new()),
            ports: (0..num_engines).map(|_| Mutex::new(BTreeSet::new())).collect(),
        }
    }

    /// RoundRobin gives the k-th round-robin attachment engine k mod n.
    pub fn assign_channel(&self, policy: EnginePolicy) -> Result<QueueId, ChannelError> {
        let n = self.num_engines;
        match policy {
            EnginePolicy::RoundRobin => {
                let k = self.round_robin.fetch_add(1, Ordering::Relaxed);
                Ok(QueueId((k % n as usize) as u16))
            }
            EnginePolicy::Pinned(e) if e.0 < n => Ok(e),
            EnginePolicy::Pinned(e) => Err(ChannelError::InvalidEngine { requested: e.0, engines: n }),
        }
    }

    pub fn next_channel_id(&self) -> u32 {
        self.next_channel.fetch_add(1, Ordering::Relaxed)
    }

    pub fn next_handle(&self) -> FlowHandle {
        FlowHandle(self.next_handle.fetch_add(1, Ordering::Relaxed))
    }

    pub fn submit(&self, engine: QueueId, cmd: Command) {
        self.inboxes[engine.index()].lock().push_back(cmd);
    }

    fn inbox_pending(&self, engine: QueueId) -> bool {
        !self.inboxes[engine.index()].lock().is_empty()
    }

    /// Record the listener and tell every engine where it lives.
    pub fn register_listener(&self, port: u16, target: QueueId, channel: u32) -> Result<(), ChannelError> {
        if port >= FLOW_PORT_BASE {
            return Err(ChannelError::ReservedPort(port));
        }
        let mut listeners = self.listeners.lock();
        if listeners.contains_key(&port) {
            return Err(ChannelError::PortInUse(port));
        }
        listeners.insert(port, target);
        for e in 0..self.num_engines {
            self.submit(QueueId(e), Command::Listen { port, target, channel });
        }
        Ok(())
    }

    pub fn allocate_port(&self, engine: QueueId) -> Result<u16, ChannelError> {
        let n = self.num_engines as u32;
        let mut used = self.ports[engine.index()].lock();
        let port = (0u32..)
            .map(|k| FLOW_PORT_BASE as u32 + k * n + engine.0 as u32)
            .take_while(|&p| p <= u16::MAX as u32)
            .map(|p| p as u16)
            .find(|p| !used.contains(p))
            .ok_or(ChannelError::PortsExhausted)?;
        used.insert(port);
        Ok(port)
    }

    fn release_port(&self, engine: QueueId, port: u16) {
        self.ports[engine.index()].lock().remove(&port);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimerKey {
    Flow(FlowKey),
    Client(FlowKey),
    Reap(FlowKey),
}

struct Binding {
    core: Arc<ChannelCore>,
    /// Deliveries waiting for room on the application's queue.
    overflow: VecDeque<Delivery>,
    /// A message taken from the channel whose flow has no room yet.
    held: Option<Message>,
}

struct Listener {
    target: QueueId,
    channel: Option<u32>,
}

struct PendingClient {
    hs: ClientHandshake,
    handle: FlowHandle,
    channel: u32,
}

struct PendingServer {
    hs: ServerHandshake,
    channel: u32,
}

#[derive(Default)]
struct Closing {
    fin_sent_at: Option<u64>,
    tries: u32,
}

struct FlowEntry {
    state: FlowState,
    handle: FlowHandle,
    channel: u32,
    outgoing: bool,
    closing: Option<Closing>,
}

pub struct Engine {
    id: QueueId,
    nic: Arc<dyn LcdNic>,
    host: Arc<HostShared>,
    cfg: EngineConfig,
    rng: ChaCha8Rng,
    local_ip: Ipv4Addr,
    local_mac: [u8; 6],

    channels: BTreeMap<u32, Binding>,
    listeners: BTreeMap<u16, Listener>,
    clients: BTreeMap<FlowKey, PendingClient>,
    servers: BTreeMap<FlowKey, PendingServer>,
    flows: BTreeMap<FlowKey, FlowEntry>,
    handles: BTreeMap<FlowHandle, FlowKey>,
    touched: BTreeSet<FlowHandle>,

    timers: BTreeSet<(u64, TimerKey)>,
    armed: BTreeMap<TimerKey, u64>,
    dirty: BTreeSet<FlowKey>,
    tx_pending: Vec<Frame>,
    last_ctrl_slot: Option<u64>,
    busy_until: u64,

    stats: EngineStats,
    retired: FlowStats,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("id", &self.id)
            .field("flows", &self.flows.len())
            .field("channels", &self.channels.len())
            .finish()
    }
}

impl Engine {
    pub(crate) fn new(id: QueueId, nic: Arc<dyn LcdNic>, host: Arc<HostShared>, cfg: EngineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.0 as u64);
        Self {
            local_ip: nic.config().local_ip(),
            local_mac: nic.config().local_mac(),
            id,
            nic,
            host,
            cfg,
            rng,
            channels: BTreeMap::new(),
            listeners: BTreeMap::new(),
            clients: BTreeMap::new(),
            servers: BTreeMap::new(),
            flows: BTreeMap::new(),
            handles: BTreeMap::new(),
            touched: BTreeSet::new(),
            timers: BTreeSet::new(),
            armed: BTreeMap::new(),
            dirty: BTreeSet::new(),
            tx_pending: Vec::new(),
            last_ctrl_slot: None,
            busy_until: 0,
            stats: EngineStats::default(),
            retired: FlowStats::default(),
        }
    }

    pub fn id(&self) -> QueueId {
        self.id
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    pub fn pending_handshakes(&self) -> usize {
        self.clients.len() + self.servers.len()
    }

    pub fn flows(&self) -> Vec<FlowInfo> {
        self.flows
            .iter()
            .map(|(key, e)| FlowInfo {
                handle: e.handle,
                key: *key,
                engine: e.state.engine(),
                tx_udp: e.state.tx_udp(),
                rx_udp: e.state.rx_udp(),
                outgoing: e.outgoing,
            })
            .collect()
    }

    /// Every flow handle this engine has ever owned.
    pub fn touched_flows(&self) -> &BTreeSet<FlowHandle> {
        &self.touched
    }

    /// Live flows whose state names a different engine. Always zero.
    pub fn foreign_flows(&self) -> usize {
        self.flows.values().filter(|e| e.state.engine() != self.id).count()
    }

    /// Transport counters summed over live and finished flows.
    pub fn transport_totals(&self) -> (FlowStats, u64) {
        let mut total = self.retired.clone();
        let mut in_flight = 0;
        for e in self.flows.values() {
            add_flow_stats(&mut total, e.state.stats());
            in_flight += e.state.in_flight();
        }
        (total, in_flight)
    }

    /// True when there is work that needs no timer to come due.
    pub fn has_local_work(&self) -> bool {
        !self.tx_pending.is_empty()
            || self.channels.values().any(|b| {
                let can_send = b.held.as_ref().map_or(b.core.has_tx(), |m| self.has_room(m.flow));
                can_send || (!b.overflow.is_empty() && b.core.rx_has_space())
            })
    }

    fn has_room(&self, flow: FlowHandle) -> bool {
        self.handles
            .get(&flow)
            .and_then(|k| self.flows.get(k))
            .is_none_or(|e| e.state.backlog() < self.cfg.transport.window as usize)
    }

    fn ctrl_slot(&self, now: u64) -> u64 {
        now / self.cfg.ctrl_interval_us.max(1)
    }

    fn ctrl_due(&self, now: u64) -> bool {
        self.last_ctrl_slot.is_none_or(|s| self.ctrl_slot(now) > s)
    }

    /// Earliest time the driver should call `run_iteration` again.
    /// `rx_waiting` says whether the NIC has frames on this engine's queue.
    pub fn next_wakeup(&self, now: u64, rx_waiting: bool) -> Option<u64> {
        let mut t = self.timers.first().map(|&(t, _)| t);
        if self.host.inbox_pending(self.id) {
            let slot_start = |s: u64| s * self.cfg.ctrl_interval_us.max(1);
            let at = match self.last_ctrl_slot {
                Some(s) if self.ctrl_slot(now) <= s => slot_start(s + 1),
                _ => now,
            };
            t = Some(t.map_or(at, |x| x.min(at)));
        }
        if rx_waiting || self.has_local_work() {
            t = Some(now);
        }
        t.map(|t| t.max(self.busy_until).max(now))
    }

    /// One pass of the run-to-completion loop. Returns the work done.
    pub fn run_iteration(&mut self, now: u64) -> usize {
        self.stats.iterations += 1;
        let mut work = 0;

        let frames = self.nic.rx_burst(self.id, self.cfg.burst).unwrap_or_default();
        work += frames.len();
        for frame in frames {
            self.stats.frames_rx += 1;
            self.handle_frame(&frame, now);
        }

        work += self.service_channels();
        work += self.flush_dirty(now);
        work += self.fire_timers(now);
        if self.ctrl_due(now) {
            self.last_ctrl_slot = Some(self.ctrl_slot(now));
            work += self.process_commands(now);
            work += self.flush_dirty(now);
        }
        self.flush_tx();

        if work == 0 {
            self.stats.idle_iterations += 1;
        }
        self.busy_until = now + self.cfg.per_item_cost_us * work as u64;
        work
    }

    fn emit(&mut self, remote_ip: Ipv4Addr, seg: &Segment) {
        let tuple = FourTuple {
            src_ip: self.local_ip,
            dst_ip: remote_ip,
            src_port: seg.udp.src,
            dst_port: seg.udp.dst,
        };
        if let Ok(frame) = wire::build_frame(self.local_mac, &tuple, &seg.header, &seg.payload) {
            self.tx_pending.push(frame);
        }
    }

    fn flush_tx(&mut self) {
        if self.tx_pending.is_empty() {
            return;
        }
        let before = self.tx_pending.len();
        let sent = self.nic.tx_burst(self.id, &mut self.tx_pending).unwrap_or(0);
        self.stats.frames_tx += sent as u64;
        if sent < before {
            self.stats.tx_ring_full += 1;
        }
    }

    fn arm(&mut self, key: TimerKey, at: Option<u64>) {
        let current = self.armed.get(&key).copied();
        if current == at {
            return;
        }
        if let Some(c) = current {
            self.timers.remove(&(c, key));
            self.armed.remove(&key);
        }
        if let Some(t) = at {
            self.timers.insert((t, key));
            self.armed.insert(key, t);
        }
    }

    fn flow_deadline(&self, key: &FlowKey) -> Option<u64> {
        let entry = self.flows.get(key)?;
        let fin = entry.closing.as_ref().and_then(|c| {
            c.fin_sent_at.map(|t| t + (self.cfg.transport.rto_base_us << c.tries.min(16)).min(self.cfg.transport.rto_max_us))
        });
        [entry.state.next_deadline(), fin].into_iter().flatten().min()
    }

    fn rearm_flow(&mut self, key: FlowKey) {
        let at = self.flow_deadline(&key);
        self.arm(TimerKey::Flow(key), at);
    }

    fn owner_of(&self, local_port: u16) -> Option<QueueId> {
        if let Some(l) = self.listeners.get(&local_port) {
            return Some(l.target);
        }
        let n = self.host.num_engines;
        (local_port >= FLOW_PORT_BASE).then(|| QueueId((local_port - FLOW_PORT_BASE) % n))
    }

    fn deliver(&mut self, channel: u32, item: Delivery) {
        let Some(b) = self.channels.get_mut(&channel) else { return };
        b.core.touch(self.id);
        if !b.overflow.is_empty() {
            b.overflow.push_back(item);
        } else if let Err(back) = b.core.deliver(item) {
            b.overflow.push_back(back);
        }
    }

    fn handle_frame(&mut self, frame: &Frame, now: u64) {
        let Ok(parsed) = wire::parse_frame(frame) else {
            self.stats.parse_errors += 1;
            return;
        };
        let h = parsed.header;
        let udp = UdpPortPair::new(parsed.tuple.src_port, parsed.tuple.dst_port);
        let key = FlowKey {
            remote_ip: parsed.tuple.src_ip,
            ports: MachnetPortPair::new(h.dst_port, h.src_port),
        };
        match h.pkt_type {
            PacketType::Syn => self.on_syn(key, udp, parsed.payload, now),
            PacketType::SynAck => self.on_synack(key, udp, parsed.payload, now),
            PacketType::Ack if h.flags & FLAG_HANDSHAKE != 0 => self.on_handshake_ack(key, parsed.payload),
            _ => self.on_flow_frame(key, udp, &h, parsed.payload, now),
        }
    }

    fn on_syn(&mut self, key: FlowKey, udp: UdpPortPair, payload: &[u8], now: u64) {
        let Some(listener) = self.listeners.get(&key.ports.local) else {
            self.stats.syn_no_listener += 1;
            return;
        };
        let Some(channel) = listener.channel.filter(|_| listener.target == self.id) else {
            self.stats.syn_wrong_engine += 1;
            return;
        };
        if self.flows.contains_key(&key) {
            self.stats.duplicate_syn += 1;
            return;
        }
        let (id, ports) = (self.id, key.ports);
        let pending = self
            .servers
            .entry(key)
            .or_insert_with(|| PendingServer { hs: ServerHandshake::new(id, ports, now), channel });
        let outcome = pending.hs.on_syn(&self.cfg.spray, udp, payload, &mut self.rng);
        let reap_at = pending.hs.created_at() + self.cfg.reap_after_us;
        if outcome.duplicate {
            self.stats.duplicate_syn += 1;
        }
        self.stats.synacks_sent += outcome.synacks.len() as u64;
        for seg in &outcome.synacks {
            self.emit(key.remote_ip, seg);
        }
        self.arm(TimerKey::Reap(key), Some(reap_at));
    }

    fn on_synack(&mut self, key: FlowKey, udp: UdpPortPair, payload: &[u8], now: u64) {
        if self.owner_of(key.ports.local) != Some(self.id) {
            self.stats.synack_wrong_engine += 1;
            return;
        }
        let Some(pending) = self.clients.get_mut(&key) else {
            if self.flows.contains_key(&key) {
                self.stats.synack_discarded += 1;
            } else {
                self.stats.unknown_handshake += 1;
            }
            return;
        };
        let SynAckOutcome::Established(ack) = pending.hs.on_synack(udp, payload) else {
            self.stats.synack_discarded += 1;
            return;
        };
        let pending = self.clients.remove(&key).unwrap();
        self.arm(TimerKey::Client(key), None);
        let (tx, rx) = (pending.hs.chosen_tx().unwrap(), pending.hs.chosen_rx().unwrap());
        let mut state = FlowState::new(self.cfg.transport.clone(), key.ports, tx, rx, self.id);
        state.await_confirmation(ack.clone(), rx, now);
        self.emit(key.remote_ip, &ack);
        self.stats.handshake_acks_sent += 1;
        self.stats.handshakes_established += 1;
        self.insert_flow(key, state, pending.handle, pending.channel, true);
        let report = client_report(&pending.hs, now);
        if let Some(b) = self.channels.get(&pending.channel) {
            b.core.set_connect(pending.handle, ConnectStatus::Established(report));
        }
    }

    fn insert_flow(&mut self, key: FlowKey, state: FlowState, handle: FlowHandle, channel: u32, outgoing: bool) {
        self.flows.insert(key, FlowEntry { state, handle, channel, outgoing, closing: None });
        self.handles.insert(handle, key);
        self.touched.insert(handle);
        self.rearm_flow(key);
    }

    fn accept(&mut self, key: FlowKey, tx: UdpPortPair, rx: UdpPortPair) {
        let Some(pending) = self.servers.remove(&key) else { return };
        self.arm(TimerKey::Reap(key), None);
        let state = FlowState::new(self.cfg.transport.clone(), key.ports, tx, rx, self.id);
        let handle = self.host.next_handle();
        self.stats.handshakes_accepted += 1;
        self.insert_flow(key, state, handle, pending.channel, false);
    }

    fn on_handshake_ack(&mut self, key: FlowKey, payload: &[u8]) {
        if self.owner_of(key.ports.local) != Some(self.id) {
            self.stats.misrouted += 1;
            return;
        }
        if let Some(pending) = self.servers.get_mut(&key) {
            match pending.hs.on_ack(payload) {
                Some((tx, rx)) => self.accept(key, tx, rx),
                None => self.stats.unknown_handshake += 1,
            }
        } else if let Some(entry) = self.flows.get_mut(&key) {
            // The client never heard from us; confirm.
            let ack = entry.state.ack_segment();
            self.emit(key.remote_ip, &ack);
            self.rearm_flow(key);
        } else {
            self.stats.unknown_handshake += 1;
        }
    }

    fn on_flow_frame(&mut self, key: FlowKey, udp: UdpPortPair, h: &WireHeader, payload: &[u8], now: u64) {
        if self.owner_of(key.ports.local) != Some(self.id) {
            self.stats.misrouted += 1;
            return;
        }
        if !self.flows.contains_key(&key) {
            let early_data = h.pkt_type == PacketType::Data && h.flags & FLAG_HANDSHAKE != 0;
            match self.servers.get_mut(&key) {
                Some(p) if early_data => match p.hs.confirm(unpack_pair(h.ack), udp) {
                    Some((tx, rx)) => self.accept(key, tx, rx),
                    None => {
                        self.stats.data_before_established += 1;
                        return;
                    }
                },
                Some(_) => {
                    self.stats.data_before_established += 1;
                    return;
                }
                None => {
                    self.stats.unknown_flow += 1;
                    return;
                }
            }
        }
        let entry = self.flows.get_mut(&key).unwrap();
        if h.pkt_type == PacketType::Data && self.channels.get(&entry.channel).is_some_and(|b| !b.overflow.is_empty()) {
            // The application is behind; stop accepting until it catches up.
            self.stats.rx_backpressure_drops += 1;
            return;
        }
        let entry = self.flows.get_mut(&key).unwrap();
        match h.pkt_type {
            PacketType::Data => {
                let out = entry.state.on_data(h, payload, now);
                let (handle, channel) = (entry.handle, entry.channel);
                if let Some(ack) = out.ack {
                    self.emit(key.remote_ip, &ack);
                }
                self.stats.messages_in += out.completed.len() as u64;
                for msg in out.completed {
                    self.deliver(channel, Delivery::Message(Message { flow: handle, payload: msg.into() }));
                }
            }
            PacketType::Ack | PacketType::Sack => {
                if let Ok(resent) = entry.state.on_ack(h, payload, now) {
                    self.stats.retransmissions += resent.len() as u64;
                    for seg in &resent {
                        self.emit(key.remote_ip, seg);
                    }
                }
                self.dirty.insert(key);
            }
            PacketType::Fin => {
                let (fin_ack, handle) = (entry.state.control_segment(PacketType::FinAck), entry.handle);
                self.emit(key.remote_ip, &fin_ack);
                self.remove_flow(key, Some(Delivery::Closed(handle)));
                return;
            }
            PacketType::FinAck => {
                if entry.closing.is_some() {
                    self.remove_flow(key, None);
                }
                return;
            }
            _ => {}
        }
        self.rearm_flow(key);
    }

    fn remove_flow(&mut self, key: FlowKey, notify: Option<Delivery>) {
        let Some(entry) = self.flows.remove(&key) else { return };
        self.handles.remove(&entry.handle);
        self.dirty.remove(&key);
        self.arm(TimerKey::Flow(key), None);
        add_flow_stats(&mut self.retired, entry.state.stats());
        if entry.outgoing {
            self.host.release_port(self.id, key.ports.local);
        }
        match &notify {
            Some(Delivery::Reset(_)) => self.stats.flow_resets += 1,
            _ => self.stats.flows_closed += 1,
        }
        if let Some(b) = self.channels.get(&entry.channel) {
            let why = notify.clone().unwrap_or(Delivery::Closed(entry.handle));
            b.core.mark_dead(entry.handle, why);
        }
        if let Some(item) = notify {
            self.deliver(entry.channel, item);
        }
    }

    fn service_channels(&mut self) -> usize {
        let mut work = 0;
        let ids: Vec<u32> = self.channels.keys().copied().collect();
        for id in ids {
            let b = self.channels.get_mut(&id).unwrap();
            b.core.touch(self.id);
            while b.core.rx_has_space() {
                let Some(item) = b.overflow.pop_front() else { break };
                if let Err(back) = b.core.deliver(item) {
                    b.overflow.push_front(back);
                    break;
                }
                work += 1;
            }
            let core = b.core.clone();
            let mut held = b.held.take();
            let mut taken = 0;
            while taken < self.cfg.burst {
                let Some(msg) = held.take().or_else(|| core.pop_tx()) else { break };
                let Some(&key) = self.handles.get(&msg.flow) else {
                    taken += 1;
                    self.stats.stale_sends += 1;
                    continue;
                };
                let entry = self.flows.get_mut(&key).unwrap();
                if entry.state.backlog() >= self.cfg.transport.window as usize {
                    held = Some(msg);
                    break;
                }
                taken += 1;
                if entry.state.send_message(msg.payload).is_ok() {
                    self.stats.messages_out += 1;
                    self.dirty.insert(key);
                } else {
                    self.stats.stale_sends += 1;
                }
            }
            self.channels.get_mut(&id).unwrap().held = held;
            if taken > 0 {
                core.notify_tx_space();
            }
            work += taken;
            let st = core.stats();
            self.stats.channel_tx_high_water = self.stats.channel_tx_high_water.max(st.tx_high_water);
            self.stats.channel_rx_high_water = self.stats.channel_rx_high_water.max(st.rx_high_water);
        }
        work
    }

    fn flush_dirty(&mut self, now: u64) -> usize {
        let mut sent = 0;
        for key in std::mem::take(&mut self.dirty) {
            let Some(entry) = self.flows.get_mut(&key) else { continue };
            let segs = entry.state.poll_transmit(now, usize::MAX);
            sent += segs.len();
            for seg in &segs {
                self.emit(key.remote_ip, seg);
            }
            self.maybe_fin(key, now);
            self.rearm_flow(key);
        }
        sent
    }

    fn maybe_fin(&mut self, key: FlowKey, now: u64) {
        let Some(entry) = self.flows.get_mut(&key) else { return };
        let Some(closing) = entry.closing.as_mut() else { return };
        if closing.fin_sent_at.is_none() && entry.state.is_idle() {
            closing.fin_sent_at = Some(now);
            let fin = entry.state.control_segment(PacketType::Fin);
            self.emit(key.remote_ip, &fin);
        }
    }

    fn fire_timers(&mut self, now: u64) -> usize {
        let mut fired = 0;
        while let Some(&(t, key)) = self.timers.first() {
            if t > now {
                break;
            }
            self.timers.pop_first();
            self.armed.remove(&key);
            fired += 1;
            match key {
                TimerKey::Flow(k) => self.on_flow_timer(k, now),
                TimerKey::Client(k) => self.on_client_timer(k, now),
                TimerKey::Reap(k) => {
                    if self.servers.remove(&k).is_some() {
                        self.stats.handshakes_reaped += 1;
                    }
                }
            }
        }
        self.stats.timers_fired += fired as u64;
        fired
    }

    fn on_flow_timer(&mut self, key: FlowKey, now: u64) {
        let Some(entry) = self.flows.get_mut(&key) else { return };
        let before = entry.state.stats().retransmissions;
        let out = entry.state.on_timer(now);
        self.stats.retransmissions += entry.state.stats().retransmissions - before;
        if out.reset {
            let handle = entry.handle;
            self.remove_flow(key, Some(Delivery::Reset(handle)));
            return;
        }
        for seg in &out.segments {
            self.emit(key.remote_ip, seg);
        }
        let entry = self.flows.get_mut(&key).unwrap();
        if let Some(c) = entry.closing.as_mut() {
            let rto = (self.cfg.transport.rto_base_us << c.tries.min(16)).min(self.cfg.transport.rto_max_us);
            if c.fin_sent_at.is_some_and(|s| s + rto <= now) {
                if c.tries >= self.cfg.transport.max_retransmits {
                    self.remove_flow(key, None);
                    return;
                }
                c.tries += 1;
                c.fin_sent_at = Some(now);
                let fin = entry.state.control_segment(PacketType::Fin);
                self.emit(key.remote_ip, &fin);
            }
        }
        self.maybe_fin(key, now);
        self.rearm_flow(key);
    }

    fn on_client_timer(&mut self, key: FlowKey, now: u64) {
        let Some(pending) = self.clients.get_mut(&key) else { return };
        match pending.hs.on_retry_timeout(&self.cfg.spray, &mut self.rng, now) {
            Ok(syns) => {
                self.stats.handshake_retries += 1;
                self.stats.syns_sent += syns.len() as u64;
                let deadline = pending.hs.retry_deadline();
                for seg in &syns {
                    self.emit(key.remote_ip, seg);
                }
                self.arm(TimerKey::Client(key), deadline);
            }
            Err(_) => {
                let pending = self.clients.remove(&key).unwrap();
                self.handles.remove(&pending.handle);
                self.host.release_port(self.id, key.ports.local);
                self.stats.handshakes_failed += 1;
                if let Some(b) = self.channels.get(&pending.channel) {
                    b.core.set_connect(pending.handle, ConnectStatus::Failed(client_report(&pending.hs, now)));
                }
            }
        }
    }

    fn process_commands(&mut self, now: u64) -> usize {
        let cmds: Vec<Command> = self.host.inboxes[self.id.index()].lock().drain(..).collect();
        let n = cmds.len();
        for cmd in cmds {
            match cmd {
                Command::Attach(core) => {
                    core.touch(self.id);
                    self.channels.insert(core.id, Binding { core, overflow: VecDeque::new(), held: None });
                }
                Command::Listen { port, target, channel } => {
                    let channel = (target == self.id).then_some(channel);
                    self.listeners.insert(port, Listener { target, channel });
                }
                Command::Connect { channel, handle, remote_ip, ports } => {
                    self.start_connect(channel, handle, FlowKey { remote_ip, ports }, now)
                }
                Command::Close { handle } => self.close(handle, now),
            }
        }
        n
    }

    fn start_connect(&mut self, channel: u32, handle: FlowHandle, key: FlowKey, now: u64) {
        let n = self.host.num_engines;
        match ClientHandshake::initiate(&self.cfg.spray, self.id, n, key.ports, &mut self.rng, now) {
            Ok((hs, syns)) => {
                self.stats.syns_sent += syns.len() as u64;
                for seg in &syns {
                    self.emit(key.remote_ip, seg);
                }
                let deadline = hs.retry_deadline();
                self.clients.insert(key, PendingClient { hs, handle, channel });
                self.handles.insert(handle, key);
                self.arm(TimerKey::Client(key), deadline);
            }
            Err(e) => {
                self.host.release_port(self.id, key.ports.local);
                self.stats.handshakes_failed += 1;
                let attempts = match e {
                    HandshakeError::Failed { attempts } => attempts,
                    _ => 0,
                };
                let report = ConnectReport { attempts, batch_sizes: Vec::new(), started_at: now, finished_at: now };
                if let Some(b) = self.channels.get(&channel) {
                    b.core.set_connect(handle, ConnectStatus::Failed(report));
                }
            }
        }
    }

    fn close(&mut self, handle: FlowHandle, now: u64) {
        let Some(&key) = self.handles.get(&handle) else { return };
        if let Some(pending) = self.clients.remove(&key) {
            self.handles.remove(&handle);
            self.arm(TimerKey::Client(key), None);
            self.host.release_port(self.id, key.ports.local);
            if let Some(b) = self.channels.get(&pending.channel) {
                b.core.set_connect(handle, ConnectStatus::Failed(client_report(&pending.hs, now)));
            }
            return;
        }
        if let Some(entry) = self.flows.get_mut(&key) {
            entry.closing.get_or_insert_with(Closing::default);
            self.dirty.insert(key);
        }
    }
}

fn client_report(hs: &ClientHandshake, now: u64) -> ConnectReport {
    ConnectReport {
        attempts: hs.attempt(),
        batch_sizes: hs.batch_history().to_vec(),
        started_at: hs.started_at(),
        finished_at: now,
    }
}

fn add_flow_stats(total: &mut FlowStats, s: &FlowStats) {
    total.messages_sent += s.messages_sent;
    total.messages_delivered += s.messages_delivered;
    total.data_frames_sent += s.data_frames_sent;
    total.unique_fragments_sent += s.unique_fragments_sent;
    total.retransmissions += s.retransmissions;
    total.fast_retransmits += s.fast_retransmits;
    total.rto_fires += s.rto_fires;
    total.acked_unique += s.acked_unique;
    total.acks_sent += s.acks_sent;
    total.data_frames_received += s.data_frames_received;
    total.duplicate_data += s.duplicate_data;
    total.out_of_window += s.out_of_window;
    total.protocol_errors += s.protocol_errors;
}
