//! Application-facing API: bounded message channels to engines.
//!
//! Each channel is a pair of 1024-slot single-producer single-consumer
//! queues. The engine signals after every enqueue toward the application;
//! a blocking `recv` rechecks the queue under the lock before it sleeps, so
//! a wakeup can't be lost between the check and the wait.

use std::collections::{HashMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam::queue::ArrayQueue;
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::engine::{Command, EnginePolicy, HostShared};
use crate::handshake::MachnetPortPair;
use crate::lcd_nic::QueueId;
use crate::wire::MAX_MESSAGE_LEN;

pub const CHANNEL_CAPACITY: usize = 1024;

/// Host-unique flow identifier handed to the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowHandle(pub u64);

impl std::fmt::Display for FlowHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "flow#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub flow: FlowHandle,
    pub payload: Bytes,
}

/// What an engine hands to the application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Delivery {
    Message(Message),
    /// Peer closed the flow.
    Closed(FlowHandle),
    /// Retransmission budget exhausted.
    Reset(FlowHandle),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("stack is not initialized")]
    NotInitialized,
    #[error("engine {requested} does not exist (host has {engines})")]
    InvalidEngine { requested: u16, engines: u16 },
    #[error("port {0} is already bound")]
    PortInUse(u16),
    #[error("port {0} is reserved for outgoing flows")]
    ReservedPort(u16),
    #[error("no free local port")]
    PortsExhausted,
    #[error("{0} bytes is outside the 1..={MAX_MESSAGE_LEN} message size range")]
    MessageSize(usize),
    #[error("{0} is not established")]
    NotEstablished(FlowHandle),
    #[error("{0} was reset")]
    FlowReset(FlowHandle),
    #[error("{0} was closed")]
    FlowClosed(FlowHandle),
    #[error("connect failed after {attempts} attempts")]
    ConnectFailed { attempts: u32 },
    #[error("timed out")]
    Timeout,
    #[error("channel queue is full")]
    Full,
}

/// Outcome of a connect request, kept for inspection after completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectReport {
    pub attempts: u32,
    pub batch_sizes: Vec<u32>,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnectStatus {
    Pending,
    Established(ConnectReport),
    Failed(ConnectReport),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    /// Items the engine placed on the receive queue.
    pub enqueued: u64,
    /// Items handed out by `recv`.
    pub returned: u64,
    /// Blocking receives that woke up to an empty queue.
    pub spins: u64,
    /// Non-blocking receives that found nothing.
    pub empty_polls: u64,
    pub wakeups: u64,
    pub send_blocked: u64,
    pub tx_high_water: u64,
    pub rx_high_water: u64,
    /// Bit e set when engine e touched this channel.
    pub touched_by: u64,
}

#[derive(Default)]
struct Counters {
    sent: AtomicU64,
    enqueued: AtomicU64,
    returned: AtomicU64,
    spins: AtomicU64,
    empty_polls: AtomicU64,
    wakeups: AtomicU64,
    send_blocked: AtomicU64,
    tx_high_water: AtomicU64,
    rx_high_water: AtomicU64,
    touched_by: AtomicU64,
}

/// State shared by one application thread and one engine.
pub(crate) struct ChannelCore {
    pub id: u32,
    pub engine: QueueId,
    tx: ArrayQueue<Message>,
    rx: ArrayQueue<Delivery>,
    lock: Mutex<()>,
    rx_ready: Condvar,
    tx_space: Condvar,
    ctrl: Condvar,
    connects: Mutex<HashMap<FlowHandle, ConnectStatus>>,
    dead: Mutex<HashMap<FlowHandle, Delivery>>,
    counters: Counters,
}

impl ChannelCore {
    pub fn new(id: u32, engine: QueueId) -> Self {
        Self {
            id,
            engine,
            tx: ArrayQueue::new(CHANNEL_CAPACITY),
            rx: ArrayQueue::new(CHANNEL_CAPACITY),
            lock: Mutex::new(()),
            rx_ready: Condvar::new(),
            tx_space: Condvar::new(),
            ctrl: Condvar::new(),
            connects: Mutex::new(HashMap::new()),
            dead: Mutex::new(HashMap::new()),
            counters: Counters::default(),
        }
    }

    pub fn touch(&self, engine: QueueId) {
        self.counters.touched_by.fetch_or(1 << engine.0, Ordering::Relaxed);
    }

    pub fn has_tx(&self) -> bool {
        !self.tx.is_empty()
    }

    pub fn rx_has_space(&self) -> bool {
        !self.rx.is_full()
    }

    /// Engine side: take one message the application sent.
    pub fn pop_tx(&self) -> Option<Message> {
        self.tx.pop()
    }

    /// Engine side: let blocked senders retry.
    pub fn notify_tx_space(&self) {
        let _g = self.lock.lock();
        self.tx_space.notify_one();
    }

    /// Engine side: hand an item to the application, or give it back if the
    /// queue is full.
    pub fn deliver(&self, item: Delivery) -> Result<(), Delivery> {
        self.rx.push(item)?;
        self.counters.enqueued.fetch_add(1, Ordering::Relaxed);
        self.counters.rx_high_water.fetch_max(self.rx.len() as u64, Ordering::Relaxed);
        let _g = self.lock.lock();
        self.rx_ready.notify_one();
        Ok(())
    }

    pub fn set_connect(&self, flow: FlowHandle, status: ConnectStatus) {
        self.connects.lock().insert(flow, status);
        let _g = self.lock.lock();
        self.ctrl.notify_all();
    }

    pub fn mark_dead(&self, flow: FlowHandle, why: Delivery) {
        self.dead.lock().insert(flow, why);
    }

    pub fn stats(&self) -> ChannelStats {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ChannelStats {
            sent: l(&c.sent),
            enqueued: l(&c.enqueued),
            returned: l(&c.returned),
            spins: l(&c.spins),
            empty_polls: l(&c.empty_polls),
            wakeups: l(&c.wakeups),
            send_blocked: l(&c.send_blocked),
            tx_high_water: l(&c.tx_high_water),
            rx_high_water: l(&c.rx_high_water),
            touched_by: l(&c.touched_by),
        }
    }
}

fn surface(item: Delivery) -> Result<Message, ChannelError> {
    match item {
        Delivery::Message(m) => Ok(m),
        Delivery::Closed(f) => Err(ChannelError::FlowClosed(f)),
        Delivery::Reset(f) => Err(ChannelError::FlowReset(f)),
    }
}

/// Handle to one host's stack. Cheap to clone.
#[derive(Clone)]
pub struct Stack {
    host: Arc<HostShared>,
}

impl Stack {
    pub(crate) fn new(host: Arc<HostShared>) -> Self {
        Self { host }
    }

    pub fn init(&self) {
        self.host.initialized.store(true, Ordering::Release);
    }

    pub fn local_ip(&self) -> Ipv4Addr {
        self.host.local_ip
    }

    pub fn num_engines(&self) -> u16 {
        self.host.num_engines
    }

    /// Create a channel and bind it to an engine.
    pub fn attach(&self, policy: EnginePolicy) -> Result<Channel, ChannelError> {
        if !self.host.initialized.load(Ordering::Acquire) {
            return Err(ChannelError::NotInitialized);
        }
        let engine = self.host.assign_channel(policy)?;
        let core = Arc::new(ChannelCore::new(self.host.next_channel_id(), engine));
        self.host.submit(engine, Command::Attach(core.clone()));
        Ok(Channel { core, host: self.host.clone() })
    }
}

/// One application thread's connection to its engine.
pub struct Channel {
    core: Arc<ChannelCore>,
    host: Arc<HostShared>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel").field("id", &self.core.id).field("engine", &self.core.engine).finish()
    }
}

impl Channel {
    pub fn id(&self) -> u32 {
        self.core.id
    }

    pub fn engine(&self) -> QueueId {
        self.core.engine
    }

    pub fn stats(&self) -> ChannelStats {
        self.core.stats()
    }

    /// Accept connections on `port`. Incoming flows are owned by this
    /// channel's engine and their messages arrive on this channel.
    pub fn listen(&self, port: u16) -> Result<(), ChannelError> {
        self.host.register_listener(port, self.core.engine, self.core.id)
    }

    /// Same as `listen`.
    pub fn bind(&self, port: u16) -> Result<(), ChannelError> {
        self.listen(port)
    }

    /// Submit a connect request and return at once.
    pub fn connect_start(&self, remote_ip: Ipv4Addr, remote_port: u16) -> Result<FlowHandle, ChannelError> {
        let local = self.host.allocate_port(self.core.engine)?;
        let handle = self.host.next_handle();
        self.core.connects.lock().insert(handle, ConnectStatus::Pending);
        self.host.submit(
            self.core.engine,
            Command::Connect {
                channel: self.core.id,
                handle,
                remote_ip,
                ports: MachnetPortPair::new(local, remote_port),
            },
        );
        Ok(handle)
    }

    pub fn poll_connect(&self, flow: FlowHandle) -> Option<ConnectStatus> {
        self.core.connects.lock().get(&flow).cloned()
    }

    /// Connect and wait until the handshake completes or fails.
    pub fn connect(&self, remote_ip: Ipv4Addr, remote_port: u16, timeout: Duration) -> Result<FlowHandle, ChannelError> {
        let flow = self.connect_start(remote_ip, remote_port)?;
        let deadline = Instant::now() + timeout;
        let mut guard = self.core.lock.lock();
        loop {
            match self.poll_connect(flow) {
                Some(ConnectStatus::Established(_)) => return Ok(flow),
                Some(ConnectStatus::Failed(r)) => return Err(ChannelError::ConnectFailed { attempts: r.attempts }),
                _ => {}
            }
            if self.core.ctrl.wait_until(&mut guard, deadline).timed_out() {
                return Err(ChannelError::Timeout);
            }
        }
    }

    fn check_send(&self, flow: FlowHandle, len: usize) -> Result<(), ChannelError> {
        if len == 0 || len > MAX_MESSAGE_LEN {
            return Err(ChannelError::MessageSize(len));
        }
        if let Some(why) = self.core.dead.lock().get(&flow) {
            return Err(match why {
                Delivery::Closed(_) => ChannelError::FlowClosed(flow),
                _ => ChannelError::FlowReset(flow),
            });
        }
        match self.core.connects.lock().get(&flow) {
            None | Some(ConnectStatus::Established(_)) => Ok(()),
            Some(_) => Err(ChannelError::NotEstablished(flow)),
        }
    }

    fn push(&self, msg: Message) -> Result<(), Message> {
        self.core.tx.push(msg)?;
        let c = &self.core.counters;
        c.sent.fetch_add(1, Ordering::Relaxed);
        c.tx_high_water.fetch_max(self.core.tx.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    /// Queue a message without blocking.
    pub fn try_send(&self, flow: FlowHandle, payload: impl Into<Bytes>) -> Result<(), ChannelError> {
        let payload = payload.into();
        self.check_send(flow, payload.len())?;
        self.push(Message { flow, payload }).map_err(|_| ChannelError::Full)
    }

    /// Queue a message, blocking while the channel is full.
    pub fn send(&self, flow: FlowHandle, payload: impl Into<Bytes>) -> Result<(), ChannelError> {
        let payload = payload.into();
        self.check_send(flow, payload.len())?;
        let mut msg = Message { flow, payload };
        loop {
            match self.push(msg) {
                Ok(()) => return Ok(()),
                Err(back) => msg = back,
            }
            let mut guard = self.core.lock.lock();
            if self.core.tx.is_full() {
                self.core.counters.send_blocked.fetch_add(1, Ordering::Relaxed);
                self.core.tx_space.wait_for(&mut guard, Duration::from_millis(10));
            }
        }
    }

    fn take(&self) -> Option<Delivery> {
        let item = self.core.rx.pop()?;
        self.core.counters.returned.fetch_add(1, Ordering::Relaxed);
        Some(item)
    }

    /// Receive one whole message. Non-blocking calls return `Ok(None)` at
    /// once when nothing is queued; blocking calls sleep until a message
    /// arrives or `timeout` passes, then return `Ok(None)`.
    pub fn recv(&self, blocking: bool, timeout: Option<Duration>) -> Result<Option<Message>, ChannelError> {
        if let Some(item) = self.take() {
            return surface(item).map(Some);
        }
        if !blocking {
            self.core.counters.empty_polls.fetch_add(1, Ordering::Relaxed);
            return Ok(None);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut guard = self.core.lock.lock();
        loop {
            if let Some(item) = self.take() {
                return surface(item).map(Some);
            }
            let timed_out = match deadline {
                Some(d) => self.core.rx_ready.wait_until(&mut guard, d).timed_out(),
                None => {
                    self.core.rx_ready.wait(&mut guard);
                    false
                }
            };
            if timed_out {
                drop(guard);
                return match self.take() {
                    Some(item) => surface(item).map(Some),
                    None => Ok(None),
                };
            }
            self.core.counters.wakeups.fetch_add(1, Ordering::Relaxed);
            if self.core.rx.is_empty() {
                self.core.counters.spins.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Close a flow. Queued data is delivered before the peer is told.
    pub fn close(&self, flow: FlowHandle) {
        self.core.mark_dead(flow, Delivery::Closed(flow));
        self.host.submit(self.core.engine, Command::Close { handle: flow });
    }

    /// Flows this channel has seen closed or reset.
    pub fn dead_flows(&self) -> HashSet<FlowHandle> {
        self.core.dead.lock().keys().copied().collect()
    }
}
