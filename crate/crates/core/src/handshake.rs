//! Connection setup that pins a flow to chosen RX queues on both hosts
//! without knowing either host's RSS key.
//!
//! The client sprays SYNs over random UDP port pairs. Whichever SYN happens
//! to hash to the listener's engine gets answered; the server likewise sprays
//! SYN-ACKs (or, in naive mode, reflects each accepted SYN) until one lands on
//! the client's engine. The winning pairs are echoed in the SYN-ACK and ACK
//! payloads and used for every later frame of the flow. Flows are identified
//! by the 16-bit flow ports in the transport header, so the UDP ports are free
//! to vary per direction.

use std::collections::HashSet;
use std::ops::RangeInclusive;

use bytes::{BufMut, BytesMut};
use rand::Rng;
use thiserror::Error;

use crate::lcd_nic::QueueId;
use crate::wire::{PacketType, Reader, Segment, UdpPortPair, WireHeader, FLAG_HANDSHAKE};

pub const DEFAULT_TARGET_PROBABILITY: f64 = 0.95;
pub const RETRY_TIMEOUT_US: u64 = 300_000;
pub const MAX_ATTEMPTS: u32 = 8;
pub const BATCH_CAP: u32 = 4096;
/// Source of sprayed UDP ports.
pub const EPHEMERAL_PORTS: RangeInclusive<u16> = 32768..=60999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SprayMode {
    /// Client sprays; the server reflects every SYN that reaches its engine.
    Naive,
    /// Both sides spray, each sized for one queue hit.
    Optimized,
}

impl SprayMode {
    fn code(self) -> u8 {
        match self {
            Self::Naive => 0,
            Self::Optimized => 1,
        }
    }

    fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Naive),
            1 => Some(Self::Optimized),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandshakeError {
    #[error("target probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("engine count must be at least 1")]
    NoEngines,
    #[error("handshake failed after {attempts} attempts")]
    Failed { attempts: u32 },
}

/// Flow identity carried in the transport header, from one end's viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MachnetPortPair {
    pub local: u16,
    pub remote: u16,
}

impl MachnetPortPair {
    pub fn new(local: u16, remote: u16) -> Self {
        Self { local, remote }
    }
}

fn check_args(n: u32, p: f64) -> Result<(), HandshakeError> {
    if n == 0 {
        return Err(HandshakeError::NoEngines);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(HandshakeError::Probability(p));
    }
    Ok(())
}

/// SYNs needed so that, with probability `p`, at least one SYN and its
/// reflected SYN-ACK both hash to the intended engines (1/n each).
pub fn required_batch_naive(n: u32, p: f64) -> Result<u32, HandshakeError> {
    check_args(n, p)?;
    if n == 1 {
        return Ok(1);
    }
    let hit = 1.0 / (n as f64 * n as f64);
    Ok(((1.0 - p).ln() / (1.0 - hit).ln()).ceil() as u32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizedBatch {
    /// Unrounded per-side packet count.
    pub per_side_exact: f64,
    /// Packets each side actually sends.
    pub per_side: u32,
    /// `floor(2 * per_side_exact)`, the conventional total.
    pub total_floor: u32,
}

/// Per-side batch when each direction independently needs one hit with
/// probability `sqrt(p)`.
pub fn required_batch_optimized(n: u32, p: f64) -> Result<OptimizedBatch, HandshakeError> {
    check_args(n, p)?;
    if n == 1 {
        return Ok(OptimizedBatch { per_side_exact: 1.0, per_side: 1, total_floor: 2 });
    }
    let exact = (1.0 - p.sqrt()).ln() / (1.0 - 1.0 / n as f64).ln();
    Ok(OptimizedBatch {
        per_side_exact: exact,
        per_side: exact.ceil() as u32,
        total_floor: (2.0 * exact).floor() as u32,
    })
}

/// Batch for a 1-based attempt: the first batch doubled per retry, capped.
pub fn batch_for_attempt(first: u32, attempt: u32, cap: u32) -> u32 {
    let shift = attempt.saturating_sub(1).min(31);
    (first as u64).saturating_mul(1u64 << shift).min(cap as u64) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct SprayConfig {
    pub mode: SprayMode,
    pub target_probability: f64,
    pub retry_timeout_us: u64,
    pub max_attempts: u32,
    pub batch_cap: u32,
    /// Engines assumed at the peer when sizing the client's SYN batch.
    /// `None` assumes the peer matches the local host.
    pub peer_engines: Option<u16>,
}

impl Default for SprayConfig {
    fn default() -> Self {
        Self {
            mode: SprayMode::Optimized,
            target_probability: DEFAULT_TARGET_PROBABILITY,
            retry_timeout_us: RETRY_TIMEOUT_US,
            max_attempts: MAX_ATTEMPTS,
            batch_cap: BATCH_CAP,
            peer_engines: None,
        }
    }
}

impl SprayConfig {
    fn client_first_batch(&self, local: u16, remote: u16) -> Result<u32, HandshakeError> {
        let p = self.target_probability;
        match self.mode {
            SprayMode::Naive => {
                check_args(local as u32 * remote as u32, p)?;
                if local as u32 * remote as u32 == 1 {
                    return Ok(1);
                }
                let hit = 1.0 / (local as f64 * remote as f64);
                Ok(((1.0 - p).ln() / (1.0 - hit).ln()).ceil() as u32)
            }
            SprayMode::Optimized => Ok(required_batch_optimized(remote as u32, p)?.per_side),
        }
    }
}

/// Draw `count` pairs from the ephemeral range, none already in `used`.
pub fn random_pairs<R: Rng + ?Sized>(
    rng: &mut R,
    count: u32,
    used: &mut HashSet<UdpPortPair>,
) -> Vec<UdpPortPair> {
    let mut out = Vec::with_capacity(count as usize);
    while out.len() < count as usize {
        let pair = UdpPortPair::new(rng.gen_range(EPHEMERAL_PORTS), rng.gen_range(EPHEMERAL_PORTS));
        if used.insert(pair) {
            out.push(pair);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakePhase {
    Idle,
    SynSent,
    SynAckSent,
    Established,
    Failed,
}

struct SynInfo {
    mode: SprayMode,
    client_engines: u16,
    attempt: u32,
}

fn syn_payload(mode: SprayMode, engines: u16, attempt: u32) -> BytesMut {
    let mut b = BytesMut::with_capacity(5);
    b.put_u8(mode.code());
    b.put_u16(engines);
    b.put_u16(attempt as u16);
    b
}

fn parse_syn(payload: &[u8]) -> Option<SynInfo> {
    let mut r = Reader(payload);
    Some(SynInfo {
        mode: SprayMode::from_code(r.u8()?)?,
        client_engines: r.u16()?.max(1),
        attempt: r.u16()?.max(1) as u32,
    })
}

fn put_pair(b: &mut BytesMut, pair: UdpPortPair) {
    b.put_u16(pair.src);
    b.put_u16(pair.dst);
}

fn read_pair(r: &mut Reader<'_>) -> Option<UdpPortPair> {
    Some(UdpPortPair::new(r.u16()?, r.u16()?))
}

/// Client side of one connection attempt.
#[derive(Debug, Clone)]
pub struct ClientHandshake {
    phase: HandshakePhase,
    ports: MachnetPortPair,
    local_engine: QueueId,
    local_engines: u16,
    target_remote_engine: Option<QueueId>,
    first_batch: u32,
    sprayed: HashSet<UdpPortPair>,
    attempt: u32,
    batch_size: u32,
    batch_history: Vec<u32>,
    started_at: u64,
    retry_deadline: u64,
    chosen_tx: Option<UdpPortPair>,
    chosen_rx: Option<UdpPortPair>,
}

/// Result of offering a SYN-ACK to the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynAckOutcome {
    /// Handshake complete; send this ACK.
    Established(Segment),
    Discarded,
}

impl ClientHandshake {
    /// Start a handshake and produce the first SYN batch.
    pub fn initiate<R: Rng + ?Sized>(
        cfg: &SprayConfig,
        local_engine: QueueId,
        local_engines: u16,
        ports: MachnetPortPair,
        rng: &mut R,
        now: u64,
    ) -> Result<(Self, Vec<Segment>), HandshakeError> {
        let remote = cfg.peer_engines.unwrap_or(local_engines);
        let first_batch = cfg.client_first_batch(local_engines, remote)?.min(cfg.batch_cap);
        let mut hs = Self {
            phase: HandshakePhase::Idle,
            ports,
            local_engine,
            local_engines,
            target_remote_engine: None,
            first_batch,
            sprayed: HashSet::new(),
            attempt: 0,
            batch_size: 0,
            batch_history: Vec::new(),
            started_at: now,
            retry_deadline: 0,
            chosen_tx: None,
            chosen_rx: None,
        };
        let syns = hs.spray(cfg, rng, now);
        Ok((hs, syns))
    }

    fn spray<R: Rng + ?Sized>(&mut self, cfg: &SprayConfig, rng: &mut R, now: u64) -> Vec<Segment> {
        self.attempt += 1;
        self.batch_size = batch_for_attempt(self.first_batch, self.attempt, cfg.batch_cap);
        self.batch_history.push(self.batch_size);
        self.phase = HandshakePhase::SynSent;
        self.retry_deadline = now + cfg.retry_timeout_us;
        let payload = syn_payload(cfg.mode, self.local_engines, self.attempt).freeze();
        let header = WireHeader::new(PacketType::Syn, self.ports.local, self.ports.remote);
        random_pairs(rng, self.batch_size, &mut self.sprayed)
            .into_iter()
            .map(|udp| Segment::new(udp, header, payload.clone()))
            .collect()
    }

    /// `udp` is the pair as it appeared on the received frame.
    pub fn on_synack(&mut self, udp: UdpPortPair, payload: &[u8]) -> SynAckOutcome {
        if self.phase != HandshakePhase::SynSent {
            return SynAckOutcome::Discarded;
        }
        let mut r = Reader(payload);
        let (Some(syn_pair), Some(server_engine)) = (read_pair(&mut r), r.u16()) else {
            return SynAckOutcome::Discarded;
        };
        if !self.sprayed.contains(&syn_pair) {
            return SynAckOutcome::Discarded;
        }
        self.chosen_tx = Some(syn_pair);
        self.chosen_rx = Some(udp);
        self.target_remote_engine = Some(QueueId(server_engine));
        self.phase = HandshakePhase::Established;
        SynAckOutcome::Established(self.ack_segment().expect("established"))
    }

    /// The handshake-completing ACK: sent on the chosen TX pair, carrying the
    /// winning SYN-ACK pair and the accepted SYN pair.
    pub fn ack_segment(&self) -> Option<Segment> {
        let (tx, rx) = (self.chosen_tx?, self.chosen_rx?);
        let mut header = WireHeader::new(PacketType::Ack, self.ports.local, self.ports.remote);
        header.flags = FLAG_HANDSHAKE;
        let mut b = BytesMut::with_capacity(8);
        put_pair(&mut b, rx);
        put_pair(&mut b, tx);
        Some(Segment::new(tx, header, b.freeze()))
    }

    /// Retry timer expired with no usable SYN-ACK: spray a larger batch over
    /// fresh pairs, or give up after the last attempt.
    pub fn on_retry_timeout<R: Rng + ?Sized>(
        &mut self,
        cfg: &SprayConfig,
        rng: &mut R,
        now: u64,
    ) -> Result<Vec<Segment>, HandshakeError> {
        if self.phase != HandshakePhase::SynSent || now < self.retry_deadline {
            return Ok(Vec::new());
        }
        if self.attempt >= cfg.max_attempts {
            self.phase = HandshakePhase::Failed;
            return Err(HandshakeError::Failed { attempts: self.attempt });
        }
        Ok(self.spray(cfg, rng, now))
    }

    pub fn phase(&self) -> HandshakePhase {
        self.phase
    }

    pub fn ports(&self) -> MachnetPortPair {
        self.ports
    }

    pub fn local_engine(&self) -> QueueId {
        self.local_engine
    }

    pub fn target_remote_engine(&self) -> Option<QueueId> {
        self.target_remote_engine
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn batch_size(&self) -> u32 {
        self.batch_size
    }

    pub fn batch_history(&self) -> &[u32] {
        &self.batch_history
    }

    pub fn sprayed_pairs(&self) -> &HashSet<UdpPortPair> {
        &self.sprayed
    }

    pub fn started_at(&self) -> u64 {
        self.started_at
    }

    /// Pending retry deadline, if still spraying.
    pub fn retry_deadline(&self) -> Option<u64> {
        (self.phase == HandshakePhase::SynSent).then_some(self.retry_deadline)
    }

    pub fn chosen_tx(&self) -> Option<UdpPortPair> {
        self.chosen_tx
    }

    pub fn chosen_rx(&self) -> Option<UdpPortPair> {
        self.chosen_rx
    }
}

/// Server side of one incoming connection, alive until the client's ACK.
#[derive(Debug, Clone)]
pub struct ServerHandshake {
    phase: HandshakePhase,
    ports: MachnetPortPair,
    local_engine: QueueId,
    mode: SprayMode,
    answered_attempt: u32,
    accepted_syns: HashSet<UdpPortPair>,
    synack_pairs: HashSet<UdpPortPair>,
    created_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynOutcome {
    pub synacks: Vec<Segment>,
    pub duplicate: bool,
}

impl ServerHandshake {
    pub fn new(local_engine: QueueId, ports: MachnetPortPair, now: u64) -> Self {
        Self {
            phase: HandshakePhase::Idle,
            ports,
            local_engine,
            mode: SprayMode::Naive,
            answered_attempt: 0,
            accepted_syns: HashSet::new(),
            synack_pairs: HashSet::new(),
            created_at: now,
        }
    }

    /// Handle a SYN that arrived on this (the listener's) engine. `udp` is
    /// the pair as received.
    pub fn on_syn<R: Rng + ?Sized>(
        &mut self,
        cfg: &SprayConfig,
        udp: UdpPortPair,
        payload: &[u8],
        rng: &mut R,
    ) -> SynOutcome {
        let Some(info) = parse_syn(payload) else {
            return SynOutcome::default();
        };
        self.mode = info.mode;
        let fresh_pair = self.accepted_syns.insert(udp);
        let header = WireHeader::new(PacketType::SynAck, self.ports.local, self.ports.remote);
        let payload_for = |engine: QueueId, attempt: u32| {
            let mut b = BytesMut::with_capacity(8);
            put_pair(&mut b, udp);
            b.put_u16(engine.0);
            b.put_u16(attempt as u16);
            b.freeze()
        };
        let synacks = match info.mode {
            SprayMode::Naive if fresh_pair => {
                let reply = udp.reversed();
                self.synack_pairs.insert(reply);
                vec![Segment::new(reply, header, payload_for(self.local_engine, info.attempt))]
            }
            SprayMode::Optimized if info.attempt > self.answered_attempt => {
                self.answered_attempt = info.attempt;
                let first = required_batch_optimized(info.client_engines as u32, cfg.target_probability)
                    .map_or(1, |b| b.per_side)
                    .min(cfg.batch_cap);
                let count = batch_for_attempt(first, info.attempt, cfg.batch_cap);
                let body = payload_for(self.local_engine, info.attempt);
                random_pairs(rng, count, &mut self.synack_pairs)
                    .into_iter()
                    .map(|pair| Segment::new(pair, header, body.clone()))
                    .collect()
            }
            _ => Vec::new(),
        };
        if !synacks.is_empty() {
            self.phase = HandshakePhase::SynAckSent;
        }
        let duplicate = synacks.is_empty();
        SynOutcome { synacks, duplicate }
    }

    /// Validate the client's ACK; returns the flow's (tx, rx) pairs.
    pub fn on_ack(&mut self, payload: &[u8]) -> Option<(UdpPortPair, UdpPortPair)> {
        let mut r = Reader(payload);
        let synack_pair = read_pair(&mut r)?;
        let syn_pair = read_pair(&mut r)?;
        self.confirm(synack_pair, syn_pair)
    }

    /// Same check as `on_ack`, for pairs carried by an early DATA frame.
    pub fn confirm(&mut self, synack_pair: UdpPortPair, syn_pair: UdpPortPair) -> Option<(UdpPortPair, UdpPortPair)> {
        if self.synack_pairs.contains(&synack_pair) && self.accepted_syns.contains(&syn_pair) {
            self.phase = HandshakePhase::Established;
            Some((synack_pair, syn_pair))
        } else {
            None
        }
    }

    pub fn phase(&self) -> HandshakePhase {
        self.phase
    }

    pub fn mode(&self) -> SprayMode {
        self.mode
    }

    pub fn ports(&self) -> MachnetPortPair {
        self.ports
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }
}
