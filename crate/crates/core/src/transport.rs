//! Reliable, message-preserving transport for one established flow.
//!
//! Sequence numbers count packets, not bytes. Messages are cut into
//! fixed-size fragments with consecutive sequence numbers; the receiver
//! places each fragment by `(msg_id, frag_offset)` and releases whole
//! messages in `msg_id` order. The sender keeps at most `window` packets
//! between the cumulative ack and the next new sequence number. There is no
//! congestion control.
//!
//! `FlowState` does no I/O: every method returns the segments to put on the
//! wire, stamped with the flow's chosen UDP port pair.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::handshake::MachnetPortPair;
use crate::lcd_nic::QueueId;
use crate::wire::{
    PacketType, Reader, Segment, UdpPortPair, WireHeader, FLAG_HANDSHAKE, FLAG_LAST_FRAGMENT,
    FRAGMENT_PAYLOAD, MAX_MESSAGE_LEN,
};

pub const MAX_SACK_RANGES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    pub window: u32,
    pub fragment_payload: usize,
    pub rto_base_us: u64,
    pub rto_max_us: u64,
    pub max_retransmits: u32,
    pub sack_enabled: bool,
    pub fast_retransmit_after: u32,
    /// Ack after this many in-order DATA packets...
    pub ack_every: u32,
    /// ...or after this long, whichever comes first.
    pub ack_delay_us: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            window: 64,
            fragment_payload: FRAGMENT_PAYLOAD,
            rto_base_us: 10_000,
            rto_max_us: 1_000_000,
            max_retransmits: 16,
            sack_enabled: true,
            fast_retransmit_after: 3,
            ack_every: 2,
            ack_delay_us: 100,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("message of {0} bytes exceeds the {MAX_MESSAGE_LEN}-byte limit")]
    TooLarge(usize),
    #[error("empty message")]
    Empty,
    #[error("flow has been reset")]
    Reset,
    #[error("ack {ack} beyond next sequence number {next}")]
    AckBeyondSent { ack: u32, next: u32 },
    #[error("malformed SACK block")]
    BadSack,
}

/// Selective-ack block: up to eight disjoint ascending `[start, end)` ranges,
/// all above the cumulative ack.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SackBlock {
    pub ranges: Vec<(u32, u32)>,
}

impl SackBlock {
    /// Collapse received-but-not-cumulative sequence numbers into ranges.
    pub fn from_received(received: &BTreeSet<u32>) -> Self {
        let mut ranges: Vec<(u32, u32)> = Vec::new();
        for &seq in received {
            if let Some((_, end)) = ranges.last_mut().filter(|(_, e)| *e == seq) {
                *end += 1;
            } else if ranges.len() == MAX_SACK_RANGES {
                break;
            } else {
                ranges.push((seq, seq + 1));
            }
        }
        Self { ranges }
    }

    pub fn encode(&self) -> Bytes {
        let mut b = BytesMut::with_capacity(1 + 8 * self.ranges.len());
        b.put_u8(self.ranges.len() as u8);
        for &(s, e) in &self.ranges {
            b.put_u32(s);
            b.put_u32(e);
        }
        b.freeze()
    }

    /// Parse and validate against the cumulative ack it arrived with.
    pub fn decode(payload: &[u8], cum_ack: u32) -> Result<Self, TransportError> {
        let mut r = Reader(payload);
        let count = r.u8().ok_or(TransportError::BadSack)? as usize;
        if count > MAX_SACK_RANGES {
            return Err(TransportError::BadSack);
        }
        let mut ranges = Vec::with_capacity(count);
        let mut floor = cum_ack;
        for _ in 0..count {
            let (s, e) = (r.u32().ok_or(TransportError::BadSack)?, r.u32().ok_or(TransportError::BadSack)?);
            if s <= floor || s >= e {
                return Err(TransportError::BadSack);
            }
            ranges.push((s, e));
            floor = e;
        }
        Ok(Self { ranges })
    }

    pub fn contains(&self, seq: u32) -> bool {
        self.ranges.iter().any(|&(s, e)| (s..e).contains(&seq))
    }

    pub fn highest(&self) -> Option<u32> {
        self.ranges.last().map(|&(_, e)| e - 1)
    }
}

/// Pack a UDP pair into the 32-bit `ack` field of an unconfirmed DATA frame.
pub fn pack_pair(pair: UdpPortPair) -> u32 {
    (pair.src as u32) << 16 | pair.dst as u32
}

pub fn unpack_pair(v: u32) -> UdpPortPair {
    UdpPortPair::new((v >> 16) as u16, v as u16)
}

#[derive(Debug, Clone)]
struct Unacked {
    header: WireHeader,
    payload: Bytes,
    sent_at: u64,
    retransmits: u32,
    sack_misses: u32,
    fast_retransmitted: bool,
}

#[derive(Debug)]
struct Outgoing {
    msg_id: u32,
    data: Bytes,
    offset: usize,
}

#[derive(Debug)]
struct Reassembly {
    buf: Vec<u8>,
    received: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub messages_sent: u64,
    pub messages_delivered: u64,
    /// Every DATA frame emitted, retransmissions included.
    pub data_frames_sent: u64,
    pub unique_fragments_sent: u64,
    pub retransmissions: u64,
    pub fast_retransmits: u64,
    pub rto_fires: u64,
    pub acked_unique: u64,
    pub acks_sent: u64,
    pub data_frames_received: u64,
    pub duplicate_data: u64,
    pub out_of_window: u64,
    pub protocol_errors: u64,
}

impl FlowStats {
    /// Frames sent = fragments acked + fragments in flight + extra copies.
    pub fn balanced(&self, in_flight: u64) -> bool {
        self.data_frames_sent == self.acked_unique + in_flight + self.retransmissions
            && self.unique_fragments_sent == self.acked_unique + in_flight
    }
}

#[derive(Debug, Default)]
pub struct DataOutcome {
    pub ack: Option<Segment>,
    /// Whole messages now releasable, in order.
    pub completed: Vec<Vec<u8>>,
}

#[derive(Debug, Default)]
pub struct TimerOutcome {
    pub segments: Vec<Segment>,
    /// Retransmit budget exhausted; the flow must be torn down.
    pub reset: bool,
}

#[derive(Debug)]
pub struct FlowState {
    cfg: TransportConfig,
    ports: MachnetPortPair,
    tx_udp: UdpPortPair,
    rx_udp: UdpPortPair,
    engine: QueueId,

    next_tx_seq: u32,
    highest_cum_ack: u32,
    rto: u64,
    /// Smoothed RTT and mean deviation in µs, from never-retransmitted
    /// packets only.
    rtt: Option<(f64, f64)>,
    /// Send time of the newest never-retransmitted packet known delivered.
    newest_delivered_send: u64,
    unacked: BTreeMap<u32, Unacked>,
    send_queue: VecDeque<Outgoing>,
    backlog: usize,
    next_msg_id: u32,

    rx_next_expected: u32,
    rx_received: BTreeSet<u32>,
    reassembly: HashMap<u32, Reassembly>,
    completed: BTreeMap<u32, Vec<u8>>,
    next_release_msg: u32,
    pending_acks: u32,
    ack_deadline: Option<u64>,

    /// Client only: until the peer is heard from, DATA carries the winning
    /// SYN-ACK pair and the handshake ACK is periodically resent.
    unconfirmed: Option<Unconfirmed>,
    reset: bool,
    stats: FlowStats,
}

#[derive(Debug)]
struct Unconfirmed {
    synack_pair: UdpPortPair,
    ack: Segment,
    resend_at: u64,
    resends: u32,
}

impl FlowState {
    pub fn new(
        cfg: TransportConfig,
        ports: MachnetPortPair,
        tx_udp: UdpPortPair,
        rx_udp: UdpPortPair,
        engine: QueueId,
    ) -> Self {
        Self {
            rto: cfg.rto_base_us,
            cfg,
            ports,
            tx_udp,
            rx_udp,
            engine,
            next_tx_seq: 0,
            highest_cum_ack: 0,
            rtt: None,
            newest_delivered_send: 0,
            unacked: BTreeMap::new(),
            send_queue: VecDeque::new(),
            backlog: 0,
            next_msg_id: 0,
            rx_next_expected: 0,
            rx_received: BTreeSet::new(),
            reassembly: HashMap::new(),
            completed: BTreeMap::new(),
            next_release_msg: 0,
            pending_acks: 0,
            ack_deadline: None,
            unconfirmed: None,
            reset: false,
            stats: FlowStats::default(),
        }
    }

    /// Mark the flow as opened by us and not yet acknowledged by the peer.
    pub fn await_confirmation(&mut self, handshake_ack: Segment, synack_pair: UdpPortPair, now: u64) {
        self.unconfirmed = Some(Unconfirmed {
            synack_pair,
            ack: handshake_ack,
            resend_at: now + self.cfg.rto_base_us,
            resends: 0,
        });
    }

    pub fn is_confirmed(&self) -> bool {
        self.unconfirmed.is_none()
    }

    fn peer_heard(&mut self) {
        self.unconfirmed = None;
    }

    pub fn ports(&self) -> MachnetPortPair {
        self.ports
    }

    pub fn tx_udp(&self) -> UdpPortPair {
        self.tx_udp
    }

    pub fn rx_udp(&self) -> UdpPortPair {
        self.rx_udp
    }

    pub fn engine(&self) -> QueueId {
        self.engine
    }

    pub fn stats(&self) -> &FlowStats {
        &self.stats
    }

    pub fn in_flight(&self) -> u64 {
        self.unacked.len() as u64
    }

    pub fn next_tx_seq(&self) -> u32 {
        self.next_tx_seq
    }

    pub fn highest_cum_ack(&self) -> u32 {
        self.highest_cum_ack
    }

    pub fn rx_next_expected(&self) -> u32 {
        self.rx_next_expected
    }

    pub fn rto(&self) -> u64 {
        self.rto
    }

    pub fn is_reset(&self) -> bool {
        self.reset
    }

    /// Nothing queued, nothing unacknowledged.
    pub fn is_idle(&self) -> bool {
        self.send_queue.is_empty() && self.unacked.is_empty()
    }

    /// Fragments queued but not yet sent.
    pub fn backlog(&self) -> usize {
        self.backlog
    }

    pub fn has_pending_tx(&self) -> bool {
        !self.send_queue.is_empty() && self.window_open()
    }

    fn window_open(&self) -> bool {
        self.next_tx_seq - self.highest_cum_ack < self.cfg.window
    }

    fn header(&self, ty: PacketType) -> WireHeader {
        WireHeader::new(ty, self.ports.local, self.ports.remote)
    }

    /// Fragments needed for a message of `len` bytes.
    pub fn fragment_count(&self, len: usize) -> usize {
        len.div_ceil(self.cfg.fragment_payload)
    }

    /// Queue a message; fragments go out through `poll_transmit`.
    pub fn send_message(&mut self, payload: Bytes) -> Result<u32, TransportError> {
        if self.reset {
            return Err(TransportError::Reset);
        }
        if payload.is_empty() {
            return Err(TransportError::Empty);
        }
        if payload.len() > MAX_MESSAGE_LEN {
            return Err(TransportError::TooLarge(payload.len()));
        }
        let msg_id = self.next_msg_id;
        self.next_msg_id += 1;
        self.backlog += self.fragment_count(payload.len());
        self.send_queue.push_back(Outgoing { msg_id, data: payload, offset: 0 });
        self.stats.messages_sent += 1;
        Ok(msg_id)
    }

    fn stamp(&self, mut header: WireHeader) -> WireHeader {
        if let Some(u) = &self.unconfirmed {
            header.flags |= FLAG_HANDSHAKE;
            header.ack = pack_pair(u.synack_pair);
        }
        header
    }

    /// Emit new fragments while the window allows, at most `budget`.
    pub fn poll_transmit(&mut self, now: u64, budget: usize) -> Vec<Segment> {
        let mut out = Vec::new();
        while out.len() < budget && self.window_open() {
            let Some(msg) = self.send_queue.front_mut() else { break };
            let len = (msg.data.len() - msg.offset).min(self.cfg.fragment_payload);
            let payload = msg.data.slice(msg.offset..msg.offset + len);
            let mut header = WireHeader::new(PacketType::Data, self.ports.local, self.ports.remote);
            header.seq = self.next_tx_seq;
            header.msg_id = msg.msg_id;
            header.frag_offset = msg.offset as u32;
            header.msg_len = msg.data.len() as u32;
            msg.offset += len;
            self.backlog -= 1;
            if msg.offset == msg.data.len() {
                header.flags |= FLAG_LAST_FRAGMENT;
                self.send_queue.pop_front();
            }
            self.next_tx_seq += 1;
            self.unacked.insert(
                header.seq,
                Unacked {
                    header,
                    payload: payload.clone(),
                    sent_at: now,
                    retransmits: 0,
                    sack_misses: 0,
                    fast_retransmitted: false,
                },
            );
            self.stats.unique_fragments_sent += 1;
            self.stats.data_frames_sent += 1;
            out.push(Segment::new(self.tx_udp, self.stamp(header), payload));
        }
        out
    }

    fn retransmit(&mut self, seq: u32, now: u64) -> Option<Segment> {
        let entry = self.unacked.get_mut(&seq)?;
        entry.sent_at = now;
        entry.retransmits += 1;
        let (header, payload) = (entry.header, entry.payload.clone());
        self.stats.retransmissions += 1;
        self.stats.data_frames_sent += 1;
        Some(Segment::new(self.tx_udp, self.stamp(header), payload))
    }

    /// Build an ACK (or SACK when out-of-order data is held) and clear the
    /// delayed-ack state.
    pub fn ack_segment(&mut self) -> Segment {
        self.pending_acks = 0;
        self.ack_deadline = None;
        self.stats.acks_sent += 1;
        let sack = self.cfg.sack_enabled && !self.rx_received.is_empty();
        let mut header = self.header(if sack { PacketType::Sack } else { PacketType::Ack });
        header.ack = self.rx_next_expected;
        let payload = if sack { SackBlock::from_received(&self.rx_received).encode() } else { Bytes::new() };
        Segment::new(self.tx_udp, header, payload)
    }

    /// Accept a DATA fragment.
    pub fn on_data(&mut self, header: &WireHeader, payload: &[u8], now: u64) -> DataOutcome {
        self.peer_heard();
        let seq = header.seq;
        if seq < self.rx_next_expected || self.rx_received.contains(&seq) {
            self.stats.duplicate_data += 1;
            return DataOutcome { ack: Some(self.ack_segment()), completed: Vec::new() };
        }
        if seq >= self.rx_next_expected.saturating_add(self.cfg.window) {
            self.stats.out_of_window += 1;
            return DataOutcome::default();
        }
        if header.msg_id < self.next_release_msg || header.msg_len == 0 {
            self.stats.protocol_errors += 1;
            return DataOutcome::default();
        }
        let msg_len = header.msg_len as usize;
        let start = header.frag_offset as usize;
        let end = start + payload.len();
        let slot = self
            .reassembly
            .entry(header.msg_id)
            .or_insert_with(|| Reassembly { buf: vec![0; msg_len], received: 0 });
        if slot.buf.len() != msg_len || end > msg_len {
            self.stats.protocol_errors += 1;
            return DataOutcome::default();
        }
        self.stats.data_frames_received += 1;

        let in_order = seq == self.rx_next_expected;
        if in_order {
            self.rx_next_expected += 1;
            while self.rx_received.remove(&self.rx_next_expected) {
                self.rx_next_expected += 1;
            }
        } else {
            self.rx_received.insert(seq);
        }

        slot.buf[start..end].copy_from_slice(payload);
        slot.received += payload.len();
        if slot.received == msg_len {
            let done = self.reassembly.remove(&header.msg_id).unwrap();
            self.completed.insert(header.msg_id, done.buf);
        }
        let mut completed = Vec::new();
        while let Some(msg) = self.completed.remove(&self.next_release_msg) {
            completed.push(msg);
            self.next_release_msg += 1;
        }
        self.stats.messages_delivered += completed.len() as u64;

        self.pending_acks += 1;
        let ack = if !in_order || !self.rx_received.is_empty() || self.pending_acks >= self.cfg.ack_every {
            Some(self.ack_segment())
        } else {
            self.ack_deadline.get_or_insert(now + self.cfg.ack_delay_us);
            None
        };
        DataOutcome { ack, completed }
    }

    /// Process an ACK or SACK. Returns fast retransmissions.
    pub fn on_ack(&mut self, header: &WireHeader, payload: &[u8], now: u64) -> Result<Vec<Segment>, TransportError> {
        self.peer_heard();
        let cum = header.ack;
        if cum > self.next_tx_seq {
            self.stats.protocol_errors += 1;
            return Err(TransportError::AckBeyondSent { ack: cum, next: self.next_tx_seq });
        }
        let sack = if header.pkt_type == PacketType::Sack {
            match SackBlock::decode(payload, cum) {
                Ok(s) if s.ranges.last().is_none_or(|&(_, e)| e <= self.next_tx_seq) => s,
                _ => {
                    self.stats.protocol_errors += 1;
                    return Err(TransportError::BadSack);
                }
            }
        } else {
            SackBlock::default()
        };

        if cum > self.highest_cum_ack {
            self.highest_cum_ack = cum;
            self.rto = self.cfg.rto_base_us;
        }
        let before = self.unacked.len();
        let still = self.unacked.split_off(&self.highest_cum_ack);
        let mut newest_sample = None;
        let mut sample = |e: &Unacked| {
            if e.retransmits == 0 {
                newest_sample = Some(newest_sample.map_or(e.sent_at, |t: u64| t.max(e.sent_at)));
            }
        };
        self.unacked.values().for_each(&mut sample);
        self.unacked = still;
        if !sack.ranges.is_empty() {
            self.unacked.retain(|seq, e| {
                let hit = sack.contains(*seq);
                if hit {
                    sample(e);
                }
                !hit
            });
        }
        self.stats.acked_unique += (before - self.unacked.len()) as u64;
        if let Some(sent) = newest_sample {
            self.observe_rtt(now.saturating_sub(sent) as f64);
            self.newest_delivered_send = self.newest_delivered_send.max(sent);
        }

        let mut out = Vec::new();
        if self.cfg.sack_enabled {
            if let Some(highest) = sack.highest() {
                // A hole counts once the SACKed edge is `threshold` packets
                // past it and a packet sent at least a quarter RTT after it
                // has been delivered, so reordering inside one burst doesn't
                // look like loss. Each hole is fast-retransmitted at most
                // once; after that the RTO owns it.
                let threshold = self.cfg.fast_retransmit_after;
                let limit = highest.saturating_sub(threshold.saturating_sub(1));
                let reorder_window = self.rtt.map_or(0, |(srtt, _)| (srtt / 4.0).ceil() as u64);
                let evidence = self.newest_delivered_send;
                let mut due = Vec::new();
                for (&seq, entry) in self.unacked.range_mut(..limit) {
                    if entry.fast_retransmitted {
                        continue;
                    }
                    entry.sack_misses += 1;
                    if entry.sack_misses >= threshold && entry.sent_at + reorder_window <= evidence {
                        entry.fast_retransmitted = true;
                        due.push(seq);
                    }
                }
                for seq in due {
                    if let Some(seg) = self.retransmit(seq, now) {
                        self.stats.fast_retransmits += 1;
                        out.push(seg);
                    }
                }
            }
        }
        Ok(out)
    }

    fn observe_rtt(&mut self, r: f64) {
        self.rtt = Some(match self.rtt {
            None => (r, r / 2.0),
            Some((srtt, var)) => (0.875 * srtt + 0.125 * r, 0.75 * var + 0.25 * (srtt - r).abs()),
        });
    }

    /// Smoothed round-trip estimate in µs, once one is available.
    pub fn srtt(&self) -> Option<f64> {
        self.rtt.map(|(s, _)| s)
    }

    fn oldest_unacked(&self) -> Option<(u32, u64)> {
        self.unacked
            .iter()
            .map(|(&seq, e)| (seq, e.sent_at))
            .min_by_key(|&(seq, sent)| (sent, seq))
    }

    /// Earliest time `on_timer` has something to do.
    pub fn next_deadline(&self) -> Option<u64> {
        [
            self.ack_deadline,
            self.oldest_unacked().map(|(_, sent)| sent + self.rto),
            self.unconfirmed.as_ref().map(|u| u.resend_at),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Delayed ack, retransmission timeout, and handshake-ACK resend.
    pub fn on_timer(&mut self, now: u64) -> TimerOutcome {
        let mut out = TimerOutcome::default();
        if self.ack_deadline.is_some_and(|d| d <= now) {
            out.segments.push(self.ack_segment());
        }
        let max = self.cfg.max_retransmits;
        let (base, cap) = (self.cfg.rto_base_us, self.cfg.rto_max_us);
        if let Some(u) = self.unconfirmed.as_mut().filter(|u| u.resend_at <= now) {
            if u.resends >= max {
                self.reset = true;
                out.reset = true;
                return out;
            }
            u.resends += 1;
            u.resend_at = now + (base << u.resends.min(16)).min(cap);
            out.segments.push(u.ack.clone());
        }
        if let Some((seq, sent)) = self.oldest_unacked() {
            if sent + self.rto <= now {
                if self.unacked[&seq].retransmits >= max {
                    self.reset = true;
                    out.reset = true;
                    return out;
                }
                self.stats.rto_fires += 1;
                out.segments.extend(self.retransmit(seq, now));
                self.rto = (self.rto * 2).min(cap);
            }
        }
        out
    }

    /// A segment of the given control type on this flow's TX pair.
    pub fn control_segment(&self, ty: PacketType) -> Segment {
        Segment::new(self.tx_udp, self.header(ty), Bytes::new())
    }

    /// Tear down locally; later sends fail.
    pub fn mark_reset(&mut self) {
        self.reset = true;
        self.send_queue.clear();
        self.backlog = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(cfg: TransportConfig) -> FlowState {
        FlowState::new(
            cfg,
            MachnetPortPair::new(1000, 2000),
            UdpPortPair::new(40000, 50000),
            UdpPortPair::new(50001, 40001),
            QueueId(0),
        )
    }

    fn pair(cfg: TransportConfig) -> (FlowState, FlowState) {
        (flow(cfg.clone()), flow(cfg))
    }

    fn bytes(len: usize, seed: u8) -> Bytes {
        (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect::<Vec<_>>().into()
    }

    #[test]
    fn one_byte_is_one_last_fragment() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(1, 0)).unwrap();
        let segs = f.poll_transmit(0, usize::MAX);
        assert_eq!(segs.len(), 1);
        let h = segs[0].header;
        assert_eq!((h.frag_offset, h.msg_len, h.seq), (0, 1, 0));
        assert!(h.is_last_fragment());
        assert_eq!(segs[0].udp, UdpPortPair::new(40000, 50000));
    }

    #[test]
    fn fragment_boundaries() {
        let f = flow(TransportConfig::default());
        assert_eq!(f.fragment_count(1408), 1);
        assert_eq!(f.fragment_count(1409), 2);
        assert_eq!(f.fragment_count(MAX_MESSAGE_LEN), 5958);
        assert_eq!(MAX_MESSAGE_LEN - 5957 * 1408, 1152);
    }

    #[test]
    fn size_limits() {
        let mut f = flow(TransportConfig::default());
        assert_eq!(f.send_message(Bytes::new()), Err(TransportError::Empty));
        assert_eq!(
            f.send_message(vec![0u8; MAX_MESSAGE_LEN + 1].into()),
            Err(TransportError::TooLarge(MAX_MESSAGE_LEN + 1))
        );
        assert!(f.send_message(vec![0u8; MAX_MESSAGE_LEN].into()).is_ok());
        f.mark_reset();
        assert_eq!(f.send_message(bytes(5, 0)), Err(TransportError::Reset));
    }

    #[test]
    fn window_limits_outstanding_packets() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(100 * 1408, 0)).unwrap();
        assert_eq!(f.poll_transmit(0, usize::MAX).len(), 64);
        assert!(f.poll_transmit(0, usize::MAX).is_empty());
        let mut ack = WireHeader::new(PacketType::Ack, 2000, 1000);
        ack.ack = 10;
        f.on_ack(&ack, &[], 5).unwrap();
        assert_eq!(f.poll_transmit(5, usize::MAX).len(), 10);
        assert_eq!(f.in_flight(), 64);
    }

    #[test]
    fn in_order_delivery_completes_on_last_fragment() {
        let (mut tx, mut rx) = pair(TransportConfig::default());
        let msg = bytes(3000, 7);
        tx.send_message(msg.clone()).unwrap();
        let segs = tx.poll_transmit(0, usize::MAX);
        assert_eq!(segs.len(), 3);
        let a = rx.on_data(&segs[0].header, &segs[0].payload, 0);
        assert!(a.completed.is_empty() && a.ack.is_none());
        let b = rx.on_data(&segs[1].header, &segs[1].payload, 1);
        assert!(b.ack.is_some(), "every second packet is acked");
        let c = rx.on_data(&segs[2].header, &segs[2].payload, 2);
        assert_eq!(c.completed, vec![msg.to_vec()]);
        assert_eq!(rx.rx_next_expected(), 3);
        // Third packet alone waits for the delayed-ack timer.
        assert_eq!(rx.next_deadline(), Some(102));
        let t = rx.on_timer(102);
        assert_eq!(t.segments.len(), 1);
        assert_eq!(t.segments[0].header.ack, 3);
    }

    #[test]
    fn gap_produces_sack() {
        let (mut tx, mut rx) = pair(TransportConfig::default());
        tx.send_message(bytes(4 * 1408, 1)).unwrap();
        let segs = tx.poll_transmit(0, usize::MAX);
        // Packets 0 and 2 arrive; 1 is missing.
        rx.on_data(&segs[0].header, &segs[0].payload, 0);
        let out = rx.on_data(&segs[2].header, &segs[2].payload, 0).ack.unwrap();
        assert_eq!(out.header.pkt_type, PacketType::Sack);
        assert_eq!(out.header.ack, 1);
        assert_eq!(SackBlock::decode(&out.payload, 1).unwrap().ranges, vec![(2, 3)]);
    }

    #[test]
    fn duplicate_fragment_is_delivered_once() {
        let (mut tx, mut rx) = pair(TransportConfig::default());
        let msg = bytes(2000, 3);
        tx.send_message(msg.clone()).unwrap();
        let segs = tx.poll_transmit(0, usize::MAX);
        rx.on_data(&segs[0].header, &segs[0].payload, 0);
        let dup = rx.on_data(&segs[0].header, &segs[0].payload, 0);
        assert!(dup.ack.is_some() && dup.completed.is_empty());
        let done = rx.on_data(&segs[1].header, &segs[1].payload, 0);
        assert_eq!(done.completed, vec![msg.to_vec()]);
        assert_eq!(rx.stats().duplicate_data, 1);
        assert_eq!(rx.stats().messages_delivered, 1);
    }

    #[test]
    fn out_of_window_data_is_dropped() {
        let mut rx = flow(TransportConfig::default());
        let mut h = WireHeader::new(PacketType::Data, 2000, 1000);
        h.seq = 64;
        h.msg_len = 1;
        let out = rx.on_data(&h, &[1], 0);
        assert!(out.ack.is_none() && out.completed.is_empty());
        assert_eq!(rx.stats().out_of_window, 1);
    }

    #[test]
    fn messages_release_in_order() {
        let (mut tx, mut rx) = pair(TransportConfig::default());
        tx.send_message(bytes(10, 1)).unwrap();
        tx.send_message(bytes(20, 2)).unwrap();
        let segs = tx.poll_transmit(0, usize::MAX);
        let later = rx.on_data(&segs[1].header, &segs[1].payload, 0);
        assert!(later.completed.is_empty());
        let both = rx.on_data(&segs[0].header, &segs[0].payload, 0);
        assert_eq!(both.completed, vec![bytes(10, 1).to_vec(), bytes(20, 2).to_vec()]);
    }

    fn sack(cum: u32, ranges: &[(u32, u32)]) -> (WireHeader, Bytes) {
        let mut h = WireHeader::new(PacketType::Sack, 2000, 1000);
        h.ack = cum;
        (h, SackBlock { ranges: ranges.to_vec() }.encode())
    }

    #[test]
    fn third_sack_triggers_fast_retransmit() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(10 * 1408, 0)).unwrap();
        f.poll_transmit(0, 5);
        f.poll_transmit(40, usize::MAX);
        let (h, p) = sack(3, &[(5, 8)]);
        assert!(f.on_ack(&h, &p, 60).unwrap().is_empty());
        assert!(f.on_ack(&h, &p, 61).unwrap().is_empty());
        let re = f.on_ack(&h, &p, 62).unwrap();
        let seqs: Vec<u32> = re.iter().map(|s| s.header.seq).collect();
        assert_eq!(seqs, vec![3, 4]);
        assert_eq!(f.stats().fast_retransmits, 2);
        // 0..3 cumulatively acked, 5..8 selectively; 3, 4, 8, 9 outstanding.
        assert_eq!(f.in_flight(), 4);
        assert!(f.stats().balanced(f.in_flight()));
    }

    #[test]
    fn reordering_inside_one_burst_is_not_loss() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(10 * 1408, 0)).unwrap();
        f.poll_transmit(0, usize::MAX);
        let (h, p) = sack(3, &[(5, 8)]);
        for now in 30..36 {
            assert!(f.on_ack(&h, &p, now).unwrap().is_empty());
        }
        assert_eq!(f.stats().fast_retransmits, 0);
    }

    #[test]
    fn full_ack_empties_window_and_stale_ack_is_noop() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(5 * 1408, 0)).unwrap();
        f.poll_transmit(0, usize::MAX);
        let mut h = WireHeader::new(PacketType::Ack, 2000, 1000);
        h.ack = 2;
        f.on_ack(&h, &[], 1).unwrap();
        let before = f.stats().clone();
        assert!(f.on_ack(&h, &[], 2).unwrap().is_empty());
        assert_eq!(f.stats().acked_unique, before.acked_unique);
        assert_eq!(f.in_flight(), 3);
        h.ack = f.next_tx_seq();
        f.on_ack(&h, &[], 3).unwrap();
        assert_eq!(f.in_flight(), 0);
        assert!(f.is_idle());
    }

    #[test]
    fn ack_beyond_sent_is_rejected() {
        let mut f = flow(TransportConfig::default());
        let mut h = WireHeader::new(PacketType::Ack, 2000, 1000);
        h.ack = 1;
        assert_eq!(f.on_ack(&h, &[], 0), Err(TransportError::AckBeyondSent { ack: 1, next: 0 }));
        assert_eq!(f.stats().protocol_errors, 1);
    }

    #[test]
    fn rto_backs_off_and_resets_after_budget() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(10, 0)).unwrap();
        f.poll_transmit(0, usize::MAX);
        assert_eq!(f.next_deadline(), Some(10_000));
        assert!(f.on_timer(9_999).segments.is_empty());
        let mut expected_rto = 10_000u64;
        for i in 1..=16 {
            let now = f.next_deadline().unwrap();
            assert_eq!(now - f.oldest_unacked().unwrap().1, expected_rto);
            let out = f.on_timer(now);
            assert!(!out.reset, "reset early at {i}");
            assert_eq!(out.segments.len(), 1);
            expected_rto = (expected_rto * 2).min(1_000_000);
        }
        let now = f.next_deadline().unwrap();
        assert!(f.on_timer(now).reset);
        assert!(f.is_reset());
        assert_eq!(f.stats().rto_fires, 16);
    }

    #[test]
    fn rto_resets_on_forward_progress() {
        let mut f = flow(TransportConfig::default());
        f.send_message(bytes(3000, 0)).unwrap();
        f.poll_transmit(0, usize::MAX);
        f.on_timer(10_000);
        assert_eq!(f.rto(), 20_000);
        let mut h = WireHeader::new(PacketType::Ack, 2000, 1000);
        h.ack = 1;
        f.on_ack(&h, &[], 10_050).unwrap();
        assert_eq!(f.rto(), 10_000);
    }

    #[test]
    fn unconfirmed_flow_stamps_data_and_resends_ack() {
        let mut f = flow(TransportConfig::default());
        let hs_ack = Segment::new(UdpPortPair::new(1, 2), WireHeader::new(PacketType::Ack, 1000, 2000), Bytes::new());
        f.await_confirmation(hs_ack.clone(), UdpPortPair::new(33000, 44000), 0);
        f.send_message(bytes(10, 0)).unwrap();
        let seg = &f.poll_transmit(0, usize::MAX)[0];
        assert_ne!(seg.header.flags & FLAG_HANDSHAKE, 0);
        assert_eq!(unpack_pair(seg.header.ack), UdpPortPair::new(33000, 44000));
        let out = f.on_timer(10_000);
        assert!(out.segments.contains(&hs_ack));
        let mut h = WireHeader::new(PacketType::Ack, 2000, 1000);
        h.ack = 1;
        f.on_ack(&h, &[], 10_010).unwrap();
        assert!(f.is_confirmed());
    }

    #[test]
    fn sack_block_validation() {
        let mut received = BTreeSet::new();
        for s in [5, 6, 7, 9, 12, 13] {
            received.insert(s);
        }
        let b = SackBlock::from_received(&received);
        assert_eq!(b.ranges, vec![(5, 8), (9, 10), (12, 14)]);
        assert_eq!(SackBlock::decode(&b.encode(), 3).unwrap(), b);
        assert!(SackBlock::decode(&b.encode(), 6).is_err(), "range below cumulative ack");
        let overlapping = SackBlock { ranges: vec![(5, 8), (7, 9)] }.encode();
        assert!(SackBlock::decode(&overlapping, 1).is_err());
        let many: BTreeSet<u32> = (0..40).map(|i| 10 + 2 * i).collect();
        assert_eq!(SackBlock::from_received(&many).ranges.len(), MAX_SACK_RANGES);
    }
}
