//! Frame layout: Ethernet II, IPv4 (no options), UDP, then the 32-byte
//! transport header and its payload. All multi-byte fields are big-endian.
//! See `docs/wire.md` for the byte map.

use std::net::Ipv4Addr;

use bytes::Bytes;
use thiserror::Error;

use crate::lcd_nic::{Frame, NicError, ETH_HEADER_LEN, MTU};

pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const HEADER_LEN: usize = 32;
/// Offset of the transport header inside a frame.
pub const HEADER_OFFSET: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN;
pub const MAX_FRAME_PAYLOAD: usize = MTU - HEADER_OFFSET - HEADER_LEN;
/// Data bytes per DATA fragment.
pub const FRAGMENT_PAYLOAD: usize = 1408;
pub const MAX_MESSAGE_LEN: usize = 8 * 1024 * 1024;

pub const MAGIC: [u8; 2] = [0x4D, 0x4E];
pub const VERSION: u8 = 0x01;

pub const FLAG_LAST_FRAGMENT: u16 = 1 << 0;
/// Set on the ACK that completes the three-way handshake.
pub const FLAG_HANDSHAKE: u16 = 1 << 1;

const ETHERTYPE_IPV4: u16 = 0x0800;
const IPPROTO_UDP: u8 = 17;
/// Every frame is addressed to this MAC; the fabric routes by IP.
pub const FABRIC_MAC: [u8; 6] = [0x02, 0xfa, 0xb0, 0x00, 0x00, 0x01];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame too short for {0}")]
    Truncated(&'static str),
    #[error("not an IPv4/UDP frame")]
    NotUdp,
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown packet type {0}")]
    BadType(u8),
    #[error("fragment [{offset}, +{len}) does not fit message of {msg_len} bytes")]
    BadFragment { offset: u32, len: usize, msg_len: u32 },
    #[error(transparent)]
    Nic(#[from] NicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketType {
    Syn = 1,
    SynAck = 2,
    Ack = 3,
    Data = 4,
    Sack = 5,
    Fin = 6,
    FinAck = 7,
}

impl TryFrom<u8> for PacketType {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => Self::Syn,
            2 => Self::SynAck,
            3 => Self::Ack,
            4 => Self::Data,
            5 => Self::Sack,
            6 => Self::Fin,
            7 => Self::FinAck,
            other => return Err(WireError::BadType(other)),
        })
    }
}

/// The IPv4/UDP addressing that RSS hashes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FourTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FourTuple {
    /// RSS input order: source address, destination address, source port,
    /// destination port.
    pub fn rss_input(&self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[0..4].copy_from_slice(&self.src_ip.octets());
        out[4..8].copy_from_slice(&self.dst_ip.octets());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireHeader {
    pub pkt_type: PacketType,
    /// Flow port of the sender, independent of the UDP ports.
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub msg_id: u32,
    pub frag_offset: u32,
    pub msg_len: u32,
    pub flags: u16,
}

impl WireHeader {
    pub fn new(pkt_type: PacketType, src_port: u16, dst_port: u16) -> Self {
        Self {
            pkt_type,
            src_port,
            dst_port,
            seq: 0,
            ack: 0,
            msg_id: 0,
            frag_offset: 0,
            msg_len: 0,
            flags: 0,
        }
    }

    pub fn is_last_fragment(&self) -> bool {
        self.flags & FLAG_LAST_FRAGMENT != 0
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = VERSION;
        b[3] = self.pkt_type as u8;
        b[4..6].copy_from_slice(&self.src_port.to_be_bytes());
        b[6..8].copy_from_slice(&self.dst_port.to_be_bytes());
        b[8..12].copy_from_slice(&self.seq.to_be_bytes());
        b[12..16].copy_from_slice(&self.ack.to_be_bytes());
        b[16..20].copy_from_slice(&self.msg_id.to_be_bytes());
        b[20..24].copy_from_slice(&self.frag_offset.to_be_bytes());
        b[24..28].copy_from_slice(&self.msg_len.to_be_bytes());
        b[28..30].copy_from_slice(&self.flags.to_be_bytes());
        // 30..32 reserved, zero.
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() < HEADER_LEN {
            return Err(WireError::Truncated("transport header"));
        }
        if b[0..2] != MAGIC {
            return Err(WireError::BadMagic([b[0], b[1]]));
        }
        if b[2] != VERSION {
            return Err(WireError::BadVersion(b[2]));
        }
        let u16_at = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        Ok(Self {
            pkt_type: PacketType::try_from(b[3])?,
            src_port: u16_at(4),
            dst_port: u16_at(6),
            seq: u32_at(8),
            ack: u32_at(12),
            msg_id: u32_at(16),
            frag_offset: u32_at(20),
            msg_len: u32_at(24),
            flags: u16_at(28),
        })
    }
}

/// UDP ports as they appear on frames travelling in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UdpPortPair {
    pub src: u16,
    pub dst: u16,
}

impl UdpPortPair {
    pub fn new(src: u16, dst: u16) -> Self {
        Self { src, dst }
    }

    /// The same pair seen from the other end.
    pub fn reversed(self) -> Self {
        Self { src: self.dst, dst: self.src }
    }
}

/// A frame-to-be, minus addressing that the engine fills in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub udp: UdpPortPair,
    pub header: WireHeader,
    pub payload: Bytes,
}

impl Segment {
    pub fn new(udp: UdpPortPair, header: WireHeader, payload: impl Into<Bytes>) -> Self {
        Self { udp, header, payload: payload.into() }
    }
}

/// A decoded stack frame borrowing its payload.
#[derive(Debug)]
pub struct Parsed<'a> {
    pub tuple: FourTuple,
    pub header: WireHeader,
    pub payload: &'a [u8],
}

/// Locate the IPv4/UDP addressing and UDP payload of a frame.
pub fn parse_udp(bytes: &[u8]) -> Result<(FourTuple, &[u8]), WireError> {
    if bytes.len() < HEADER_OFFSET {
        return Err(WireError::Truncated("ethernet/ipv4/udp headers"));
    }
    let ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
    let ip = &bytes[ETH_HEADER_LEN..];
    if ethertype != ETHERTYPE_IPV4 || ip[0] != 0x45 || ip[9] != IPPROTO_UDP {
        return Err(WireError::NotUdp);
    }
    let udp = &ip[IPV4_HEADER_LEN..];
    let udp_len = u16::from_be_bytes([udp[4], udp[5]]) as usize;
    if udp_len < UDP_HEADER_LEN || udp_len > udp.len() {
        return Err(WireError::Truncated("udp datagram"));
    }
    let tuple = FourTuple {
        src_ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        dst_ip: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        src_port: u16::from_be_bytes([udp[0], udp[1]]),
        dst_port: u16::from_be_bytes([udp[2], udp[3]]),
    };
    Ok((tuple, &udp[UDP_HEADER_LEN..udp_len]))
}

pub fn parse_frame(frame: &Frame) -> Result<Parsed<'_>, WireError> {
    let (tuple, udp_payload) = parse_udp(frame.as_bytes())?;
    let header = WireHeader::decode(udp_payload)?;
    let payload = &udp_payload[HEADER_LEN..];
    if header.pkt_type == PacketType::Data {
        let end = header.frag_offset as u64 + payload.len() as u64;
        if end > header.msg_len as u64 || header.msg_len as usize > MAX_MESSAGE_LEN {
            return Err(WireError::BadFragment {
                offset: header.frag_offset,
                len: payload.len(),
                msg_len: header.msg_len,
            });
        }
    }
    Ok(Parsed { tuple, header, payload })
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks_exact(2)
        .map(|w| u16::from_be_bytes([w[0], w[1]]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Build a complete frame. UDP checksum is left zero, which IPv4 permits.
pub fn build_frame(
    src_mac: [u8; 6],
    tuple: &FourTuple,
    header: &WireHeader,
    payload: &[u8],
) -> Result<Frame, WireError> {
    let udp_len = UDP_HEADER_LEN + HEADER_LEN + payload.len();
    let ip_len = IPV4_HEADER_LEN + udp_len;
    let mut b = Vec::with_capacity(ETH_HEADER_LEN + ip_len);
    b.extend_from_slice(&FABRIC_MAC);
    b.extend_from_slice(&src_mac);
    b.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ip_start = b.len();
    b.extend_from_slice(&[0x45, 0x00]);
    b.extend_from_slice(&(ip_len as u16).to_be_bytes());
    b.extend_from_slice(&[0x00, 0x00, 0x40, 0x00, 64, IPPROTO_UDP, 0x00, 0x00]);
    b.extend_from_slice(&tuple.src_ip.octets());
    b.extend_from_slice(&tuple.dst_ip.octets());
    let csum = ipv4_checksum(&b[ip_start..ip_start + IPV4_HEADER_LEN]);
    b[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

    b.extend_from_slice(&tuple.src_port.to_be_bytes());
    b.extend_from_slice(&tuple.dst_port.to_be_bytes());
    b.extend_from_slice(&(udp_len as u16).to_be_bytes());
    b.extend_from_slice(&[0x00, 0x00]);

    b.extend_from_slice(&header.encode());
    b.extend_from_slice(payload);
    Ok(Frame::new(b)?)
}

/// Byte cursor for the small fixed-layout control payloads.
pub(crate) struct Reader<'a>(pub &'a [u8]);

impl Reader<'_> {
    pub fn u8(&mut self) -> Option<u8> {
        let (&v, rest) = self.0.split_first()?;
        self.0 = rest;
        Some(v)
    }

    pub fn u16(&mut self) -> Option<u16> {
        if self.0.len() < 2 {
            return None;
        }
        let v = u16::from_be_bytes([self.0[0], self.0[1]]);
        self.0 = &self.0[2..];
        Some(v)
    }

    pub fn u32(&mut self) -> Option<u32> {
        if self.0.len() < 4 {
            return None;
        }
        let v = u32::from_be_bytes([self.0[0], self.0[1], self.0[2], self.0[3]]);
        self.0 = &self.0[4..];
        Some(v)
    }
}
