//! Minimal classic-libpcap adapter: Ethernet link type, IPv4/IPv6 network
//! layer, TCP/UDP ports. Payload bytes are never read.

use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use super::{PacketRecord, Protocol};
use crate::error::{Error, Result};

const MAGIC_US: u32 = 0xA1B2_C3D4;
const LINKTYPE_ETHERNET: u32 = 1;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;
// experimental protocol number used when writing `Protocol::Other`
const IPPROTO_OTHER: u8 = 253;

pub(crate) fn is_pcap_magic(bytes: [u8; 4]) -> bool {
    u32::from_le_bytes(bytes) == MAGIC_US || u32::from_be_bytes(bytes) == MAGIC_US
}

struct Cursor<'a> {
    buf: &'a [u8],
    little: bool,
}

impl Cursor<'_> {
    fn u32_at(&self, off: usize) -> u32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.little {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        }
    }
}

fn be16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

fn malformed(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("byte offset {offset}"),
        message: message.into(),
    }
}

/// Decodes a whole pcap file held in memory, in file order. Non-IP frames are
/// skipped.
pub fn read_pcap(bytes: &[u8]) -> Result<Vec<PacketRecord>> {
    if bytes.len() < 24 {
        return Err(Error::Format("file shorter than a pcap global header".into()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    let little = if u32::from_le_bytes(magic) == MAGIC_US {
        true
    } else if u32::from_be_bytes(magic) == MAGIC_US {
        false
    } else {
        return Err(Error::Format(format!("unknown pcap magic {:02x?}", magic)));
    };
    let cur = Cursor { buf: bytes, little };
    let linktype = cur.u32_at(20);
    if linktype != LINKTYPE_ETHERNET {
        return Err(Error::Format(format!("unsupported link type {linktype}")));
    }

    let mut out = Vec::new();
    let mut off = 24;
    while off < bytes.len() {
        if off + 16 > bytes.len() {
            return Err(malformed(off, "truncated record header"));
        }
        let ts_sec = u64::from(cur.u32_at(off));
        let ts_usec = u64::from(cur.u32_at(off + 4));
        let incl = cur.u32_at(off + 8) as usize;
        let data_off = off + 16;
        if data_off + incl > bytes.len() {
            return Err(malformed(off, "record data runs past end of file"));
        }
        let frame = &bytes[data_off..data_off + incl];
        if let Some(rec) = decode_frame(frame, ts_sec * 1_000_000 + ts_usec, data_off)? {
            out.push(rec);
        }
        off = data_off + incl;
    }
    Ok(out)
}

fn decode_frame(frame: &[u8], ts: u64, base: usize) -> Result<Option<PacketRecord>> {
    if frame.len() < 14 {
        return Err(malformed(base, "frame shorter than an Ethernet header"));
    }
    let mut ethertype = be16(frame, 12);
    let mut l3 = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return Err(malformed(base, "truncated VLAN tag"));
        }
        ethertype = be16(frame, 16);
        l3 = 18;
    }
    let ip = &frame[l3..];
    let (src, dst, size, proto_num, l4) = match ethertype {
        ETHERTYPE_IPV4 => {
            if ip.len() < 20 {
                return Err(malformed(base + l3, "truncated IPv4 header"));
            }
            let ihl = usize::from(ip[0] & 0x0f) * 4;
            if ihl < 20 || ip.len() < ihl {
                return Err(malformed(base + l3, "bad IPv4 header length"));
            }
            let frag_offset = be16(ip, 6) & 0x1fff;
            let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
            let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
            // non-first fragments carry no transport header
            let proto = if frag_offset == 0 { ip[9] } else { IPPROTO_OTHER };
            (src, dst, u32::from(be16(ip, 2)), proto, ihl)
        }
        ETHERTYPE_IPV6 => {
            if ip.len() < 40 {
                return Err(malformed(base + l3, "truncated IPv6 header"));
            }
            let s: [u8; 16] = ip[8..24].try_into().unwrap();
            let d: [u8; 16] = ip[24..40].try_into().unwrap();
            let size = 40 + u32::from(be16(ip, 4));
            (IpAddr::V6(Ipv6Addr::from(s)), IpAddr::V6(Ipv6Addr::from(d)), size, ip[6], 40)
        }
        _ => return Ok(None),
    };

    let protocol = match proto_num {
        IPPROTO_TCP => Protocol::Tcp,
        IPPROTO_UDP => Protocol::Udp,
        _ => Protocol::Other,
    };
    let (src_port, dst_port) = if protocol.has_ports() {
        if ip.len() < l4 + 4 {
            return Err(malformed(base + l3 + l4, "transport header not captured"));
        }
        (Some(be16(ip, l4)), Some(be16(ip, l4 + 2)))
    } else {
        (None, None)
    };
    Ok(Some(PacketRecord {
        timestamp_us: ts,
        src_ip: src,
        dst_ip: dst,
        size_bytes: size,
        protocol,
        src_port,
        dst_port,
    }))
}

/// Writes little-endian microsecond pcap with header-only frames; `orig_len`
/// accounts for the full packet.
pub fn write_pcap<W: Write>(mut w: W, records: &[PacketRecord]) -> Result<()> {
    let io = |e| Error::io("<pcap writer>", e);
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(&MAGIC_US.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&4u16.to_le_bytes());
    header.extend_from_slice(&0i32.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&65535u32.to_le_bytes());
    header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    w.write_all(&header).map_err(io)?;

    let mut frame = Vec::with_capacity(128);
    for p in records {
        frame.clear();
        encode_frame(p, &mut frame)?;
        let ts_sec = u32::try_from(p.timestamp_us / 1_000_000)
            .map_err(|_| Error::Data(format!("timestamp {} overflows pcap", p.timestamp_us)))?;
        let ts_usec = (p.timestamp_us % 1_000_000) as u32;
        let orig = 14u32.saturating_add(p.size_bytes);
        let mut rec = Vec::with_capacity(16);
        rec.extend_from_slice(&ts_sec.to_le_bytes());
        rec.extend_from_slice(&ts_usec.to_le_bytes());
        rec.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        rec.extend_from_slice(&orig.to_le_bytes());
        w.write_all(&rec).map_err(io)?;
        w.write_all(&frame).map_err(io)?;
    }
    Ok(())
}

fn encode_frame(p: &PacketRecord, out: &mut Vec<u8>) -> Result<()> {
    p.validate()?;
    let proto_num = match p.protocol {
        Protocol::Tcp => IPPROTO_TCP,
        Protocol::Udp => IPPROTO_UDP,
        Protocol::Other => IPPROTO_OTHER,
    };
    out.extend_from_slice(&[0u8; 12]);
    match (p.src_ip, p.dst_ip) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            let total = u16::try_from(p.size_bytes)
                .map_err(|_| Error::Data(format!("IPv4 length {} exceeds 65535", p.size_bytes)))?;
            out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            out.extend_from_slice(&[0x45, 0]);
            out.extend_from_slice(&total.to_be_bytes());
            out.extend_from_slice(&[0, 0, 0, 0, 64, proto_num, 0, 0]);
            out.extend_from_slice(&s.octets());
            out.extend_from_slice(&d.octets());
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            let payload = p
                .size_bytes
                .checked_sub(40)
                .and_then(|v| u16::try_from(v).ok())
                .ok_or_else(|| Error::Data(format!("IPv6 length {} not encodable", p.size_bytes)))?;
            out.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
            out.extend_from_slice(&[0x60, 0, 0, 0]);
            out.extend_from_slice(&payload.to_be_bytes());
            out.extend_from_slice(&[proto_num, 64]);
            out.extend_from_slice(&s.octets());
            out.extend_from_slice(&d.octets());
        }
        _ => return Err(Error::Data("mixed IPv4/IPv6 endpoints".into())),
    }
    if let (Some(sp), Some(dp)) = (p.src_port, p.dst_port) {
        out.extend_from_slice(&sp.to_be_bytes());
        out.extend_from_slice(&dp.to_be_bytes());
        let rest = if p.protocol == Protocol::Tcp { 16 } else { 4 };
        out.extend(std::iter::repeat_n(0u8, rest));
    }
    Ok(())
}
