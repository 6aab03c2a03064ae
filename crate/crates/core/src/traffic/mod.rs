//! Packet and conversation identities.
//!
//! A conversation is every packet exchanged between one local address and one
//! remote address, regardless of direction. Ports and protocol are carried on
//! each [`PacketRecord`] as metadata but do not take part in grouping.

mod capture;
mod pcap;

use std::collections::BTreeSet;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use capture::{parse_capture, read_jsonl, sniff_format, write_capture, write_jsonl, CaptureFormat};
pub use pcap::{read_pcap, write_pcap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
    Other,
}

impl Protocol {
    pub fn has_ports(self) -> bool {
        matches!(self, Protocol::Tcp | Protocol::Udp)
    }
}

/// One observed packet. `size_bytes` is the length reported by the capture
/// (IP total length for PCAP input).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PacketRecord {
    pub timestamp_us: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub size_bytes: u32,
    pub protocol: Protocol,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

impl PacketRecord {
    pub fn udp(timestamp_us: u64, src: IpAddr, dst: IpAddr, size: u32, sport: u16, dport: u16) -> Self {
        Self::with_ports(Protocol::Udp, timestamp_us, src, dst, size, sport, dport)
    }

    pub fn tcp(timestamp_us: u64, src: IpAddr, dst: IpAddr, size: u32, sport: u16, dport: u16) -> Self {
        Self::with_ports(Protocol::Tcp, timestamp_us, src, dst, size, sport, dport)
    }

    pub fn other(timestamp_us: u64, src: IpAddr, dst: IpAddr, size: u32) -> Self {
        PacketRecord {
            timestamp_us,
            src_ip: src,
            dst_ip: dst,
            size_bytes: size,
            protocol: Protocol::Other,
            src_port: None,
            dst_port: None,
        }
    }

    fn with_ports(
        protocol: Protocol,
        timestamp_us: u64,
        src: IpAddr,
        dst: IpAddr,
        size: u32,
        sport: u16,
        dport: u16,
    ) -> Self {
        PacketRecord {
            timestamp_us,
            src_ip: src,
            dst_ip: dst,
            size_bytes: size,
            protocol,
            src_port: Some(sport),
            dst_port: Some(dport),
        }
    }

    /// Ports must be present exactly when the protocol carries them.
    pub fn validate(&self) -> Result<()> {
        let has = self.src_port.is_some() && self.dst_port.is_some();
        let none = self.src_port.is_none() && self.dst_port.is_none();
        if self.protocol.has_ports() && !has {
            return Err(Error::Data(format!("{:?} packet without ports", self.protocol)));
        }
        if !self.protocol.has_ports() && !none {
            return Err(Error::Data("ports given for a protocol without ports".into()));
        }
        Ok(())
    }

    /// Same packet with endpoints swapped.
    pub fn reversed(&self) -> Self {
        PacketRecord {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "UL")]
    Ul,
    #[serde(rename = "DL")]
    Dl,
}

/// Direction-normalized conversation identity. Ordering is lexicographic on
/// (local, remote) and is used wherever a deterministic tie-break is needed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConversationKey {
    pub local: IpAddr,
    pub remote: IpAddr,
}

impl fmt::Display for ConversationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.local, self.remote)
    }
}

/// The device's own addresses, plus an optional IPv4 prefix length used to
/// derive subnet broadcast addresses.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalNetwork {
    pub addrs: BTreeSet<IpAddr>,
    #[serde(default)]
    pub prefix_len: Option<u8>,
}

impl LocalNetwork {
    pub fn new(addrs: impl IntoIterator<Item = IpAddr>) -> Self {
        LocalNetwork {
            addrs: addrs.into_iter().collect(),
            prefix_len: None,
        }
    }

    pub fn with_prefix_len(mut self, prefix_len: u8) -> Self {
        self.prefix_len = Some(prefix_len);
        self
    }

    pub fn contains(&self, ip: &IpAddr) -> bool {
        self.addrs.contains(ip)
    }

    fn is_subnet_broadcast(&self, ip: Ipv4Addr) -> bool {
        let Some(prefix) = self.prefix_len else {
            return false;
        };
        if prefix >= 31 {
            return false;
        }
        let host_mask = u32::MAX >> prefix;
        self.addrs.iter().any(|a| match a {
            IpAddr::V4(v4) => (u32::from(*v4) | host_mask) == u32::from(ip),
            IpAddr::V6(_) => false,
        })
    }

    /// False for broadcast, multicast, and link-local remotes.
    pub fn is_relevant(&self, key: &ConversationKey) -> bool {
        match key.remote {
            IpAddr::V4(v4) => {
                !(v4.is_broadcast()
                    || v4.is_multicast()
                    || v4.is_link_local()
                    || self.is_subnet_broadcast(v4))
            }
            IpAddr::V6(v6) => {
                let seg0 = v6.segments()[0];
                let multicast = v6.is_multicast();
                let link_local = (seg0 & 0xffc0) == 0xfe80;
                !(multicast || link_local)
            }
        }
    }
}

pub fn classify_direction(p: &PacketRecord, local: &LocalNetwork) -> Result<Direction> {
    match (local.contains(&p.src_ip), local.contains(&p.dst_ip)) {
        (true, false) => Ok(Direction::Ul),
        (false, true) => Ok(Direction::Dl),
        _ => Err(Error::DirectionAmbiguous {
            src: p.src_ip,
            dst: p.dst_ip,
        }),
    }
}

pub fn conversation_key(p: &PacketRecord, local: &LocalNetwork) -> Result<ConversationKey> {
    Ok(match classify_direction(p, local)? {
        Direction::Ul => ConversationKey {
            local: p.src_ip,
            remote: p.dst_ip,
        },
        Direction::Dl => ConversationKey {
            local: p.dst_ip,
            remote: p.src_ip,
        },
    })
}

pub fn is_relevant(key: &ConversationKey, local: &LocalNetwork) -> bool {
    local.is_relevant(key)
}
