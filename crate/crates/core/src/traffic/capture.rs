use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pcap, PacketRecord, Protocol};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptureFormat {
    Jsonl,
    Pcap,
}

/// One line of a JSONL capture. Field order here is the on-disk order.
#[derive(Serialize, Deserialize)]
struct CaptureLine {
    ts_us: u64,
    src: IpAddr,
    dst: IpAddr,
    len: u32,
    proto: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sport: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dport: Option<u16>,
}

impl From<&PacketRecord> for CaptureLine {
    fn from(p: &PacketRecord) -> Self {
        CaptureLine {
            ts_us: p.timestamp_us,
            src: p.src_ip,
            dst: p.dst_ip,
            len: p.size_bytes,
            proto: p.protocol,
            sport: p.src_port,
            dport: p.dst_port,
        }
    }
}

impl From<CaptureLine> for PacketRecord {
    fn from(l: CaptureLine) -> Self {
        PacketRecord {
            timestamp_us: l.ts_us,
            src_ip: l.src,
            dst_ip: l.dst,
            size_bytes: l.len,
            protocol: l.proto,
            src_port: l.sport,
            dst_port: l.dport,
        }
    }
}

/// Guesses the format from the first four bytes: a libpcap magic means PCAP,
/// anything else is treated as JSONL.
pub fn sniff_format(path: &Path) -> Result<CaptureFormat> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    let mut n = 0;
    while n < 4 {
        match f.read(&mut magic[n..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            k => n += k,
        }
    }
    if n == 4 && pcap::is_pcap_magic(magic) {
        Ok(CaptureFormat::Pcap)
    } else {
        Ok(CaptureFormat::Jsonl)
    }
}

/// Reads a capture file. Records come back stably sorted by timestamp.
pub fn parse_capture(path: &Path, format: CaptureFormat) -> Result<Vec<PacketRecord>> {
    let mut records = match format {
        CaptureFormat::Jsonl => {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            read_jsonl(BufReader::new(f))?
        }
        CaptureFormat::Pcap => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            pcap::read_pcap(&bytes)?
        }
    };
    records.sort_by_key(|p| p.timestamp_us);
    Ok(records)
}

/// Parses JSONL in file order. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<PacketRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptureLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        let record = PacketRecord::from(parsed);
        record.validate().map_err(|e| Error::Parse {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[PacketRecord]) -> Result<()> {
    for p in records {
        serde_json::to_writer(&mut w, &CaptureLine::from(p))?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_capture(path: &Path, records: &[PacketRecord], format: CaptureFormat) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    match format {
        CaptureFormat::Jsonl => write_jsonl(&mut w, records)?,
        CaptureFormat::Pcap => pcap::write_pcap(&mut w, records)?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    #[test]
    fn empty_file_is_empty_capture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(parse_capture(&path, CaptureFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn shuffled_lines_are_sorted() {
        let text = concat!(
            r#"{"ts_us":300,"src":"10.0.0.1","dst":"8.8.8.8","len":60,"proto":"udp","sport":1,"dport":2}"#,
            "\n",
            r#"{"ts_us":100,"src":"8.8.8.8","dst":"10.0.0.1","len":70,"proto":"tcp","sport":2,"dport":1}"#,
            "\n",
            r#"{"ts_us":200,"src":"10.0.0.1","dst":"8.8.8.8","len":80,"proto":"other"}"#,
            "\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, text).unwrap();
        let got = parse_capture(&path, CaptureFormat::Jsonl).unwrap();
        let ts: Vec<u64> = got.iter().map(|p| p.timestamp_us).collect();
        assert_eq!(ts, vec![100, 200, 300]);
        assert_eq!(got[0].size_bytes, 70);
        assert_eq!(got[1].protocol, Protocol::Other);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"ts_us":1,"src":"10.0.0.1","dst":"8.8.8.8","len":60,"proto":"other"}"#,
            "\n",
            r#"{"ts_us":2,"src":"not-an-ip","dst":"8.8.8.8","len":60,"proto":"other"}"#,
            "\n"
        );
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("unexpected {other:?}"),
        }
        let missing_ports = r#"{"ts_us":1,"src":"10.0.0.1","dst":"8.8.8.8","len":60,"proto":"udp"}"#;
        assert!(matches!(read_jsonl(missing_ports.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn sniffing() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("a.jsonl");
        let p = dir.path().join("a.pcap");
        let recs = vec![PacketRecord::udp(
            5,
            IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)),
            IpAddr::V4(Ipv4Addr::new(8, 8, 8, 8)),
            100,
            1,
            2,
        )];
        write_capture(&j, &recs, CaptureFormat::Jsonl).unwrap();
        write_capture(&p, &recs, CaptureFormat::Pcap).unwrap();
        assert_eq!(sniff_format(&j).unwrap(), CaptureFormat::Jsonl);
        assert_eq!(sniff_format(&p).unwrap(), CaptureFormat::Pcap);
        assert_eq!(parse_capture(&p, CaptureFormat::Pcap).unwrap(), recs);
    }

    fn arb_record() -> impl Strategy<Value = PacketRecord> {
        (any::<u64>(), any::<u32>(), any::<[u16; 8]>(), any::<u32>(), 0u8..3, any::<u16>(), any::<u16>(), any::<bool>())
            .prop_map(|(ts, src, dst6, len, proto, sp, dp, v6)| {
                let src = IpAddr::V4(Ipv4Addr::from(src));
                let dst = if v6 {
                    IpAddr::V6(dst6.into())
                } else {
                    IpAddr::V4(Ipv4Addr::from(u32::from(dst6[0]) << 16 | u32::from(dst6[1])))
                };
                match proto {
                    0 => PacketRecord::tcp(ts, src, dst, len, sp, dp),
                    1 => PacketRecord::udp(ts, src, dst, len, sp, dp),
                    _ => PacketRecord::other(ts, src, dst, len),
                }
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &records).unwrap();
            prop_assert_eq!(read_jsonl(buf.as_slice()).unwrap(), records);
        }
    }
}
