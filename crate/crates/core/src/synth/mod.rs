//! Labeled synthetic traffic.
//!
//! Each flow is one conversation between the local host and a unique remote
//! address, drawn from a per-class [`TrafficProfile`] and perturbed by a
//! [`ChannelCondition`]. All randomness of a flow comes from one ChaCha8
//! stream seeded by the flow seed, so a flow is reproducible in isolation.
//! The profile numbers are plausible stand-ins, not measurements.

mod dataset;

use std::collections::BTreeMap;
use std::fmt;
use std::net::IpAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{L1Class, SubClass};
use crate::error::{Error, Result};
use crate::traffic::{PacketRecord, Protocol};

pub use dataset::{
    generate_dataset, split_manifest, DatasetSpec, MixedMember, DEFAULT_LOCAL_IP, FlowSpec, GeneratedCapture, GeneratedDataset, Manifest,
    ManifestRow, MixedSpec,
};

/// Truncated normal packet-size distribution, in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeDist {
    pub mean: f64,
    pub sd: f64,
    pub min: u32,
    pub max: u32,
}

impl SizeDist {
    pub const fn new(mean: f64, sd: f64, min: u32, max: u32) -> Self {
        SizeDist { mean, sd, min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.mean.is_finite() && self.sd.is_finite() && self.sd >= 0.0) || self.min > self.max || self.min == 0 {
            return Err(Error::Spec(format!("{what}: bad size distribution {self:?}")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let v = if self.sd > 0.0 {
            Normal::new(self.mean, self.sd).expect("validated").sample(rng)
        } else {
            self.mean
        };
        (v.round().max(0.0) as u32).clamp(self.min, self.max)
    }
}

/// Alternating ON/OFF periods, each drawn uniformly from its range. Packets
/// are only sent during ON periods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnOff {
    pub on_s: (f64, f64),
    pub off_s: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProfile {
    pub l1: L1Class,
    #[serde(default)]
    pub l2: Option<SubClass>,
    pub ul_rate_pps: f64,
    pub dl_rate_pps: f64,
    pub ul_size: SizeDist,
    pub dl_size: SizeDist,
    /// 0 gives Poisson arrivals; larger values give burstier Gamma gaps.
    #[serde(default)]
    pub burstiness: f64,
    #[serde(default)]
    pub on_off: Option<OnOff>,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
}

fn default_protocol() -> Protocol {
    Protocol::Udp
}

impl TrafficProfile {
    /// Ratio of the weaker to the stronger direction's nominal byte rate.
    pub fn bidirectionality(&self) -> f64 {
        let ul = self.ul_rate_pps * self.ul_size.mean;
        let dl = self.dl_rate_pps * self.dl_size.mean;
        let hi = ul.max(dl);
        if hi <= 0.0 {
            0.0
        } else {
            ul.min(dl) / hi
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(format!("profile {name}: {m}")));
        if !crate::detector::is_legal(self.l1, self.l2) {
            return bad(format!("sub-class {:?} is not legal under {}", self.l2, self.l1));
        }
        if self.l1 != L1Class::Cg && self.l2.is_none() {
            return bad(format!("{} profiles need a sub-class", self.l1));
        }
        for r in [self.ul_rate_pps, self.dl_rate_pps] {
            if !(r.is_finite() && r >= 0.0) {
                return bad(format!("rate {r} must be finite and >= 0"));
            }
        }
        if self.ul_rate_pps + self.dl_rate_pps <= 0.0 {
            return bad("both rates are zero".into());
        }
        if !(self.burstiness.is_finite() && self.burstiness >= 0.0) {
            return bad("burstiness must be >= 0".into());
        }
        self.ul_size.validate(name)?;
        self.dl_size.validate(name)?;
        if let Some(o) = self.on_off {
            for (lo, hi) in [o.on_s, o.off_s] {
                if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                    return bad(format!("on/off range ({lo}, {hi}) invalid"));
                }
            }
        }
        let b = self.bidirectionality();
        match self.l1 {
            L1Class::Rt if b < 0.5 => bad(format!("RT bidirectionality {b:.3} < 0.5")),
            L1Class::Nrt if b > 0.3 => bad(format!("NRT bidirectionality {b:.3} > 0.3")),
            _ => Ok(()),
        }
    }
}

/// The six built-in profiles keyed by name (CG, MG, VC, AC, FD, VS).
pub fn default_profiles() -> BTreeMap<String, TrafficProfile> {
    let p = |l1, l2, ul_rate, dl_rate, ul_size, dl_size, burstiness, on_off, protocol| TrafficProfile {
        l1,
        l2,
        ul_rate_pps: ul_rate,
        dl_rate_pps: dl_rate,
        ul_size,
        dl_size,
        burstiness,
        on_off,
        protocol,
    };
    let mut m = BTreeMap::new();
    m.insert(
        "CG".to_string(),
        p(
            L1Class::Cg,
            None,
            60.0,
            800.0,
            SizeDist::new(100.0, 15.0, 60, 200),
            SizeDist::new(1150.0, 250.0, 200, 1400),
            0.2,
            None,
            Protocol::Udp,
        ),
    );
    m.insert(
        "MG".to_string(),
        p(
            L1Class::Rt,
            Some(SubClass::Mg),
            30.0,
            30.0,
            SizeDist::new(90.0, 20.0, 50, 200),
            SizeDist::new(140.0, 40.0, 60, 300),
            0.5,
            None,
            Protocol::Udp,
        ),
    );
    m.insert(
        "VC".to_string(),
        p(
            L1Class::Rt,
            Some(SubClass::Vc),
            30.0,
            30.0,
            SizeDist::new(1000.0, 200.0, 300, 1400),
            SizeDist::new(1000.0, 200.0, 300, 1400),
            0.3,
            None,
            Protocol::Udp,
        ),
    );
    m.insert(
        "AC".to_string(),
        p(
            L1Class::Rt,
            Some(SubClass::Ac),
            50.0,
            50.0,
            SizeDist::new(200.0, 15.0, 150, 260),
            SizeDist::new(200.0, 15.0, 150, 260),
            0.1,
            None,
            Protocol::Udp,
        ),
    );
    m.insert(
        "FD".to_string(),
        p(
            L1Class::Nrt,
            Some(SubClass::Fd),
            500.0,
            1000.0,
            SizeDist::new(66.0, 0.0, 66, 66),
            SizeDist::new(1460.0, 10.0, 1400, 1500),
            0.1,
            None,
            Protocol::Tcp,
        ),
    );
    m.insert(
        "VS".to_string(),
        p(
            L1Class::Nrt,
            Some(SubClass::Vs),
            20.0,
            900.0,
            SizeDist::new(80.0, 10.0, 60, 120),
            SizeDist::new(1350.0, 100.0, 1000, 1500),
            0.5,
            Some(OnOff {
                on_s: (0.8, 1.5),
                off_s: (1.0, 2.2),
            }),
            Protocol::Tcp,
        ),
    );
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "2.4GHz")]
    Ghz2_4,
    #[serde(rename = "5GHz")]
    Ghz5,
    #[serde(rename = "6GHz")]
    Ghz6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rssi {
    /// >= -55 dBm
    Normal,
    /// <= -65 dBm
    Edge,
}

/// Bins of the clear-channel-assessment duty cycle: < 0.1, 0.2-0.4, > 0.55.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Congestion {
    Normal,
    Mild,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Ghz2_4, Band::Ghz5, Band::Ghz6];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Ghz2_4 => "2.4GHz",
            Band::Ghz5 => "5GHz",
            Band::Ghz6 => "6GHz",
        }
    }
}

impl Rssi {
    pub const ALL: [Rssi; 2] = [Rssi::Normal, Rssi::Edge];

    pub fn as_str(self) -> &'static str {
        match self {
            Rssi::Normal => "normal",
            Rssi::Edge => "edge",
        }
    }
}

impl Congestion {
    pub const ALL: [Congestion; 3] = [Congestion::Normal, Congestion::Mild, Congestion::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Congestion::Normal => "normal",
            Congestion::Mild => "mild",
            Congestion::High => "high",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelCondition {
    pub band: Band,
    pub rssi: Rssi,
    pub congestion: Congestion,
}

/// Concrete perturbation derived from a [`ChannelCondition`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelEffects {
    pub rate_scale: f64,
    pub drop_prob: f64,
    pub jitter_ms: f64,
}

impl ChannelCondition {
    pub fn nominal() -> Self {
        ChannelCondition {
            band: Band::Ghz5,
            rssi: Rssi::Normal,
            congestion: Congestion::Normal,
        }
    }

    pub fn effects(&self) -> ChannelEffects {
        let (mut rate_scale, mut drop_prob, mut jitter_ms) = match self.congestion {
            Congestion::Normal => (1.0, 0.0, 1.0),
            Congestion::Mild => (0.85, 0.02, 5.0),
            Congestion::High => (0.6, 0.05, 15.0),
        };
        if self.rssi == Rssi::Edge {
            rate_scale *= 0.8;
            drop_prob += 0.02;
            jitter_ms *= 1.5;
        }
        match self.band {
            Band::Ghz2_4 => {
                rate_scale *= 0.9;
                jitter_ms *= 1.3;
            }
            Band::Ghz5 => {}
            Band::Ghz6 => jitter_ms *= 0.8,
        }
        ChannelEffects {
            rate_scale,
            drop_prob,
            jitter_ms,
        }
    }
}

/// Everything needed to synthesize one flow.
#[derive(Clone, Debug)]
pub struct FlowRequest<'a> {
    pub profile: &'a TrafficProfile,
    pub condition: ChannelCondition,
    pub duration_s: f64,
    pub local_ip: IpAddr,
    pub remote_ip: IpAddr,
    pub start_us: u64,
    pub seed: u64,
}

/// Packets of one flow in timestamp order. The first draw of the stream
/// offsets the flow start uniformly within half a second.
pub fn generate_flow(req: &FlowRequest<'_>) -> Result<Vec<PacketRecord>> {
    if !(req.duration_s > 0.0 && req.duration_s.is_finite()) {
        return Err(Error::Spec(format!("duration_s must be > 0, got {}", req.duration_s)));
    }
    let prof = req.profile;
    let fx = req.condition.effects();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

    let offset_s = rng.random_range(0.0..0.5);
    let end_s = req.duration_s;
    let windows = match prof.on_off {
        None => vec![(0.0, end_s)],
        Some(o) => on_periods(&o, end_s, &mut rng),
    };
    let local_port = 40000 + (req.seed % 20000) as u16;
    let remote_port = match prof.protocol {
        Protocol::Tcp => 443,
        _ => 3478,
    };

    let mut out = Vec::new();
    for (uplink, rate, sizes) in [
        (true, prof.ul_rate_pps, &prof.ul_size),
        (false, prof.dl_rate_pps, &prof.dl_size),
    ] {
        let rate = rate * fx.rate_scale;
        if rate <= 0.0 {
            continue;
        }
        let shape = 1.0 / (1.0 + prof.burstiness);
        let gaps = Gamma::new(shape, 1.0 / (rate * shape)).expect("positive parameters");
        let jitter = Normal::new(0.0, fx.jitter_ms / 1000.0).expect("finite sigma");
        for &(on, off) in &windows {
            let mut t = on + gaps.sample(&mut rng);
            while t < off {
                let size = sizes.sample(&mut rng);
                let dropped = rng.random::<f64>() < fx.drop_prob;
                let j = jitter.sample(&mut rng);
                if !dropped {
                    let ts_s = (t + j).clamp(0.0, end_s - 1e-6) + offset_s;
                    let ts = req.start_us + (ts_s * 1e6).round() as u64;
                    let (src, dst, sp, dp) = if uplink {
                        (req.local_ip, req.remote_ip, local_port, remote_port)
                    } else {
                        (req.remote_ip, req.local_ip, remote_port, local_port)
                    };
                    out.push(packet(prof.protocol, ts, src, dst, size, sp, dp));
                }
                t += gaps.sample(&mut rng);
            }
        }
    }
    out.sort_by_key(|p| p.timestamp_us);
    Ok(out)
}

fn packet(proto: Protocol, ts: u64, src: IpAddr, dst: IpAddr, size: u32, sp: u16, dp: u16) -> PacketRecord {
    match proto {
        Protocol::Tcp => PacketRecord::tcp(ts, src, dst, size, sp, dp),
        Protocol::Udp => PacketRecord::udp(ts, src, dst, size, sp, dp),
        Protocol::Other => PacketRecord::other(ts, src, dst, size),
    }
}

/// ON intervals covering `[0, end)`, starting with an ON period.
fn on_periods(o: &OnOff, end: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut t = 0.0;
    while t < end {
        let on = rng.random_range(o.on_s.0..=o.on_s.1);
        out.push((t, (t + on).min(end)));
        t += on + rng.random_range(o.off_s.0..=o.off_s.1);
    }
    out
}

/// SplitMix64 finalizer, used to derive independent flow seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn flow_seed(dataset_seed: u64, index: u64) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index))
}
