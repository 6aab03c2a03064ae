use std::collections::{BTreeMap, BTreeSet};
use std::io::BufWriter;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    default_profiles, flow_seed, generate_flow, Band, ChannelCondition, Congestion, FlowRequest, Rssi,
    TrafficProfile,
};
use crate::detector::{L1Class, SubClass};
use crate::error::{Error, Result};
use crate::traffic::{write_jsonl, ConversationKey, PacketRecord};

pub const DEFAULT_LOCAL_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 50, 10);
const START_US: u64 = 1_700_000_000_000_000;

fn default_count() -> usize {
    1
}

fn default_rssi() -> Rssi {
    Rssi::Normal
}

fn default_congestion() -> Congestion {
    Congestion::Normal
}

fn default_band() -> Band {
    Band::Ghz5
}

/// `count` separate single-flow captures of one profile under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub profile: String,
    #[serde(default = "default_band")]
    pub band: Band,
    #[serde(default = "default_rssi")]
    pub rssi: Rssi,
    #[serde(default = "default_congestion")]
    pub congestion: Congestion,
    pub duration_s: f64,
    #[serde(default = "default_count")]
    pub count: usize,
}

/// Member of a mixed capture; its duration is the capture's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedMember {
    pub profile: String,
    #[serde(default = "default_band")]
    pub band: Band,
    #[serde(default = "default_rssi")]
    pub rssi: Rssi,
    #[serde(default = "default_congestion")]
    pub congestion: Congestion,
}

/// `count` captures, each interleaving one flow per member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedSpec {
    pub name: String,
    pub duration_s: f64,
    #[serde(default = "default_count")]
    pub count: usize,
    pub flows: Vec<MixedMember>,
}

/// Generator input file. Entries in `profiles` replace or extend the
/// built-in table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub local_ip: Option<IpAddr>,
    #[serde(default)]
    pub profiles: BTreeMap<String, TrafficProfile>,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub mixed: Vec<MixedSpec>,
}

impl DatasetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))
    }

    pub fn profile_table(&self) -> BTreeMap<String, TrafficProfile> {
        let mut table = default_profiles();
        table.extend(self.profiles.clone());
        table
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub capture: PathBuf,
    pub conversation_key: ConversationKey,
    pub l1: L1Class,
    pub l2: Option<SubClass>,
    pub band: Band,
    pub rssi: Rssi,
    pub congestion: Congestion,
    pub seed: u64,
    pub profile: String,
    pub duration_s: f64,
}

impl ManifestRow {
    pub fn condition(&self) -> ChannelCondition {
        ChannelCondition {
            band: self.band,
            rssi: self.rssi,
            congestion: self.congestion,
        }
    }
}

/// Capture-to-label index. Capture paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub local_ip: IpAddr,
    pub rows: Vec<ManifestRow>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for row in &m.rows {
            if !crate::detector::is_legal(row.l1, row.l2) {
                return Err(Error::Data(format!(
                    "{}: {} is not a sub-class of {}",
                    row.capture.display(),
                    row.l2.map(|s| s.as_str()).unwrap_or("none"),
                    row.l1
                )));
            }
        }
        Ok(m)
    }

    /// Writes the manifest, rewriting capture paths relative to `path`'s
    /// directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        let mut out = self.clone();
        for row in &mut out.rows {
            let full = self.base_dir.join(&row.capture);
            row.capture = match full.strip_prefix(dir) {
                Ok(rel) if !dir.as_os_str().is_empty() => rel.to_path_buf(),
                _ if dir.as_os_str().is_empty() => full,
                _ => std::path::absolute(&full).map_err(|e| Error::io(&full, e))?,
            };
        }
        let text = serde_json::to_string_pretty(&out)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn capture_path(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.capture)
    }

    /// Distinct capture entries as written in the manifest, in
    /// first-appearance order.
    pub fn captures(&self) -> Vec<PathBuf> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for row in &self.rows {
            if seen.insert(row.capture.clone()) {
                out.push(row.capture.clone());
            }
        }
        out
    }

    /// [`Manifest::captures`] resolved against the manifest's directory.
    pub fn capture_paths(&self) -> Vec<PathBuf> {
        self.captures().into_iter().map(|c| self.base_dir.join(c)).collect()
    }

    /// Rows keyed by conversation. Later duplicates are reported, not kept.
    pub fn by_key(&self) -> (BTreeMap<ConversationKey, &ManifestRow>, usize) {
        let mut map = BTreeMap::new();
        let mut dups = 0;
        for row in &self.rows {
            if map.insert(row.conversation_key, row).is_some() {
                dups += 1;
            }
        }
        (map, dups)
    }
}

/// A capture file's worth of packets.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCapture {
    pub name: PathBuf,
    pub packets: Vec<PacketRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub manifest: Manifest,
    pub captures: Vec<GeneratedCapture>,
}

impl GeneratedDataset {
    /// Writes `captures/*.jsonl` and `manifest.json` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let cap_dir = out_dir.join("captures");
        std::fs::create_dir_all(&cap_dir).map_err(|e| Error::io(&cap_dir, e))?;
        self.captures.par_iter().try_for_each(|c| -> Result<()> {
            let path = out_dir.join(&c.name);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_jsonl(BufWriter::new(file), &c.packets)
        })?;
        let path = out_dir.join("manifest.json");
        let mut m = self.manifest.clone();
        m.base_dir = out_dir.to_path_buf();
        m.save(&path)?;
        Ok(path)
    }
}

/// Remote addresses in allocation order: the three documentation /24s, then
/// the shared address space 100.64.0.0/10.
fn remote_ip(index: usize) -> Result<IpAddr> {
    const DOC: [[u8; 3]; 3] = [[203, 0, 113], [198, 51, 100], [192, 0, 2]];
    let (block, host) = (index / 254, index % 254 + 1);
    if block < DOC.len() {
        let [a, b, c] = DOC[block];
        return Ok(IpAddr::V4(Ipv4Addr::new(a, b, c, host as u8)));
    }
    let rest = (index - DOC.len() * 254) as u32;
    if rest >= (1 << 22) - 2 {
        return Err(Error::Spec("too many flows for the remote address pool".into()));
    }
    Ok(IpAddr::V4(Ipv4Addr::from(u32::from(Ipv4Addr::new(100, 64, 0, 0)) + rest + 1)))
}

struct FlowJob {
    capture: usize,
    profile: String,
    condition: ChannelCondition,
    duration_s: f64,
    remote: IpAddr,
    seed: u64,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    if spec.flows.is_empty() && spec.mixed.is_empty() {
        return Err(Error::Spec("spec requests no flows".into()));
    }
    let profiles = spec.profile_table();
    for (name, p) in &profiles {
        p.validate(name)?;
    }
    let local = spec.local_ip.unwrap_or(IpAddr::V4(DEFAULT_LOCAL_IP));

    let mut names: Vec<PathBuf> = Vec::new();
    let mut jobs: Vec<FlowJob> = Vec::new();
    let push_job = |jobs: &mut Vec<FlowJob>, capture, profile: &str, cond, duration_s: f64| -> Result<()> {
        if !profiles.contains_key(profile) {
            return Err(Error::Spec(format!("unknown profile {profile:?}")));
        }
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::Spec(format!("duration_s must be > 0, got {duration_s}")));
        }
        let index = jobs.len();
        jobs.push(FlowJob {
            capture,
            profile: profile.to_string(),
            condition: cond,
            duration_s,
            remote: remote_ip(index)?,
            seed: flow_seed(spec.seed, index as u64),
        });
        Ok(())
    };

    for f in &spec.flows {
        let cond = ChannelCondition {
            band: f.band,
            rssi: f.rssi,
            congestion: f.congestion,
        };
        for _ in 0..f.count {
            let capture = names.len();
            names.push(PathBuf::from(format!(
                "captures/{capture:05}_{}_{}_{}_{}.jsonl",
                f.profile,
                f.band,
                f.rssi.as_str(),
                f.congestion.as_str()
            )));
            push_job(&mut jobs, capture, &f.profile, cond, f.duration_s)?;
        }
    }
    for m in &spec.mixed {
        if m.flows.is_empty() {
            return Err(Error::Spec(format!("mixed capture {:?} has no flows", m.name)));
        }
        for _ in 0..m.count {
            let capture = names.len();
            names.push(PathBuf::from(format!("captures/{capture:05}_mixed_{}.jsonl", m.name)));
            for member in &m.flows {
                let cond = ChannelCondition {
                    band: member.band,
                    rssi: member.rssi,
                    congestion: member.congestion,
                };
                push_job(&mut jobs, capture, &member.profile, cond, m.duration_s)?;
            }
        }
    }

    let flows: Vec<Vec<PacketRecord>> = jobs
        .par_iter()
        .map(|j| {
            generate_flow(&FlowRequest {
                profile: &profiles[&j.profile],
                condition: j.condition,
                duration_s: j.duration_s,
                local_ip: local,
                remote_ip: j.remote,
                start_us: START_US,
                seed: j.seed,
            })
        })
        .collect::<Result<_>>()?;

    let mut captures: Vec<GeneratedCapture> = names
        .iter()
        .map(|n| GeneratedCapture {
            name: n.clone(),
            packets: Vec::new(),
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    for (job, packets) in jobs.iter().zip(flows) {
        captures[job.capture].packets.extend(packets);
        let p = &profiles[&job.profile];
        rows.push(ManifestRow {
            capture: names[job.capture].clone(),
            conversation_key: ConversationKey {
                local,
                remote: job.remote,
            },
            l1: p.l1,
            l2: p.l2,
            band: job.condition.band,
            rssi: job.condition.rssi,
            congestion: job.condition.congestion,
            seed: job.seed,
            profile: job.profile.clone(),
            duration_s: job.duration_s,
        });
    }
    // stable: equal timestamps keep flow order
    for c in &mut captures {
        c.packets.sort_by_key(|p| p.timestamp_us);
    }
    Ok(GeneratedDataset {
        manifest: Manifest {
            seed: spec.seed,
            local_ip: local,
            rows,
            base_dir: PathBuf::new(),
        },
        captures,
    })
}

/// Splits whole captures into train and test sets, stratified by the
/// capture's profile list, with about `train_fraction` of each stratum in
/// the training set.
pub fn split_manifest(m: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut strata: BTreeMap<Vec<String>, Vec<PathBuf>> = BTreeMap::new();
    for cap in m.captures() {
        let mut profiles: Vec<String> = m
            .rows
            .iter()
            .filter(|r| r.capture == cap)
            .map(|r| r.profile.clone())
            .collect();
        profiles.sort();
        strata.entry(profiles).or_default().push(cap);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_caps = BTreeSet::new();
    for caps in strata.values_mut() {
        caps.shuffle(&mut rng);
        let n = (caps.len() as f64 * train_fraction).round() as usize;
        train_caps.extend(caps.iter().take(n).cloned());
    }
    let part = |train: bool| Manifest {
        seed: m.seed,
        local_ip: m.local_ip,
        rows: m
            .rows
            .iter()
            .filter(|r| train_caps.contains(&r.capture) == train)
            .cloned()
            .collect(),
        base_dir: m.base_dir.clone(),
    };
    Ok((part(true), part(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::bucket_packets;
    use crate::traffic::LocalNetwork;

    fn spec_of(flows: Vec<FlowSpec>, mixed: Vec<MixedSpec>) -> DatasetSpec {
        DatasetSpec {
            seed: 42,
            flows,
            mixed,
            ..Default::default()
        }
    }

    fn fs(profile: &str, count: usize) -> FlowSpec {
        FlowSpec {
            profile: profile.into(),
            band: Band::Ghz5,
            rssi: Rssi::Normal,
            congestion: Congestion::Normal,
            duration_s: 2.0,
            count,
        }
    }

    #[test]
    fn cardinality_and_unique_remotes() {
        let d = generate_dataset(&spec_of(vec![fs("CG", 2), fs("MG", 2), fs("FD", 2)], vec![])).unwrap();
        assert_eq!(d.captures.len(), 6);
        assert_eq!(d.manifest.rows.len(), 6);
        let (keys, dups) = d.manifest.by_key();
        assert_eq!((keys.len(), dups), (6, 0));
    }

    #[test]
    fn remote_pool_overflows_in_order() {
        assert_eq!(remote_ip(0).unwrap().to_string(), "203.0.113.1");
        assert_eq!(remote_ip(253).unwrap().to_string(), "203.0.113.254");
        assert_eq!(remote_ip(254).unwrap().to_string(), "198.51.100.1");
        assert_eq!(remote_ip(762).unwrap().to_string(), "100.64.0.1");
        assert_eq!(remote_ip(762 + 255).unwrap().to_string(), "100.64.1.0");
    }

    #[test]
    fn mixed_capture_decomposes_per_flow() {
        let mixed = MixedSpec {
            name: "cgvs".into(),
            duration_s: 4.0,
            count: 1,
            flows: ["CG", "VS"]
                .iter()
                .map(|p| MixedMember {
                    profile: p.to_string(),
                    band: Band::Ghz6,
                    rssi: Rssi::Normal,
                    congestion: Congestion::Mild,
                })
                .collect(),
        };
        let d = generate_dataset(&spec_of(vec![], vec![mixed])).unwrap();
        assert_eq!(d.captures.len(), 1);
        assert_eq!(d.manifest.rows.len(), 2);
        let local = LocalNetwork::new([d.manifest.local_ip]);
        let mut diag = Default::default();
        let groups = bucket_packets(&d.captures[0].packets, &local, d.captures[0].packets[0].timestamp_us, 500, &mut diag);
        let mut per_key: BTreeMap<ConversationKey, usize> = BTreeMap::new();
        for g in &groups {
            *per_key.entry(g.key).or_default() += g.packets.len();
        }
        assert_eq!(per_key.len(), 2);
        // oracle: regenerate each flow alone from its manifest seed
        let profiles = default_profiles();
        for row in &d.manifest.rows {
            let alone = generate_flow(&FlowRequest {
                profile: &profiles[&row.profile],
                condition: row.condition(),
                duration_s: row.duration_s,
                local_ip: d.manifest.local_ip,
                remote_ip: row.conversation_key.remote,
                start_us: START_US,
                seed: row.seed,
            })
            .unwrap();
            assert_eq!(per_key[&row.conversation_key], alone.len());
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(matches!(generate_dataset(&spec_of(vec![], vec![])), Err(Error::Spec(_))));
        assert!(matches!(generate_dataset(&spec_of(vec![fs("XX", 1)], vec![])), Err(Error::Spec(_))));
        let mut zero = fs("CG", 1);
        zero.duration_s = 0.0;
        assert!(matches!(generate_dataset(&spec_of(vec![zero], vec![])), Err(Error::Spec(_))));
        let parsed: std::result::Result<DatasetSpec, _> = serde_json::from_str(r#"{"flows":[{"profile":"CG"}]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn custom_profile_extends_table() {
        let mut spec = spec_of(vec![fs("AC2", 1)], vec![]);
        let mut p = default_profiles()["AC"].clone();
        p.ul_rate_pps = 40.0;
        spec.profiles.insert("AC2".into(), p);
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.manifest.rows[0].l2, Some(SubClass::Ac));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = generate_dataset(&spec_of(vec![fs("CG", 10), fs("VC", 10)], vec![])).unwrap();
        let (train, test) = split_manifest(&d.manifest, 0.7, 1).unwrap();
        assert_eq!(train.rows.len(), 14);
        assert_eq!(test.rows.len(), 6);
        assert_eq!(train.rows.iter().filter(|r| r.profile == "CG").count(), 7);
        for r in &test.rows {
            assert!(!train.rows.iter().any(|t| t.capture == r.capture));
        }
        let (again, _) = split_manifest(&d.manifest, 0.7, 1).unwrap();
        assert_eq!(again, train);
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&spec_of(vec![fs("AC", 2)], vec![])).unwrap();
        let path = d.write(dir.path()).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.rows, d.manifest.rows);
        let packets = crate::traffic::parse_capture(&m.capture_path(&m.rows[1]), crate::traffic::CaptureFormat::Jsonl)
        .unwrap();
        assert_eq!(packets, d.captures[1].packets);

        let sub = dir.path().join("split");
        std::fs::create_dir(&sub).unwrap();
        m.save(&sub.join("m.json")).unwrap();
        let back = Manifest::load(&sub.join("m.json")).unwrap();
        assert!(back.capture_path(&back.rows[0]).exists());
    }
}
