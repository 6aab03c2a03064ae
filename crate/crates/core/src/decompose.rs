//! Time-step bucketing and per-step conversation statistics.
//!
//! Every step covers `step_ms` of capture time counted from an epoch (the
//! first packet unless configured). Within a step each conversation is reduced
//! to ten numbers: UL inter-arrival max/mean, UL/DL packet counts, and UL/DL
//! min/max/mean packet size. IATs are in milliseconds, sizes in megabytes, and
//! every statistic is zero when undefined.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traffic::{conversation_key, ConversationKey, LocalNetwork, PacketRecord};

pub const FEATURES_PER_STEP: usize = 10;
pub const DEFAULT_STEP_MS: u64 = 500;

const BYTES_PER_MB: f64 = 1_000_000.0;
const US_PER_MS: f64 = 1_000.0;

/// Per-step statistics for one conversation. Field order is the canonical
/// feature order used in input vectors and feature dumps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFeatures {
    pub ul_max_iat_ms: f64,
    pub ul_avg_iat_ms: f64,
    pub ul_pkt_count: u32,
    pub dl_pkt_count: u32,
    pub ul_min_size_mb: f64,
    pub dl_min_size_mb: f64,
    pub ul_max_size_mb: f64,
    pub dl_max_size_mb: f64,
    pub ul_avg_size_mb: f64,
    pub dl_avg_size_mb: f64,
}

impl StepFeatures {
    /// The dummy chunk injected for a step without traffic.
    pub const ZERO: StepFeatures = StepFeatures {
        ul_max_iat_ms: 0.0,
        ul_avg_iat_ms: 0.0,
        ul_pkt_count: 0,
        dl_pkt_count: 0,
        ul_min_size_mb: 0.0,
        dl_min_size_mb: 0.0,
        ul_max_size_mb: 0.0,
        dl_max_size_mb: 0.0,
        ul_avg_size_mb: 0.0,
        dl_avg_size_mb: 0.0,
    };

    pub const NAMES: [&'static str; FEATURES_PER_STEP] = [
        "ul_max_iat_ms",
        "ul_avg_iat_ms",
        "ul_pkt_count",
        "dl_pkt_count",
        "ul_min_size_mb",
        "dl_min_size_mb",
        "ul_max_size_mb",
        "dl_max_size_mb",
        "ul_avg_size_mb",
        "dl_avg_size_mb",
    ];

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn to_array(&self) -> [f64; FEATURES_PER_STEP] {
        [
            self.ul_max_iat_ms,
            self.ul_avg_iat_ms,
            f64::from(self.ul_pkt_count),
            f64::from(self.dl_pkt_count),
            self.ul_min_size_mb,
            self.dl_min_size_mb,
            self.ul_max_size_mb,
            self.dl_max_size_mb,
            self.ul_avg_size_mb,
            self.dl_avg_size_mb,
        ]
    }
}

struct SizeStats {
    min: f64,
    max: f64,
    avg: f64,
}

fn size_stats(packets: &[PacketRecord]) -> SizeStats {
    if packets.is_empty() {
        return SizeStats {
            min: 0.0,
            max: 0.0,
            avg: 0.0,
        };
    }
    let mut min = u32::MAX;
    let mut max = 0u32;
    let mut sum = 0u64;
    for p in packets {
        min = min.min(p.size_bytes);
        max = max.max(p.size_bytes);
        sum += u64::from(p.size_bytes);
    }
    // integer mean first so min <= avg <= max survives rounding
    let mean_bytes = sum as f64 / packets.len() as f64;
    SizeStats {
        min: f64::from(min) / BYTES_PER_MB,
        max: f64::from(max) / BYTES_PER_MB,
        avg: mean_bytes / BYTES_PER_MB,
    }
}

/// Computes the ten statistics of one step. Inputs must be timestamp-sorted.
pub fn compute_step_features(ul: &[PacketRecord], dl: &[PacketRecord]) -> StepFeatures {
    let (ul_max_iat_ms, ul_avg_iat_ms) = if ul.len() < 2 {
        (0.0, 0.0)
    } else {
        let max_gap = ul
            .windows(2)
            .map(|w| w[1].timestamp_us - w[0].timestamp_us)
            .max()
            .unwrap_or(0);
        let span = ul[ul.len() - 1].timestamp_us - ul[0].timestamp_us;
        let gaps = (ul.len() - 1) as f64;
        (max_gap as f64 / US_PER_MS, span as f64 / gaps / US_PER_MS)
    };
    let u = size_stats(ul);
    let d = size_stats(dl);
    StepFeatures {
        ul_max_iat_ms,
        ul_avg_iat_ms,
        ul_pkt_count: ul.len() as u32,
        dl_pkt_count: dl.len() as u32,
        ul_min_size_mb: u.min,
        dl_min_size_mb: d.min,
        ul_max_size_mb: u.max,
        dl_max_size_mb: d.max,
        ul_avg_size_mb: u.avg,
        dl_avg_size_mb: d.avg,
    }
}

/// Splits one conversation's packets by direction and computes its features.
pub fn conversation_features(key: &ConversationKey, packets: &[PacketRecord]) -> StepFeatures {
    let (ul, dl): (Vec<PacketRecord>, Vec<PacketRecord>) =
        packets.iter().cloned().partition(|p| p.src_ip == key.local);
    compute_step_features(&ul, &dl)
}

/// Packets that did not make it into any step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub ambiguous_direction: u64,
    pub irrelevant: u64,
    pub before_epoch: u64,
    pub out_of_order: u64,
}

/// One (step, conversation) bucket from [`bucket_packets`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepGroup {
    pub step: u64,
    pub key: ConversationKey,
    pub packets: Vec<PacketRecord>,
}

impl StepGroup {
    pub fn features(&self) -> StepFeatures {
        conversation_features(&self.key, &self.packets)
    }
}

fn step_of(ts: u64, epoch_us: u64, step_us: u64) -> u64 {
    (ts - epoch_us) / step_us
}

/// Batch bucketing, sorted by (step, key). Packets before `epoch_us`,
/// ambiguous-direction packets and irrelevant conversations are dropped and
/// counted.
pub fn bucket_packets(
    packets: &[PacketRecord],
    local: &LocalNetwork,
    epoch_us: u64,
    step_ms: u64,
    diag: &mut Diagnostics,
) -> Vec<StepGroup> {
    assert!(step_ms > 0, "step_ms must be positive");
    let step_us = step_ms * 1000;
    let mut groups: BTreeMap<(u64, ConversationKey), Vec<PacketRecord>> = BTreeMap::new();
    for p in packets {
        if p.timestamp_us < epoch_us {
            diag.before_epoch += 1;
            continue;
        }
        let key = match conversation_key(p, local) {
            Ok(k) => k,
            Err(_) => {
                diag.ambiguous_direction += 1;
                continue;
            }
        };
        if !local.is_relevant(&key) {
            diag.irrelevant += 1;
            continue;
        }
        groups
            .entry((step_of(p.timestamp_us, epoch_us, step_us), key))
            .or_default()
            .push(p.clone());
    }
    groups
        .into_iter()
        .map(|((step, key), packets)| StepGroup { step, key, packets })
        .collect()
}

/// All relevant traffic of one finished step, keyed by conversation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClosedStep {
    pub step: u64,
    pub groups: BTreeMap<ConversationKey, Vec<PacketRecord>>,
}

/// Streaming counterpart of [`bucket_packets`]: packets are pushed in
/// timestamp order and each step is emitted once a later packet (or an
/// explicit advance) closes it. Empty steps are emitted too so downstream
/// windows stay contiguous.
#[derive(Debug)]
pub struct Decomposer {
    local: LocalNetwork,
    step_us: u64,
    epoch_us: Option<u64>,
    open_step: u64,
    pending: BTreeMap<ConversationKey, Vec<PacketRecord>>,
    diagnostics: Diagnostics,
}

impl Decomposer {
    pub fn new(local: LocalNetwork, step_ms: u64, epoch_us: Option<u64>) -> Self {
        assert!(step_ms > 0, "step_ms must be positive");
        Decomposer {
            local,
            step_us: step_ms * 1000,
            epoch_us,
            open_step: 0,
            pending: BTreeMap::new(),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn epoch_us(&self) -> Option<u64> {
        self.epoch_us
    }

    /// Index of the step currently accumulating packets.
    pub fn open_step(&self) -> u64 {
        self.open_step
    }

    pub fn push(&mut self, p: PacketRecord) -> Vec<ClosedStep> {
        let epoch = *self.epoch_us.get_or_insert(p.timestamp_us);
        if p.timestamp_us < epoch {
            self.diagnostics.before_epoch += 1;
            return Vec::new();
        }
        let step = step_of(p.timestamp_us, epoch, self.step_us);
        if step < self.open_step {
            self.diagnostics.out_of_order += 1;
            return Vec::new();
        }
        let closed = self.close_before(step);
        let key = match conversation_key(&p, &self.local) {
            Ok(k) => k,
            Err(_) => {
                self.diagnostics.ambiguous_direction += 1;
                return closed;
            }
        };
        if !self.local.is_relevant(&key) {
            self.diagnostics.irrelevant += 1;
            return closed;
        }
        self.pending.entry(key).or_default().push(p);
        closed
    }

    /// Closes every step that ends at or before `ts_us`.
    pub fn advance_to(&mut self, ts_us: u64) -> Vec<ClosedStep> {
        match self.epoch_us {
            Some(epoch) if ts_us >= epoch => {
                let step = step_of(ts_us, epoch, self.step_us);
                self.close_before(step)
            }
            _ => Vec::new(),
        }
    }

    /// Closes the open step, if any traffic has been seen at all.
    pub fn finish(&mut self) -> Option<ClosedStep> {
        self.epoch_us?;
        let step = ClosedStep {
            step: self.open_step,
            groups: std::mem::take(&mut self.pending),
        };
        self.open_step += 1;
        Some(step)
    }

    fn close_before(&mut self, step: u64) -> Vec<ClosedStep> {
        let mut out = Vec::new();
        while self.open_step < step {
            out.push(ClosedStep {
                step: self.open_step,
                groups: std::mem::take(&mut self.pending),
            });
            self.open_step += 1;
        }
        out
    }
}

/// Conversation features of the most recent step.
#[derive(Clone, Debug)]
pub struct TrafficMap {
    entries: BTreeMap<ConversationKey, StepFeatures>,
    step_index: u64,
    step_ms: u64,
}

impl Default for TrafficMap {
    fn default() -> Self {
        Self::new(DEFAULT_STEP_MS)
    }
}

impl TrafficMap {
    pub fn new(step_ms: u64) -> Self {
        TrafficMap {
            entries: BTreeMap::new(),
            step_index: 0,
            step_ms,
        }
    }

    /// Number of steps advanced so far; the next step to be ingested.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// The step the current entries describe.
    pub fn current_step(&self) -> Option<u64> {
        self.step_index.checked_sub(1)
    }

    pub fn step_ms(&self) -> u64 {
        self.step_ms
    }

    pub fn entries(&self) -> &BTreeMap<ConversationKey, StepFeatures> {
        &self.entries
    }

    /// Replaces the entries with the features of `step`, which must be the
    /// map's next step.
    pub fn advance_step(&mut self, step: &ClosedStep) -> Result<()> {
        if step.step != self.step_index {
            return Err(Error::Data(format!(
                "traffic map expected step {}, got {}",
                self.step_index, step.step
            )));
        }
        self.entries = step
            .groups
            .iter()
            .map(|(k, packets)| (*k, conversation_features(k, packets)))
            .collect();
        self.step_index += 1;
        Ok(())
    }

    /// Appends one JSONL line per entry: `step`, `key`, then the ten features.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: u64,
            key: &'a ConversationKey,
            #[serde(flatten)]
            features: &'a StepFeatures,
        }
        let Some(step) = self.current_step() else {
            return Ok(());
        };
        for (key, features) in &self.entries {
            serde_json::to_writer(&mut w, &Line { step, key, features })?;
            w.write_all(b"\n").map_err(|e| Error::io("<feature dump>", e))?;
        }
        Ok(())
    }
}
