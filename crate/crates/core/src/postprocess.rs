//! Per-conversation history buffers, majority voting and sensor fusion.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, L1Class, ServiceLabel, SubClass};
use crate::error::{Error, Result};
use crate::traffic::ConversationKey;

pub const DEFAULT_HISTORY_CAPACITY: usize = 7;
pub const DEFAULT_CAMERA_RT_THRESHOLD: usize = 3;

/// Fixed-capacity FIFO of recent predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryBuffer<L> {
    slots: VecDeque<L>,
    capacity: usize,
}

impl<L: ServiceLabel> HistoryBuffer<L> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "history capacity must be positive");
        HistoryBuffer {
            slots: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn from_slice(labels: &[L], capacity: usize) -> Self {
        let mut b = Self::new(capacity);
        for l in labels {
            b.push(*l);
        }
        b
    }

    pub fn push(&mut self, label: L) {
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(label);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self, label: L) -> usize {
        self.slots.iter().filter(|l| **l == label).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &L> {
        self.slots.iter()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }
}

/// Modal label; among equally frequent labels the most latency-sensitive
/// wins. `None` for an empty buffer.
pub fn vote<L: ServiceLabel>(buffer: &HistoryBuffer<L>) -> Option<L> {
    let mut counts: Vec<(L, usize)> = Vec::new();
    for l in buffer.iter() {
        match counts.iter_mut().find(|(c, _)| c == l) {
            Some((_, n)) => *n += 1,
            None => counts.push((*l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|(a, na), (b, nb)| na.cmp(nb).then(b.priority().cmp(&a.priority())))
        .map(|(l, _)| l)
}

/// Sensor snapshot for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorState {
    #[serde(default)]
    pub gaming_flag: bool,
    #[serde(default)]
    pub camera_active: bool,
}

/// Gaming promotes NRT to RT; CG and RT pass through.
pub fn fuse_l1(voted: L1Class, sensors: SensorState) -> L1Class {
    if sensors.gaming_flag && voted == L1Class::Nrt {
        L1Class::Rt
    } else {
        voted
    }
}

/// With the camera on and at least `threshold` RT entries in the L1 history,
/// the RT sub-class is forced to VC.
pub fn fuse_l2_rt(
    voted: Option<SubClass>,
    sensors: SensorState,
    l1_history: &HistoryBuffer<L1Class>,
    threshold: usize,
) -> Option<SubClass> {
    if sensors.camera_active && l1_history.count(L1Class::Rt) >= threshold {
        Some(SubClass::Vc)
    } else {
        voted
    }
}

/// Step-indexed sensor states. Steps not present read as all-false.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SensorTrace {
    states: BTreeMap<u64, SensorState>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorLine {
    step: u64,
    #[serde(default)]
    gaming_flag: bool,
    #[serde(default)]
    camera_active: bool,
}

impl SensorTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, step: u64, state: SensorState) {
        self.states.insert(step, state);
    }

    pub fn get(&self, step: u64) -> SensorState {
        self.states.get(&step).copied().unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut trace = SensorTrace::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SensorLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })?;
            trace.set(
                rec.step,
                SensorState {
                    gaming_flag: rec.gaming_flag,
                    camera_active: rec.camera_active,
                },
            );
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}

/// An (L1, sub-class) pair at one post-processing stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub l1: L1Class,
    pub l2: Option<SubClass>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PostOutput {
    pub voted: Labeled,
    pub fused: Labeled,
}

#[derive(Clone, Debug)]
struct Histories {
    l1: HistoryBuffer<L1Class>,
    l2_rt: HistoryBuffer<SubClass>,
    l2_nrt: HistoryBuffer<SubClass>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PostConfig {
    pub history_capacity: usize,
    pub camera_rt_threshold: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            camera_rt_threshold: DEFAULT_CAMERA_RT_THRESHOLD,
        }
    }
}

/// Owns the three history buffers of every live conversation.
#[derive(Clone, Debug, Default)]
pub struct PostProcessor {
    config: PostConfig,
    histories: BTreeMap<ConversationKey, Histories>,
}

impl PostProcessor {
    pub fn new(config: PostConfig) -> Self {
        PostProcessor {
            config,
            histories: BTreeMap::new(),
        }
    }

    /// Records `det` and returns the voted and fused labels for this step.
    pub fn process(&mut self, key: ConversationKey, det: &Detection, sensors: SensorState) -> PostOutput {
        let cap = self.config.history_capacity;
        let h = self.histories.entry(key).or_insert_with(|| Histories {
            l1: HistoryBuffer::new(cap),
            l2_rt: HistoryBuffer::new(cap),
            l2_nrt: HistoryBuffer::new(cap),
        });
        h.l1.push(det.l1);
        if let Some(sub) = det.sub {
            match sub.parent() {
                L1Class::Rt => h.l2_rt.push(sub),
                _ => h.l2_nrt.push(sub),
            }
        }

        let voted_l1 = vote(&h.l1).expect("just pushed");
        let sub_for = |l1: L1Class| match l1 {
            L1Class::Cg => None,
            L1Class::Rt => vote(&h.l2_rt),
            L1Class::Nrt => vote(&h.l2_nrt),
        };
        let voted = Labeled {
            l1: voted_l1,
            l2: sub_for(voted_l1),
        };
        let fused_l1 = fuse_l1(voted_l1, sensors);
        let fused_l2 = match fused_l1 {
            L1Class::Rt => fuse_l2_rt(sub_for(L1Class::Rt), sensors, &h.l1, self.config.camera_rt_threshold),
            other => sub_for(other),
        };
        PostOutput {
            voted,
            fused: Labeled {
                l1: fused_l1,
                l2: fused_l2,
            },
        }
    }

    /// Forgets a conversation's history.
    pub fn reset(&mut self, key: &ConversationKey) {
        self.histories.remove(key);
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }
}
