//! The input table: one sliding window of step features per conversation.
//!
//! Each step, conversations in the traffic map push their features; known
//! conversations without traffic push an all-zero dummy chunk. A window is
//! only assembled into an [`InputVector`] once it holds `window_steps` steps.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::decompose::{StepFeatures, TrafficMap, FEATURES_PER_STEP};
use crate::traffic::ConversationKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_steps: usize,
    pub table_capacity: usize,
    /// A buffer that receives this many dummy steps in a row is dropped.
    pub idle_drop_steps: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_steps: 6,
            table_capacity: 7,
            idle_drop_steps: 6,
        }
    }
}

impl WindowConfig {
    pub fn vector_len(&self) -> usize {
        self.window_steps * FEATURES_PER_STEP
    }
}

#[derive(Clone, Debug)]
pub struct InputBuffer {
    key: ConversationKey,
    slots: VecDeque<StepFeatures>,
    capacity: usize,
    last_active_step: u64,
    newest_step: u64,
    fill_count: usize,
    idle_run: usize,
}

impl InputBuffer {
    pub fn new(key: ConversationKey, capacity: usize) -> Self {
        assert!(capacity >= 1, "window must hold at least one step");
        InputBuffer {
            key,
            slots: VecDeque::with_capacity(capacity),
            capacity,
            last_active_step: 0,
            newest_step: 0,
            fill_count: 0,
            idle_run: 0,
        }
    }

    pub fn key(&self) -> ConversationKey {
        self.key
    }

    /// Oldest first.
    pub fn slots(&self) -> &VecDeque<StepFeatures> {
        &self.slots
    }

    pub fn last_active_step(&self) -> u64 {
        self.last_active_step
    }

    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Consecutive dummy steps at the head of the window.
    pub fn idle_run(&self) -> usize {
        self.idle_run
    }

    fn push(&mut self, step: u64, features: StepFeatures, active: bool) {
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(features);
        self.fill_count = (self.fill_count + 1).min(self.capacity);
        self.newest_step = step;
        if active {
            self.last_active_step = step;
            self.idle_run = 0;
        } else {
            self.idle_run += 1;
        }
    }
}

/// Flattened window, step-major and oldest step first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputVector {
    pub key: ConversationKey,
    pub step: u64,
    pub values: Vec<f64>,
}

/// Returns the window vector once the buffer has been filled.
pub fn assemble_input(buffer: &InputBuffer) -> Option<InputVector> {
    if buffer.fill_count < buffer.capacity {
        return None;
    }
    let mut values = Vec::with_capacity(buffer.capacity * FEATURES_PER_STEP);
    for slot in &buffer.slots {
        values.extend_from_slice(&slot.to_array());
    }
    Some(InputVector {
        key: buffer.key,
        step: buffer.newest_step,
        values,
    })
}

/// What changed in the table during one ingest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub inserted: Vec<ConversationKey>,
    pub evicted: Vec<ConversationKey>,
    pub idle_dropped: Vec<ConversationKey>,
}

#[derive(Clone, Debug)]
pub struct InputTable {
    buffers: BTreeMap<ConversationKey, InputBuffer>,
    config: WindowConfig,
}

impl Default for InputTable {
    fn default() -> Self {
        Self::new(WindowConfig::default())
    }
}

impl InputTable {
    pub fn new(config: WindowConfig) -> Self {
        assert!(config.table_capacity >= 1, "table capacity must be positive");
        InputTable {
            buffers: BTreeMap::new(),
            config,
        }
    }

    pub fn config(&self) -> WindowConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn get(&self, key: &ConversationKey) -> Option<&InputBuffer> {
        self.buffers.get(key)
    }

    pub fn buffers(&self) -> impl Iterator<Item = &InputBuffer> {
        self.buffers.values()
    }

    /// Folds the just-advanced traffic map into the table.
    pub fn ingest_step(&mut self, map: &TrafficMap) -> IngestReport {
        let mut report = IngestReport::default();
        let Some(step) = map.current_step() else {
            return report;
        };
        let entries = map.entries();

        for (key, buf) in self.buffers.iter_mut() {
            match entries.get(key) {
                Some(f) => buf.push(step, *f, true),
                None => buf.push(step, StepFeatures::ZERO, false),
            }
        }
        let idle_limit = self.config.idle_drop_steps;
        self.buffers.retain(|key, buf| {
            let keep = buf.idle_run < idle_limit;
            if !keep {
                report.idle_dropped.push(*key);
            }
            keep
        });

        for (key, f) in entries {
            if self.buffers.contains_key(key) {
                continue;
            }
            if self.buffers.len() >= self.config.table_capacity {
                if let Some(victim) = self.eviction_candidate() {
                    self.buffers.remove(&victim);
                    report.evicted.push(victim);
                }
            }
            let mut buf = InputBuffer::new(*key, self.config.window_steps);
            buf.push(step, *f, true);
            self.buffers.insert(*key, buf);
            report.inserted.push(*key);
        }
        report
    }

    /// Least recently active; ties go to the emptier window, then the
    /// smaller key.
    fn eviction_candidate(&self) -> Option<ConversationKey> {
        self.buffers
            .values()
            .min_by(|a, b| {
                a.last_active_step
                    .cmp(&b.last_active_step)
                    .then(a.fill_count.cmp(&b.fill_count))
                    .then(a.key.cmp(&b.key))
            })
            .map(|b| b.key)
    }

    /// Vectors for every buffer past the window gate, in key order.
    pub fn assemble_all(&self) -> Vec<InputVector> {
        self.buffers.values().filter_map(assemble_input).collect()
    }
}
