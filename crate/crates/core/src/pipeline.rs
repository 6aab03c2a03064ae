//! Streaming engine: decompose, window, classify and post-process.
//!
//! Training rows and live predictions both come out of [`FeatureStream`], so
//! the features a model is trained on are the ones it is served.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::decompose::{ClosedStep, Decomposer, Diagnostics, TrafficMap};
use crate::detector::{CategoryMap, DetectorBundle, L1Class, MultiLabelOutput, SubClass};
use crate::error::{Error, Result};
use crate::postprocess::{Labeled, PostProcessor, SensorState, SensorTrace};
use crate::traffic::{ConversationKey, PacketRecord};
use crate::window::{IngestReport, InputTable, InputVector};

/// Windows assembled at the close of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepWindows {
    pub step: u64,
    pub report: IngestReport,
    pub vectors: Vec<InputVector>,
}

#[derive(Debug)]
pub struct FeatureStream {
    decomposer: Decomposer,
    map: TrafficMap,
    table: InputTable,
}

impl FeatureStream {
    pub fn new(cfg: &PipelineConfig) -> Self {
        FeatureStream {
            decomposer: Decomposer::new(cfg.local_network(), cfg.step_ms, None),
            map: TrafficMap::new(cfg.step_ms),
            table: InputTable::new(cfg.window()),
        }
    }

    pub fn push(&mut self, p: PacketRecord) -> Result<Vec<StepWindows>> {
        let closed = self.decomposer.push(p);
        closed.iter().map(|c| self.ingest(c)).collect()
    }

    /// Closes steps that end at or before `ts_us` without new traffic.
    pub fn advance_to(&mut self, ts_us: u64) -> Result<Vec<StepWindows>> {
        let closed = self.decomposer.advance_to(ts_us);
        closed.iter().map(|c| self.ingest(c)).collect()
    }

    /// Closes the final, possibly partial step.
    pub fn finish(&mut self) -> Result<Option<StepWindows>> {
        match self.decomposer.finish() {
            Some(c) => self.ingest(&c).map(Some),
            None => Ok(None),
        }
    }

    fn ingest(&mut self, closed: &ClosedStep) -> Result<StepWindows> {
        self.map.advance_step(closed)?;
        let report = self.table.ingest_step(&self.map);
        Ok(StepWindows {
            step: closed.step,
            report,
            vectors: self.table.assemble_all(),
        })
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.decomposer.diagnostics()
    }

    pub fn table(&self) -> &InputTable {
        &self.table
    }
}

/// Every window vector a capture produces, in step then key order.
pub fn replay_windows(packets: &[PacketRecord], cfg: &PipelineConfig) -> Result<Vec<InputVector>> {
    let mut stream = FeatureStream::new(cfg);
    let mut out = Vec::new();
    for p in packets {
        for w in stream.push(p.clone())? {
            out.extend(w.vectors);
        }
    }
    if let Some(w) = stream.finish()? {
        out.extend(w.vectors);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    pub l1: L1Class,
    pub l2: Option<SubClass>,
    pub l1_probs: Vec<f64>,
    pub l2_probs: Option<Vec<f64>>,
}

/// One output line: a gated conversation at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<String>,
    pub step: u64,
    pub key: ConversationKey,
    pub raw: RawPrediction,
    pub voted: Labeled,
    pub fused: Labeled,
    /// Step-level flags from the raw L1 predictions.
    pub multi_label: MultiLabelOutput,
    /// Step-level flags from the fused L1 labels.
    pub multi_label_final: MultiLabelOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub step: u64,
    pub records: Vec<DetectRecord>,
    pub multi_label: MultiLabelOutput,
    pub multi_label_final: MultiLabelOutput,
}

pub struct Pipeline {
    stream: FeatureStream,
    bundle: Arc<DetectorBundle>,
    post: PostProcessor,
    sensors: SensorTrace,
}

impl Pipeline {
    /// Fails if the bundle's input width differs from the configured window.
    pub fn new(cfg: &PipelineConfig, bundle: Arc<DetectorBundle>) -> Result<Self> {
        cfg.validate()?;
        let want = cfg.window().vector_len();
        if bundle.feature_count() != want {
            return Err(Error::Model(format!(
                "bundle expects {} features but the window produces {want}",
                bundle.feature_count()
            )));
        }
        Ok(Pipeline {
            stream: FeatureStream::new(cfg),
            bundle,
            post: PostProcessor::new(cfg.post()),
            sensors: SensorTrace::new(),
        })
    }

    pub fn with_sensors(mut self, trace: SensorTrace) -> Self {
        self.sensors = trace;
        self
    }

    pub fn set_sensor_state(&mut self, step: u64, state: SensorState) {
        self.sensors.set(step, state);
    }

    pub fn push(&mut self, p: PacketRecord) -> Result<Vec<StepOutput>> {
        let windows = self.stream.push(p)?;
        windows.into_iter().map(|w| self.classify(w)).collect()
    }

    pub fn advance_to(&mut self, ts_us: u64) -> Result<Vec<StepOutput>> {
        let windows = self.stream.advance_to(ts_us)?;
        windows.into_iter().map(|w| self.classify(w)).collect()
    }

    pub fn finish(&mut self) -> Result<Option<StepOutput>> {
        match self.stream.finish()? {
            Some(w) => self.classify(w).map(Some),
            None => Ok(None),
        }
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.stream.diagnostics()
    }

    fn classify(&mut self, w: StepWindows) -> Result<StepOutput> {
        for key in w.report.evicted.iter().chain(&w.report.idle_dropped) {
            self.post.reset(key);
        }
        let sensors = self.sensors.get(w.step);
        let mut cmap = CategoryMap::new();
        for v in &w.vectors {
            cmap.insert(v.key, self.bundle.detect(&v.values)?);
        }
        let multi_label = crate::detector::step_output(&cmap);
        let mut staged: Vec<(ConversationKey, RawPrediction, Labeled, Labeled)> = Vec::with_capacity(cmap.len());
        for (key, det) in cmap {
            let out = self.post.process(key, &det, sensors);
            let raw = RawPrediction {
                l1: det.l1,
                l2: det.sub,
                l1_probs: det.l1_probs,
                l2_probs: det.sub_probs,
            };
            staged.push((key, raw, out.voted, out.fused));
        }
        let multi_label_final = MultiLabelOutput::from_classes(staged.iter().map(|s| s.3.l1));
        let records = staged
            .into_iter()
            .map(|(key, raw, voted, fused)| DetectRecord {
                capture: None,
                step: w.step,
                key,
                raw,
                voted,
                fused,
                multi_label,
                multi_label_final,
            })
            .collect();
        Ok(StepOutput {
            step: w.step,
            records,
            multi_label,
            multi_label_final,
        })
    }
}

/// Runs a whole capture and returns every record.
pub fn run_capture(
    packets: &[PacketRecord],
    cfg: &PipelineConfig,
    bundle: Arc<DetectorBundle>,
    sensors: SensorTrace,
) -> Result<Vec<DetectRecord>> {
    let mut pipe = Pipeline::new(cfg, bundle)?.with_sensors(sensors);
    let mut out = Vec::new();
    for p in packets {
        for s in pipe.push(p.clone())? {
            out.extend(s.records);
        }
    }
    if let Some(s) = pipe.finish()? {
        out.extend(s.records);
    }
    Ok(out)
}
