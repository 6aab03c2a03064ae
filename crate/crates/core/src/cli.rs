//! Command implementations behind the `nsd` binary. Each returns a summary
//! instead of printing so tests can drive them directly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::detector::{BundleManifest, DetectorBundle, Layer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation, Stage};
use crate::gbdt::{train, write_model, Dataset, TrainParams};
use crate::pipeline::{replay_windows, DetectRecord, Pipeline};
use crate::postprocess::SensorTrace;
use crate::synth::{generate_dataset, split_manifest, DatasetSpec, Manifest};
use crate::traffic::{parse_capture, sniff_format, ConversationKey, PacketRecord};

/// Process exit status for an error: 2 bad spec or config, 3 bad data,
/// 4 bad model.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Spec(_) | Error::Config(_) => 2,
        Error::Model(_) | Error::Shape { .. } => 4,
        _ => 3,
    }
}

/// Exit status when evaluation thresholds are not met.
pub const EXIT_THRESHOLDS: i32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct GenerateSummary {
    pub manifest: PathBuf,
    pub captures: usize,
    pub rows: usize,
    pub packets: usize,
}

pub fn cmd_generate(spec_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<GenerateSummary> {
    let mut spec = DatasetSpec::load(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_dataset(&spec)?;
    let manifest = data.write(out_dir)?;
    Ok(GenerateSummary {
        manifest,
        captures: data.captures.len(),
        rows: data.manifest.rows.len(),
        packets: data.captures.iter().map(|c| c.packets.len()).sum(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitSummary {
    pub train_rows: usize,
    pub test_rows: usize,
}

pub fn cmd_split(manifest: &Path, train_out: &Path, test_out: &Path, fraction: f64, seed: u64) -> Result<SplitSummary> {
    let m = Manifest::load(manifest)?;
    let (train, test) = split_manifest(&m, fraction, seed)?;
    train.save(train_out)?;
    test.save(test_out)?;
    Ok(SplitSummary {
        train_rows: train.rows.len(),
        test_rows: test.rows.len(),
    })
}

pub fn load_packets(path: &Path) -> Result<Vec<PacketRecord>> {
    parse_capture(path, sniff_format(path)?)
}

/// Training rows for `layer`: every window the pipeline assembles for a
/// labeled conversation, labeled by that conversation's ground truth. L2
/// layers only see conversations of their parent class.
pub fn training_rows(cfg: &PipelineConfig, manifest: &Manifest, layer: Layer) -> Result<Dataset> {
    let classes = layer.class_order();
    let label_of = |row: &crate::synth::ManifestRow| -> Option<String> {
        match layer.parent() {
            None => Some(row.l1.as_str().to_string()),
            Some(parent) if row.l1 == parent => row.l2.map(|s| s.as_str().to_string()),
            Some(_) => None,
        }
    };
    for c in &classes {
        if !manifest.rows.iter().any(|r| label_of(r).as_deref() == Some(c.as_str())) {
            return Err(Error::MissingClass(c.clone()));
        }
    }
    let cfg = cfg.for_manifest(manifest);
    let captures = manifest.captures();
    let per_capture: Vec<Vec<(Vec<f64>, usize)>> = captures
        .par_iter()
        .map(|cap| -> Result<Vec<(Vec<f64>, usize)>> {
            let labels: BTreeMap<ConversationKey, usize> = manifest
                .rows
                .iter()
                .filter(|r| &r.capture == cap)
                .filter_map(|r| {
                    let l = label_of(r)?;
                    Some((r.conversation_key, classes.iter().position(|c| *c == l)?))
                })
                .collect();
            if labels.is_empty() {
                return Ok(Vec::new());
            }
            let packets = load_packets(&manifest.base_dir.join(cap))?;
            Ok(replay_windows(&packets, &cfg)?
                .into_iter()
                .filter_map(|v| labels.get(&v.key).map(|&y| (v.values, y)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let (rows, labels): (Vec<_>, Vec<_>) = per_capture.into_iter().flatten().unzip();
    if rows.is_empty() {
        return Err(Error::Data(format!("no {} training windows assembled", layer.as_str())));
    }
    Dataset::new(rows, labels, classes)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub layer: Layer,
    pub model: PathBuf,
    pub rows: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub initial_log_loss: f64,
    pub final_log_loss: f64,
    pub rounds: usize,
}

pub fn cmd_train(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    layer: Layer,
    out: &Path,
    params_path: Option<&Path>,
) -> Result<TrainSummary> {
    let params = match params_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let params: TrainParams =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            params.validate()?;
            params
        }
        None => cfg.train.clone(),
    };
    let manifest = Manifest::load(manifest_path)?;
    let data = training_rows(cfg, &manifest, layer)?;
    let (model, report) = train(&data, &params)?;
    write_model(out, &model)?;
    Ok(TrainSummary {
        layer,
        model: out.to_path_buf(),
        rows: report.rows,
        class_counts: data.class_labels().iter().cloned().zip(report.class_counts.iter().copied()).collect(),
        initial_log_loss: report.initial_log_loss,
        final_log_loss: report.log_loss.last().copied().unwrap_or(report.initial_log_loss),
        rounds: report.log_loss.len(),
    })
}

/// Writes a bundle manifest next to `out`, checking that the models load.
pub fn cmd_bundle(l1: &Path, l2rt: &Path, l2nrt: &Path, out: &Path) -> Result<()> {
    let dir = out.parent().unwrap_or_else(|| Path::new(""));
    let rel = |p: &Path| -> PathBuf {
        match p.strip_prefix(dir) {
            Ok(r) if !dir.as_os_str().is_empty() => r.to_path_buf(),
            _ => std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()),
        }
    };
    let manifest = BundleManifest::new(rel(l1), rel(l2rt), rel(l2nrt));
    manifest.write(out)?;
    BundleManifest::load(out).map(|_| ())
}

#[derive(Clone, Debug, Default)]
pub struct DetectOptions {
    pub sensors: Option<PathBuf>,
    /// Pace each step to the configured step period of wall-clock time.
    pub realtime: bool,
    /// Replace both L2 models with uninformative ones.
    pub ablate_l2: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DetectSummary {
    pub records: usize,
    pub steps: usize,
    pub max_step_ms: f64,
}

/// Streams each capture through a fresh pipeline and writes one JSON line
/// per record. With more than one capture, records carry the capture path.
pub fn cmd_detect(
    cfg: &PipelineConfig,
    captures: &[PathBuf],
    bundle_path: &Path,
    opts: &DetectOptions,
    out: &mut dyn Write,
) -> Result<DetectSummary> {
    cfg.validate()?;
    let mut bundle = BundleManifest::load(bundle_path)?;
    if opts.ablate_l2 {
        bundle = bundle.without_l2();
    }
    let bundle = Arc::new(bundle);
    let sensors = match &opts.sensors {
        Some(p) => SensorTrace::load(p)?,
        None => SensorTrace::new(),
    };
    let mut summary = DetectSummary::default();
    let mut w = BufWriter::new(out);
    for cap in captures {
        let packets = load_packets(cap)?;
        let tag = (captures.len() > 1).then(|| cap.display().to_string());
        run_one(cfg, &packets, bundle.clone(), &sensors, opts.realtime, tag, &mut w, &mut summary)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &PipelineConfig,
    packets: &[PacketRecord],
    bundle: Arc<DetectorBundle>,
    sensors: &SensorTrace,
    realtime: bool,
    tag: Option<String>,
    w: &mut dyn Write,
    summary: &mut DetectSummary,
) -> Result<()> {
    let mut pipe = Pipeline::new(cfg, bundle)?.with_sensors(sensors.clone());
    let period = Duration::from_millis(cfg.step_ms);
    let started = Instant::now();
    let mut emit = |outs: Vec<crate::pipeline::StepOutput>, summary: &mut DetectSummary, spent: Duration| -> Result<()> {
        let n = outs.len().max(1) as f64;
        summary.max_step_ms = summary.max_step_ms.max(spent.as_secs_f64() * 1e3 / n);
        for s in outs {
            summary.steps += 1;
            for mut r in s.records {
                r.capture = tag.clone();
                serde_json::to_writer(&mut *w, &r)?;
                w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
                summary.records += 1;
            }
            if realtime {
                w.flush().map_err(|e| Error::io("<output>", e))?;
                let due = period * (s.step as u32 + 1);
                if let Some(wait) = due.checked_sub(started.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
        }
        Ok(())
    };
    let mut spent = Duration::ZERO;
    for p in packets {
        let t = Instant::now();
        let outs = pipe.push(p.clone())?;
        spent += t.elapsed();
        if !outs.is_empty() {
            emit(outs, summary, spent)?;
            spent = Duration::ZERO;
        }
    }
    let t = Instant::now();
    if let Some(s) = pipe.finish()? {
        spent += t.elapsed();
        emit(vec![s], summary, spent)?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<DetectRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let loc = || format!("line {}", i + 1);
        let line = line.map_err(|e| Error::Parse {
            location: loc(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: loc(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    pred: &Path,
    manifest: &Path,
    thresholds_path: Option<&Path>,
    stage: Stage,
) -> Result<Evaluation> {
    let file = std::fs::File::open(pred).map_err(|e| Error::io(pred, e))?;
    let records = read_records(BufReader::new(file))?;
    let manifest = Manifest::load(manifest)?;
    let thresholds = match thresholds_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: BTreeMap<String, f64> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let check = PipelineConfig {
                thresholds: t.clone(),
                ..PipelineConfig::default()
            };
            check.validate()?;
            t
        }
        None => cfg.thresholds.clone(),
    };
    evaluate(&records, &manifest, stage, &thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Spec("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingClass("VS".into())), 3);
        assert_eq!(exit_code(&Error::EmptyReport), 3);
        assert_eq!(exit_code(&Error::Model("x".into())), 4);
    }
}
