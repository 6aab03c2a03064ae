//! Pipeline configuration file.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decompose::DEFAULT_STEP_MS;
use crate::error::{Error, Result};
use crate::gbdt::TrainParams;
use crate::postprocess::{PostConfig, DEFAULT_CAMERA_RT_THRESHOLD, DEFAULT_HISTORY_CAPACITY};
use crate::synth::Manifest;
use crate::traffic::LocalNetwork;
use crate::window::WindowConfig;

/// Every key is optional; omitted keys take the defaults shown by
/// `PipelineConfig::default()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub step_ms: u64,
    pub window_steps: usize,
    pub table_capacity: usize,
    pub history_capacity: usize,
    pub camera_rt_threshold: usize,
    pub idle_drop_steps: usize,
    pub local_ips: Vec<IpAddr>,
    pub local_prefix_len: Option<u8>,
    /// Bundle manifest used by `detect` when none is given on the command line.
    pub bundle: Option<PathBuf>,
    pub train: TrainParams,
    /// Minimum overall accuracy per layer (`l1`, `l2rt`, `l2nrt`).
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            step_ms: DEFAULT_STEP_MS,
            window_steps: 6,
            table_capacity: 7,
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            camera_rt_threshold: DEFAULT_CAMERA_RT_THRESHOLD,
            idle_drop_steps: 6,
            local_ips: vec![IpAddr::V4(crate::synth::DEFAULT_LOCAL_IP)],
            local_prefix_len: None,
            bundle: None,
            train: TrainParams::default(),
            thresholds: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.step_ms == 0 {
            return bad("step_ms must be >= 1");
        }
        if self.window_steps == 0 || self.table_capacity == 0 || self.history_capacity == 0 {
            return bad("window_steps, table_capacity and history_capacity must be >= 1");
        }
        if self.idle_drop_steps == 0 {
            return bad("idle_drop_steps must be >= 1");
        }
        if self.local_ips.is_empty() {
            return bad("local_ips must not be empty");
        }
        if let Some(p) = self.local_prefix_len {
            if self.local_ips.iter().any(|ip| (ip.is_ipv4() && p > 32) || p > 128) {
                return bad("local_prefix_len exceeds the address width");
            }
        }
        for (layer, t) in &self.thresholds {
            layer.parse::<crate::detector::Layer>()?;
            if !(0.0..=1.0).contains(t) {
                return Err(Error::Config(format!("threshold for {layer} must be in [0, 1]")));
            }
        }
        self.train.validate()
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            window_steps: self.window_steps,
            table_capacity: self.table_capacity,
            idle_drop_steps: self.idle_drop_steps,
        }
    }

    pub fn post(&self) -> PostConfig {
        PostConfig {
            history_capacity: self.history_capacity,
            camera_rt_threshold: self.camera_rt_threshold,
        }
    }

    pub fn local_network(&self) -> LocalNetwork {
        let net = LocalNetwork::new(self.local_ips.iter().copied());
        match self.local_prefix_len {
            Some(p) => net.with_prefix_len(p),
            None => net,
        }
    }

    /// Copy whose local addresses include the manifest's device address.
    pub fn for_manifest(&self, m: &Manifest) -> Self {
        let mut cfg = self.clone();
        if !cfg.local_ips.contains(&m.local_ip) {
            cfg.local_ips.push(m.local_ip);
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!((cfg.step_ms, cfg.window_steps, cfg.table_capacity), (500, 6, 7));
        assert_eq!((cfg.history_capacity, cfg.camera_rt_threshold), (7, 3));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"window_steps":4,"train":{"n_rounds":5}}"#).unwrap();
        assert_eq!(partial.window_steps, 4);
        assert_eq!(partial.train.n_rounds, 5);
        assert_eq!(partial.train.max_depth, 4);
    }

    #[test]
    fn validation() {
        let mut cfg = PipelineConfig::default();
        cfg.thresholds.insert("l3".into(), 0.5);
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            window_steps: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"stepms":5}"#).is_err());
    }
}
