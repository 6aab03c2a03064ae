//! Hierarchical service detectors.
//!
//! The L1 model assigns each window to CG, RT or NRT. RT windows are then
//! sub-classified by the L2-RT model (MG / VC / AC) and NRT windows by the
//! L2-NRT model (FD / VS); CG has no second layer. Class indices follow the
//! declaration order of [`L1Class`] and [`SubClass`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{read_model, GbdtModel};
use crate::traffic::ConversationKey;

/// Coarse latency category: CG (< 50 ms), RT (50-200 ms tolerable),
/// NRT (< 500 ms preferable).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum L1Class {
    Cg,
    Rt,
    Nrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SubClass {
    Mg,
    Vc,
    Ac,
    Fd,
    Vs,
}

/// A label that can sit in a history buffer. Lower `priority` is more
/// latency-sensitive and wins vote ties.
pub trait ServiceLabel: Copy + Eq + Ord + fmt::Debug + 'static {
    fn priority(self) -> usize;
}

impl L1Class {
    pub const ALL: [L1Class; 3] = [L1Class::Cg, L1Class::Rt, L1Class::Nrt];

    pub fn as_str(self) -> &'static str {
        match self {
            L1Class::Cg => "CG",
            L1Class::Rt => "RT",
            L1Class::Nrt => "NRT",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sub-classes legal under this class, in model order.
    pub fn sub_classes(self) -> &'static [SubClass] {
        match self {
            L1Class::Cg => &[],
            L1Class::Rt => &[SubClass::Mg, SubClass::Vc, SubClass::Ac],
            L1Class::Nrt => &[SubClass::Fd, SubClass::Vs],
        }
    }
}

impl SubClass {
    pub const ALL: [SubClass; 5] = [SubClass::Mg, SubClass::Vc, SubClass::Ac, SubClass::Fd, SubClass::Vs];

    pub fn as_str(self) -> &'static str {
        match self {
            SubClass::Mg => "MG",
            SubClass::Vc => "VC",
            SubClass::Ac => "AC",
            SubClass::Fd => "FD",
            SubClass::Vs => "VS",
        }
    }

    pub fn parent(self) -> L1Class {
        match self {
            SubClass::Mg | SubClass::Vc | SubClass::Ac => L1Class::Rt,
            SubClass::Fd | SubClass::Vs => L1Class::Nrt,
        }
    }
}

impl ServiceLabel for L1Class {
    fn priority(self) -> usize {
        self as usize
    }
}

impl ServiceLabel for SubClass {
    fn priority(self) -> usize {
        self as usize
    }
}

impl fmt::Display for L1Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for SubClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for L1Class {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        L1Class::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown L1 class {s:?}")))
    }
}

impl FromStr for SubClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SubClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown sub-class {s:?}")))
    }
}

/// Whether `sub` may appear under `l1`.
pub fn is_legal(l1: L1Class, sub: Option<SubClass>) -> bool {
    match sub {
        None => true,
        Some(s) => s.parent() == l1,
    }
}

/// The three model slots of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    L1,
    L2rt,
    L2nrt,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::L1, Layer::L2rt, Layer::L2nrt];

    pub fn class_order(self) -> Vec<String> {
        match self {
            Layer::L1 => L1Class::ALL.iter().map(|c| c.as_str().to_string()).collect(),
            Layer::L2rt => L1Class::Rt.sub_classes().iter().map(|c| c.as_str().to_string()).collect(),
            Layer::L2nrt => L1Class::Nrt.sub_classes().iter().map(|c| c.as_str().to_string()).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::L1 => "l1",
            Layer::L2rt => "l2rt",
            Layer::L2nrt => "l2nrt",
        }
    }

    /// The L1 class whose windows this layer sees; `None` for L1 itself.
    pub fn parent(self) -> Option<L1Class> {
        match self {
            Layer::L1 => None,
            Layer::L2rt => Some(L1Class::Rt),
            Layer::L2nrt => Some(L1Class::Nrt),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown layer {s:?}")))
    }
}

/// One window's classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub l1: L1Class,
    pub sub: Option<SubClass>,
    pub l1_probs: Vec<f64>,
    pub sub_probs: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DetectorBundle {
    l1: GbdtModel,
    l2_rt: GbdtModel,
    l2_nrt: GbdtModel,
}

impl DetectorBundle {
    /// Checks class orders and that all three models share one input width.
    pub fn new(l1: GbdtModel, l2_rt: GbdtModel, l2_nrt: GbdtModel) -> Result<Self> {
        for (layer, model) in [(Layer::L1, &l1), (Layer::L2rt, &l2_rt), (Layer::L2nrt, &l2_nrt)] {
            model.validate()?;
            let want = layer.class_order();
            if model.class_labels != want {
                return Err(Error::Model(format!(
                    "{} model classes {:?}, expected {:?}",
                    layer.as_str(),
                    model.class_labels,
                    want
                )));
            }
        }
        if l2_rt.feature_count != l1.feature_count || l2_nrt.feature_count != l1.feature_count {
            return Err(Error::Model(format!(
                "feature counts differ: l1 {}, l2rt {}, l2nrt {}",
                l1.feature_count, l2_rt.feature_count, l2_nrt.feature_count
            )));
        }
        Ok(DetectorBundle { l1, l2_rt, l2_nrt })
    }

    pub fn feature_count(&self) -> usize {
        self.l1.feature_count
    }

    pub fn model(&self, layer: Layer) -> &GbdtModel {
        match layer {
            Layer::L1 => &self.l1,
            Layer::L2rt => &self.l2_rt,
            Layer::L2nrt => &self.l2_nrt,
        }
    }

    /// Same bundle with both L2 models replaced by uninformative ones.
    pub fn without_l2(&self) -> Self {
        let n = self.feature_count();
        DetectorBundle {
            l1: self.l1.clone(),
            l2_rt: GbdtModel::constant(Layer::L2rt.class_order(), n),
            l2_nrt: GbdtModel::constant(Layer::L2nrt.class_order(), n),
        }
    }

    /// L1 first; then exactly one L2 model for RT or NRT, none for CG.
    pub fn detect(&self, x: &[f64]) -> Result<Detection> {
        let l1_probs = self.l1.predict_proba(x)?;
        let l1 = L1Class::ALL[crate::gbdt::argmax(&l1_probs)];
        let (sub, sub_probs) = match l1 {
            L1Class::Cg => (None, None),
            L1Class::Rt | L1Class::Nrt => {
                let model = if l1 == L1Class::Rt { &self.l2_rt } else { &self.l2_nrt };
                let probs = model.predict_proba(x)?;
                let sub = l1.sub_classes()[crate::gbdt::argmax(&probs)];
                (Some(sub), Some(probs))
            }
        };
        Ok(Detection {
            l1,
            sub,
            l1_probs,
            sub_probs,
        })
    }
}

/// Per-step map from conversation to its detection.
pub type CategoryMap = BTreeMap<ConversationKey, Detection>;

/// Stream-level presence flags in the fixed order CG, RT, NRT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelOutput {
    pub cg: bool,
    pub rt: bool,
    pub nrt: bool,
}

impl MultiLabelOutput {
    pub fn from_classes(classes: impl IntoIterator<Item = L1Class>) -> Self {
        let mut out = MultiLabelOutput::default();
        for c in classes {
            match c {
                L1Class::Cg => out.cg = true,
                L1Class::Rt => out.rt = true,
                L1Class::Nrt => out.nrt = true,
            }
        }
        out
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.cg, self.rt, self.nrt]
    }
}

pub fn step_output(cmap: &CategoryMap) -> MultiLabelOutput {
    MultiLabelOutput::from_classes(cmap.values().map(|d| d.l1))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub path: PathBuf,
    pub classes: Vec<String>,
}

/// Bundle manifest: the three model files and the class order each must
/// declare. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub l1: ModelEntry,
    pub l2rt: ModelEntry,
    pub l2nrt: ModelEntry,
}

impl BundleManifest {
    pub fn new(l1: PathBuf, l2rt: PathBuf, l2nrt: PathBuf) -> Self {
        let entry = |path, layer: Layer| ModelEntry {
            path,
            classes: layer.class_order(),
        };
        BundleManifest {
            l1: entry(l1, Layer::L1),
            l2rt: entry(l2rt, Layer::L2rt),
            l2nrt: entry(l2nrt, Layer::L2nrt),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DetectorBundle> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: BundleManifest =
            serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let load = |entry: &ModelEntry, layer: Layer| -> Result<GbdtModel> {
            if entry.classes != layer.class_order() {
                return Err(Error::Model(format!(
                    "manifest lists {:?} for {}, expected {:?}",
                    entry.classes,
                    layer.as_str(),
                    layer.class_order()
                )));
            }
            let model = read_model(&base.join(&entry.path))?;
            if model.class_labels != entry.classes {
                return Err(Error::Model(format!(
                    "{} declares classes {:?} but manifest expects {:?}",
                    entry.path.display(),
                    model.class_labels,
                    entry.classes
                )));
            }
            Ok(model)
        };
        DetectorBundle::new(
            load(&manifest.l1, Layer::L1)?,
            load(&manifest.l2rt, Layer::L2rt)?,
            load(&manifest.l2nrt, Layer::L2nrt)?,
        )
    }
}
