//! Model file format: one JSON object with fields in a fixed order and every
//! float written with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{GbdtModel, TreeNode};
use crate::error::{Error, Result};

fn num(out: &mut String, v: f64) {
    // {:.16e} is 17 significant digits, always valid JSON
    write!(out, "{v:.16e}").unwrap();
}

fn write_node(out: &mut String, node: &TreeNode) {
    match node {
        TreeNode::Leaf { value } => {
            out.push_str("{\"leaf\":");
            num(out, *value);
            out.push('}');
        }
        TreeNode::Split {
            feature,
            threshold,
            gain,
            left,
            right,
        } => {
            write!(out, "{{\"feat\":{feature},\"thr\":").unwrap();
            num(out, *threshold);
            out.push_str(",\"gain\":");
            num(out, *gain);
            out.push_str(",\"left\":");
            write_node(out, left);
            out.push_str(",\"right\":");
            write_node(out, right);
            out.push('}');
        }
    }
}

impl GbdtModel {
    /// Canonical JSON text. One round per line keeps diffs readable.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        write!(out, "{{\"n_classes\":{},\"class_labels\":", self.n_classes).unwrap();
        out.push_str(&serde_json::to_string(&self.class_labels).expect("strings serialize"));
        out.push_str(",\"learning_rate\":");
        num(&mut out, self.learning_rate);
        out.push_str(",\"base_score\":");
        num(&mut out, self.base_score);
        write!(out, ",\"feature_count\":{},\"rounds\":[", self.feature_count).unwrap();
        for (r, round) in self.rounds.iter().enumerate() {
            if r > 0 {
                out.push(',');
            }
            out.push_str("\n[");
            for (t, tree) in round.iter().enumerate() {
                if t > 0 {
                    out.push(',');
                }
                write_node(&mut out, tree);
            }
            out.push(']');
        }
        out.push_str("],\"train_log_loss\":[");
        for (i, v) in self.train_log_loss.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            num(&mut out, *v);
        }
        out.push_str("]}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let model = GbdtModel {
            n_classes: file.n_classes,
            class_labels: file.class_labels,
            learning_rate: file.learning_rate,
            base_score: file.base_score,
            feature_count: file.feature_count,
            rounds: file
                .rounds
                .into_iter()
                .map(|round| round.into_iter().map(NodeFile::into_node).collect())
                .collect(),
            train_log_loss: file.train_log_loss,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_classes: usize,
    class_labels: Vec<String>,
    learning_rate: f64,
    base_score: f64,
    feature_count: usize,
    rounds: Vec<Vec<NodeFile>>,
    #[serde(default)]
    train_log_loss: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeFile {
    Split {
        feat: usize,
        thr: f64,
        #[serde(default)]
        gain: f64,
        left: Box<NodeFile>,
        right: Box<NodeFile>,
    },
    Leaf {
        leaf: f64,
    },
}

impl NodeFile {
    fn into_node(self) -> TreeNode {
        match self {
            NodeFile::Leaf { leaf } => TreeNode::Leaf { value: leaf },
            NodeFile::Split {
                feat,
                thr,
                gain,
                left,
                right,
            } => TreeNode::Split {
                feature: feat,
                threshold: thr,
                gain,
                left: Box::new(left.into_node()),
                right: Box::new(right.into_node()),
            },
        }
    }
}

pub fn write_model(path: &Path, model: &GbdtModel) -> Result<()> {
    std::fs::write(path, model.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<GbdtModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GbdtModel::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Model(format!("{}: {j}", path.display())),
        other => other,
    })
}
