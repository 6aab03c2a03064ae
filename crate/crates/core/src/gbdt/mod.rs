//! Multiclass gradient-boosted decision trees.
//!
//! Training minimizes softmax cross-entropy with second-order leaf weights:
//! each round fits one regression tree per class to the per-sample gradient
//! and hessian of the loss, using exact greedy split search over midpoints of
//! sorted unique feature values. Samples with `x[feature] < threshold` go
//! left.

mod io;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_model, write_model};
pub use train::{find_best_split, train, Dataset, SplitCandidate, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Loss reduction credited to this split; feeds feature importance.
        gain: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn visit_splits(&self, f: &mut impl FnMut(usize, f64, f64)) {
        if let TreeNode::Split {
            feature,
            threshold,
            gain,
            left,
            right,
        } = self
        {
            f(*feature, *threshold, *gain);
            left.visit_splits(f);
            right.visit_splits(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    pub lambda_l2: f64,
    pub gamma_min_gain: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            n_rounds: 100,
            max_depth: 4,
            learning_rate: 0.1,
            min_child_weight: 1.0,
            lambda_l2: 1.0,
            gamma_min_gain: 0.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train params: {what}")));
        if self.n_rounds < 1 {
            return bad("n_rounds must be >= 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !self.min_child_weight.is_finite() || self.min_child_weight < 0.0 {
            return bad("min_child_weight must be >= 0");
        }
        if !self.lambda_l2.is_finite() || self.lambda_l2 < 0.0 {
            return bad("lambda_l2 must be >= 0");
        }
        if !self.gamma_min_gain.is_finite() || self.gamma_min_gain < 0.0 {
            return bad("gamma_min_gain must be >= 0");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        Ok(())
    }
}

/// A trained ensemble. Leaf values already include the learning-rate
/// shrinkage, so the margin of class `k` is `base_score` plus the sum of
/// tree `k` of every round.
#[derive(Clone, Debug, PartialEq)]
pub struct GbdtModel {
    pub n_classes: usize,
    pub class_labels: Vec<String>,
    pub learning_rate: f64,
    pub base_score: f64,
    pub feature_count: usize,
    pub rounds: Vec<Vec<TreeNode>>,
    /// Mean training log-loss after each round.
    pub train_log_loss: Vec<f64>,
}

impl GbdtModel {
    /// A model with no rounds: every input gets the uniform distribution.
    pub fn constant(class_labels: Vec<String>, feature_count: usize) -> Self {
        GbdtModel {
            n_classes: class_labels.len(),
            class_labels,
            learning_rate: 1.0,
            base_score: 0.0,
            feature_count,
            rounds: Vec::new(),
            train_log_loss: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Model(format!("n_classes = {} < 2", self.n_classes)));
        }
        if self.class_labels.len() != self.n_classes {
            return Err(Error::Model(format!(
                "{} class labels for {} classes",
                self.class_labels.len(),
                self.n_classes
            )));
        }
        if !self.base_score.is_finite() || !self.learning_rate.is_finite() {
            return Err(Error::Model("non-finite scalar parameter".into()));
        }
        for (r, round) in self.rounds.iter().enumerate() {
            if round.len() != self.n_classes {
                return Err(Error::Model(format!(
                    "round {r} has {} trees, expected {}",
                    round.len(),
                    self.n_classes
                )));
            }
            for tree in round {
                check_tree(tree, self.feature_count)?;
            }
        }
        Ok(())
    }

    fn check_shape(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(Error::Shape {
                expected: self.feature_count,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Raw per-class scores before the softmax.
    pub fn margins(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let mut m = vec![self.base_score; self.n_classes];
        for round in &self.rounds {
            for (k, tree) in round.iter().enumerate() {
                m[k] += tree.eval(x);
            }
        }
        Ok(m)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut m = self.margins(x)?;
        softmax_in_place(&mut m);
        Ok(m)
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predict_index(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        Ok(&self.class_labels[self.predict_index(x)?])
    }

    /// Total split gain per feature index.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.feature_count];
        for tree in self.rounds.iter().flatten() {
            tree.visit_splits(&mut |f, _, gain| imp[f] += gain);
        }
        imp
    }
}

fn check_tree(node: &TreeNode, feature_count: usize) -> Result<()> {
    match node {
        TreeNode::Leaf { value } if value.is_finite() => Ok(()),
        TreeNode::Leaf { .. } => Err(Error::Model("non-finite leaf value".into())),
        TreeNode::Split {
            feature,
            threshold,
            gain,
            left,
            right,
        } => {
            if *feature >= feature_count {
                return Err(Error::Model(format!(
                    "split on feature {feature} but model has {feature_count}"
                )));
            }
            if !threshold.is_finite() || !gain.is_finite() {
                return Err(Error::Model("non-finite split parameter".into()));
            }
            check_tree(left, feature_count)?;
            check_tree(right, feature_count)
        }
    }
}

pub(crate) fn softmax_in_place(m: &mut [f64]) {
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in m.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in m.iter_mut() {
        *v /= sum;
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
