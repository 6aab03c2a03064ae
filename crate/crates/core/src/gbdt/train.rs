use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{softmax_in_place, GbdtModel, TrainParams, TreeNode};
use crate::error::{Error, Result};

const HESSIAN_FLOOR: f64 = 1e-16;
// below this many cells the per-feature scan stays on one thread
const PARALLEL_CELLS: usize = 1 << 16;
const NO_NODE: u32 = u32::MAX;

/// Row-major feature matrix with class-index labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    n_rows: usize,
    n_cols: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    class_labels: Vec<String>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>, class_labels: Vec<String>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::Data(format!("row {i} has {} features, expected {n_cols}", r.len())));
            }
            features.extend_from_slice(r);
        }
        Self::from_flat(features, n_cols, labels, class_labels)
    }

    pub fn from_flat(
        features: Vec<f64>,
        n_cols: usize,
        labels: Vec<usize>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let n_rows = labels.len();
        if features.len() != n_rows * n_cols {
            return Err(Error::Data("feature buffer does not match row count".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_labels.len()) {
            return Err(Error::Data(format!("label index {bad} out of range")));
        }
        Ok(Dataset {
            n_rows,
            n_cols,
            features,
            labels,
            class_labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_labels.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub rows: usize,
    pub class_counts: Vec<usize>,
    pub initial_log_loss: f64,
    /// Mean training log-loss after each round.
    pub log_loss: Vec<f64>,
}

/// Best split of a node: feature, midpoint threshold, gain, and the
/// gradient/hessian sums of the left child.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub left_grad: f64,
    pub left_hess: f64,
}

struct SplitRule {
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
}

impl SplitRule {
    fn from(params: &TrainParams) -> Self {
        SplitRule {
            lambda: params.lambda_l2,
            gamma: params.gamma_min_gain,
            min_child_weight: params.min_child_weight,
        }
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.lambda)
    }

    /// Gain of splitting (g, h) into (gl, hl) and the remainder, or `None`
    /// when a child is too light.
    fn gain(&self, g: f64, h: f64, gl: f64, hl: f64) -> Option<f64> {
        let (gr, hr) = (g - gl, h - hl);
        if hl < self.min_child_weight || hr < self.min_child_weight {
            return None;
        }
        Some(0.5 * (self.score(gl, hl) + self.score(gr, hr) - self.score(g, h)) - self.gamma)
    }
}

/// Midpoint between two consecutive distinct values, nudged to `hi` when
/// rounding would collapse it onto `lo`.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo * 0.5 + hi * 0.5;
    if m > lo && m <= hi {
        m
    } else {
        hi
    }
}

struct Presorted<'a> {
    data: &'a Dataset,
    columns: Vec<Vec<f64>>,
    order: Vec<Vec<u32>>,
}

impl<'a> Presorted<'a> {
    fn new(data: &'a Dataset) -> Self {
        let columns: Vec<Vec<f64>> = (0..data.n_cols)
            .map(|f| (0..data.n_rows).map(|r| data.features[r * data.n_cols + f]).collect())
            .collect();
        let order = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..data.n_rows as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { data, columns, order }
    }
}

#[derive(Clone, Copy)]
struct NodeStats {
    grad: f64,
    hess: f64,
}

#[derive(Clone, Copy, Default)]
struct ScanState {
    gl: f64,
    hl: f64,
    last: f64,
    seen: bool,
}

/// For each frontier node, the best split on feature `f`.
#[allow(clippy::too_many_arguments)]
fn scan_feature(
    ps: &Presorted,
    f: usize,
    grad: &[f64],
    hess: &[f64],
    row_node: &[u32],
    slot_of: &[u32],
    frontier: &[NodeStats],
    rule: &SplitRule,
) -> Vec<Option<SplitCandidate>> {
    let col = &ps.columns[f];
    let mut state = vec![ScanState::default(); frontier.len()];
    let mut best: Vec<Option<SplitCandidate>> = vec![None; frontier.len()];
    for &row in &ps.order[f] {
        let row = row as usize;
        let node = row_node[row];
        if node == NO_NODE {
            continue;
        }
        let slot = slot_of[node as usize];
        if slot == NO_NODE {
            continue;
        }
        let slot = slot as usize;
        let v = col[row];
        let st = &mut state[slot];
        if st.seen && v > st.last {
            let stats = frontier[slot];
            if let Some(gain) = rule.gain(stats.grad, stats.hess, st.gl, st.hl) {
                let better = match best[slot] {
                    Some(b) => gain > b.gain,
                    None => gain > 0.0,
                };
                if better {
                    best[slot] = Some(SplitCandidate {
                        feature: f,
                        threshold: midpoint(st.last, v),
                        gain,
                        left_grad: st.gl,
                        left_hess: st.hl,
                    });
                }
            }
        }
        st.gl += grad[row];
        st.hl += hess[row];
        st.last = v;
        st.seen = true;
    }
    best
}

/// Best split per frontier node across all features. Ties keep the lowest
/// feature index, then the lowest threshold.
fn best_splits(
    ps: &Presorted,
    grad: &[f64],
    hess: &[f64],
    row_node: &[u32],
    slot_of: &[u32],
    frontier: &[NodeStats],
    rule: &SplitRule,
) -> Vec<Option<SplitCandidate>> {
    let n_cols = ps.data.n_cols;
    let scan = |f| scan_feature(ps, f, grad, hess, row_node, slot_of, frontier, rule);
    let per_feature: Vec<Vec<Option<SplitCandidate>>> = if ps.data.n_rows * n_cols >= PARALLEL_CELLS {
        (0..n_cols).into_par_iter().map(scan).collect()
    } else {
        (0..n_cols).map(scan).collect()
    };
    let mut best = vec![None; frontier.len()];
    for feature_best in per_feature {
        for (slot, cand) in feature_best.into_iter().enumerate() {
            if let Some(c) = cand {
                let replace = match best[slot] {
                    Some(SplitCandidate { gain, .. }) => c.gain > gain,
                    None => true,
                };
                if replace {
                    best[slot] = Some(c);
                }
            }
        }
    }
    best
}

/// Exact greedy search for the best split of the node holding every row of
/// `data`, under `params`' regularization. `None` when no split has
/// positive gain.
pub fn find_best_split(
    data: &Dataset,
    grad: &[f64],
    hess: &[f64],
    params: &TrainParams,
) -> Option<SplitCandidate> {
    let ps = Presorted::new(data);
    let row_node = vec![0u32; data.n_rows];
    let stats = NodeStats {
        grad: grad.iter().sum(),
        hess: hess.iter().sum(),
    };
    best_splits(&ps, grad, hess, &row_node, &[0], &[stats], &SplitRule::from(params))[0]
}

struct BuildNode {
    stats: NodeStats,
    split: Option<(SplitCandidate, u32, u32)>,
}

/// Grows one regression tree level by level. Rows with `row_node == NO_NODE`
/// are excluded (subsampled out).
fn build_tree(
    ps: &Presorted,
    grad: &[f64],
    hess: &[f64],
    mut row_node: Vec<u32>,
    params: &TrainParams,
) -> TreeNode {
    let rule = SplitRule::from(params);
    let mut root = NodeStats { grad: 0.0, hess: 0.0 };
    for (r, &n) in row_node.iter().enumerate() {
        if n != NO_NODE {
            root.grad += grad[r];
            root.hess += hess[r];
        }
    }
    let mut nodes = vec![BuildNode { stats: root, split: None }];
    let mut frontier: Vec<u32> = vec![0];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot_of = vec![NO_NODE; nodes.len()];
        for (slot, &id) in frontier.iter().enumerate() {
            slot_of[id as usize] = slot as u32;
        }
        let stats: Vec<NodeStats> = frontier.iter().map(|&id| nodes[id as usize].stats).collect();
        let best = best_splits(ps, grad, hess, &row_node, &slot_of, &stats, &rule);

        let mut next = Vec::new();
        // parent id -> (feature, threshold, left id, right id)
        let mut routing: Vec<Option<(usize, f64, u32, u32)>> = vec![None; nodes.len()];
        for (slot, cand) in best.into_iter().enumerate() {
            let Some(c) = cand else { continue };
            let parent = frontier[slot];
            let left = nodes.len() as u32;
            let right = left + 1;
            let zero = NodeStats { grad: 0.0, hess: 0.0 };
            nodes.push(BuildNode { stats: zero, split: None });
            nodes.push(BuildNode { stats: zero, split: None });
            nodes[parent as usize].split = Some((c, left, right));
            routing[parent as usize] = Some((c.feature, c.threshold, left, right));
            next.push(left);
            next.push(right);
        }
        if next.is_empty() {
            break;
        }
        // route rows and re-sum child statistics in row order
        for (r, node) in row_node.iter_mut().enumerate() {
            if *node == NO_NODE {
                continue;
            }
            if let Some((f, thr, l, rt)) = routing[*node as usize] {
                let child = if ps.columns[f][r] < thr { l } else { rt };
                *node = child;
                let s = &mut nodes[child as usize].stats;
                s.grad += grad[r];
                s.hess += hess[r];
            }
        }
        frontier = next;
    }

    let lr = params.learning_rate;
    let lambda = params.lambda_l2;
    fn assemble(nodes: &[BuildNode], id: u32, lr: f64, lambda: f64) -> TreeNode {
        let n = &nodes[id as usize];
        match n.split {
            Some((c, l, r)) => TreeNode::Split {
                feature: c.feature,
                threshold: c.threshold,
                gain: c.gain,
                left: Box::new(assemble(nodes, l, lr, lambda)),
                right: Box::new(assemble(nodes, r, lr, lambda)),
            },
            None => TreeNode::Leaf {
                value: -lr * n.stats.grad / (n.stats.hess + lambda),
            },
        }
    }
    assemble(&nodes, 0, lr, lambda)
}

fn mean_log_loss(margins: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let m = &margins[i * k..(i + 1) * k];
        let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - m[y];
    }
    total / labels.len() as f64
}

/// Trains a softmax GBDT. Deterministic for a given dataset and params.
pub fn train(data: &Dataset, params: &TrainParams) -> Result<(GbdtModel, TrainReport)> {
    params.validate()?;
    let k = data.class_labels.len();
    if k < 2 {
        return Err(Error::Data("need at least two classes".into()));
    }
    let counts = data.class_counts();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(data.class_labels[missing].clone()));
    }
    if data.n_rows < k {
        return Err(Error::Data(format!("{} rows for {k} classes", data.n_rows)));
    }
    if let Some(i) = data.features.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite feature at row {} column {}",
            i / data.n_cols.max(1),
            i % data.n_cols.max(1)
        )));
    }

    let n = data.n_rows;
    let base_score = 0.0;
    let ps = Presorted::new(data);
    let mut margins = vec![base_score; n * k];
    let mut grad = vec![vec![0.0; n]; k];
    let mut hess = vec![vec![0.0; n]; k];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let initial_log_loss = mean_log_loss(&margins, &data.labels, k);
    let mut log_loss = Vec::with_capacity(params.n_rounds);
    let mut rounds = Vec::with_capacity(params.n_rounds);

    let mut p = vec![0.0; k];
    for _ in 0..params.n_rounds {
        for i in 0..n {
            p.copy_from_slice(&margins[i * k..(i + 1) * k]);
            softmax_in_place(&mut p);
            for c in 0..k {
                let y = if data.labels[i] == c { 1.0 } else { 0.0 };
                grad[c][i] = p[c] - y;
                hess[c][i] = (2.0 * p[c] * (1.0 - p[c])).max(HESSIAN_FLOOR);
            }
        }
        let row_node: Vec<u32> = if params.subsample < 1.0 {
            let mut mask: Vec<u32> = (0..n)
                .map(|_| if rng.random::<f64>() < params.subsample { 0 } else { NO_NODE })
                .collect();
            if mask.iter().all(|&m| m == NO_NODE) {
                mask[rng.random_range(0..n)] = 0;
            }
            mask
        } else {
            vec![0; n]
        };

        let trees: Vec<TreeNode> = (0..k)
            .map(|c| build_tree(&ps, &grad[c], &hess[c], row_node.clone(), params))
            .collect();
        for i in 0..n {
            let x = data.row(i);
            for (c, tree) in trees.iter().enumerate() {
                margins[i * k + c] += tree.eval(x);
            }
        }
        log_loss.push(mean_log_loss(&margins, &data.labels, k));
        rounds.push(trees);
    }

    let model = GbdtModel {
        n_classes: k,
        class_labels: data.class_labels.clone(),
        learning_rate: params.learning_rate,
        base_score,
        feature_count: data.n_cols,
        rounds,
        train_log_loss: log_loss.clone(),
    };
    let report = TrainReport {
        rows: n,
        class_counts: counts,
        initial_log_loss,
        log_loss,
    };
    Ok((model, report))
}
