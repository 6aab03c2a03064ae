//! Classification metrics and per-slice reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::{L1Class, Layer};
use crate::error::{Error, Result};
use crate::pipeline::DetectRecord;
use crate::postprocess::Labeled;
use crate::synth::Manifest;

/// Counts indexed `[true][predicted]` in a fixed class order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_order: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_order: Vec<String>) -> Self {
        let k = class_order.len();
        ConfusionMatrix {
            class_order,
            counts: vec![vec![0; k]; k],
        }
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.class_order
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Data(format!("label {label:?} not in {:?}", self.class_order)))
    }

    pub fn add(&mut self, truth: &str, predicted: &str) -> Result<()> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Elementwise sum; both matrices must share a class order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_order != other.class_order {
            return Err(Error::Data("cannot merge matrices with different class orders".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn report(&self, slice: &str) -> Result<ClassificationReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyReport);
        }
        let k = self.class_order.len();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let classes = (0..k)
            .map(|i| {
                let tp = self.counts[i][i];
                let support: u64 = self.counts[i].iter().sum();
                let predicted: u64 = (0..k).map(|t| self.counts[t][i]).sum();
                if support == 0 {
                    log::warn!("slice {slice}: class {} has no support", self.class_order[i]);
                }
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassRow {
                    label: self.class_order[i].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        Ok(ClassificationReport {
            layer: None,
            slice: slice.to_string(),
            class_order: self.class_order.clone(),
            classes,
            accuracy: ratio(self.trace(), total),
            total,
            confusion: self.counts.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<Layer>,
    pub slice: String,
    pub class_order: Vec<String>,
    pub classes: Vec<ClassRow>,
    pub accuracy: f64,
    pub total: u64,
    pub confusion: Vec<Vec<u64>>,
}

/// A scored prediction with the slice tags it belongs to besides "all".
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub truth: String,
    pub predicted: String,
    pub tags: Vec<String>,
}

/// Report for "all" followed by one per distinct tag, in tag order.
pub fn score(class_order: &[String], predictions: &[Prediction]) -> Result<Vec<ClassificationReport>> {
    if predictions.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut all = ConfusionMatrix::new(class_order.to_vec());
    let mut slices: BTreeMap<&str, ConfusionMatrix> = BTreeMap::new();
    for p in predictions {
        all.add(&p.truth, &p.predicted)?;
        for tag in &p.tags {
            slices
                .entry(tag)
                .or_insert_with(|| ConfusionMatrix::new(class_order.to_vec()))
                .add(&p.truth, &p.predicted)?;
        }
    }
    let mut out = vec![all.report("all")?];
    for (tag, m) in slices {
        out.push(m.report(tag)?);
    }
    Ok(out)
}

pub fn render_table(r: &ClassificationReport) -> String {
    let mut s = String::new();
    let title = match r.layer {
        Some(l) => format!("[{} / {}]", l.as_str(), r.slice),
        None => format!("[{}]", r.slice),
    };
    writeln!(s, "{title}").unwrap();
    writeln!(s, "{:<10}{:>10}{:>10}{:>10}{:>10}", "class", "precision", "recall", "f1-score", "support").unwrap();
    for c in &r.classes {
        writeln!(
            s,
            "{:<10}{:>10.2}{:>10.2}{:>10.2}{:>10}",
            c.label, c.precision, c.recall, c.f1, c.support
        )
        .unwrap();
    }
    writeln!(s, "{:<10}{:>10}{:>10}{:>10.4}{:>10}", "accuracy", "", "", r.accuracy, r.total).unwrap();
    write!(s, "confusion (rows true, cols predicted; {}):", r.class_order.join(" ")).unwrap();
    for row in &r.confusion {
        s.push_str("\n ");
        for v in row {
            write!(s, " {v:>7}").unwrap();
        }
    }
    s.push('\n');
    s
}

/// Which post-processing stage of the detect output to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Voted,
    Fused,
}

impl Stage {
    fn pick(self, r: &DetectRecord) -> Labeled {
        match self {
            Stage::Raw => Labeled {
                l1: r.raw.l1,
                l2: r.raw.l2,
            },
            Stage::Voted => r.voted,
            Stage::Fused => r.fused,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stage: Stage,
    pub reports: Vec<ClassificationReport>,
    /// Records whose conversation is not in the manifest.
    pub unresolved: usize,
    /// Per L2 layer: records of the parent class that were routed elsewhere
    /// or carried no sub-class.
    pub l2_excluded: BTreeMap<String, usize>,
    pub thresholds: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Scores detect records against manifest labels. L1 covers every resolved
/// record; an L2 layer covers records whose true and emitted L1 are both its
/// parent class.
pub fn evaluate(
    records: &[DetectRecord],
    manifest: &Manifest,
    stage: Stage,
    thresholds: &BTreeMap<String, f64>,
) -> Result<Evaluation> {
    let (by_key, dups) = manifest.by_key();
    if dups > 0 {
        log::warn!("{dups} duplicate conversation keys in manifest; first occurrence wins");
    }
    let mut unresolved = 0;
    let mut preds: BTreeMap<Layer, Vec<Prediction>> = BTreeMap::new();
    let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let Some(row) = by_key.get(&r.key) else {
            unresolved += 1;
            continue;
        };
        let got = stage.pick(r);
        let tags = vec![format!("band={}", row.band)];
        preds.entry(Layer::L1).or_default().push(Prediction {
            truth: row.l1.as_str().into(),
            predicted: got.l1.as_str().into(),
            tags: tags.clone(),
        });
        for layer in [Layer::L2rt, Layer::L2nrt] {
            let parent = layer.parent().expect("L2 layer");
            if row.l1 != parent {
                continue;
            }
            match (got.l1 == parent, row.l2, got.l2) {
                (true, Some(t), Some(p)) => preds.entry(layer).or_default().push(Prediction {
                    truth: t.as_str().into(),
                    predicted: p.as_str().into(),
                    tags: tags.clone(),
                }),
                _ => *excluded.entry(layer.as_str().into()).or_default() += 1,
            }
        }
    }
    if unresolved > 0 {
        log::warn!("{unresolved} records have no manifest entry and were excluded");
    }

    let mut reports = Vec::new();
    for layer in Layer::ALL {
        let Some(p) = preds.get(&layer) else {
            log::warn!("no {} predictions to score", layer.as_str());
            continue;
        };
        for mut rep in score(&layer.class_order(), p)? {
            rep.layer = Some(layer);
            reports.push(rep);
        }
    }
    if reports.is_empty() {
        return Err(Error::EmptyReport);
    }

    let mut failures = Vec::new();
    for (layer, min) in thresholds {
        let layer: Layer = layer.parse()?;
        let acc = reports
            .iter()
            .find(|r| r.layer == Some(layer) && r.slice == "all")
            .map(|r| r.accuracy);
        match acc {
            Some(a) if a >= *min => {}
            Some(a) => failures.push(format!("{} accuracy {a:.4} < {min}", layer.as_str())),
            None => failures.push(format!("{} has no predictions", layer.as_str())),
        }
    }
    Ok(Evaluation {
        stage,
        reports,
        unresolved,
        l2_excluded: excluded,
        thresholds: thresholds.clone(),
        passed: failures.is_empty(),
        failures,
    })
}

/// Number of reports `evaluate` yields when every layer has predictions in
/// every band of the manifest.
pub fn expected_report_count(manifest: &Manifest) -> usize {
    let bands: BTreeSet<_> = manifest.rows.iter().map(|r| r.band).collect();
    Layer::ALL.len() * (1 + bands.len())
}

/// True and emitted L1 for each record, for quick checks.
pub fn l1_pairs(records: &[DetectRecord], manifest: &Manifest, stage: Stage) -> Vec<(L1Class, L1Class)> {
    let (by_key, _) = manifest.by_key();
    records
        .iter()
        .filter_map(|r| by_key.get(&r.key).map(|row| (row.l1, stage.pick(r).l1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn order(n: usize) -> Vec<String> {
        ["A", "B", "C"][..n].iter().map(|s| s.to_string()).collect()
    }

    fn p(t: &str, q: &str) -> Prediction {
        Prediction {
            truth: t.into(),
            predicted: q.into(),
            tags: vec![],
        }
    }

    #[test]
    fn hand_counted_two_class() {
        let r = &score(&order(2), &[p("A", "A"), p("A", "B"), p("B", "B"), p("B", "B")]).unwrap()[0];
        assert_eq!(r.classes[0].precision, 1.0);
        assert_eq!(r.classes[0].recall, 0.5);
        assert_eq!(r.classes[1].precision, 2.0 / 3.0);
        assert_eq!(r.classes[1].recall, 1.0);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert!((r.classes[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_zero_support() {
        let r = &score(&order(3), &[p("A", "A"), p("B", "B")]).unwrap()[0];
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.classes[0].f1, r.classes[1].f1), (1.0, 1.0));
        assert_eq!(r.classes[2].support, 0);
        assert_eq!((r.classes[2].precision, r.classes[2].recall, r.classes[2].f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_and_unknown_labels() {
        assert!(matches!(score(&order(2), &[]), Err(Error::EmptyReport)));
        assert!(matches!(score(&order(2), &[p("A", "Z")]), Err(Error::Data(_))));
    }

    #[test]
    fn table_has_reference_rows() {
        let o: Vec<String> = Layer::L1.class_order();
        let mut pr = Prediction {
            truth: "CG".into(),
            predicted: "CG".into(),
            tags: vec!["band=2.4GHz".into()],
        };
        let mut preds = vec![pr.clone()];
        pr.truth = "NRT".into();
        preds.push(pr);
        let reps = score(&o, &preds).unwrap();
        assert_eq!(reps[1].slice, "band=2.4GHz");
        let text = render_table(&reps[1]);
        let rows: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap_or("")).collect();
        assert_eq!(&rows[1..6], &["class", "CG", "RT", "NRT", "accuracy"]);
    }

    fn arb_preds() -> impl Strategy<Value = Vec<(usize, usize)>> {
        proptest::collection::vec((0usize..3, 0usize..3), 1..60)
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(preds in arb_preds(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let o = order(3);
            let mk = |v: &[(usize, usize)]| v.iter().map(|(t, q)| p(&o[*t], &o[*q])).collect::<Vec<_>>();
            let base = score(&o, &mk(&preds)).unwrap();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(base, score(&o, &mk(&shuffled)).unwrap());
        }

        #[test]
        fn merge_equals_concatenation(a in arb_preds(), b in arb_preds()) {
            let o = order(3);
            let mat = |v: &[(usize, usize)]| {
                let mut m = ConfusionMatrix::new(o.clone());
                for (t, q) in v { m.add(&o[*t], &o[*q]).unwrap(); }
                m
            };
            let mut merged = mat(&a);
            merged.merge(&mat(&b)).unwrap();
            let both: Vec<_> = a.iter().chain(&b).copied().collect();
            prop_assert_eq!(&merged, &mat(&both));
            let r = merged.report("x").unwrap();
            for (i, row) in r.classes.iter().enumerate() {
                prop_assert_eq!(row.support, r.confusion[i].iter().sum::<u64>());
                prop_assert!((0.0..=1.0).contains(&row.f1));
            }
            prop_assert_eq!(r.total as usize, both.len());
        }
    }
}
