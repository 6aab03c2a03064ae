use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nsd_core::gbdt::{argmax, read_model, train, write_model, Dataset, GbdtModel, TrainParams};

fn xor_rows(points: [(f64, f64); 4]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|&(a, b)| {
            let mut r = vec![0.0; 60];
            r[0] = a;
            r[1] = b;
            r
        })
        .collect()
}

fn xor_params() -> TrainParams {
    TrainParams {
        n_rounds: 10,
        max_depth: 2,
        learning_rate: 0.3,
        min_child_weight: 0.0,
        ..Default::default()
    }
}

fn train_xor(points: [(f64, f64); 4]) -> (GbdtModel, Dataset) {
    let data = Dataset::new(xor_rows(points), vec![0, 1, 1, 0], vec!["even".into(), "odd".into()]).unwrap();
    let (m, _) = train(&data, &xor_params()).unwrap();
    (m, data)
}

fn training_accuracy(m: &GbdtModel, d: &Dataset) -> f64 {
    let hits = (0..d.n_rows()).filter(|&i| m.predict_index(d.row(i)).unwrap() == d.labels()[i]).count();
    hits as f64 / d.n_rows() as f64
}

#[test]
fn grid_xor_has_no_positive_gain_split() {
    // every axis split leaves one point of each class per side
    let (m, d) = train_xor([(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
    assert!(m.feature_importance().iter().all(|&g| g == 0.0));
    assert_eq!(training_accuracy(&m, &d), 0.5);
}

#[test]
fn skewed_xor_is_learned_at_depth_two() {
    let (m, d) = train_xor([(0.0, 0.0), (0.1, 1.0), (1.0, 0.2), (0.9, 0.9)]);
    assert_eq!(training_accuracy(&m, &d), 1.0);
    // (1, 0)-like training point keeps its label
    assert_eq!(m.predict(d.row(2)).unwrap(), "odd");
    let imp = m.feature_importance();
    assert!(imp[0] > 0.0 && imp[1] > 0.0);
    assert!(imp[2..].iter().all(|&g| g == 0.0));
}

#[test]
fn predict_agrees_with_proba_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..60).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| usize::from(r[3] > 0.4) + usize::from(r[7] > 0.7)).collect();
    let data = Dataset::new(rows, labels, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let (m, report) = train(&data, &TrainParams { n_rounds: 30, ..Default::default() }).unwrap();
    assert!(report.log_loss.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    for _ in 0..1000 {
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(-0.5..1.5)).collect();
        let p = m.predict_proba(&x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.predict_index(&x).unwrap(), argmax(&p));
    }
}

#[test]
fn same_inputs_give_identical_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train_xor([(0.0, 0.0), (0.1, 1.0), (1.0, 0.2), (0.9, 0.9)]);
    let (b, _) = train_xor([(0.0, 0.0), (0.1, 1.0), (1.0, 0.2), (0.9, 0.9)]);
    write_model(&dir.path().join("a.json"), &a).unwrap();
    write_model(&dir.path().join("b.json"), &b).unwrap();
    let bytes = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(bytes, std::fs::read(dir.path().join("b.json")).unwrap());
    assert_eq!(read_model(&dir.path().join("a.json")).unwrap(), a);
}
