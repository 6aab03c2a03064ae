use std::path::{Path, PathBuf};
use std::process::Command;

use nsd_core::cli::load_packets;
use nsd_core::detector::{BundleManifest, Layer};
use nsd_core::eval::Evaluation;
use nsd_core::gbdt::{read_model, write_model, GbdtModel};
use nsd_core::synth::Manifest;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn nsd(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_nsd")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn flows(profiles: &[&str], bands: &[&str], duration_s: f64, count: usize) -> String {
    let items: Vec<String> = profiles
        .iter()
        .flat_map(|p| {
            bands.iter().map(move |b| {
                format!(r#"{{"profile":"{p}","band":"{b}","duration_s":{duration_s},"count":{count}}}"#)
            })
        })
        .collect();
    items.join(",")
}

fn generate(dir: &Path, name: &str, spec: &str) -> PathBuf {
    let spec = write(&dir.join(format!("{name}.json")), spec);
    let out = dir.join(name);
    let r = nsd(&["generate", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out.join("manifest.json")
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let one = generate(dir.path(), "one", r#"{"seed":1,"flows":[{"profile":"CG","duration_s":3}]}"#);
    let m = Manifest::load(&one).unwrap();
    assert_eq!((m.rows.len(), m.captures().len()), (1, 1));

    let all = ["CG", "MG", "VC", "AC", "FD", "VS"];
    let spec = format!(
        r#"{{"seed":3,"flows":[{}],"profiles":{{"XG":{}}}}}"#,
        flows(&[&all[..], &["XG"]].concat(), &["2.4GHz", "5GHz", "6GHz"], 2.0, 1),
        r#"{"l1":"CG","l2":null,"ul_rate_pps":40,"dl_rate_pps":600,
            "ul_size":{"mean":90,"sd":10,"min":40,"max":200},
            "dl_size":{"mean":1100,"sd":100,"min":200,"max":1400},
            "burstiness":0.2,"protocol":"udp"}"#
    );
    let a = generate(dir.path(), "a", &spec);
    assert_eq!(Manifest::load(&a).unwrap().rows.len(), 21);
    let b = generate(dir.path(), "b", &spec);
    assert_eq!(dir_bytes(a.parent().unwrap()), dir_bytes(b.parent().unwrap()));

    let reseeded = dir.path().join("c");
    let spec_path = dir.path().join("a.json");
    assert_eq!(nsd(&["generate", "--spec", s(&spec_path), "--out", s(&reseeded), "--seed", "4"]).code, 0);
    assert_ne!(dir_bytes(a.parent().unwrap()), dir_bytes(&reseeded));
}

#[test]
fn spec_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(&dir.path().join("bad.json"), r#"{"flows":[{"profile":"CG"}]}"#);
    let r = nsd(&["generate", "--spec", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 2, "{}", r.stderr);

    let unknown = write(&dir.path().join("u.json"), r#"{"flows":[{"profile":"ZZ","duration_s":2}]}"#);
    assert_eq!(nsd(&["generate", "--spec", s(&unknown), "--out", s(&dir.path().join("o"))]).code, 2);

    let cfg = write(&dir.path().join("cfg.json"), r#"{"step_ms":0}"#);
    let m = generate(dir.path(), "g", r#"{"flows":[{"profile":"CG","duration_s":4}]}"#);
    let r = nsd(&["--config", s(&cfg), "train", "--manifest", s(&m), "--layer", "l1", "--out", "x.json"]);
    assert_eq!(r.code, 2, "{}", r.stderr);

    let r = nsd(&[
        "split", "--manifest", s(&m), "--train-out", "a.json", "--test-out", "b.json", "--fraction", "1.5",
    ]);
    assert_eq!(r.code, 2);
}

#[test]
fn missing_class_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(r#"{{"flows":[{}]}}"#, flows(&["CG", "FD", "VS"], &["5GHz"], 4.0, 1));
    let m = generate(dir.path(), "g", &spec);
    let r = nsd(&["train", "--manifest", s(&m), "--layer", "l1", "--out", s(&dir.path().join("l1.json"))]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("RT"), "{}", r.stderr);
    let r = nsd(&["train", "--manifest", s(&m), "--layer", "l2rt", "--out", s(&dir.path().join("rt.json"))]);
    assert_eq!(r.code, 3);
}

/// Windows a single-flow capture yields: one per step once six steps have
/// passed, for a flow that never idles long enough to be dropped.
fn window_count(capture: &Path) -> usize {
    let p = load_packets(capture).unwrap();
    let steps = (p.last().unwrap().timestamp_us - p[0].timestamp_us) / 500_000 + 1;
    (steps as usize).saturating_sub(5)
}

#[test]
fn train_detect_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let all = ["CG", "MG", "VC", "AC", "FD", "VS"];
    let spec = format!(
        r#"{{"seed":21,"flows":[{},{{"profile":"CG","duration_s":2.0}}]}}"#,
        flows(&all, &["2.4GHz", "6GHz"], 6.0, 2)
    );
    let m = generate(d, "data", &spec);
    let manifest = Manifest::load(&m).unwrap();

    let mut rows = Vec::new();
    for layer in ["l1", "l2rt", "l2nrt"] {
        let out = d.join(format!("{layer}.json"));
        let r = nsd(&["train", "--manifest", s(&m), "--layer", layer, "--out", s(&out)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
        let curve = read_model(&out).unwrap().train_log_loss;
        assert!(curve.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        rows.push(summary["rows"].as_u64().unwrap() as usize);
    }
    assert_eq!(read_model(&d.join("l1.json")).unwrap().class_labels, ["CG", "RT", "NRT"]);
    let rt_windows: usize = manifest
        .rows
        .iter()
        .filter(|r| r.l1.as_str() == "RT")
        .map(|r| window_count(&manifest.capture_path(r)))
        .sum();
    assert_eq!(rows[1], rt_windows);

    let bundle = d.join("bundle.json");
    let r = nsd(&[
        "bundle", "--l1", s(&d.join("l1.json")), "--l2rt", s(&d.join("l2rt.json")), "--l2nrt",
        s(&d.join("l2nrt.json")), "--out", s(&bundle),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    // the 2 s capture never passes the window gate
    let short = manifest.rows.iter().find(|r| r.duration_s == 2.0).unwrap();
    let r = nsd(&["detect", "--capture", s(&manifest.capture_path(short)), "--bundle", s(&bundle)]);
    assert_eq!((r.code, r.stdout.as_str()), (0, ""));

    let pred = d.join("pred.jsonl");
    let mut args = vec!["detect", "--bundle", s(&bundle), "--out", s(&pred), "--capture"];
    let caps = manifest.capture_paths();
    args.extend(caps.iter().map(|c| s(c)));
    assert_eq!(nsd(&args).code, 0);

    let report = d.join("report.json");
    let r = nsd(&["evaluate", "--pred", s(&pred), "--manifest", s(&m), "--json", s(&report)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let ev: Evaluation = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    // layers x (all + two bands)
    assert_eq!(ev.reports.len(), 9);
    for rep in &ev.reports {
        assert_eq!(rep.accuracy, 1.0, "{:?} {}", rep.layer, rep.slice);
    }
    let l2rt_total: u64 = ev.reports.iter().find(|r| r.layer == Some(Layer::L2rt) && r.slice == "all").unwrap().total;
    let rt_records = std::fs::read_to_string(&pred)
        .unwrap()
        .lines()
        .filter(|l| l.contains(r#""fused":{"l1":"RT""#))
        .count() as u64;
    assert_eq!(l2rt_total, rt_records);

    for line in std::fs::read_to_string(&pred).unwrap().lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        if r["raw"]["l1"] == "CG" {
            assert_eq!(r["multi_label"], serde_json::json!({"cg": true, "rt": false, "nrt": false}));
        }
    }

    let mixed = generate(
        d,
        "mixed",
        r#"{"seed":8,"mixed":[{"name":"cg_vs","duration_s":12,"flows":[{"profile":"CG"},{"profile":"VS"}]}]}"#,
    );
    let mixed = Manifest::load(&mixed).unwrap();
    let r = nsd(&["detect", "--bundle", s(&bundle), "--capture", s(&mixed.capture_paths()[0])]);
    assert_eq!(r.code, 0);
    let recs: Vec<serde_json::Value> = r.stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut both = 0;
    for step in recs.iter().map(|r| r["step"].as_u64().unwrap()) {
        let at: Vec<_> = recs.iter().filter(|r| r["step"] == step).collect();
        let correct = |l1: &str| at.iter().any(|r| r["raw"]["l1"] == l1);
        if at.len() == 2 && correct("CG") && correct("NRT") {
            both += 1;
            assert_eq!(at[0]["multi_label"], serde_json::json!({"cg": true, "rt": false, "nrt": true}));
        }
    }
    assert!(both > 0);

    let strict = write(&d.join("t.json"), r#"{"l1":0.99}"#);
    let r = nsd(&["evaluate", "--pred", s(&pred), "--manifest", s(&m), "--thresholds", s(&strict)]);
    assert_eq!(r.code, 0);

    // an uninformative L1 model fails the same threshold
    let flat = d.join("flat.json");
    write_model(&flat, &GbdtModel::constant(Layer::L1.class_order(), 60)).unwrap();
    let flat_bundle = d.join("flat_bundle.json");
    BundleManifest::new(flat, d.join("l2rt.json"), d.join("l2nrt.json")).write(&flat_bundle).unwrap();
    let flat_pred = d.join("flat.jsonl");
    let mut args = vec!["detect", "--bundle", s(&flat_bundle), "--out", s(&flat_pred), "--capture"];
    args.extend(caps.iter().map(|c| s(c)));
    assert_eq!(nsd(&args).code, 0);
    let r = nsd(&["evaluate", "--pred", s(&flat_pred), "--manifest", s(&m), "--thresholds", s(&strict)]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stderr.contains("l1 accuracy"));
}

#[test]
fn mismatched_bundle_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, layer) in [("l1", Layer::L1), ("rt", Layer::L2rt), ("nrt", Layer::L2nrt)] {
        write_model(&d.join(format!("{name}.json")), &GbdtModel::constant(layer.class_order(), 60)).unwrap();
    }
    let r = nsd(&[
        "bundle", "--l1", s(&d.join("rt.json")), "--l2rt", s(&d.join("l1.json")), "--l2nrt",
        s(&d.join("nrt.json")), "--out", s(&d.join("b.json")),
    ]);
    assert_eq!(r.code, 4, "{}", r.stderr);

    BundleManifest::new("rt.json".into(), "l1.json".into(), "nrt.json".into()).write(&d.join("b.json")).unwrap();
    let m = generate(d, "g", r#"{"flows":[{"profile":"CG","duration_s":4}]}"#);
    let cap = Manifest::load(&m).unwrap().capture_paths()[0].clone();
    let r = nsd(&["detect", "--capture", s(&cap), "--bundle", s(&d.join("b.json"))]);
    assert_eq!(r.code, 4, "{}", r.stderr);
}
