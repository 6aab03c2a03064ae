use std::ffi::{CStr, CString};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::Arc;

use nsd_core::config::PipelineConfig;
use nsd_core::detector::{BundleManifest, DetectorBundle, Layer};
use nsd_core::gbdt::{train, write_model, Dataset, GbdtModel, TrainParams};
use nsd_core::pipeline::run_capture;
use nsd_core::postprocess::SensorTrace;
use nsd_core::traffic::PacketRecord;
use nsd_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn ip(a: IpAddr) -> NsdIp {
    let mut octets = [0; 16];
    match a {
        IpAddr::V4(v4) => {
            octets[..4].copy_from_slice(&v4.octets());
            NsdIp { family: 4, octets }
        }
        IpAddr::V6(v6) => NsdIp {
            family: 6,
            octets: v6.octets(),
        },
    }
}

/// A small trained L1 model (size feature splits CG from NRT) plus
/// constant L2 models, written under `dir`.
fn write_bundle(dir: &Path) -> (PathBuf, DetectorBundle) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30 {
        let mut r = vec![0.0; 60];
        r[2] = (i % 3) as f64 * 0.001;
        rows.push(r);
        labels.push(i % 3);
    }
    let data = Dataset::new(rows, labels, Layer::L1.class_order()).unwrap();
    let params = TrainParams {
        n_rounds: 5,
        ..Default::default()
    };
    let (l1, _) = train(&data, &params).unwrap();
    let rt = GbdtModel::constant(Layer::L2rt.class_order(), 60);
    let nrt = GbdtModel::constant(Layer::L2nrt.class_order(), 60);
    write_model(&dir.join("l1.json"), &l1).unwrap();
    write_model(&dir.join("rt.json"), &rt).unwrap();
    write_model(&dir.join("nrt.json"), &nrt).unwrap();
    let path = dir.join("bundle.json");
    BundleManifest::new("l1.json".into(), "rt.json".into(), "nrt.json".into())
        .write(&path)
        .unwrap();
    (path, DetectorBundle::new(l1, rt, nrt).unwrap())
}

fn flow(steps: u64) -> Vec<PacketRecord> {
    let local: IpAddr = "192.168.50.10".parse().unwrap();
    let remote: IpAddr = "203.0.113.9".parse().unwrap();
    (0..steps * 10)
        .map(|i| {
            let t = i * 50_000;
            if i % 2 == 0 {
                PacketRecord::udp(t, local, remote, 1000, 5000, 443)
            } else {
                PacketRecord::tcp(t, remote, local, 1400, 443, 5000)
            }
        })
        .collect()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(nsd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn errors_carry_status_and_message() {
    let mut m: *mut NsdModel = ptr::null_mut();
    let missing = cstr(Path::new("/nonexistent/model.json"));
    let s = unsafe { nsd_model_load(missing.as_ptr(), &mut m) };
    assert_eq!(s, NsdStatus::Io);
    assert!(m.is_null());
    let msg = unsafe { CStr::from_ptr(nsd_last_error_message()) };
    assert!(msg.to_str().unwrap().contains("/nonexistent/model.json"));

    let s = unsafe { nsd_model_load(ptr::null(), &mut m) };
    assert_eq!(s, NsdStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n_classes\":1}").unwrap();
    let s = unsafe { nsd_model_load(cstr(&bad).as_ptr(), &mut m) };
    assert_eq!(s, NsdStatus::Model);

    unsafe {
        nsd_model_free(ptr::null_mut());
        nsd_detector_free(ptr::null_mut());
    }
}

#[test]
fn model_predictions_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bundle) = write_bundle(dir.path());
    let mut m: *mut NsdModel = ptr::null_mut();
    assert_eq!(
        unsafe { nsd_model_load(cstr(&dir.path().join("l1.json")).as_ptr(), &mut m) },
        NsdStatus::Ok
    );
    assert_eq!(unsafe { nsd_model_n_classes(m) }, 3);
    assert_eq!(unsafe { nsd_model_feature_count(m) }, 60);
    let mut x = vec![0.0; 60];
    x[2] = 0.002;
    let mut out = [0.0; 3];
    let s = unsafe { nsd_model_predict_proba(m, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, NsdStatus::Ok);
    assert_eq!(out.to_vec(), bundle.model(Layer::L1).predict_proba(&x).unwrap());

    let s = unsafe { nsd_model_predict_proba(m, x.as_ptr(), 59, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, NsdStatus::Shape);
    let s = unsafe { nsd_model_predict_proba(m, x.as_ptr(), 60, out.as_mut_ptr(), 2) };
    assert_eq!(s, NsdStatus::InvalidArgument);
    unsafe { nsd_model_free(m) };
}

#[test]
fn detector_stream_matches_core_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle_path, bundle) = write_bundle(dir.path());
    let packets = flow(12);
    let expected = run_capture(&packets, &PipelineConfig::default(), Arc::new(bundle), SensorTrace::new()).unwrap();
    assert!(!expected.is_empty());

    let mut det: *mut NsdDetector = ptr::null_mut();
    let s = unsafe { nsd_detector_new(cstr(&bundle_path).as_ptr(), ptr::null(), &mut det) };
    assert_eq!(s, NsdStatus::Ok);
    for p in &packets {
        let pkt = NsdPacket {
            timestamp_us: p.timestamp_us,
            src: ip(p.src_ip),
            dst: ip(p.dst_ip),
            size_bytes: p.size_bytes,
            protocol: if p.src_port == Some(5000) { 17 } else { 6 },
            src_port: p.src_port.unwrap_or(0),
            dst_port: p.dst_port.unwrap_or(0),
        };
        assert_eq!(unsafe { nsd_detector_push_packet(det, &pkt) }, NsdStatus::Ok);
    }
    assert_eq!(unsafe { nsd_detector_flush(det) }, NsdStatus::Ok);

    let mut got = Vec::new();
    loop {
        let mut pred = NsdPrediction::default();
        let mut available = false;
        assert_eq!(unsafe { nsd_detector_poll(det, &mut pred, &mut available) }, NsdStatus::Ok);
        if !available {
            break;
        }
        got.push(pred);
    }
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!(g.step, e.step);
        assert_eq!(g.remote, ip(e.key.remote));
        assert_eq!(g.raw_l1, e.raw.l1 as i8);
        assert_eq!(g.fused_l2, e.fused.l2.map_or(-1, |s| s as i8));
        assert_eq!(g.l1_probs.to_vec(), e.raw.l1_probs);
        assert_eq!(g.multi_label, e.multi_label.as_array());
    }
    unsafe { nsd_detector_free(det) };
}

#[test]
fn detector_rejects_bad_bundle_and_family() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle_path, _) = write_bundle(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"window_steps":5}"#).unwrap();
    let mut det: *mut NsdDetector = ptr::null_mut();
    let s = unsafe { nsd_detector_new(cstr(&bundle_path).as_ptr(), cstr(&cfg).as_ptr(), &mut det) };
    assert_eq!(s, NsdStatus::Model);

    let s = unsafe { nsd_detector_new(cstr(&bundle_path).as_ptr(), ptr::null(), &mut det) };
    assert_eq!(s, NsdStatus::Ok);
    let mut pkt = NsdPacket {
        timestamp_us: 0,
        src: NsdIp::default(),
        dst: NsdIp::default(),
        size_bytes: 1,
        protocol: 17,
        src_port: 1,
        dst_port: 2,
    };
    pkt.src.family = 5;
    assert_eq!(unsafe { nsd_detector_push_packet(det, &pkt) }, NsdStatus::InvalidArgument);
    assert_eq!(unsafe { nsd_detector_set_sensors(det, 3, true, false) }, NsdStatus::Ok);
    unsafe { nsd_detector_free(det) };
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/nsd.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "nsd_version",
        "nsd_last_error_message",
        "nsd_model_load",
        "nsd_model_predict_proba",
        "nsd_model_free",
        "nsd_detector_new",
        "nsd_detector_push_packet",
        "nsd_detector_set_sensors",
        "nsd_detector_flush",
        "nsd_detector_poll",
        "nsd_detector_free",
        "typedef struct NsdDetector NsdDetector;",
        "NSD_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs a C client against the static library, if a C
/// compiler and the archive are available.
#[test]
fn c_client_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let archive = profile_dir.join("libnsd_ffi.a");
    if !archive.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no cc or {} missing", archive.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path());
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "nsd.h"
int main(int argc, char **argv) {
    NsdModel *m = NULL;
    if (nsd_model_load(argv[1], &m) != NSD_STATUS_OK) {
        fprintf(stderr, "%s\n", nsd_last_error_message());
        return 1;
    }
    double x[60] = {0};
    double p[3];
    if (nsd_model_predict_proba(m, x, 60, p, 3) != NSD_STATUS_OK) return 2;
    printf("%zu %.3f\n", nsd_model_n_classes(m), p[0] + p[1] + p[2]);
    nsd_model_free(m);
    NsdModel *missing = NULL;
    return nsd_model_load("/nonexistent", &missing) == NSD_STATUS_IO ? 0 : 3;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("client");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to build");
    let out = Command::new(&bin).arg(dir.path().join("l1.json")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "3 1.000");
}
