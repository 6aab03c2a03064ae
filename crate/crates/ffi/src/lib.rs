//! C ABI over `nsd-core`.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free`. Every fallible call returns an [`NsdStatus`]; on
//! failure a description is available from [`nsd_last_error_message`] on the
//! same thread until the next failing call.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr, CString};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use nsd_core::config::PipelineConfig;
use nsd_core::detector::{BundleManifest, L1Class, MultiLabelOutput, SubClass};
use nsd_core::gbdt::{read_model, GbdtModel};
use nsd_core::pipeline::{DetectRecord, Pipeline, StepOutput};
use nsd_core::postprocess::SensorState;
use nsd_core::traffic::PacketRecord;
use nsd_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Data = 6,
    Model = 7,
    Shape = 8,
    Panic = 9,
}

/// IPv4 uses the first four octets; `family` is 4 or 6.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NsdIp {
    pub family: u8,
    pub octets: [u8; 16],
}

/// `protocol`: 6 TCP, 17 UDP, anything else is treated as port-less.
/// Ports are ignored for port-less protocols.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NsdPacket {
    pub timestamp_us: u64,
    pub src: NsdIp,
    pub dst: NsdIp,
    pub size_bytes: u32,
    pub protocol: u8,
    pub src_port: u16,
    pub dst_port: u16,
}

/// One classified conversation at one step. L1 codes: 0 CG, 1 RT, 2 NRT.
/// Sub-class codes: 0 MG, 1 VC, 2 AC, 3 FD, 4 VS, -1 none. Multi-label
/// flags are in the order CG, RT, NRT.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct NsdPrediction {
    pub step: u64,
    pub local: NsdIp,
    pub remote: NsdIp,
    pub raw_l1: i8,
    pub raw_l2: i8,
    pub voted_l1: i8,
    pub voted_l2: i8,
    pub fused_l1: i8,
    pub fused_l2: i8,
    pub l1_probs: [f64; 3],
    pub multi_label: [bool; 3],
    pub multi_label_final: [bool; 3],
}

impl Default for NsdIp {
    fn default() -> Self {
        NsdIp {
            family: 4,
            octets: [0; 16],
        }
    }
}

pub struct NsdModel {
    model: GbdtModel,
}

pub struct NsdDetector {
    pipeline: Pipeline,
    pending: VecDeque<DetectRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: NsdStatus, msg: impl Into<String>) -> NsdStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> NsdStatus {
    match e {
        Error::Io { .. } => NsdStatus::Io,
        Error::Parse { .. } | Error::Format(_) | Error::Json(_) => NsdStatus::Parse,
        Error::Config(_) | Error::Spec(_) => NsdStatus::Config,
        Error::Model(_) => NsdStatus::Model,
        Error::Shape { .. } => NsdStatus::Shape,
        _ => NsdStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), NsdStatus>) -> NsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NsdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(NsdStatus::Panic, "internal panic"),
    }
}

fn core_err(e: Error) -> NsdStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, NsdStatus> {
    if p.is_null() {
        return Err(fail(NsdStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NsdStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn to_ip(ip: &NsdIp) -> Result<IpAddr, NsdStatus> {
    match ip.family {
        4 => {
            let o = &ip.octets;
            Ok(IpAddr::V4(Ipv4Addr::new(o[0], o[1], o[2], o[3])))
        }
        6 => Ok(IpAddr::V6(Ipv6Addr::from(ip.octets))),
        f => Err(fail(NsdStatus::InvalidArgument, format!("address family {f}"))),
    }
}

fn from_ip(ip: IpAddr) -> NsdIp {
    let mut octets = [0; 16];
    match ip {
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

fn l1_code(c: L1Class) -> i8 {
    c as i8
}

fn l2_code(c: Option<SubClass>) -> i8 {
    c.map_or(-1, |s| s as i8)
}

fn flags(m: MultiLabelOutput) -> [bool; 3] {
    m.as_array()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nsd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nsd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nsd_model_load(path: *const c_char, out: *mut *mut NsdModel) -> NsdStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(NsdStatus::NullPointer, "out is null"));
        }
        let path = path_arg(path, "path")?;
        let model = read_model(&path).map_err(core_err)?;
        *out = Box::into_raw(Box::new(NsdModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`nsd_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn nsd_model_n_classes(model: *const NsdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_classes)
}

/// # Safety
/// `model` must come from [`nsd_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn nsd_model_feature_count(model: *const NsdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.feature_count)
}

/// Writes `n_classes` probabilities to `out`.
///
/// # Safety
/// `x` must point to `x_len` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nsd_model_predict_proba(
    model: *const NsdModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> NsdStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| fail(NsdStatus::NullPointer, "model is null"))?;
        if x.is_null() || out.is_null() {
            return Err(fail(NsdStatus::NullPointer, "x or out is null"));
        }
        if out_len < model.model.n_classes {
            return Err(fail(
                NsdStatus::InvalidArgument,
                format!("out holds {out_len} values, model has {} classes", model.model.n_classes),
            ));
        }
        let x = std::slice::from_raw_parts(x, x_len);
        let p = model.model.predict_proba(x).map_err(core_err)?;
        std::slice::from_raw_parts_mut(out, p.len()).copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`nsd_model_load`] or be NULL, and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn nsd_model_free(model: *mut NsdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates a streaming detector from a bundle manifest and an optional
/// pipeline configuration file (NULL for defaults).
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nsd_detector_new(
    bundle_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut NsdDetector,
) -> NsdStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(NsdStatus::NullPointer, "out is null"));
        }
        let bundle_path = path_arg(bundle_path, "bundle_path")?;
        let cfg = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(&path_arg(config_path, "config_path")?).map_err(core_err)?
        };
        let bundle = BundleManifest::load(&bundle_path).map_err(core_err)?;
        let pipeline = Pipeline::new(&cfg, Arc::new(bundle)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(NsdDetector {
            pipeline,
            pending: VecDeque::new(),
        }));
        Ok(())
    })
}

fn queue(det: &mut NsdDetector, outs: Vec<StepOutput>) {
    for s in outs {
        det.pending.extend(s.records);
    }
}

/// Feeds one packet. Packets must arrive in timestamp order; completed
/// steps queue predictions for [`nsd_detector_poll`].
///
/// # Safety
/// `det` and `packet` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nsd_detector_push_packet(det: *mut NsdDetector, packet: *const NsdPacket) -> NsdStatus {
    guard(|| {
        let det = det
            .as_mut()
            .ok_or_else(|| fail(NsdStatus::NullPointer, "detector is null"))?;
        let p = packet
            .as_ref()
            .ok_or_else(|| fail(NsdStatus::NullPointer, "packet is null"))?;
        let (src, dst) = (to_ip(&p.src)?, to_ip(&p.dst)?);
        let rec = match p.protocol {
            6 => PacketRecord::tcp(p.timestamp_us, src, dst, p.size_bytes, p.src_port, p.dst_port),
            17 => PacketRecord::udp(p.timestamp_us, src, dst, p.size_bytes, p.src_port, p.dst_port),
            _ => PacketRecord::other(p.timestamp_us, src, dst, p.size_bytes),
        };
        let outs = det.pipeline.push(rec).map_err(core_err)?;
        queue(det, outs);
        Ok(())
    })
}

/// Sensor hints for a future or current step.
///
/// # Safety
/// `det` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nsd_detector_set_sensors(
    det: *mut NsdDetector,
    step: u64,
    gaming_flag: bool,
    camera_active: bool,
) -> NsdStatus {
    guard(|| {
        let det = det
            .as_mut()
            .ok_or_else(|| fail(NsdStatus::NullPointer, "detector is null"))?;
        det.pipeline.set_sensor_state(
            step,
            SensorState {
                gaming_flag,
                camera_active,
            },
        );
        Ok(())
    })
}

/// Closes the open step, e.g. at end of stream.
///
/// # Safety
/// `det` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nsd_detector_flush(det: *mut NsdDetector) -> NsdStatus {
    guard(|| {
        let det = det
            .as_mut()
            .ok_or_else(|| fail(NsdStatus::NullPointer, "detector is null"))?;
        let out = det.pipeline.finish().map_err(core_err)?;
        queue(det, out.into_iter().collect());
        Ok(())
    })
}

/// Pops the oldest queued prediction into `out`. `*available` is set to
/// false when the queue is empty.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nsd_detector_poll(
    det: *mut NsdDetector,
    out: *mut NsdPrediction,
    available: *mut bool,
) -> NsdStatus {
    guard(|| {
        let det = det
            .as_mut()
            .ok_or_else(|| fail(NsdStatus::NullPointer, "detector is null"))?;
        if out.is_null() || available.is_null() {
            return Err(fail(NsdStatus::NullPointer, "out or available is null"));
        }
        match det.pending.pop_front() {
            None => *available = false,
            Some(r) => {
                let mut l1_probs = [0.0; 3];
                l1_probs.copy_from_slice(&r.raw.l1_probs[..3]);
                *out = NsdPrediction {
                    step: r.step,
                    local: from_ip(r.key.local),
                    remote: from_ip(r.key.remote),
                    raw_l1: l1_code(r.raw.l1),
                    raw_l2: l2_code(r.raw.l2),
                    voted_l1: l1_code(r.voted.l1),
                    voted_l2: l2_code(r.voted.l2),
                    fused_l1: l1_code(r.fused.l1),
                    fused_l2: l2_code(r.fused.l2),
                    l1_probs,
                    multi_label: flags(r.multi_label),
                    multi_label_final: flags(r.multi_label_final),
                };
                *available = true;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `det` must come from [`nsd_detector_new`] or be NULL, and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn nsd_detector_free(det: *mut NsdDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}
