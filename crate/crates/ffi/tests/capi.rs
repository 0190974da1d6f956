use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use panet::engine::{save_checkpoint, ModelConfig, PaNet};
use panet::field_store::{write_container, generate_synthetic, IntensityThresholds};
use panet_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let n = unsafe { panet_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as std::ffi::c_char; n];
    unsafe { panet_last_error(buf.as_mut_ptr(), n) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn small_model(dir: &Path) -> CString {
    let cfg = ModelConfig {
        lookback: 2,
        horizon: 2,
        channels: 2,
        embed_dim: 8,
        d_ff: 8,
        layers: 1,
        decoder_channels: 4,
        ..Default::default()
    };
    let path = dir.join("m.panc");
    save_checkpoint(&path, &PaNet::new(cfg, IntensityThresholds::fixed_default()).unwrap()).unwrap();
    cstr(&path)
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(panet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn categorize_and_domain_errors() {
    let mut c = 99u8;
    assert_eq!(unsafe { panet_categorize(13.0, &mut c) }, PanetStatus::Ok);
    assert_eq!(c, 3);
    assert_eq!(unsafe { panet_categorize(-1.0, &mut c) }, PanetStatus::Domain);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { panet_categorize(1.0, ptr::null_mut()) }, PanetStatus::NullPointer);
    assert_eq!(last_error(), "out is null");
}

#[test]
fn last_error_truncates_and_reports_full_length() {
    unsafe { panet_categorize(f64::NAN, ptr::null_mut()) };
    let full = last_error();
    let mut buf = [1 as std::ffi::c_char; 4];
    let need = unsafe { panet_last_error(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(need, full.len() + 1);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), &full[..3]);
}

#[test]
fn missing_and_malformed_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ptr::null_mut();
    let missing = cstr(&dir.path().join("none.panc"));
    assert_eq!(unsafe { panet_model_load(missing.as_ptr(), &mut m) }, PanetStatus::Io);
    assert!(m.is_null());
    let junk = dir.path().join("junk.panc");
    std::fs::write(&junk, b"NOPE....").unwrap();
    assert_eq!(unsafe { panet_model_load(cstr(&junk).as_ptr(), &mut m) }, PanetStatus::Format);
    assert_eq!(unsafe { panet_model_load(ptr::null(), &mut m) }, PanetStatus::NullPointer);
}

#[test]
fn forecast_and_evaluate_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_model(dir.path());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { panet_model_load(path.as_ptr(), &mut m) }, PanetStatus::Ok);
    let (mut s, mut j, mut l, mut p) = (0, 0, 0, 0);
    assert_eq!(unsafe { panet_model_dims(m, &mut s, &mut j, &mut l, &mut p) }, PanetStatus::Ok);
    assert_eq!((s, j, l, p), (2, 2, 2, 2));

    let mut d = ptr::null_mut();
    assert_eq!(unsafe { panet_dataset_synthetic(4, 2, 5, 8, 8, 2, 1.5, 2, 2, &mut d) }, PanetStatus::Ok);
    let (mut n, mut h, mut w) = (0, 0, 0);
    assert_eq!(unsafe { panet_dataset_dims(d, &mut n, &mut h, &mut w) }, PanetStatus::Ok);
    assert_eq!((n, h, w), (4, 8, 8));

    let mut need = 0;
    let mut small = [0u8; 10];
    let st = unsafe { panet_forecast(m, d, small.as_mut_ptr(), small.len(), &mut need) };
    assert_eq!(st, PanetStatus::BufferTooSmall);
    assert_eq!(need, 4 * 2 * 8 * 8);
    assert_eq!(small, [0; 10]);
    let mut cats = vec![255u8; need];
    assert_eq!(unsafe { panet_forecast(m, d, cats.as_mut_ptr(), cats.len(), ptr::null_mut()) }, PanetStatus::Ok);
    assert!(cats.iter().all(|&c| c < 5));

    let (mut iou, mut ts) = (-1.0, -1.0);
    assert_eq!(unsafe { panet_evaluate(m, d, &mut iou, &mut ts) }, PanetStatus::Ok);
    assert!((0.0..=1.0).contains(&iou) && (0.0..=1.0).contains(&ts));

    let again = cstr(&dir.path().join("again.panc"));
    assert_eq!(unsafe { panet_model_save(m, again.as_ptr()) }, PanetStatus::Ok);
    assert_eq!(std::fs::read(dir.path().join("again.panc")).unwrap(), std::fs::read(dir.path().join("m.panc")).unwrap());
    unsafe {
        panet_dataset_free(d);
        panet_model_free(m);
        panet_model_free(ptr::null_mut());
    }
}

#[test]
fn dataset_shape_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_model(dir.path());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { panet_model_load(path.as_ptr(), &mut m) }, PanetStatus::Ok);
    let seq = &generate_synthetic(1, 1, (5, 8, 8, 3), 1.5).unwrap()[0];
    let file = dir.path().join("three.pang");
    write_container(&file, seq).unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { panet_dataset_open(cstr(&file).as_ptr(), 2, 2, &mut d) }, PanetStatus::Ok);
    let mut buf = vec![0u8; 1024];
    let st = unsafe { panet_forecast(m, d, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) };
    assert_eq!(st, PanetStatus::ConfigMismatch, "{}", last_error());
    unsafe {
        panet_dataset_free(d);
        panet_model_free(m);
    }
}

#[test]
fn header_declares_the_api_and_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/panet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["panet_model_load", "panet_forecast", "panet_last_error", "typedef struct PanetModel PanetModel"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // compile check only where a C compiler is installed
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
