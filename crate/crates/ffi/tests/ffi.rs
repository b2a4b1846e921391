use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::OnceLock;

use xraygan::corpus::generate_synthetic_corpus;
use xraygan::trainer::{generate_pair, load_checkpoint, train_full, RunOptions, TrainConfig, TrainData};
use xraygan_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    model: PathBuf,
    vcn: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_corpus(8, 32, 1, &dir.path().join("data")).unwrap();
        let mut config = TrainConfig::desk();
        config.epochs = vec![1, 1];
        config.vcn.epochs = 2;
        let data = TrainData::from_manifest(&manifest, &config).unwrap();
        let out = dir.path().join("run");
        train_full(&data, &config, &RunOptions::new(&out)).unwrap();
        Fixture {
            model: out.join("stage2.ckpt"),
            vcn: out.join("vcn_stage1.bin"),
            _dir: dir,
        }
    })
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe {
        let n = xrg_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0 as c_char; n];
        xrg_last_error_message(buf.as_mut_ptr(), n);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn model_round_trip_matches_core() {
    let f = fixture();
    unsafe {
        let mut m: *mut XrgModel = ptr::null_mut();
        assert_eq!(xrg_model_load(c(&f.model).as_ptr(), &mut m), XrgStatus::Ok);
        let (mut side, mut done) = (0usize, 0usize);
        assert_eq!(xrg_model_resolution(m, &mut side, &mut done), XrgStatus::Ok);
        assert_eq!((side, done), (32, 2));
        let report = "Mild cardiomegaly. Dense right lower lobe opacity.";
        let (mut fr, mut la) = (vec![0.0; side * side], vec![0.0; side * side]);
        let r = CString::new(report).unwrap();
        let st = xrg_model_generate_pair(m, r.as_ptr(), fr.as_mut_ptr(), la.as_mut_ptr(), fr.len());
        assert_eq!(st, XrgStatus::Ok, "{}", last_error());
        let (cf, cl) = generate_pair(report, &load_checkpoint(&f.model, None).unwrap()).unwrap();
        assert_eq!(fr, cf.pixels.data());
        assert_eq!(la, cl.pixels.data());

        let st = xrg_model_generate_pair(m, r.as_ptr(), fr.as_mut_ptr(), la.as_mut_ptr(), 10);
        assert_eq!(st, XrgStatus::BufferTooSmall);
        assert!(last_error().contains("1024"));
        let empty = CString::new("  ").unwrap();
        let st = xrg_model_generate_pair(m, empty.as_ptr(), fr.as_mut_ptr(), la.as_mut_ptr(), fr.len());
        assert_eq!(st, XrgStatus::EmptyReport);
        assert_eq!(
            xrg_model_generate_pair(m, ptr::null(), fr.as_mut_ptr(), la.as_mut_ptr(), fr.len()),
            XrgStatus::NullArgument
        );
        xrg_model_free(m);
        xrg_model_free(ptr::null_mut());
    }
}

#[test]
fn load_failures_set_codes_and_messages() {
    let f = fixture();
    unsafe {
        let mut m: *mut XrgModel = ptr::null_mut();
        let missing = CString::new("/definitely/not/here.ckpt").unwrap();
        assert_eq!(xrg_model_load(missing.as_ptr(), &mut m), XrgStatus::Io);
        assert!(m.is_null());
        assert!(last_error().contains("not/here"));
        assert_eq!(xrg_model_load(c(&f.vcn).as_ptr(), &mut m), XrgStatus::Checkpoint);
        assert!(last_error().contains("expected a TRAIN file"), "{}", last_error());
        assert_eq!(
            xrg_model_load(c(&f.model).as_ptr(), ptr::null_mut()),
            XrgStatus::NullArgument
        );
        let mut v: *mut XrgVcn = ptr::null_mut();
        assert_eq!(xrg_vcn_load(c(&f.model).as_ptr(), &mut v), XrgStatus::Checkpoint);
        assert!(v.is_null());
    }
}

#[test]
fn vcn_scores_and_metrics() {
    let f = fixture();
    unsafe {
        let mut v: *mut XrgVcn = ptr::null_mut();
        assert_eq!(xrg_vcn_load(c(&f.vcn).as_ptr(), &mut v), XrgStatus::Ok);
        let mut side = 0;
        assert_eq!(xrg_vcn_resolution(v, &mut side), XrgStatus::Ok);
        assert_eq!(side, 16);
        let img: Vec<f64> = (0..side * side).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let other: Vec<f64> = img.iter().rev().copied().collect();
        let mut s = 0.0;
        assert_eq!(
            xrg_vcn_score(v, img.as_ptr(), img.as_ptr(), side, &mut s),
            XrgStatus::Ok
        );
        assert_eq!(s, 0.5);
        let (mut ab, mut ba) = (0.0, 0.0);
        xrg_vcn_score(v, img.as_ptr(), other.as_ptr(), side, &mut ab);
        xrg_vcn_score(v, other.as_ptr(), img.as_ptr(), side, &mut ba);
        assert_eq!(ab, ba);
        assert_eq!(
            xrg_vcn_score(v, img.as_ptr(), img.as_ptr(), 8, &mut s),
            XrgStatus::Shape
        );
        xrg_vcn_free(v);

        assert_eq!(xrg_ssim(img.as_ptr(), img.as_ptr(), side, &mut s), XrgStatus::Ok);
        assert!((s - 1.0).abs() < 1e-12);
        let a = [0.0, 1.0, 2.0, 0.5, -1.0, 3.0];
        let b: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, x)| x + if i % 2 == 0 { 1.0 } else { 2.0 })
            .collect();
        assert_eq!(xrg_fid(a.as_ptr(), 3, b.as_ptr(), 3, 2, &mut s), XrgStatus::Ok);
        assert!((s - 5.0).abs() < 1e-9, "{s}");
        assert_eq!(
            xrg_fid(a.as_ptr(), 1, b.as_ptr(), 3, 2, &mut s),
            XrgStatus::InvalidArgument
        );
        let bad = [f64::NAN; 4];
        assert_eq!(
            xrg_ssim(bad.as_ptr(), bad.as_ptr(), 2, &mut s),
            XrgStatus::InvalidArgument
        );
    }
}

#[test]
fn status_names_and_version() {
    let name = unsafe { CStr::from_ptr(xrg_status_name(XrgStatus::Shape)) };
    assert_eq!(name.to_str().unwrap(), "shape mismatch");
    let v = unsafe { CStr::from_ptr(xrg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/xraygan.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "xrg_model_load",
        "xrg_model_free",
        "xrg_model_resolution",
        "xrg_model_generate_pair",
        "xrg_vcn_load",
        "xrg_vcn_free",
        "xrg_vcn_score",
        "xrg_ssim",
        "xrg_fid",
        "xrg_last_error_message",
        "XRG_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "xraygan.h"
int main(void) {
    XrgModel *m = NULL;
    double f[1024], l[1024];
    size_t side = 0, done = 0;
    if (xrg_model_load("m.ckpt", &m) != XRG_STATUS_OK) {
        char buf[256];
        xrg_last_error_message(buf, sizeof buf);
        return 1;
    }
    xrg_model_resolution(m, &side, &done);
    xrg_model_generate_pair(m, "Normal chest.", f, l, 1024);
    xrg_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
