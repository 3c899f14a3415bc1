use std::ffi::{CStr, CString};
use std::ptr;

use dida_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dida_last_error()) }.to_string_lossy().into_owned()
}

fn tiny_config() -> *mut DidaConfig {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(dida_config_default(&mut cfg), DidaStatus::Ok);
        for kv in [
            "dataset.sizes=[60, 20]",
            "model.channels=[4, 8]",
            "da.epochs=1",
            "di.epochs=1",
            "dida_iterations=1",
            "eval.probe.epochs=2",
        ] {
            assert_eq!(dida_config_set(cfg, cstr(kv).as_ptr()), DidaStatus::Ok, "{kv}");
        }
        assert_eq!(dida_config_set_seed(cfg, 5), DidaStatus::Ok);
    }
    cfg
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(dida_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_carry_codes_and_messages() {
    let cfg = tiny_config();
    unsafe {
        assert_eq!(dida_config_set(cfg, cstr("da.epochz=2").as_ptr()), DidaStatus::Config);
        assert!(last_error().contains("da.epochz"), "{}", last_error());
        assert_eq!(dida_config_set(cfg, ptr::null()), DidaStatus::NullPointer);
        assert_eq!(dida_config_set(ptr::null_mut(), cstr("beta=1").as_ptr()), DidaStatus::NullPointer);

        let mut text = ptr::null_mut();
        assert_eq!(dida_config_to_toml(cfg, &mut text), DidaStatus::Ok);
        let toml = CStr::from_ptr(text).to_string_lossy().into_owned();
        assert!(toml.contains("dida_iterations = 1"));
        let mut back = ptr::null_mut();
        assert_eq!(dida_config_from_toml(text, &mut back), DidaStatus::Ok);
        dida_string_free(text);

        let mut bad = ptr::null_mut();
        assert_eq!(dida_config_from_toml(cstr("nope = 3").as_ptr(), &mut bad), DidaStatus::Config);
        assert!(bad.is_null());
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(dida_config_from_toml(invalid.as_ptr().cast(), &mut bad), DidaStatus::InvalidUtf8);
        dida_config_free(back);
        dida_config_free(cfg);
        dida_config_free(ptr::null_mut());
    }
}

#[test]
fn run_report_and_bundle_round_trip() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = cstr(dir.path().to_str().unwrap());
    unsafe {
        let mut report = ptr::null_mut();
        assert_eq!(dida_run(cfg, out.as_ptr(), ptr::null(), &mut report), DidaStatus::Ok, "{}", last_error());
        assert_eq!(dida_report_iterations(report), 2);
        let (mut acc, mut c, mut s) = (0.0, 0.0, 0.0);
        assert_eq!(dida_report_target_acc(report, 1, &mut acc), DidaStatus::Ok);
        assert!((0.0..=100.0).contains(&acc));
        assert_eq!(dida_report_source_acc(report, 0, &mut acc), DidaStatus::Ok);
        assert_eq!(dida_report_probes(report, 1, &mut c, &mut s), DidaStatus::Ok);
        assert_eq!(dida_report_target_acc(report, 2, &mut acc), DidaStatus::OutOfRange);

        let mut csv = ptr::null_mut();
        assert_eq!(dida_report_metrics_csv(report, &mut csv), DidaStatus::Ok);
        let text = CStr::from_ptr(csv).to_string_lossy().into_owned();
        let on_disk = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text, on_disk);
        dida_string_free(csv);
        dida_report_free(report);

        let ckpt = cstr(dir.path().join("checkpoints/dida_i1_bundle.ckpt").to_str().unwrap());
        let mut bundle = ptr::null_mut();
        assert_eq!(dida_bundle_load(ckpt.as_ptr(), &mut bundle), DidaStatus::Ok, "{}", last_error());
        let mut shape = [0usize; 3];
        assert_eq!(dida_bundle_image_shape(bundle, shape.as_mut_ptr()), DidaStatus::Ok);
        assert_eq!(shape, [3, 16, 16]);
        let n = 3;
        let images: Vec<f32> = (0..n * 3 * 16 * 16).map(|i| (i % 17) as f32 / 17.0).collect();
        let mut labels = vec![u32::MAX; n];
        assert_eq!(dida_bundle_predict(bundle, images.as_ptr(), n, labels.as_mut_ptr()), DidaStatus::Ok);
        assert!(labels.iter().all(|&l| l < 10));
        let mut recon = vec![-1.0f32; images.len()];
        assert_eq!(dida_bundle_reconstruct(bundle, images.as_ptr(), n, recon.as_mut_ptr()), DidaStatus::Ok);
        assert!(recon.iter().all(|v| (0.0..=1.0).contains(v)));
        dida_bundle_free(bundle);

        let mut missing = ptr::null_mut();
        assert_eq!(dida_bundle_load(cstr("/no/such.ckpt").as_ptr(), &mut missing), DidaStatus::Io);
        assert!(!last_error().is_empty());
        dida_config_free(cfg);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dida.h")).unwrap();
    for name in [
        "typedef struct DidaConfig DidaConfig",
        "typedef struct DidaReport DidaReport",
        "typedef struct DidaBundle DidaBundle",
        "DIDA_STATUS_OK = 0",
        "DIDA_STATUS_PANIC = 8",
        "dida_last_error(void)",
        "dida_run(",
        "dida_run_control(",
        "dida_bundle_predict(",
        "dida_string_free(",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"dida.h\"\nint main(void) { DidaConfig *c = 0; DidaStatus s = dida_config_default(&c); dida_config_free(c); return s == DIDA_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
