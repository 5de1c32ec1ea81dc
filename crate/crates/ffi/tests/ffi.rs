use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nvsim_ffi::*;

fn table_len() -> usize {
    let c = nvsim::constants::Constants::default();
    nvsim::experiments::NvSetup::calibrated(&c, nvsim::hz(56e6)).unwrap().model.table.entries.len()
}

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe {
        assert_eq!(nvsim_last_error_message(ptr::null_mut(), 0, &mut needed), NvsimStatus::Ok);
        let mut buf = vec![0 as c_char; needed + 1];
        assert_eq!(nvsim_last_error_message(buf.as_mut_ptr(), buf.len(), ptr::null_mut()), NvsimStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(nvsim_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_exposes_transition_table() {
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(nvsim_constants_default(&mut c), NvsimStatus::Ok);
        let mut zfs = 0.0;
        assert_eq!(nvsim_constants_zero_field_splitting_hz(c, &mut zfs), NvsimStatus::Ok);
        assert!((zfs - 2.87e9).abs() < 0.05e9);
        let mut m = ptr::null_mut();
        assert_eq!(nvsim_model_new(c, 56e6, &mut m), NvsimStatus::Ok);
        let mut n = 0;
        assert_eq!(nvsim_model_transition_count(m, &mut n), NvsimStatus::Ok);
        assert_eq!(n, table_len());
        let (mut g, mut e, mut f, mut s) = (0u32, 0u32, 0.0, 0.0);
        for k in 0..n {
            assert_eq!(nvsim_model_transition(m, k, &mut g, &mut e, &mut f, &mut s), NvsimStatus::Ok);
            assert!(g < 3 && (3..9).contains(&e) && s > 0.0 && f.is_finite());
        }
        assert_eq!(nvsim_model_transition(m, n, &mut g, &mut e, &mut f, &mut s), NvsimStatus::OutOfRange);
        assert!(last_error().contains("transition"));
        nvsim_model_free(m);
        nvsim_constants_free(c);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(nvsim_model_new(ptr::null(), -1.0, &mut m), NvsimStatus::InvalidArgument);
        assert!(m.is_null());
        assert_eq!(nvsim_model_new(ptr::null(), 0.0, ptr::null_mut()), NvsimStatus::NullPointer);

        let bad = CString::new(r#"{"version": "1.0.0"}"#).unwrap();
        let mut c = ptr::null_mut();
        assert_ne!(nvsim_constants_from_json(bad.as_ptr(), &mut c), NvsimStatus::Ok);
        assert!(c.is_null());
        assert!(!last_error().is_empty());

        let mut r = ptr::null_mut();
        let unknown = CString::new(r#"{"pump": {"bogus": true}}"#).unwrap();
        assert_eq!(nvsim_run(NvsimExperiment::Pump, unknown.as_ptr(), ptr::null(), &mut r), NvsimStatus::Parse);
        assert!(last_error().contains("bogus"));
        let invalid = CString::new(r#"{"initial": [2.0, 0.0, 0.0]}"#).unwrap();
        assert_eq!(nvsim_run(NvsimExperiment::RabiMw, invalid.as_ptr(), ptr::null(), &mut r), NvsimStatus::Config);
        assert!(r.is_null());

        // Success clears the message.
        let mut c = ptr::null_mut();
        assert_eq!(nvsim_constants_default(&mut c), NvsimStatus::Ok);
        assert_eq!(last_error(), "");
        nvsim_constants_free(c);
        nvsim_constants_free(ptr::null_mut());
    }
}

#[test]
fn run_returns_table_and_fits() {
    let cfg = CString::new(
        r#"{"zeeman_hz": 18e6,
            "delta": {"start_hz": -2e7, "stop_hz": 2e7, "points": 5},
            "modulation_offset": {"start_hz": -2e7, "stop_hz": 2e7, "points": 9}}"#,
    )
    .unwrap();
    unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(nvsim_run(NvsimExperiment::Darkmap, cfg.as_ptr(), ptr::null(), &mut r), NvsimStatus::Ok);
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(nvsim_result_shape(r, &mut rows, &mut cols), NvsimStatus::Ok);
        assert_eq!((rows, cols), (45, 3));

        let mut name = [0 as c_char; 4];
        let mut needed = 0;
        assert_eq!(nvsim_result_column_name(r, 2, name.as_mut_ptr(), name.len(), &mut needed), NvsimStatus::BufferTooSmall);
        assert_eq!(needed, "excited_population".len());
        let mut name = vec![0 as c_char; needed + 1];
        assert_eq!(nvsim_result_column_name(r, 2, name.as_mut_ptr(), name.len(), &mut needed), NvsimStatus::Ok);
        assert_eq!(CStr::from_ptr(name.as_ptr()).to_str().unwrap(), "excited_population");

        let mut col = vec![0.0; rows];
        assert_eq!(nvsim_result_column(r, 2, col.as_mut_ptr(), col.len()), NvsimStatus::Ok);
        assert!(col.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(nvsim_result_column(r, 2, col.as_mut_ptr(), rows - 1), NvsimStatus::BufferTooSmall);

        assert_eq!(nvsim_result_fits_json(r, ptr::null_mut(), 0, &mut needed), NvsimStatus::Ok);
        let mut fits = vec![0 as c_char; needed + 1];
        assert_eq!(nvsim_result_fits_json(r, fits.as_mut_ptr(), fits.len(), ptr::null_mut()), NvsimStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(fits.as_ptr()).to_str().unwrap()).unwrap();
        assert_eq!(json["dark_lines"].as_array().unwrap().len(), 2);

        assert_eq!(nvsim_result_csv(r, ptr::null_mut(), 0, &mut needed), NvsimStatus::Ok);
        assert!(needed > 45 * 10);
        nvsim_result_free(r);
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_exported_function() {
    let header = std::fs::read_to_string(manifest_dir().join("include/nvsim.h")).unwrap();
    let source = std::fs::read_to_string(manifest_dir().join("src/lib.rs")).unwrap();
    let exported: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 15);
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_string)
}

/// Compiles the C smoke program against the header and links it to the static library
/// when the build produced one next to this test binary.
#[test]
fn c_program_compiles_and_runs() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let include = manifest_dir().join("include");
    let src = manifest_dir().join("tests/c/smoke.c");
    let syntax = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(syntax.status.success(), "{}", String::from_utf8_lossy(&syntax.stderr));

    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libnvsim_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; header checked only", lib.display());
        return;
    }
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("nvsim_smoke");
    let build = Command::new(&cc)
        .args(["-std=c99", "-O1", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(stdout.trim(), format!("{} {} 45 3", env!("CARGO_PKG_VERSION"), table_len()));
}
