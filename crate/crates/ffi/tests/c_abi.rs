use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bitalloc::fixtures::two_layer_fixture;
use bitalloc::manifest::{write_bundle, PlanSection};
use bitalloc_ffi::*;

fn last_error() -> String {
    let p = bitalloc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn two_layer_instance(capacity: u64) -> *mut BitallocInstance {
    let inst = bitalloc_instance_new(capacity);
    let bits = [2u32, 4];
    for (name, dl) in [("L1", [0.5, 0.1]), ("L2", [0.3, 0.25])] {
        let name = CString::new(name).unwrap();
        let s = unsafe {
            bitalloc_instance_add_layer(inst, name.as_ptr(), 100, bits.as_ptr(), dl.as_ptr(), 2)
        };
        assert_eq!(s, BitallocStatus::Ok);
    }
    inst
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(bitalloc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn quantize_representable_vector() {
    let w = [-2.0, -1.0, 0.0, 1.0];
    let mut out = [9.0; 4];
    let mut step = 0.0;
    let s = unsafe { bitalloc_quantize(w.as_ptr(), 4, 2, out.as_mut_ptr(), &mut step) };
    assert_eq!(s, BitallocStatus::Ok);
    assert_eq!(out, w);
    assert_eq!(step, 1.0);

    let s = unsafe { bitalloc_quantize(w.as_ptr(), 4, 0, out.as_mut_ptr(), ptr::null_mut()) };
    assert_ne!(s, BitallocStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn instance_solvers_agree_on_two_layers() {
    let inst = two_layer_instance(600);
    for solver in [BitallocSolver::Greedy, BitallocSolver::Dp, BitallocSolver::Exhaustive] {
        let mut bits = [0u32; 2];
        let mut totals = BitallocTotals::default();
        let s = unsafe { bitalloc_instance_solve(inst, solver, bits.as_mut_ptr(), 2, &mut totals) };
        assert_eq!(s, BitallocStatus::Ok, "{solver:?}");
        assert_eq!(bits, [4, 2], "{solver:?}");
        assert_eq!(totals.used_bits, 600);
        assert!((totals.total_delta_loss - 0.4).abs() < 1e-15);
        assert_eq!(totals.avg_bits, 3.0);
    }
    unsafe { bitalloc_instance_free(inst) };
}

#[test]
fn instance_errors_map_to_status_codes() {
    let inst = two_layer_instance(399);
    let mut bits = [0u32; 2];
    let s = unsafe {
        bitalloc_instance_solve(inst, BitallocSolver::Greedy, bits.as_mut_ptr(), 2, ptr::null_mut())
    };
    assert_eq!(s, BitallocStatus::Infeasible);
    assert!(last_error().contains("399"), "{}", last_error());

    let s = unsafe {
        bitalloc_instance_solve(inst, BitallocSolver::Greedy, bits.as_mut_ptr(), 1, ptr::null_mut())
    };
    assert_eq!(s, BitallocStatus::InvalidArgument);

    let s = unsafe {
        bitalloc_instance_solve(inst, BitallocSolver::Greedy, ptr::null_mut(), 2, ptr::null_mut())
    };
    assert_eq!(s, BitallocStatus::NullArgument);

    let name = CString::new("L3").unwrap();
    let (b, dl) = ([2u32], [-1.0f64]);
    let s = unsafe { bitalloc_instance_add_layer(inst, name.as_ptr(), 10, b.as_ptr(), dl.as_ptr(), 1) };
    assert_eq!(s, BitallocStatus::InvalidArgument);
    unsafe { bitalloc_instance_free(inst) };
    unsafe { bitalloc_instance_free(ptr::null_mut()) };
}

fn bundle(dir: &Path) -> PathBuf {
    let (net, samples) = two_layer_fixture(1, 256).unwrap();
    let mut plan = PlanSection::new(vec![2, 4, 8], 3.0);
    plan.samples = 128;
    write_bundle(dir, &net, &samples, plan).unwrap()
}

#[test]
fn manifest_to_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(bundle(dir.path()).to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bitalloc_manifest_load(path.as_ptr(), &mut m) }, BitallocStatus::Ok);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { bitalloc_plan_run(m, &mut r) }, BitallocStatus::Ok);

    assert_eq!(unsafe { bitalloc_report_layer_count(r) }, 2);
    let names: Vec<String> = (0..2)
        .map(|i| unsafe { CStr::from_ptr(bitalloc_report_layer_name(r, i)) }.to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["fc1", "fc2"]);
    assert!(unsafe { bitalloc_report_layer_name(r, 2) }.is_null());

    let mut layer = BitallocLayer::default();
    assert_eq!(unsafe { bitalloc_report_layer(r, 0, &mut layer) }, BitallocStatus::Ok);
    assert_eq!(layer.params, 16 * 12);
    assert!([2, 4, 8].contains(&layer.bit));
    assert_eq!(unsafe { bitalloc_report_layer(r, 5, &mut layer) }, BitallocStatus::InvalidArgument);

    let mut totals = BitallocTotals::default();
    assert_eq!(unsafe { bitalloc_report_totals(r, &mut totals) }, BitallocStatus::Ok);
    assert!(totals.avg_bits <= 3.0 && totals.used_bits <= totals.capacity_bits);

    let out = CString::new(dir.path().join("ffi-out").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bitalloc_report_write(r, out.as_ptr()) }, BitallocStatus::Ok);
    assert!(dir.path().join("ffi-out/assignment.toml").exists());

    unsafe {
        bitalloc_report_free(r);
        bitalloc_manifest_free(m);
    }
}

#[test]
fn bad_manifest_reports_manifest_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("missing.toml").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { bitalloc_manifest_load(path.as_ptr(), &mut m) };
    assert_eq!(s, BitallocStatus::Manifest);
    assert!(m.is_null());
    assert!(last_error().contains("missing.toml"));
    assert_eq!(unsafe { bitalloc_manifest_load(ptr::null(), &mut m) }, BitallocStatus::NullArgument);
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "bitalloc.h"

int main(void) {
    double w[4] = {-2.0, -1.0, 0.0, 1.0}, q[4], step = 0.0;
    if (bitalloc_quantize(w, 4, 2, q, &step) != BITALLOC_STATUS_OK) return 1;

    BitallocInstance *inst = bitalloc_instance_new(600);
    uint32_t bits[2] = {2, 4};
    double l1[2] = {0.5, 0.1}, l2[2] = {0.3, 0.25};
    bitalloc_instance_add_layer(inst, "L1", 100, bits, l1, 2);
    bitalloc_instance_add_layer(inst, "L2", 100, bits, l2, 2);
    uint32_t chosen[2];
    BitallocTotals t;
    BitallocStatus s = bitalloc_instance_solve(inst, BITALLOC_SOLVER_GREEDY, chosen, 2, &t);
    bitalloc_instance_free(inst);
    if (s != BITALLOC_STATUS_OK) return 2;

    printf("%g %u %u %llu\n", step, chosen[0], chosen[1], (unsigned long long)t.used_bits);
    return 0;
}
"#;

/// Directory holding this package's build artifacts (`target/<profile>`).
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = artifact_dir().join("libbitalloc_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1 4 2 600");
}
