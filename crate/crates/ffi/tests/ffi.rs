use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use psopf_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(psopf_last_error()) }
        .to_string_lossy()
        .into_owned()
}

unsafe fn take_string(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    psopf_string_free(s);
    out
}

fn ieee30() -> *mut PsopfNetwork {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { psopf_network_ieee30(&mut net) }, PsopfStatus::Ok);
    net
}

#[test]
fn power_flow_through_handles() {
    unsafe {
        let net = ieee30();
        let mut n = 0;
        assert_eq!(psopf_network_bus_count(net, &mut n), PsopfStatus::Ok);
        assert_eq!(n, 30);

        let mut sol = ptr::null_mut();
        assert_eq!(psopf_powerflow_solve(net, &mut sol), PsopfStatus::Ok);
        let mut iters = 0;
        psopf_solution_iterations(sol, &mut iters);
        assert!(iters <= 10);

        let mut vm = vec![0.0; n];
        let mut va = vec![0.0; n];
        assert_eq!(
            psopf_solution_voltages(sol, vm.as_mut_ptr(), va.as_mut_ptr(), n),
            PsopfStatus::Ok
        );
        assert!((vm[0] - 1.01).abs() < 1e-12);
        assert_eq!(va[0], 0.0);

        let mut small = vec![0.0; n - 1];
        assert_eq!(
            psopf_solution_voltages(sol, small.as_mut_ptr(), ptr::null_mut(), n - 1),
            PsopfStatus::BufferTooSmall
        );
        assert!(last_error().contains("need 30"));

        let mut json = ptr::null_mut();
        assert_eq!(psopf_solution_to_json(sol, &mut json), PsopfStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        assert_eq!(v["solution"]["v_mag"].as_array().unwrap().len(), 30);
        assert!(v["violations"]["voltage_violations"].is_array());

        psopf_solution_free(sol);
        psopf_network_free(net);
    }
}

#[test]
fn case_text_round_trips() {
    unsafe {
        let net = ieee30();
        let mut text = ptr::null_mut();
        assert_eq!(psopf_network_to_case(net, &mut text), PsopfStatus::Ok);
        let text = CString::new(take_string(text)).unwrap();
        let mut again = ptr::null_mut();
        assert_eq!(
            psopf_network_from_case(text.as_ptr(), &mut again),
            PsopfStatus::Ok
        );
        let (mut a, mut b) = (0.0, 0.0);
        psopf_network_total_load_mw(net, &mut a);
        psopf_network_total_load_mw(again, &mut b);
        assert_eq!(a, b);
        psopf_network_free(net);
        psopf_network_free(again);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut net = ptr::null_mut();
        let bad = CString::new("bus 1 nonsense").unwrap();
        assert_eq!(
            psopf_network_from_case(bad.as_ptr(), &mut net),
            PsopfStatus::ParseError
        );
        assert!(net.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(
            psopf_network_from_case(ptr::null(), &mut net),
            PsopfStatus::NullPointer
        );
        assert_eq!(
            psopf_network_bus_count(ptr::null(), &mut 0),
            PsopfStatus::NullPointer
        );

        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(
            psopf_network_from_case(invalid.as_ptr().cast(), &mut net),
            PsopfStatus::InvalidUtf8
        );

        // A successful call clears the previous message.
        let net = ieee30();
        assert_eq!(last_error(), "");

        let mut res = ptr::null_mut();
        let controls = CString::new("V_G99").unwrap();
        assert_eq!(
            psopf_opf_solve(net, controls.as_ptr(), ptr::null(), 1, &mut res),
            PsopfStatus::InvalidArgument
        );
        let cfg = CString::new("[pso]\nswarm = 3\n").unwrap();
        assert_eq!(
            psopf_opf_solve(net, ptr::null(), cfg.as_ptr(), 1, &mut res),
            PsopfStatus::ParseError
        );
        assert!(res.is_null());

        assert_eq!(
            psopf_network_scale_load(net, -5.0),
            PsopfStatus::InvalidArgument
        );

        psopf_network_free(net);
        psopf_network_free(ptr::null_mut());
        psopf_string_free(ptr::null_mut());
    }
}

#[test]
fn sensitivity_ranking_as_json() {
    unsafe {
        let net = ieee30();
        let mut sol = ptr::null_mut();
        psopf_powerflow_solve(net, &mut sol);
        let mut json = ptr::null_mut();
        assert_eq!(
            psopf_sensitivity_json(sol, ptr::null(), 2, &mut json),
            PsopfStatus::Ok
        );
        let v: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        let per_quantity = v["ranking"]["per_quantity"].as_array().unwrap();
        assert!(!per_quantity.is_empty());
        for q in per_quantity {
            assert!(q["controls"].as_array().unwrap().len() <= 2);
        }

        let bogus = CString::new("V_G2,Z_9").unwrap();
        assert_eq!(
            psopf_sensitivity_json(sol, bogus.as_ptr(), 0, &mut json),
            PsopfStatus::InvalidArgument
        );
        psopf_solution_free(sol);
        psopf_network_free(net);
    }
}

#[test]
fn opf_is_seed_deterministic() {
    unsafe {
        let net = ieee30();
        let controls = CString::new("pg+vg").unwrap();
        let cfg = CString::new("[pso]\niter_max = 40\n").unwrap();
        let mut costs = Vec::new();
        for _ in 0..2 {
            let mut res = ptr::null_mut();
            assert_eq!(
                psopf_opf_solve(net, controls.as_ptr(), cfg.as_ptr(), 11, &mut res),
                PsopfStatus::Ok,
                "{}",
                last_error()
            );
            let mut cost = 0.0;
            psopf_opf_result_cost(res, &mut cost);
            let mut json = ptr::null_mut();
            assert_eq!(psopf_opf_result_to_json(res, &mut json), PsopfStatus::Ok);
            let v: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
            assert_eq!(v["controls"].as_array().unwrap().len(), 11);
            costs.push(cost);
            psopf_opf_result_free(res);
        }
        assert!(costs[0].is_finite());
        assert_eq!(costs[0].to_bits(), costs[1].to_bits());
        psopf_network_free(net);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(psopf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler on PATH");
        return;
    }
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let profile_dir = target_dir();
    let mut build = Command::new(cargo);
    build.args(["build", "--quiet", "--lib", "-p", "psopf-ffi"]);
    if profile_dir.ends_with("release") {
        build.arg("--release");
    }
    let built = build.current_dir(manifest).status().unwrap();
    assert!(built.success());
    let lib = profile_dir.join("libpsopf_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let out_dir = tempfile_dir();
    let exe = out_dir.join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("buses=30"), "{stdout}");
    assert!(stdout.contains("error="), "{stdout}");
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("psopf-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
