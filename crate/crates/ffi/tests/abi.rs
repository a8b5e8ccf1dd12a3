use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pvtn_ffi::*;

fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/golden").join(name);
    std::fs::read_to_string(p).unwrap()
}

/// Takes ownership of a returned string.
fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { pvtn_string_free(s) };
    out
}

fn last_error() -> String {
    take(pvtn_last_error())
}

fn run(toml: &str, provider: u32, seed: u64) -> (PvtnStatus, *mut PvtnRun) {
    let text = CString::new(toml).unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { pvtn_scenario_parse(text.as_ptr(), &mut sc) }, PvtnStatus::Ok);
    let mut out = ptr::null_mut();
    let status = unsafe { pvtn_scenario_run(sc, provider, seed, &mut out) };
    unsafe { pvtn_scenario_free(sc) };
    (status, out)
}

#[test]
fn golden_run_renders_its_committed_trace() {
    let (status, r) = run(&golden("join-direct.toml"), PVTN_PROVIDER_MOCK, 0);
    assert_eq!(status, PvtnStatus::Ok);
    assert_eq!(unsafe { pvtn_run_passed(r) }, 1);
    assert_eq!(take(unsafe { pvtn_run_render(r) }), golden("join-direct.trace"));
    let snap = take(unsafe { pvtn_run_snapshot(r) });
    unsafe { pvtn_run_free(r) };
    let snap = CString::new(snap).unwrap();
    let mut n = usize::MAX;
    assert_eq!(unsafe { pvtn_isolation_check(snap.as_ptr(), &mut n) }, PvtnStatus::Ok);
    assert_eq!(n, 0);
}

#[test]
fn failed_expectation_still_yields_a_run() {
    let flipped = golden("join-uninvited.toml").replace("member = false", "member = true");
    let (status, r) = run(&flipped, PVTN_PROVIDER_REAL, 0);
    assert_eq!(status, PvtnStatus::Failed);
    assert!(last_error().contains("member cand=true"));
    assert!(!r.is_null());
    assert_eq!(unsafe { pvtn_run_passed(r) }, 0);
    unsafe { pvtn_run_free(r) };
}

#[test]
fn parse_and_argument_errors() {
    let bad = CString::new("name = 1").unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { pvtn_scenario_parse(bad.as_ptr(), &mut sc) }, PvtnStatus::Parse);
    assert!(sc.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { pvtn_scenario_parse(ptr::null(), &mut sc) }, PvtnStatus::NullArgument);
    let invalid = [0xffu8, 0];
    assert_eq!(unsafe { pvtn_scenario_parse(invalid.as_ptr().cast(), &mut sc) }, PvtnStatus::InvalidUtf8);

    let text = CString::new(golden("join-direct.toml")).unwrap();
    assert_eq!(unsafe { pvtn_scenario_parse(text.as_ptr(), &mut sc) }, PvtnStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pvtn_scenario_run(sc, 9, 0, &mut out) }, PvtnStatus::InvalidArgument);
    assert!(out.is_null());
    assert_eq!(unsafe { pvtn_scenario_run(sc, PVTN_PROVIDER_MOCK, 0, ptr::null_mut()) }, PvtnStatus::NullArgument);
    unsafe { pvtn_scenario_free(sc) };

    let unknown = CString::new("name = \"x\"\n[[step]]\nat = 0\nop = \"rotate\"\nmanager = \"ghost\"\n").unwrap();
    assert_eq!(unsafe { pvtn_scenario_parse(unknown.as_ptr(), &mut sc) }, PvtnStatus::Ok);
    assert_eq!(unsafe { pvtn_scenario_run(sc, PVTN_PROVIDER_MOCK, 0, &mut out) }, PvtnStatus::Setup);
    unsafe { pvtn_scenario_free(sc) };

    // null handles are tolerated
    unsafe {
        pvtn_scenario_free(ptr::null_mut());
        pvtn_run_free(ptr::null_mut());
        pvtn_string_free(ptr::null_mut());
        assert_eq!(pvtn_run_passed(ptr::null()), 0);
        assert!(pvtn_run_render(ptr::null()).is_null());
    }
}

#[test]
fn chain_verification_through_the_abi() {
    let w = pvtn::scenario::build(
        &pvtn::scenario::Scenario::parse(&golden("two-tenant-bridge.toml")).unwrap(),
        std::sync::Arc::new(pvtn::crypto::MockProvider),
        10,
        Default::default(),
    )
    .unwrap();
    use pvtn::codec::Canonical;
    let leaf = w.nodes.iter().find(|n| n.record.name == "a3").unwrap().addr;
    let certs: String = w.cert_chain(leaf).iter().map(|c| hex::encode(c.to_canonical()) + "\n").collect();
    let anchor = |t: usize| CString::new(hex::encode(w.nodes[w.tenants[t].root].record.public().as_bytes())).unwrap();
    let certs = CString::new(certs).unwrap();
    assert_eq!(unsafe { pvtn_verify_chain(certs.as_ptr(), anchor(0).as_ptr(), 1, PVTN_PROVIDER_MOCK) }, PvtnStatus::Ok);
    assert_eq!(unsafe { pvtn_verify_chain(certs.as_ptr(), anchor(1).as_ptr(), 1, PVTN_PROVIDER_MOCK) }, PvtnStatus::Rejected);
    let garbage = CString::new("zz\n").unwrap();
    assert_eq!(unsafe { pvtn_verify_chain(garbage.as_ptr(), anchor(0).as_ptr(), 1, PVTN_PROVIDER_MOCK) }, PvtnStatus::Parse);
    assert!(last_error().starts_with("line 1"));
}

#[test]
fn crossing_snapshot_is_rejected() {
    let (_, r) = run(&golden("two-tenant-bridge.toml"), PVTN_PROVIDER_MOCK, 0);
    let snap = take(unsafe { pvtn_run_snapshot(r) });
    unsafe { pvtn_run_free(r) };
    let tenant = |l: &str| l.split(" | ").nth(3).unwrap().to_string();
    let first = snap.lines().next().unwrap();
    let other = snap.lines().find(|l| tenant(l) != tenant(first)).unwrap();
    let mut cols: Vec<String> = first.split(" | ").map(String::from).collect();
    cols[3] = tenant(other);
    let forged = cols.join(" | ");
    let text = CString::new(format!("{snap}{forged}\n")).unwrap();
    let mut n = 0;
    assert_eq!(unsafe { pvtn_isolation_check(text.as_ptr(), &mut n) }, PvtnStatus::Rejected);
    assert!(n >= 1);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pvtn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"pvtn.h\"\nint main(void) {\n  PvtnScenario *sc = 0;\n  PvtnStatus s = pvtn_scenario_parse(\"name = \\\"x\\\"\", &sc);\n  pvtn_scenario_free(sc);\n  return s == PVTN_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .output()
            .unwrap_or_else(|e| panic!("{compiler}: {e}"));
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
