//! C ABI over the scenario runner and the offline checkers.
//!
//! Every fallible call returns a [`PvtnStatus`]. On failure the message is
//! kept per thread and can be fetched with [`pvtn_last_error`]. Strings
//! returned to the caller are owned by it and must be released with
//! [`pvtn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use pvtn::crypto::{CryptoProvider, MockProvider, RealProvider};
use pvtn::scenario::{self, Run, Scenario, ScenarioError};
use pvtn::snapshot::Snapshot;
use pvtn::tree::{chain_from_hex, key_from_hex, verify_chain, RevocationSet};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvtnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Setup = 4,
    /// The run finished but an expectation or invariant failed.
    Failed = 5,
    /// Chain verification or isolation check rejected the input.
    Rejected = 6,
    Panic = 7,
    InvalidArgument = 8,
}

/// Deterministic keyed-hash provider, used for golden traces.
pub const PVTN_PROVIDER_MOCK: u32 = 0;
/// Ed25519, X25519 and ChaCha20-Poly1305.
pub const PVTN_PROVIDER_REAL: u32 = 1;

/// A parsed scenario.
pub struct PvtnScenario(Scenario);

/// A finished run: trace, final tree and assertion results.
pub struct PvtnRun(Run);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: PvtnStatus, msg: impl Into<String>) -> PvtnStatus {
    set_error(msg);
    status
}

fn provider(p: u32) -> Result<Arc<dyn CryptoProvider>, PvtnStatus> {
    match p {
        PVTN_PROVIDER_MOCK => Ok(Arc::new(MockProvider)),
        PVTN_PROVIDER_REAL => Ok(Arc::new(RealProvider)),
        other => Err(fail(PvtnStatus::InvalidArgument, format!("unknown provider {other}"))),
    }
}

/// Borrows a C string argument.
///
/// # Safety
/// `s` is null or a valid NUL-terminated string.
unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, PvtnStatus> {
    if s.is_null() {
        return Err(fail(PvtnStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(s).to_str().map_err(|e| fail(PvtnStatus::InvalidUtf8, e.to_string()))
}

fn guard(f: impl FnOnce() -> PvtnStatus) -> PvtnStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PvtnStatus::Panic, "panic inside pvtn"))
}

fn owned(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Last error message on this thread, or null. The caller frees it.
#[no_mangle]
pub extern "C" fn pvtn_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pvtn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses scenario TOML into `*out`.
///
/// # Safety
/// `toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pvtn_scenario_parse(toml: *const c_char, out: *mut *mut PvtnScenario) -> PvtnStatus {
    guard(|| {
        if out.is_null() {
            return fail(PvtnStatus::NullArgument, "null out pointer");
        }
        let t = match text(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::parse(t) {
            Ok(sc) => {
                *out = Box::into_raw(Box::new(PvtnScenario(sc)));
                PvtnStatus::Ok
            }
            Err(e) => fail(PvtnStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `sc` is null or came from [`pvtn_scenario_parse`] and is not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pvtn_scenario_free(sc: *mut PvtnScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// Runs a scenario to quiescence. A non-zero `seed` overrides the file's.
/// The run is stored in `*out` whenever it executed, even when it returns
/// [`PvtnStatus::Failed`].
///
/// # Safety
/// `sc` is a live scenario handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pvtn_scenario_run(
    sc: *const PvtnScenario,
    provider_kind: u32,
    seed: u64,
    out: *mut *mut PvtnRun,
) -> PvtnStatus {
    guard(|| {
        if sc.is_null() || out.is_null() {
            return fail(PvtnStatus::NullArgument, "null scenario or out pointer");
        }
        let p = match provider(provider_kind) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let seed = (seed != 0).then_some(seed);
        match scenario::run(&(*sc).0, p, seed, None) {
            Ok(run) => {
                let passed = run.passed();
                let failed = run.assertions.iter().find(|a| !a.pass).map(|a| a.label.clone());
                *out = Box::into_raw(Box::new(PvtnRun(run)));
                if passed {
                    PvtnStatus::Ok
                } else {
                    fail(PvtnStatus::Failed, failed.unwrap_or_else(|| "run did not finish cleanly".into()))
                }
            }
            Err(ScenarioError::Parse(e)) => fail(PvtnStatus::Parse, e),
            Err(e) => fail(PvtnStatus::Setup, e.to_string()),
        }
    })
}

/// 1 if every expectation and invariant held, 0 otherwise or for null.
///
/// # Safety
/// `run` is null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn pvtn_run_passed(run: *const PvtnRun) -> i32 {
    run.as_ref().map_or(0, |r| r.0.passed() as i32)
}

/// Rendered trace, snapshot and results, as written to golden files.
///
/// # Safety
/// `run` is null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn pvtn_run_render(run: *const PvtnRun) -> *mut c_char {
    run.as_ref().map_or(ptr::null_mut(), |r| owned(r.0.render()))
}

/// Final tree snapshot in the line format `pvtn dump-tree` reads.
///
/// # Safety
/// `run` is null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn pvtn_run_snapshot(run: *const PvtnRun) -> *mut c_char {
    run.as_ref().map_or(ptr::null_mut(), |r| owned(Snapshot::of(&r.0.world).render()))
}

/// # Safety
/// `run` is null or came from [`pvtn_scenario_run`] and is not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pvtn_run_free(run: *mut PvtnRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Verifies hex certificates (one per line, root side first) against a hex
/// anchor key at tick `at`. Returns [`PvtnStatus::Rejected`] for a chain
/// that parses but does not verify.
///
/// # Safety
/// `certs` and `anchor` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pvtn_verify_chain(
    certs: *const c_char,
    anchor: *const c_char,
    at: u64,
    provider_kind: u32,
) -> PvtnStatus {
    guard(|| {
        let (c, a) = match (text(certs), text(anchor)) {
            (Ok(c), Ok(a)) => (c, a),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let chain = match chain_from_hex(c) {
            Ok(ch) => ch,
            Err((line, e)) => return fail(PvtnStatus::Parse, format!("line {line}: {e}")),
        };
        let key = match key_from_hex(a) {
            Ok(k) => k,
            Err(e) => return fail(PvtnStatus::Parse, format!("anchor: {e}")),
        };
        let p = match provider(provider_kind) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if verify_chain(p.as_ref(), &chain, &key, at, &RevocationSet::default()) {
            PvtnStatus::Ok
        } else {
            fail(PvtnStatus::Rejected, "chain does not verify")
        }
    })
}

/// Checks a snapshot for keys or edges crossing tenants. The number of
/// violations goes to `*violations` when it is non-null.
///
/// # Safety
/// `snapshot` is a NUL-terminated string; `violations` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn pvtn_isolation_check(snapshot: *const c_char, violations: *mut usize) -> PvtnStatus {
    guard(|| {
        let t = match text(snapshot) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let snap = match Snapshot::parse(t) {
            Ok(s) => s,
            Err(e) => return fail(PvtnStatus::Parse, e.to_string()),
        };
        let found = snap.isolation_violations();
        if !violations.is_null() {
            *violations = found.len();
        }
        match found.first() {
            None => PvtnStatus::Ok,
            Some(v) => fail(PvtnStatus::Rejected, v.clone()),
        }
    })
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn pvtn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
