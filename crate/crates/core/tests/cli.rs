use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pvtn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvtn")).args(args).output().expect("spawn pvtn")
}

fn scenario(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn threat_suite_exits_zero() {
    let out = pvtn(&["run", s(&scenario("threat")), "--jobs", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn golden_suite_matches() {
    let out = pvtn(&["run", s(&scenario("golden")), "--golden", s(&scenario("golden"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("golden match").count(), 10);
}

#[test]
fn tampered_golden_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let want = fs::read_to_string(scenario("golden/join-direct.trace")).unwrap();
    let tampered = want.replacen("| send |", "| relay |", 1);
    assert_ne!(want, tampered);
    fs::write(dir.path().join("join-direct.trace"), tampered).unwrap();
    let out = pvtn(&["run", s(&scenario("golden/join-direct.toml")), "--golden", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("golden MISMATCH"), "{stdout}");
}

#[test]
fn bless_writes_then_matches() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("golden/revoke-subtree.toml");
    assert_eq!(pvtn(&["run", s(&sc), "--golden", s(dir.path()), "--bless"]).status.code(), Some(0));
    assert_eq!(
        fs::read_to_string(dir.path().join("revoke-subtree.trace")).unwrap(),
        fs::read_to_string(scenario("golden/revoke-subtree.trace")).unwrap()
    );
    assert_eq!(pvtn(&["run", s(&sc), "--golden", s(dir.path())]).status.code(), Some(0));
}

#[test]
fn parse_error_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"bad\"\n[[step]]\nat = 1\nop = \"teleport\"\n").unwrap();
    let out = pvtn(&["run", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn unknown_node_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"bad\"\n[[step]]\nat = 1\nop = \"rotate\"\nmanager = \"nobody\"\n").unwrap();
    assert_eq!(pvtn(&["run", s(&bad)]).status.code(), Some(2));
}

#[test]
fn failed_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("golden/join-uninvited.toml")).unwrap().replace("member = false", "member = true");
    let p = dir.path().join("flipped.toml");
    fs::write(&p, text).unwrap();
    let out = pvtn(&["run", s(&p)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL member cand=true"));
}

#[test]
fn same_seed_gives_identical_trace_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.log"), dir.path().join("b.log"), dir.path().join("c.log"));
    let sc = scenario("threat/replay.toml");
    for t in [&a, &b] {
        assert_eq!(pvtn(&["run", s(&sc), "--seed", "42", "--trace", s(t)]).status.code(), Some(0));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    pvtn(&["run", s(&sc), "--seed", "43", "--trace", s(&c)]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn snapshot_dump_and_isolation_check() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("tree.snap");
    let sc = scenario("golden/two-tenant-bridge.toml");
    assert_eq!(pvtn(&["run", s(&sc), "--snapshot", s(&snap)]).status.code(), Some(0));
    let tree = pvtn(&["dump-tree", s(&snap)]);
    assert_eq!(tree.status.code(), Some(0));
    assert!(!tree.stdout.is_empty());
    assert_eq!(pvtn(&["isolation-check", s(&snap)]).status.code(), Some(0));

    // one key claimed by both tenants
    let text = fs::read_to_string(&snap).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let tenant_of = |l: &str| l.split(" | ").nth(3).unwrap().to_string();
    let first = lines[0];
    let other = lines.iter().find(|l| tenant_of(l) != tenant_of(first)).unwrap();
    let mut cols: Vec<&str> = first.split(" | ").collect();
    let foreign = tenant_of(other);
    cols[3] = &foreign;
    let forged = format!("{text}{}\n", cols.join(" | "));
    fs::write(&snap, forged).unwrap();
    assert_eq!(pvtn(&["isolation-check", s(&snap)]).status.code(), Some(1));

    fs::write(&snap, "not a snapshot\n").unwrap();
    assert_eq!(pvtn(&["dump-tree", s(&snap)]).status.code(), Some(2));
}

#[test]
fn exported_chains_verify_against_their_anchor_only() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("golden/two-tenant-bridge.toml");
    assert_eq!(pvtn(&["run", s(&sc), "--export-chains", s(dir.path())]).status.code(), Some(0));
    let chain = dir.path().join("a3.chain");
    let own = pvtn(&["verify-chain", s(&chain), s(&dir.path().join("alpha.anchor")), "--at", "5"]);
    assert_eq!(own.status.code(), Some(0), "{}", String::from_utf8_lossy(&own.stderr));
    let foreign = pvtn(&["verify-chain", s(&chain), s(&dir.path().join("beta.anchor")), "--at", "5"]);
    assert_eq!(foreign.status.code(), Some(1));
}
