use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_carelabel"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn care_flow_passes_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("s.snap");
    let audit = dir.path().join("a.log");
    let out = bin()
        .arg("run")
        .arg(scenario("care_flow.scn"))
        .args(["--diff", "--check"])
        .arg("--snapshot")
        .arg(&snap)
        .arg("--audit")
        .arg(&audit)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("download_ok->actor:drbob"));

    let out = bin().arg("check").arg(&snap).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("I1\tpass"));

    let out = bin()
        .arg("replay")
        .arg(&audit)
        .arg("--against")
        .arg(&snap)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failed_expectation_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.scn");
    fs::write(
        &script,
        "REGISTER-PATIENT alice\nEXPECT-ERROR NotAPatient\nREGISTER-USER bob\n",
    )
    .unwrap();
    let out = bin().arg("run").arg(&script).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn unexpected_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.scn");
    fs::write(&script, "REGISTER-PATIENT alice\nREGISTER-PATIENT alice\n").unwrap();
    let out = bin().arg("run").arg(&script).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn parse_errors_exit_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.scn");
    fs::write(&script, "REGISTER-PATIENT alice\nTICK zero\n").unwrap();
    let out = bin().arg("run").arg(&script).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&bin().output().unwrap()), 2);
    assert_eq!(
        code(&bin().args(["fuzz", "--seed", "1"]).output().unwrap()),
        2
    );
    assert_eq!(
        code(&bin().args(["run", "/nonexistent/script"]).output().unwrap()),
        2
    );
    assert_eq!(
        code(&bin().args(["check", "/nonexistent/snap"]).output().unwrap()),
        2
    );
}

#[test]
fn strict_delete_refuses_partial_erasure() {
    let script = scenario("strict_delete.scn");
    let out = bin()
        .arg("run")
        .arg(&script)
        .arg("--strict-delete")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // lenient mode deletes at once, so the scripted expectation fails
    let out = bin().arg("run").arg(&script).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn corrupt_snapshot_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("s.snap");
    fs::write(&snap, "carelabel-snapshot\t99\nend\n").unwrap();
    assert_eq!(code(&bin().arg("check").arg(&snap).output().unwrap()), 2);
    fs::write(&snap, "carelabel-snapshot\t1\nclock\n").unwrap();
    assert_eq!(code(&bin().arg("check").arg(&snap).output().unwrap()), 2);
}

#[test]
fn tampered_audit_diverges_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("s.snap");
    let audit = dir.path().join("a.log");
    let out = bin()
        .arg("run")
        .arg(scenario("gdpr.scn"))
        .arg("--snapshot")
        .arg(&snap)
        .arg("--audit")
        .arg(&audit)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(&audit).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    lines.pop();
    fs::write(&audit, lines.join("\n") + "\n").unwrap();
    let out = bin()
        .arg("replay")
        .arg(&audit)
        .arg("--against")
        .arg(&snap)
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn fuzz_emits_a_replayable_script() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("trace.scn");
    let out = bin()
        .args(["fuzz", "--seed", "3", "--steps", "200", "--emit"])
        .arg(&script)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("0 violations, 0 divergences"));

    let out = bin()
        .arg("run")
        .arg(&script)
        .args(["--diff", "--check-each", "--sweep-every", "10"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
