//! End-to-end command-line tests: exit-code contract, report files, and
//! byte-level determinism of JSON reports.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meldrift"))
}

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../models")
        .join(name)
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("meldrift-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn verify_two_harmonic_passes() {
    let out = tmpdir("verify-pass");
    let status = bin()
        .args(["--model"])
        .arg(model("two_harmonic.toml"))
        .args(["--out"])
        .arg(&out)
        .args(["verify", "--target", "1.0;1.5707963267948966;0.0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let verdict: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(verdict["pass"], true);
    assert_eq!(verdict["schema"], "meldrift.verify.v1");
    assert!(out.join("branch.csv").exists());
    assert!(out.join("theta_scan.csv").exists());
}

#[test]
fn verify_zero_model_exits_one() {
    let out = tmpdir("verify-zero");
    let output = bin()
        .args(["--model"])
        .arg(model("zero.toml"))
        .args(["--out"])
        .arg(&out)
        .arg("verify")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        stdout.contains("no nondegenerate critical points"),
        "stdout: {stdout}"
    );
}

#[test]
fn single_harmonic_fails_h3b() {
    let out = tmpdir("verify-single");
    let status = bin()
        .args(["--model"])
        .arg(model("single_harmonic.toml"))
        .args(["--out"])
        .arg(&out)
        .arg("verify")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let verdict: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(verdict["h3a"]["pass"], true);
    assert_eq!(verdict["h3b"]["pass"], false);
}

#[test]
fn missing_model_exits_two() {
    let status = bin()
        .args(["--model", "/nonexistent/model.toml", "verify"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn repair_zero_model_roundtrip() {
    let out = tmpdir("repair");
    let status = bin()
        .args(["--model"])
        .arg(model("zero.toml"))
        .args(["--out"])
        .arg(&out)
        .args(["repair", "--budget", "0.1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let cert: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("certificate.json")).unwrap())
            .unwrap();
    assert_eq!(cert["no_op"], false);
    assert_eq!(cert["post_verification"]["pass"], true);
    assert!(cert["added_amplitude_sum"].as_f64().unwrap() < 0.1);
    // the emitted model verifies on its own
    let out2 = tmpdir("repair-verify");
    let status2 = bin()
        .args(["--model"])
        .arg(out.join("repaired_model.toml"))
        .args(["--out"])
        .arg(&out2)
        .arg("verify")
        .status()
        .unwrap();
    assert_eq!(status2.code(), Some(0));
}

#[test]
fn repair_zero_budget_exits_two() {
    let out = tmpdir("repair-zero-budget");
    let status = bin()
        .args(["--model"])
        .arg(model("zero.toml"))
        .args(["--out"])
        .arg(&out)
        .args(["repair", "--budget", "0.0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn scan_empty_grid_exits_two() {
    let out = tmpdir("scan-empty");
    let status = bin()
        .args(["--model"])
        .arg(model("two_harmonic.toml"))
        .args(["--out"])
        .arg(&out)
        .args(["scan", "--tau-steps", "0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn diffuse_zero_epsilon_exits_two() {
    let out = tmpdir("diffuse-zero");
    let status = bin()
        .args(["--model"])
        .arg(model("two_harmonic.toml"))
        .args(["--out"])
        .arg(&out)
        .args(["diffuse", "--epsilon", "0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn separatrix_writes_csv() {
    let out = tmpdir("separatrix");
    let status = bin()
        .args(["--model"])
        .arg(model("two_harmonic.toml"))
        .args(["--out"])
        .arg(&out)
        .arg("separatrix")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("separatrix_0.csv")).unwrap();
    assert!(csv.starts_with("t,q,p\n"));
    assert!(csv.lines().count() > 1000);
}

#[test]
fn reports_are_deterministic() {
    let out1 = tmpdir("det-1");
    let out2 = tmpdir("det-2");
    for out in [&out1, &out2] {
        let status = bin()
            .args(["--model"])
            .arg(model("two_harmonic.toml"))
            .args(["--out"])
            .arg(out)
            .args(["--seed", "42"])
            .args([
                "verify",
                "--target",
                "1.0;1.5707963267948966;0.0",
                "--grid",
                "3",
            ])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let a = std::fs::read(out1.join("verify.json")).unwrap();
    let b = std::fs::read(out2.join("verify.json")).unwrap();
    assert_eq!(
        a, b,
        "verify.json must be byte-identical for identical config and seed"
    );
    let ca = std::fs::read(out1.join("branch.csv")).unwrap();
    let cb = std::fs::read(out2.join("branch.csv")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn scan_workers_do_not_change_output() {
    let out1 = tmpdir("scan-w1");
    let out2 = tmpdir("scan-w4");
    for (out, w) in [(&out1, "1"), (&out2, "4")] {
        let status = bin()
            .args(["--model"])
            .arg(model("two_harmonic.toml"))
            .args(["--out"])
            .arg(out)
            .args(["--workers", w])
            .args(["scan", "--tau-steps", "6", "--s-steps", "5"])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let a = std::fs::read(out1.join("melnikov_scan.csv")).unwrap();
    let b = std::fs::read(out2.join("melnikov_scan.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lower_branch_verifies_symmetric_model() {
    let out = tmpdir("branch-lower");
    let status = bin()
        .args(["--model"])
        .arg(model("two_harmonic.toml"))
        .args(["--out"])
        .arg(&out)
        .args(["--branches", "lower"])
        .args(["verify", "--target", "1.0;1.5707963267948966;0.0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}
