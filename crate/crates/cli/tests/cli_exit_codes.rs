// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Exit-code and surface contract of the `korora` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn korora() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_korora"));
    // Keep the parent environment from leaking seeds into assertions.
    cmd.env_remove("KORORA_SEED");
    cmd
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn report_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn clean_run_exits_zero_and_writes_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let output = korora()
        .args(["run"])
        .arg(fixture("baseline.json"))
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    assert!(stdout(&output).contains("verdict=committed"));

    let json = report_json(&report);
    assert_eq!(json["verdict"], "committed");
    assert_eq!(json["seed"], 42);
    assert!(report.with_extension("log").exists());
    // Nothing was quarantined, so no quarantine directory appears.
    assert!(!dir.path().join("quarantine").exists());
}

#[test]
fn quiet_flag_silences_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let output = korora()
        .args(["run", "--quiet"])
        .arg(fixture("baseline.json"))
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(stdout(&output).is_empty());
}

#[test]
fn rolled_back_run_exits_two_and_quarantines() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let output = korora()
        .args(["run"])
        .arg(fixture("corrupted-data.json"))
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));

    let json = report_json(&report);
    assert_eq!(json["verdict"], "rolled_back");
    let quarantine_ref = json["flags"][0]["quarantine_ref"].as_str().unwrap();
    let stored = dir.path().join("quarantine").join(quarantine_ref);
    assert!(stored.exists(), "quarantined bytes on disk");
    // Content addressing: the file name is the hash of its content.
    let bytes = std::fs::read(&stored).unwrap();
    let digest = <sha2::Sha256 as sha2::Digest>::digest(&bytes);
    assert_eq!(hex::encode(digest), quarantine_ref);
}

#[test]
fn aborted_run_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("baseline.json")).unwrap();
    let mut scenario: serde_json::Value = serde_json::from_str(&text).unwrap();
    scenario["adversary"] = "tamper-precopy".into();
    let path = dir.path().join("tampered.json");
    std::fs::write(&path, serde_json::to_string(&scenario).unwrap()).unwrap();

    let report = dir.path().join("report.json");
    let output = korora()
        .args(["run"])
        .arg(&path)
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", stderr(&output));
    assert_eq!(report_json(&report)["verdict"], "aborted");
}

#[test]
fn malformed_input_exits_one_with_a_reasoned_message() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");

    // Unknown field.
    let path = dir.path().join("bad-field.json");
    let text = std::fs::read_to_string(fixture("baseline.json")).unwrap();
    let mut scenario: serde_json::Value = serde_json::from_str(&text).unwrap();
    scenario["surprise"] = true.into();
    std::fs::write(&path, serde_json::to_string(&scenario).unwrap()).unwrap();
    let output = korora()
        .args(["run"])
        .arg(&path)
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("surprise"), "{}", stderr(&output));

    // Domain validation failure names the field.
    let mut scenario: serde_json::Value = serde_json::from_str(&text).unwrap();
    scenario["vm"]["chunk_size"] = 100.into();
    std::fs::write(&path, serde_json::to_string(&scenario).unwrap()).unwrap();
    let output = korora()
        .args(["run"])
        .arg(&path)
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("chunk_size"), "{}", stderr(&output));

    // Not JSON at all.
    std::fs::write(&path, "not json").unwrap();
    let output = korora()
        .args(["run"])
        .arg(&path)
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));

    // Missing file.
    let output = korora()
        .args(["run", "/nonexistent/scenario.json", "-o"])
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let output = korora().output().unwrap();
    assert_eq!(output.status.code(), Some(1), "bare invocation");

    let output = korora().args(["frobnicate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1), "unknown subcommand");

    let output = korora()
        .args(["run", "--no-such-flag", "x"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1), "unknown flag");

    let output = korora().args(["--help"]).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "help");
    assert!(stdout(&output).contains("korora"));

    let output = korora().args(["run", "--help"]).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "subcommand help");
}

#[test]
fn seed_precedence_is_flag_then_env_then_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let run = |seed_flag: Option<&str>, env: Option<&str>| {
        let mut cmd = korora();
        cmd.args(["run", "--quiet"]);
        cmd.arg(fixture("baseline.json")).arg("-o").arg(&report);
        if let Some(seed) = seed_flag {
            cmd.args(["--seed", seed]);
        }
        if let Some(value) = env {
            cmd.env("KORORA_SEED", value);
        }
        let output = cmd.output().unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
        report_json(&report)["seed"].as_u64().unwrap()
    };

    assert_eq!(run(None, None), 42, "scenario seed");
    assert_eq!(run(None, Some("9")), 9, "env beats scenario");
    assert_eq!(run(Some("7"), Some("9")), 7, "flag beats env");

    // A garbage env seed is a usage error even with a valid flag absent.
    let output = korora()
        .args(["run"])
        .arg(fixture("baseline.json"))
        .arg("-o")
        .arg(&report)
        .env("KORORA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("KORORA_SEED"), "{}", stderr(&output));
}

#[test]
fn same_seed_gives_identical_reports_modulo_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for i in 0..2 {
        let report = dir.path().join(format!("r{i}.json"));
        let output = korora()
            .args(["run", "--quiet", "--seed", "5"])
            .arg(fixture("baseline.json"))
            .arg("-o")
            .arg(&report)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0));
        let mut json = report_json(&report);
        json.as_object_mut().unwrap().remove("generated_at");
        reports.push(json);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn policy_audit_exit_codes_and_line_format() {
    let output = korora()
        .args(["policy-audit"])
        .arg(fixture("policy-secure.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    assert!(stdout(&output).contains("0 violation(s)"));
    assert!(stdout(&output).contains("6400/6400"));

    let output = korora()
        .args(["policy-audit"])
        .arg(fixture("policy-readdown.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stdout(&output).contains(
        "VIOLATION subject=audit-bot object=scratch-pad attr=r reason=read-down"
    ));

    let output = korora()
        .args(["policy-audit", "/nonexistent/fixture.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn attack_matrix_writes_per_preset_reports_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("matrix");
    let output = korora()
        .args(["attack-matrix", "--quiet"])
        .arg(fixture("baseline.json"))
        .arg("-o")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for row in rows {
        let preset = row["preset"].as_str().unwrap();
        assert!(out.join(format!("{preset}.json")).exists());
        assert!(out.join(format!("{preset}.log")).exists());
        match preset {
            "none" => assert_eq!(row["verdict"], "committed"),
            "eavesdrop" => {
                assert_eq!(row["verdict"], "committed");
                assert_eq!(row["confidentiality"], "no-plaintext-observed");
            }
            _ => assert_ne!(row["verdict"], "committed", "{preset}"),
        }
    }
}
