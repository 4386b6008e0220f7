// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Command implementations behind the `korora` binary: scenario runs,
//! attack matrices, and policy audits. Each command returns the process
//! exit code so the binary stays a thin argument parser.
//!
//! Exit codes: 0 success (committed run, clean matrix, clean audit);
//! 1 usage, file, or parse errors; 2 rolled-back run, matrix invariant
//! breach, or audit violations; 3 aborted run; 4 internal self-check
//! failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use korora::migration::{run_migration, MigrationOutcome, Verdict};
use korora::policy::{
    authorize, ssp_check, AccessAttribute, IntegrityLevel, Response, SecurityLevel, SystemState,
};
use korora::scenario::{PolicyFixture, Scenario, ATTACK_PRESETS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ROLLED_BACK: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;
pub const EXIT_SELF_CHECK: i32 = 4;

/// Parse the `KORORA_SEED` fallback seed from the environment.
pub fn env_seed() -> Result<Option<u64>, String> {
    match std::env::var("KORORA_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| format!("KORORA_SEED: not an unsigned integer: {text:?}")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(format!("KORORA_SEED: {e}")),
    }
}

fn verdict_exit(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::Committed => EXIT_OK,
        Verdict::RolledBack => EXIT_ROLLED_BACK,
        Verdict::Aborted => EXIT_ABORTED,
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    Scenario::from_json(&text).with_context(|| format!("scenario {}", path.display()))
}

fn write_report(outcome: &MigrationOutcome, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&outcome.report)?;
    json.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, json).with_context(|| format!("writing report {}", path.display()))?;
    Ok(())
}

fn write_session_log(outcome: &MigrationOutcome, report_path: &Path) -> Result<()> {
    let log_path = report_path.with_extension("log");
    fs::write(&log_path, outcome.log.render())
        .with_context(|| format!("writing session log {}", log_path.display()))?;
    Ok(())
}

/// Persist quarantined originals as content-addressed files under `dir`.
fn write_quarantine(outcome: &MigrationOutcome, dir: &Path) -> Result<usize> {
    let mut written = 0;
    for (digest, bytes) in outcome.quarantine.entries() {
        if written == 0 {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let path = dir.join(hex::encode(digest));
        fs::write(&path, bytes)
            .with_context(|| format!("writing quarantine file {}", path.display()))?;
        written += 1;
    }
    Ok(written)
}

fn run_command<F: FnOnce() -> Result<i32>>(f: F) -> i32 {
    match f() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_USAGE
        }
    }
}

// ---------------------------------------------------------------------------
// run

/// Execute one scenario and write its report next to a session log and
/// any quarantine evidence.
pub fn cmd_run(scenario: &Path, output: &Path, seed: Option<u64>, quiet: bool) -> i32 {
    run_command(|| {
        let sc = load_scenario(scenario)?;
        let seed = sc.effective_seed(seed, None);
        let inputs = sc.build_inputs(seed, &sc.adversary)?;
        let outcome = run_migration(inputs);
        write_report(&outcome, output)?;
        write_session_log(&outcome, output)?;
        let quarantine_dir = output
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join("quarantine");
        let quarantined = write_quarantine(&outcome, &quarantine_dir)?;
        if !quiet {
            let m = &outcome.report.metrics;
            println!(
                "{}: verdict={} rounds={} bytes={} downtime={} detections={} report={}",
                sc.name,
                serde_json::to_value(outcome.report.verdict)?
                    .as_str()
                    .unwrap_or("?"),
                m.rounds,
                m.bytes_sent,
                m.downtime_ticks,
                m.detections,
                output.display()
            );
            if quarantined > 0 {
                println!(
                    "quarantined {} record(s) under {}",
                    quarantined,
                    quarantine_dir.display()
                );
            }
        }
        Ok(verdict_exit(outcome.report.verdict))
    })
}

// ---------------------------------------------------------------------------
// attack-matrix

#[derive(Debug, Clone, Serialize)]
pub struct MatrixRow {
    pub preset: String,
    pub verdict: Verdict,
    pub detections: u32,
    pub bytes_sent: u64,
    pub rounds: u32,
    pub downtime_ticks: u64,
    /// For the eavesdrop row: result of scanning captured frames for any
    /// scenario file plaintext.
    pub confidentiality: Option<String>,
}

/// True when captured frame hex contains none of the scenario's file
/// contents.
fn no_plaintext_exposed(sc: &Scenario, captured: &[String]) -> bool {
    let mut needles: Vec<String> = Vec::new();
    for files in [&sc.vm.config_files, &sc.vm.system_files, &sc.vm.data_files] {
        for content in files.values() {
            if !content.is_empty() {
                needles.push(hex::encode(content.as_bytes()));
            }
        }
    }
    captured
        .iter()
        .all(|frame| needles.iter().all(|needle| !frame.contains(needle)))
}

/// Run the scenario once per adversary preset; write per-preset reports
/// and a summary. Exit 0 only if the clean row commits and no attack row
/// silently commits.
pub fn cmd_attack_matrix(scenario: &Path, out_dir: &Path, seed: Option<u64>, quiet: bool) -> i32 {
    run_command(|| {
        let sc = load_scenario(scenario)?;
        let seed = sc.effective_seed(seed, None);
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;

        let rows: Vec<Result<MatrixRow>> = ATTACK_PRESETS
            .par_iter()
            .map(|preset| -> Result<MatrixRow> {
                let inputs = sc.build_inputs(seed, preset)?;
                let outcome = run_migration(inputs);
                let report_path = out_dir.join(format!("{preset}.json"));
                write_report(&outcome, &report_path)?;
                write_session_log(&outcome, &report_path)?;
                write_quarantine(&outcome, &out_dir.join(format!("{preset}-quarantine")))?;
                let confidentiality = if *preset == "eavesdrop" {
                    Some(if no_plaintext_exposed(&sc, &outcome.captured) {
                        "no-plaintext-observed".to_string()
                    } else {
                        "plaintext-exposed".to_string()
                    })
                } else {
                    None
                };
                let m = outcome.report.metrics;
                Ok(MatrixRow {
                    preset: preset.to_string(),
                    verdict: outcome.report.verdict,
                    detections: m.detections,
                    bytes_sent: m.bytes_sent,
                    rounds: m.rounds,
                    downtime_ticks: m.downtime_ticks,
                    confidentiality,
                })
            })
            .collect();
        let rows: Vec<MatrixRow> = rows.into_iter().collect::<Result<_>>()?;

        let mut summary = serde_json::to_string_pretty(&rows)?;
        summary.push('\n');
        fs::write(out_dir.join("summary.json"), summary)?;

        if !quiet {
            println!(
                "{:<18} {:<12} {:>10} {:>10} {:>7} {:>9}",
                "preset", "verdict", "detections", "bytes", "rounds", "downtime"
            );
            for row in &rows {
                println!(
                    "{:<18} {:<12} {:>10} {:>10} {:>7} {:>9}",
                    row.preset,
                    serde_json::to_value(row.verdict)?.as_str().unwrap_or("?"),
                    row.detections,
                    row.bytes_sent,
                    row.rounds,
                    row.downtime_ticks
                );
            }
        }

        let mut clean = true;
        for row in &rows {
            match row.preset.as_str() {
                "none" => clean &= row.verdict == Verdict::Committed,
                "eavesdrop" => {
                    clean &= row.verdict == Verdict::Committed
                        && row.confidentiality.as_deref() == Some("no-plaintext-observed")
                }
                _ => clean &= row.verdict != Verdict::Committed,
            }
        }
        Ok(if clean { EXIT_OK } else { EXIT_ROLLED_BACK })
    })
}

// ---------------------------------------------------------------------------
// policy-audit

/// The per-attribute rank rule and category containment, restated from
/// the definitions rather than calling into the policy module, so the
/// audit cross-checks the engine instead of echoing it.
fn reference_decision(
    s_level: IntegrityLevel,
    o_level: IntegrityLevel,
    attr: AccessAttribute,
    s_cats: &BTreeSet<String>,
    o_cats: &BTreeSet<String>,
) -> bool {
    let rank_ok = match attr {
        AccessAttribute::Read | AccessAttribute::Execute => o_level.rank() <= s_level.rank(),
        AccessAttribute::Write | AccessAttribute::Append => s_level.rank() <= o_level.rank(),
    };
    rank_ok && o_cats.is_subset(s_cats)
}

/// Exercise every (subject level, object level, attribute, subject
/// categories, object categories) combination over a three-element
/// category universe with the matrix granting access, and count decisions
/// that disagree with the reference. 5*5*4*8*8 = 6400 cases.
pub fn decision_grid_mismatches() -> u32 {
    let universe = ["u", "v", "w"];
    let subsets = |mask: u8| -> BTreeSet<String> {
        universe
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, c)| c.to_string())
            .collect()
    };
    let mut mismatches = 0u32;
    for &s_level in &IntegrityLevel::ALL {
        for &o_level in &IntegrityLevel::ALL {
            for &attr in &AccessAttribute::ALL {
                for s_mask in 0u8..8 {
                    for o_mask in 0u8..8 {
                        let s_cats = subsets(s_mask);
                        let o_cats = subsets(o_mask);
                        let mut state = SystemState::new();
                        state.set_subject_level(
                            "s",
                            SecurityLevel::new(s_level, s_cats.iter().cloned()),
                        );
                        state.set_object_level(
                            "o",
                            SecurityLevel::new(o_level, o_cats.iter().cloned()),
                        );
                        state.grant("s", "o", attr);
                        let got = authorize(&"s".into(), &"o".into(), attr, &state);
                        let want = if reference_decision(s_level, o_level, attr, &s_cats, &o_cats) {
                            Response::Yes
                        } else {
                            Response::No
                        };
                        if got != want {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    mismatches
}

/// Audit a policy fixture: report every triple that breaks the integrity
/// rules, then self-check the decision engine over the full grid.
pub fn cmd_policy_audit(fixture: &Path, quiet: bool) -> i32 {
    run_command(|| {
        let text = fs::read_to_string(fixture)
            .with_context(|| format!("reading fixture {}", fixture.display()))?;
        let fixture_doc: PolicyFixture =
            serde_json::from_str(&text).with_context(|| format!("fixture {}", fixture.display()))?;
        let state = fixture_doc.to_state()?;

        let violations = ssp_check(&state);
        for v in &violations {
            println!("{v}");
        }
        let mismatches = decision_grid_mismatches();
        if !quiet {
            println!(
                "audit: {} violation(s), decision grid {}/6400 verified",
                violations.len(),
                6400 - mismatches
            );
        }
        if mismatches > 0 {
            eprintln!("error: decision engine disagreed with the reference on {mismatches} cases");
            return Ok(EXIT_SELF_CHECK);
        }
        Ok(if violations.is_empty() {
            EXIT_OK
        } else {
            EXIT_ROLLED_BACK
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use korora::scenario::baseline_scenario;
    use std::fs;

    #[test]
    fn grid_self_check_is_clean() {
        assert_eq!(decision_grid_mismatches(), 0);
    }

    #[test]
    fn env_seed_parses_or_complains() {
        // Runs single-threaded within this test; env mutation is local.
        std::env::remove_var("KORORA_SEED");
        assert_eq!(env_seed().unwrap(), None);
        std::env::set_var("KORORA_SEED", "17");
        assert_eq!(env_seed().unwrap(), Some(17));
        std::env::set_var("KORORA_SEED", "not-a-number");
        assert!(env_seed().unwrap_err().contains("KORORA_SEED"));
        std::env::remove_var("KORORA_SEED");
    }

    #[test]
    fn run_baseline_exits_zero_and_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let scenario_path = dir.path().join("baseline.json");
        fs::write(
            &scenario_path,
            serde_json::to_string_pretty(&baseline_scenario("t", 3)).unwrap(),
        )
        .unwrap();
        let report_path = dir.path().join("report.json");
        let code = cmd_run(&scenario_path, &report_path, None, true);
        assert_eq!(code, EXIT_OK);
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report["version"], "korora_report_v1");
        assert_eq!(report["verdict"], "committed");
        assert!(report_path.with_extension("log").exists());
    }

    #[test]
    fn corrupted_fixture_rolls_back_and_quarantines() {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = baseline_scenario("corrupted", 4);
        sc.faults.corrupt_data_file = Some("ledger.db".to_string());
        let scenario_path = dir.path().join("scenario.json");
        fs::write(&scenario_path, serde_json::to_string(&sc).unwrap()).unwrap();
        let report_path = dir.path().join("report.json");
        let code = cmd_run(&scenario_path, &report_path, None, true);
        assert_eq!(code, EXIT_ROLLED_BACK);
        let quarantine = dir.path().join("quarantine");
        let entries: Vec<_> = fs::read_dir(&quarantine).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn malformed_scenario_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let scenario_path = dir.path().join("broken.json");
        fs::write(&scenario_path, "{\"version\": \"korora_scenario_v1\"").unwrap();
        let code = cmd_run(&scenario_path, &dir.path().join("r.json"), None, true);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn attack_matrix_is_clean_on_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let scenario_path = dir.path().join("baseline.json");
        fs::write(
            &scenario_path,
            serde_json::to_string(&baseline_scenario("m", 5)).unwrap(),
        )
        .unwrap();
        let out_dir = dir.path().join("matrix");
        let code = cmd_attack_matrix(&scenario_path, &out_dir, None, true);
        assert_eq!(code, EXIT_OK);
        let summary: Vec<serde_json::Value> =
            serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary.len(), 8);
        for preset in ATTACK_PRESETS {
            assert!(out_dir.join(format!("{preset}.json")).exists());
        }
    }

    #[test]
    fn policy_audit_flags_read_down() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = serde_json::json!({
            "subjects": {"high": {"level": "TPM"}},
            "objects": {"low": {"level": "UA"}},
            "matrix": [{"subject": "high", "object": "low", "attrs": ["r"]}],
            "triples": [{"subject": "high", "object": "low", "attr": "r"}]
        });
        let path = dir.path().join("fixture.json");
        fs::write(&path, fixture.to_string()).unwrap();
        assert_eq!(cmd_policy_audit(&path, true), EXIT_ROLLED_BACK);

        let clean = serde_json::json!({
            "subjects": {"s": {"level": "RP"}},
            "objects": {"o": {"level": "RP"}},
            "matrix": [{"subject": "s", "object": "o", "attrs": ["r", "w"]}],
            "triples": [{"subject": "s", "object": "o", "attr": "r"}]
        });
        fs::write(&path, clean.to_string()).unwrap();
        assert_eq!(cmd_policy_audit(&path, true), EXIT_OK);
    }
}
