// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! The `korora` binary: argument parsing and dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use korora_cli::{cmd_attack_matrix, cmd_policy_audit, cmd_run, env_seed, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "korora",
    version,
    about = "Simulator for integrity-preserving live VM migration"
)]
struct Cli {
    /// Seed override; beats KORORA_SEED and the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress human-readable progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one migration scenario and write its report.
    Run {
        /// Scenario file (korora_scenario_v1 JSON).
        scenario: PathBuf,
        /// Report output path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run a scenario once per adversary preset and summarize.
    AttackMatrix {
        /// Scenario file (korora_scenario_v1 JSON).
        scenario: PathBuf,
        /// Directory for per-preset reports and the summary.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Audit a policy fixture and self-check the decision engine.
    PolicyAudit {
        /// Policy fixture JSON.
        fixture: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprint!("{err}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let env = match env_seed() {
        Ok(seed) => seed,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let seed = cli.seed.or(env);
    let code = match cli.command {
        Command::Run { scenario, output } => cmd_run(&scenario, &output, seed, cli.quiet),
        Command::AttackMatrix { scenario, output } => {
            cmd_attack_matrix(&scenario, &output, seed, cli.quiet)
        }
        Command::PolicyAudit { fixture } => cmd_policy_audit(&fixture, cli.quiet),
    };
    ExitCode::from(code as u8)
}
