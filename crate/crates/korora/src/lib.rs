// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Korora: a desk-scale simulator for integrity-preserving live migration of
//! virtual machines.
//!
//! The crate models the moving parts of a migration as small, deterministic
//! libraries: an integrity policy state machine, a software TPM with
//! transferable sealed state, a chunked storage stack with write redirection
//! and popularity-based outsourcing, an authenticated encrypted channel with
//! a scripted adversary, and an orchestrator that drives a source and a
//! destination host through the migration phases. Everything is seeded and
//! reproducible: the same scenario and seed produce the same outcome.

pub mod channel;
pub mod migration;
pub mod policy;
pub mod scenario;
pub mod storage;
pub mod workload;
pub mod vtpm;
pub(crate) mod wire;
