// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! The migration orchestrator: pre-checks, policy authorization, the
//! authenticated channel, iterative pre-copy with dirty-block rounds,
//! TPM-state transfer, manifest verification with flag/quarantine evidence,
//! and commit or rollback.
//!
//! One session is a deterministic single-threaded state machine that plays
//! three actors in turn: the source host, the destination host, and the
//! adversary sitting on the pipe between them. Every frame either end sends
//! passes through the adversary, so the engine observes exactly what a real
//! machine-in-the-middle deployment would. Time is modeled in ticks: a
//! transfer of k chunks costs ceil(k / capacity) ticks and the guest
//! workload keeps dirtying state during those ticks until the stop-and-copy
//! pause.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::channel::{
    Adversary, AdversaryAction, AdversaryConfig, EventKind, Frame, FrameBody, FrameLabel, HsFin,
    HsInit, HsResp, Identity, InitiatorHandshake, ResponderHandshake, SecureChannel, SessionLog,
};
use crate::policy::{authorize, AccessAttribute, ObjectId, Response, SubjectId, SystemState};
use crate::storage::{
    diff_apply, diff_encode, disk_manifest, ChunkView, DiffFile, IoRouter, VirtualDisk,
};
use crate::vtpm::{seal_state, unseal_state, SealedState, VtpmInstance};
use crate::wire::{Reader, Writer};
use crate::workload::{op_payload, Op, OpKind, StoreKind, Workload};

/// Capabilities a destination must advertise before it may receive a VM.
pub const REQUIRED_CAPABILITIES: &[&str] = &["live-migration", "vtpm"];

/// The hypervisor label both ends must run.
pub const HYPERVISOR: &str = "xen";

/// Sentinel prefix written in place of a quarantined record. 32 bytes of
/// printable ASCII that no legitimate record in the fixtures contains.
pub const FLAG_SENTINEL: &[u8; 32] = b"KORORA!FLAGGED!RECORD!QUARANTINE";

/// Key-derivation label for the TPM-state transport key.
pub const VTPM_TRANSPORT_LABEL: &[u8] = b"korora-vtpm-transport";

pub const REPORT_VERSION: &str = "korora_report_v1";

// ---------------------------------------------------------------------------
// Host and VM descriptions.

/// One host's migration-relevant description.
#[derive(Debug, Clone)]
pub struct HostDescriptor {
    pub host_id: String,
    pub hypervisor: String,
    pub capabilities: BTreeSet<String>,
    /// Memory headroom in pages.
    pub memory_units: u64,
    /// Storage headroom in chunks.
    pub storage_units: u64,
    pub identity: Identity,
    /// (subject, action) permissions; migration needs ("…", "migrate").
    pub acl: BTreeSet<(SubjectId, String)>,
}

/// Hashes the VM's files were declared to have when they were produced.
/// Verification compares transferred bytes against these, independently of
/// what the source currently holds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeclaredHashes {
    pub config: BTreeMap<String, [u8; 32]>,
    pub system: BTreeMap<String, [u8; 32]>,
    pub data: BTreeMap<String, [u8; 32]>,
}

fn hash_files(files: &BTreeMap<String, Vec<u8>>) -> BTreeMap<String, [u8; 32]> {
    files
        .iter()
        .map(|(name, bytes)| (name.clone(), Sha256::digest(bytes).into()))
        .collect()
}

/// A virtual machine: its files, disk, memory (pages modeled as chunks),
/// and TPM instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmSpec {
    pub vm_id: String,
    pub config_files: BTreeMap<String, Vec<u8>>,
    pub system_files: BTreeMap<String, Vec<u8>>,
    pub data_files: BTreeMap<String, Vec<u8>>,
    pub declared: DeclaredHashes,
    pub disk: VirtualDisk,
    pub memory: VirtualDisk,
    pub vtpm: VtpmInstance,
}

impl VmSpec {
    /// Record the current file hashes as the declared ones. Call when the
    /// VM's files are in their intended state; later corruption then
    /// becomes detectable.
    pub fn declare_current_hashes(&mut self) {
        self.declared = DeclaredHashes {
            config: hash_files(&self.config_files),
            system: hash_files(&self.system_files),
            data: hash_files(&self.data_files),
        };
    }
}

/// Per-artifact hash inventory of a VM snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub config_hashes: BTreeMap<String, [u8; 32]>,
    pub system_file_hashes: BTreeMap<String, [u8; 32]>,
    pub data_file_hashes: BTreeMap<String, [u8; 32]>,
    pub disk_root: [u8; 32],
    pub memory_root: [u8; 32],
    pub vtpm_counter: u64,
}

/// Deterministic manifest of a quiesced VM.
pub fn snapshot_manifest(vm: &VmSpec) -> Manifest {
    Manifest {
        config_hashes: hash_files(&vm.config_files),
        system_file_hashes: hash_files(&vm.system_files),
        data_file_hashes: hash_files(&vm.data_files),
        disk_root: disk_manifest(&vm.disk).expect("disk indices valid").root,
        memory_root: disk_manifest(&vm.memory).expect("memory indices valid").root,
        vtpm_counter: vm.vtpm.counter(),
    }
}

fn manifest_from_views<D: ChunkView + ?Sized, M: ChunkView + ?Sized>(
    config: &BTreeMap<String, Vec<u8>>,
    system: &BTreeMap<String, Vec<u8>>,
    data: &BTreeMap<String, Vec<u8>>,
    disk: &D,
    memory: &M,
    vtpm_counter: u64,
) -> Manifest {
    Manifest {
        config_hashes: hash_files(config),
        system_file_hashes: hash_files(system),
        data_file_hashes: hash_files(data),
        disk_root: disk_manifest(disk).expect("disk indices valid").root,
        memory_root: disk_manifest(memory).expect("memory indices valid").root,
        vtpm_counter,
    }
}

// ---------------------------------------------------------------------------
// Pre-check and authorization.

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrecheckError {
    #[error("hypervisor-mismatch: source runs {source_hv}, destination runs {destination_hv}")]
    HypervisorMismatch {
        source_hv: String,
        destination_hv: String,
    },
    #[error("missing-capability: destination lacks {0}")]
    MissingCapability(String),
    #[error("insufficient-resources: destination has {available} {kind} units, VM needs {needed}")]
    InsufficientResources {
        kind: &'static str,
        available: u64,
        needed: u64,
    },
}

/// The session's fixed cryptographic parameters, echoed in every report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CryptoRule {
    pub hash: String,
    pub aead: String,
    pub signature: String,
    pub kdf: String,
    pub chunk_size: u32,
    pub page_size: u32,
}

impl CryptoRule {
    fn pinned(chunk_size: u32, page_size: u32) -> Self {
        Self {
            hash: "sha-256".into(),
            aead: "chacha20-poly1305".into(),
            signature: "ed25519".into(),
            kdf: "hkdf-sha256".into(),
            chunk_size,
            page_size,
        }
    }
}

/// Verify the two hosts can carry this VM; on success the session's crypto
/// rule is fixed.
pub fn precheck(
    source: &HostDescriptor,
    destination: &HostDescriptor,
    vm: &VmSpec,
) -> Result<CryptoRule, PrecheckError> {
    if source.hypervisor != HYPERVISOR || destination.hypervisor != HYPERVISOR {
        return Err(PrecheckError::HypervisorMismatch {
            source_hv: source.hypervisor.clone(),
            destination_hv: destination.hypervisor.clone(),
        });
    }
    for cap in REQUIRED_CAPABILITIES {
        if !destination.capabilities.contains(*cap) {
            return Err(PrecheckError::MissingCapability(cap.to_string()));
        }
    }
    let needed_memory = vm.memory.chunk_count();
    if destination.memory_units < needed_memory {
        return Err(PrecheckError::InsufficientResources {
            kind: "memory",
            available: destination.memory_units,
            needed: needed_memory,
        });
    }
    let needed_storage = vm.disk.chunk_count();
    if destination.storage_units < needed_storage {
        return Err(PrecheckError::InsufficientResources {
            kind: "storage",
            available: destination.storage_units,
            needed: needed_storage,
        });
    }
    Ok(CryptoRule::pinned(
        vm.disk.chunk_size(),
        vm.memory.chunk_size(),
    ))
}

/// ACL plus mandatory-policy gate for starting a migration: the requester
/// must hold the "migrate" permission on the source host and be granted
/// Execute on the VM object by the integrity policy.
pub fn authorize_migration(
    requester: &SubjectId,
    vm_object: &ObjectId,
    source: &HostDescriptor,
    state: &SystemState,
) -> Response {
    if state.subject_level(requester).is_none() {
        return Response::Error;
    }
    if !source
        .acl
        .contains(&(requester.clone(), "migrate".to_string()))
    {
        return Response::No;
    }
    authorize(requester, vm_object, AccessAttribute::Execute, state)
}

// ---------------------------------------------------------------------------
// Flags and quarantine.

/// Evidence record for one quarantined artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagRecord {
    pub record_id: String,
    /// The sentinel bytes written in place of the record.
    pub flag_value: Vec<u8>,
    /// Content digest of the original bytes; the quarantine store key.
    pub quarantine_ref: [u8; 32],
    pub reason: String,
}

/// Content-addressed store of quarantined originals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuarantineStore {
    entries: BTreeMap<[u8; 32], Vec<u8>>,
}

impl QuarantineStore {
    /// Quarantine `original` and produce the record that replaces it. The
    /// flag value is the fixed sentinel followed by the quarantine
    /// reference in lowercase hex, so the stand-in both screams and links
    /// back to the evidence.
    pub fn flag_and_quarantine(
        &mut self,
        record_id: &str,
        original: &[u8],
        reason: &str,
    ) -> FlagRecord {
        let quarantine_ref: [u8; 32] = Sha256::digest(original).into();
        self.entries.insert(quarantine_ref, original.to_vec());
        let mut flag_value = Vec::with_capacity(FLAG_SENTINEL.len() + 64);
        flag_value.extend_from_slice(FLAG_SENTINEL);
        flag_value.extend_from_slice(hex::encode(quarantine_ref).as_bytes());
        FlagRecord {
            record_id: record_id.to_string(),
            flag_value,
            quarantine_ref,
            reason: reason.to_string(),
        }
    }

    pub fn retrieve(&self, quarantine_ref: &[u8; 32]) -> Option<&[u8]> {
        self.entries.get(quarantine_ref).map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[u8; 32], &[u8])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Verification.

/// Artifact class a verification finding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactClass {
    Config,
    System,
    Data,
    Disk,
    Memory,
    Vtpm,
}

impl fmt::Display for ArtifactClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArtifactClass::Config => "config",
            ArtifactClass::System => "system",
            ArtifactClass::Data => "data",
            ArtifactClass::Disk => "disk",
            ArtifactClass::Memory => "memory",
            ArtifactClass::Vtpm => "vtpm",
        };
        f.write_str(s)
    }
}

/// One mismatched artifact found at verification time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityViolation {
    pub class: ArtifactClass,
    pub name: Option<String>,
    pub detail: String,
}

fn compare_file_class(
    class: ArtifactClass,
    expected: &BTreeMap<String, [u8; 32]>,
    actual: &BTreeMap<String, [u8; 32]>,
    out: &mut Vec<IntegrityViolation>,
) {
    for (name, want) in expected {
        match actual.get(name) {
            None => out.push(IntegrityViolation {
                class,
                name: Some(name.clone()),
                detail: "file missing at destination".into(),
            }),
            Some(got) if got != want => out.push(IntegrityViolation {
                class,
                name: Some(name.clone()),
                detail: "hash mismatch".into(),
            }),
            Some(_) => {}
        }
    }
    for name in actual.keys() {
        if !expected.contains_key(name) {
            out.push(IntegrityViolation {
                class,
                name: Some(name.clone()),
                detail: "unexpected extra file".into(),
            });
        }
    }
}

/// Field-by-field comparison of the destination VM against the source
/// manifest; one entry per mismatched artifact.
pub fn verify_destination(source_manifest: &Manifest, dest_vm: &VmSpec) -> Vec<IntegrityViolation> {
    let actual = snapshot_manifest(dest_vm);
    let mut out = Vec::new();
    compare_file_class(
        ArtifactClass::Config,
        &source_manifest.config_hashes,
        &actual.config_hashes,
        &mut out,
    );
    compare_file_class(
        ArtifactClass::System,
        &source_manifest.system_file_hashes,
        &actual.system_file_hashes,
        &mut out,
    );
    compare_file_class(
        ArtifactClass::Data,
        &source_manifest.data_file_hashes,
        &actual.data_file_hashes,
        &mut out,
    );
    if actual.disk_root != source_manifest.disk_root {
        out.push(IntegrityViolation {
            class: ArtifactClass::Disk,
            name: None,
            detail: "disk root mismatch".into(),
        });
    }
    if actual.memory_root != source_manifest.memory_root {
        out.push(IntegrityViolation {
            class: ArtifactClass::Memory,
            name: None,
            detail: "memory root mismatch".into(),
        });
    }
    if actual.vtpm_counter != source_manifest.vtpm_counter {
        out.push(IntegrityViolation {
            class: ArtifactClass::Vtpm,
            name: None,
            detail: format!(
                "vtpm counter mismatch: manifest {}, instance {}",
                source_manifest.vtpm_counter, actual.vtpm_counter
            ),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Report.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Committed,
    RolledBack,
    Aborted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub bytes_sent: u64,
    pub round0_bytes: u64,
    pub diff_bytes: u64,
    pub vtpm_blob_bytes: u64,
    pub protocol_overhead_bytes: u64,
    pub rounds: u32,
    pub downtime_ticks: u64,
    pub total_ticks: u64,
    pub detections: u32,
}

/// Evaluation-framework block emitted with every report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub target: String,
    pub criteria: String,
    pub yardstick: String,
    pub data_gathering: String,
    pub synthesis: String,
    pub process: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagEntry {
    pub record_id: String,
    pub reason: String,
    pub quarantine_ref: String,
    pub flag_value: String,
}

impl From<&FlagRecord> for FlagEntry {
    fn from(f: &FlagRecord) -> Self {
        Self {
            record_id: f.record_id.clone(),
            reason: f.reason.clone(),
            quarantine_ref: hex::encode(f.quarantine_ref),
            flag_value: hex::encode(&f.flag_value),
        }
    }
}

/// The structured result of one migration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub vm_id: String,
    pub source_host: String,
    pub destination_host: String,
    pub verdict: Verdict,
    pub verdict_detail: String,
    pub phases: Vec<String>,
    pub metrics: Metrics,
    pub violations: Vec<IntegrityViolation>,
    pub flags: Vec<FlagEntry>,
    pub crypto_rule: Option<CryptoRule>,
    pub zeroization_verified: Option<bool>,
    pub evaluation: Evaluation,
    pub session_log_digest: String,
    /// Wall-clock stamp; the only field excluded from determinism checks.
    pub generated_at: String,
}

/// Everything a caller might want to inspect after a run. The report is
/// the JSON-facing part; the rest is in-memory evidence for tests and the
/// attack harness.
#[derive(Debug)]
pub struct MigrationOutcome {
    pub report: MigrationReport,
    pub log: SessionLog,
    pub quarantine: QuarantineStore,
    /// The activated destination VM; present only on commit.
    pub destination_vm: Option<VmSpec>,
    /// Source memory root after the run (all-zero root after commit).
    pub source_memory_root: [u8; 32],
    pub source_final_manifest: Option<Manifest>,
    /// Source PCR values at the end of the run.
    pub source_pcrs: [[u8; 32]; 8],
    /// Hex frame captures from an eavesdropping adversary.
    pub captured: Vec<String>,
    /// Every workload operation executed during the run.
    pub op_log: Vec<Op>,
}

// ---------------------------------------------------------------------------
// Phases.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PreCheck,
    Authorize,
    Authenticate,
    PreCopy(u32),
    StopAndCopy,
    VtpmTransfer,
    Verify,
    Commit,
    RolledBack,
    Aborted,
}

impl Phase {
    pub fn name(self) -> String {
        match self {
            Phase::PreCheck => "pre-check".into(),
            Phase::Authorize => "authorize".into(),
            Phase::Authenticate => "authenticate".into(),
            Phase::PreCopy(round) => format!("pre-copy-{round}"),
            Phase::StopAndCopy => "stop-and-copy".into(),
            Phase::VtpmTransfer => "vtpm-transfer".into(),
            Phase::Verify => "verify".into(),
            Phase::Commit => "commit".into(),
            Phase::RolledBack => "rolled-back".into(),
            Phase::Aborted => "aborted".into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Application messages inside the encrypted channel.

const APP_OFFER: u8 = 1;
const APP_FILES: u8 = 2;
const APP_DIFF: u8 = 3;
const APP_VTPM: u8 = 4;
const APP_MANIFEST: u8 = 5;
const APP_VERDICT: u8 = 6;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestMsg {
    config: BTreeMap<String, String>,
    system: BTreeMap<String, String>,
    data: BTreeMap<String, String>,
    disk_root: String,
    memory_root: String,
    vtpm_counter: u64,
}

fn hexmap(m: &BTreeMap<String, [u8; 32]>) -> BTreeMap<String, String> {
    m.iter().map(|(k, v)| (k.clone(), hex::encode(v))).collect()
}

fn unhexmap(m: &BTreeMap<String, String>) -> Option<BTreeMap<String, [u8; 32]>> {
    m.iter()
        .map(|(k, v)| {
            let bytes = hex::decode(v).ok()?;
            let arr: [u8; 32] = bytes.try_into().ok()?;
            Some((k.clone(), arr))
        })
        .collect()
}

impl From<&Manifest> for ManifestMsg {
    fn from(m: &Manifest) -> Self {
        Self {
            config: hexmap(&m.config_hashes),
            system: hexmap(&m.system_file_hashes),
            data: hexmap(&m.data_file_hashes),
            disk_root: hex::encode(m.disk_root),
            memory_root: hex::encode(m.memory_root),
            vtpm_counter: m.vtpm_counter,
        }
    }
}

impl ManifestMsg {
    fn to_manifest(&self) -> Option<Manifest> {
        Some(Manifest {
            config_hashes: unhexmap(&self.config)?,
            system_file_hashes: unhexmap(&self.system)?,
            data_file_hashes: unhexmap(&self.data)?,
            disk_root: hex::decode(&self.disk_root).ok()?.try_into().ok()?,
            memory_root: hex::decode(&self.memory_root).ok()?.try_into().ok()?,
            vtpm_counter: self.vtpm_counter,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OfferMsg {
    vm_id: String,
    chunk_size: u32,
    disk_chunks: u64,
    page_size: u32,
    memory_pages: u64,
    disk_id: String,
    memory_id: String,
    manifest0: ManifestMsg,
    crypto_rule: CryptoRule,
}

#[derive(Debug, Serialize, Deserialize)]
struct FilesMsg {
    config: BTreeMap<String, String>,
    system: BTreeMap<String, String>,
    data: BTreeMap<String, String>,
    declared_config: BTreeMap<String, String>,
    declared_system: BTreeMap<String, String>,
    declared_data: BTreeMap<String, String>,
}

fn hex_files(files: &BTreeMap<String, Vec<u8>>) -> BTreeMap<String, String> {
    files
        .iter()
        .map(|(k, v)| (k.clone(), hex::encode(v)))
        .collect()
}

fn unhex_files(files: &BTreeMap<String, String>) -> Option<BTreeMap<String, Vec<u8>>> {
    files
        .iter()
        .map(|(k, v)| Some((k.clone(), hex::decode(v).ok()?)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct VerdictMsg {
    verdict: String,
    violations: u32,
}

fn app_json<T: Serialize>(tag: u8, value: &T) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(tag);
    w.put_var(&serde_json::to_vec(value).expect("app message serializes"));
    w.into_bytes()
}

fn app_blob(tag: u8, blob: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(tag);
    w.put_var(blob);
    w.into_bytes()
}

fn app_diff(store: StoreKind, round: u32, diff_bytes: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(APP_DIFF);
    w.put_u8(match store {
        StoreKind::Disk => 0,
        StoreKind::Memory => 1,
    });
    w.put_u32(round);
    w.put_var(diff_bytes);
    w.into_bytes()
}

enum AppMsg {
    Offer(OfferMsg),
    Files(FilesMsg),
    Diff {
        store: StoreKind,
        #[allow(dead_code)]
        round: u32,
        bytes: Vec<u8>,
    },
    Vtpm(Vec<u8>),
    Manifest(ManifestMsg),
    Verdict(VerdictMsg),
}

fn parse_app(plaintext: &[u8]) -> Option<AppMsg> {
    let mut r = Reader::new(plaintext);
    let tag = r.take_u8().ok()?;
    let msg = match tag {
        APP_OFFER => AppMsg::Offer(serde_json::from_slice(&r.take_var().ok()?).ok()?),
        APP_FILES => AppMsg::Files(serde_json::from_slice(&r.take_var().ok()?).ok()?),
        APP_DIFF => {
            let store = match r.take_u8().ok()? {
                0 => StoreKind::Disk,
                1 => StoreKind::Memory,
                _ => return None,
            };
            let round = r.take_u32().ok()?;
            let bytes = r.take_var().ok()?;
            AppMsg::Diff {
                store,
                round,
                bytes,
            }
        }
        APP_VTPM => AppMsg::Vtpm(r.take_var().ok()?),
        APP_MANIFEST => AppMsg::Manifest(serde_json::from_slice(&r.take_var().ok()?).ok()?),
        APP_VERDICT => AppMsg::Verdict(serde_json::from_slice(&r.take_var().ok()?).ok()?),
        _ => return None,
    };
    r.finish().ok()?;
    Some(msg)
}

// ---------------------------------------------------------------------------
// The engine.

/// Everything a session needs to run.
pub struct MigrationInputs {
    pub source: HostDescriptor,
    pub destination: HostDescriptor,
    pub trust_root_key: ed25519_dalek::VerifyingKey,
    pub vm: VmSpec,
    pub policy: SystemState,
    pub requester: SubjectId,
    pub vm_object: ObjectId,
    pub workload: Workload,
    /// Popularity threshold for the disk router.
    pub popularity_threshold: u64,
    /// Stop pre-copy when the combined dirty set is at most this many
    /// chunks.
    pub stop_threshold: u64,
    pub max_rounds: u32,
    /// Transfer capacity in chunks per tick.
    pub capacity: u64,
    pub adversary: AdversaryConfig,
    pub seed: u64,
    pub scenario_name: String,
}

/// Session halt other than commit.
enum Halt {
    Abort(String),
    RolledBack(String),
}

struct DestinationState {
    vm_id: String,
    disk: Option<VirtualDisk>,
    memory: Option<VirtualDisk>,
    config_files: BTreeMap<String, Vec<u8>>,
    system_files: BTreeMap<String, Vec<u8>>,
    data_files: BTreeMap<String, Vec<u8>>,
    declared: DeclaredHashes,
    manifest0_counter: Option<u64>,
    vtpm: Option<VtpmInstance>,
    final_manifest: Option<Manifest>,
}

struct Engine {
    inputs_seed: u64,
    scenario_name: String,
    source_host: HostDescriptor,
    destination_host: HostDescriptor,
    root_key: ed25519_dalek::VerifyingKey,
    policy: SystemState,
    requester: SubjectId,
    vm_object: ObjectId,
    stop_threshold: u64,
    max_rounds: u32,
    capacity: u64,

    vm_id: String,
    config_files: BTreeMap<String, Vec<u8>>,
    system_files: BTreeMap<String, Vec<u8>>,
    data_files: BTreeMap<String, Vec<u8>>,
    declared: DeclaredHashes,
    vtpm: VtpmInstance,
    disk: IoRouter,
    memory: IoRouter,

    workload: Workload,
    adversary: Adversary<ChaCha20Rng>,
    rng_handshake: ChaCha20Rng,
    rng_seal: ChaCha20Rng,

    chan_src: Option<SecureChannel>,
    chan_dst: Option<SecureChannel>,
    dst: DestinationState,

    log: SessionLog,
    phases: Vec<String>,
    metrics: Metrics,
    tick: u64,
    in_downtime: bool,

    crypto_rule: Option<CryptoRule>,
    violations: Vec<IntegrityViolation>,
    flags: Vec<FlagRecord>,
    quarantine: QuarantineStore,
    zeroization_verified: Option<bool>,
    source_final_manifest: Option<Manifest>,
    destination_vm: Option<VmSpec>,
}

/// Run one migration session to its terminal phase.
pub fn run_migration(inputs: MigrationInputs) -> MigrationOutcome {
    let MigrationInputs {
        source,
        destination,
        trust_root_key,
        vm,
        policy,
        requester,
        vm_object,
        workload,
        popularity_threshold,
        stop_threshold,
        max_rounds,
        capacity,
        adversary,
        seed,
        scenario_name,
    } = inputs;

    let adversary_rng = crate::workload::derive_rng(seed, "adversary");
    let VmSpec {
        vm_id,
        config_files,
        system_files,
        data_files,
        declared,
        disk,
        memory,
        vtpm,
    } = vm;

    let mut engine = Engine {
        inputs_seed: seed,
        scenario_name,
        source_host: source,
        destination_host: destination,
        root_key: trust_root_key,
        policy,
        requester,
        vm_object,
        stop_threshold,
        max_rounds,
        capacity: capacity.max(1),
        vm_id: vm_id.clone(),
        config_files,
        system_files,
        data_files,
        declared,
        vtpm,
        disk: IoRouter::new(disk, popularity_threshold).expect("threshold validated by caller"),
        memory: IoRouter::new(memory, u64::MAX).expect("u64::MAX is a valid threshold"),
        workload,
        adversary: Adversary::new(adversary, adversary_rng),
        rng_handshake: crate::workload::derive_rng(seed, "handshake"),
        rng_seal: crate::workload::derive_rng(seed, "seal"),
        chan_src: None,
        chan_dst: None,
        dst: DestinationState {
            vm_id,
            disk: None,
            memory: None,
            config_files: BTreeMap::new(),
            system_files: BTreeMap::new(),
            data_files: BTreeMap::new(),
            declared: DeclaredHashes::default(),
            manifest0_counter: None,
            vtpm: None,
            final_manifest: None,
        },
        log: SessionLog::default(),
        phases: Vec::new(),
        metrics: Metrics::default(),
        tick: 0,
        in_downtime: false,
        crypto_rule: None,
        violations: Vec::new(),
        flags: Vec::new(),
        quarantine: QuarantineStore::default(),
        zeroization_verified: None,
        source_final_manifest: None,
        destination_vm: None,
    };

    let (verdict, detail) = match engine.execute() {
        Ok(()) => (Verdict::Committed, "migration committed".to_string()),
        Err(Halt::RolledBack(why)) => {
            engine.enter(Phase::RolledBack);
            (Verdict::RolledBack, why)
        }
        Err(Halt::Abort(why)) => {
            engine.enter(Phase::Aborted);
            engine
                .log
                .push(engine.tick, "session", EventKind::Abort, why.clone());
            (Verdict::Aborted, why)
        }
    };
    engine.finish(verdict, detail)
}

impl Engine {
    fn enter(&mut self, phase: Phase) {
        self.phases.push(phase.name());
    }

    /// Advance time. The guest workload keeps running until stop-and-copy;
    /// downtime accrues from stop-and-copy until the terminal phase.
    fn advance(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.tick += 1;
            if self.in_downtime {
                self.metrics.downtime_ticks += 1;
            } else {
                for _ in 0..self.workload.ops_per_tick() {
                    let op = self.workload.next_op();
                    self.apply_op(op);
                }
            }
        }
        self.metrics.total_ticks = self.tick;
    }

    fn apply_op(&mut self, op: Op) {
        let router = match op.store {
            StoreKind::Disk => &mut self.disk,
            StoreKind::Memory => &mut self.memory,
        };
        match op.kind {
            OpKind::Read => {
                router
                    .io_read(op.index, crate::storage::Requester::Vm)
                    .expect("workload indices are in range");
            }
            OpKind::Write => {
                let payload = op_payload(op.data_seed, router.original().chunk_size());
                router
                    .io_write(op.index, &payload)
                    .expect("workload indices are in range");
            }
        }
    }

    /// Push one frame through the adversary, logging the send and whatever
    /// the adversary did. Returns what comes out the far end.
    fn pipe(&mut self, from: &str, frame: Frame) -> Vec<Frame> {
        self.metrics.bytes_sent += frame.bytes.len() as u64;
        self.log.push(
            self.tick,
            from,
            EventKind::Send,
            format!("label={:?} bytes={}", frame.label, frame.bytes.len()),
        );
        let (frames, notes) = self.adversary.intercept(frame);
        for note in notes {
            let kind = match note.kind {
                AdversaryAction::Eavesdrop => EventKind::Eavesdrop,
                AdversaryAction::Tamper => EventKind::Tamper,
                AdversaryAction::Replay => EventKind::Replay,
                AdversaryAction::Drop => EventKind::Drop,
                AdversaryAction::Impersonate => EventKind::Tamper,
            };
            self.log.push(self.tick, "adversary", kind, note.detail);
        }
        frames
    }

    fn abort_channel(&mut self, who: &str, err: impl fmt::Display) -> Halt {
        self.metrics.detections += 1;
        Halt::Abort(format!("{who}: {err}"))
    }

    /// Decrypt frames arriving at the destination into app messages.
    fn dst_open(&mut self, frames: Vec<Frame>) -> Result<Vec<AppMsg>, Halt> {
        let mut out = Vec::new();
        for frame in frames {
            let msg = match FrameBody::decode(&frame.bytes) {
                Some(FrameBody::Data(msg)) => msg,
                _ => return Err(self.abort_channel("destination", "tamper-detected")),
            };
            let chan = self.chan_dst.as_mut().expect("channel established");
            match chan.open_recv(&msg) {
                Ok(plaintext) => {
                    self.log.push(
                        self.tick,
                        "destination",
                        EventKind::Recv,
                        format!("label={:?} seq={} bytes={}", frame.label, msg.seq, msg.ciphertext.len()),
                    );
                    match parse_app(&plaintext) {
                        Some(app) => out.push(app),
                        None => {
                            return Err(
                                self.abort_channel("destination", "malformed application message")
                            )
                        }
                    }
                }
                Err(err) => return Err(self.abort_channel("destination", err)),
            }
        }
        Ok(out)
    }

    /// Seal and send one source application message; deliver to the
    /// destination and hand back the decoded messages.
    fn src_send(
        &mut self,
        label: FrameLabel,
        plaintext: Vec<u8>,
        ticks: u64,
    ) -> Result<Vec<AppMsg>, Halt> {
        self.advance(ticks.max(1));
        let chan = self.chan_src.as_mut().expect("channel established");
        let msg = chan.seal_send(&plaintext);
        let frame = Frame {
            label,
            bytes: msg.encode(),
        };
        let frames = self.pipe("source", frame);
        self.dst_open(frames)
    }

    fn transfer_ticks(&self, chunks: u64) -> u64 {
        chunks.div_ceil(self.capacity).max(1)
    }

    fn execute(&mut self) -> Result<(), Halt> {
        // Pre-check.
        self.enter(Phase::PreCheck);
        let probe_vm = VmSpec {
            vm_id: self.vm_id.clone(),
            config_files: self.config_files.clone(),
            system_files: self.system_files.clone(),
            data_files: self.data_files.clone(),
            declared: self.declared.clone(),
            disk: self.disk.original().clone(),
            memory: self.memory.original().clone(),
            vtpm: self.vtpm.clone(),
        };
        let rule = precheck(&self.source_host, &self.destination_host, &probe_vm)
            .map_err(|e| Halt::Abort(format!("precheck: {e}")))?;
        self.crypto_rule = Some(rule);

        // Authorization.
        self.enter(Phase::Authorize);
        let policy_findings = crate::policy::ssp_check(&self.policy);
        if !policy_findings.is_empty() {
            return Err(Halt::Abort(format!(
                "authorization: policy state insecure ({} violations)",
                policy_findings.len()
            )));
        }
        match authorize_migration(
            &self.requester,
            &self.vm_object,
            &self.source_host,
            &self.policy,
        ) {
            Response::Yes => {}
            Response::No => {
                return Err(Halt::Abort("authorization: denied".into()));
            }
            other => {
                return Err(Halt::Abort(format!("authorization: {other}")));
            }
        }

        // Mutual authentication.
        self.enter(Phase::Authenticate);
        self.handshake()?;

        // Snapshot and inventory.
        let manifest0 = manifest_from_views(
            &self.config_files,
            &self.system_files,
            &self.data_files,
            &self.disk.merged(),
            &self.memory.merged(),
            self.vtpm.counter(),
        );
        let offer = OfferMsg {
            vm_id: self.vm_id.clone(),
            chunk_size: self.disk.original().chunk_size(),
            disk_chunks: self.disk.original().chunk_count(),
            page_size: self.memory.original().chunk_size(),
            memory_pages: self.memory.original().chunk_count(),
            disk_id: self.disk.original().disk_id().to_string(),
            memory_id: self.memory.original().disk_id().to_string(),
            manifest0: ManifestMsg::from(&manifest0),
            crypto_rule: self.crypto_rule.clone().expect("fixed at precheck"),
        };
        let msgs = self.src_send(FrameLabel::Control, app_json(APP_OFFER, &offer), 1)?;
        self.dst_handle_all(msgs)?;

        let files = FilesMsg {
            config: hex_files(&self.config_files),
            system: hex_files(&self.system_files),
            data: hex_files(&self.data_files),
            declared_config: hexmap(&self.declared.config),
            declared_system: hexmap(&self.declared.system),
            declared_data: hexmap(&self.declared.data),
        };
        let msgs = self.src_send(FrameLabel::Control, app_json(APP_FILES, &files), 1)?;
        self.dst_handle_all(msgs)?;

        // Round 0: everything.
        self.enter(Phase::PreCopy(0));
        self.metrics.rounds = 1;
        let all_disk: BTreeSet<u64> = (0..self.disk.original().chunk_count()).collect();
        let all_memory: BTreeSet<u64> = (0..self.memory.original().chunk_count()).collect();
        self.send_diff(StoreKind::Disk, 0, &all_disk, FrameLabel::Round0)?;
        self.send_diff(StoreKind::Memory, 0, &all_memory, FrameLabel::Round0)?;

        // Iterative pre-copy.
        let (final_disk, final_memory) = loop {
            let disk_dirty = self.disk.dbt_drain();
            let memory_dirty = self.memory.dbt_drain();
            let round = self.metrics.rounds;
            let total = (disk_dirty.len() + memory_dirty.len()) as u64;
            if total <= self.stop_threshold || round >= self.max_rounds {
                break (disk_dirty, memory_dirty);
            }
            self.enter(Phase::PreCopy(round));
            self.metrics.rounds += 1;
            self.send_diff(StoreKind::Disk, round, &disk_dirty, FrameLabel::Diff)?;
            self.send_diff(StoreKind::Memory, round, &memory_dirty, FrameLabel::Diff)?;
        };

        // Stop-and-copy: the guest pauses; downtime starts.
        self.enter(Phase::StopAndCopy);
        self.in_downtime = true;
        let round = self.metrics.rounds;
        self.send_diff(StoreKind::Disk, round, &final_disk, FrameLabel::Diff)?;
        self.send_diff(StoreKind::Memory, round, &final_memory, FrameLabel::Diff)?;

        // TPM state transfer.
        self.enter(Phase::VtpmTransfer);
        let transport_key = self
            .chan_src
            .as_ref()
            .expect("channel established")
            .export_key(VTPM_TRANSPORT_LABEL);
        let sealed = seal_state(&self.vtpm, &transport_key, &mut self.rng_seal);
        let blob = sealed.encode();
        self.metrics.vtpm_blob_bytes += blob.len() as u64;
        let msgs = self.src_send(FrameLabel::Vtpm, app_blob(APP_VTPM, &blob), 1)?;
        self.dst_handle_all(msgs)?;

        // Final manifest over the source's merged state.
        let final_manifest = manifest_from_views(
            &self.config_files,
            &self.system_files,
            &self.data_files,
            &self.disk.merged(),
            &self.memory.merged(),
            self.vtpm.counter(),
        );
        self.source_final_manifest = Some(final_manifest.clone());
        let msgs = self.src_send(
            FrameLabel::Manifest,
            app_json(APP_MANIFEST, &ManifestMsg::from(&final_manifest)),
            1,
        )?;
        self.dst_handle_all(msgs)?;

        // Verification happens on the destination once the manifest lands.
        if self.dst.final_manifest.is_none() {
            self.metrics.detections += 1;
            return Err(Halt::Abort(
                "destination: protocol incomplete (final manifest missing)".into(),
            ));
        }
        self.enter(Phase::Verify);
        let verdict = self.dst_verify()?;

        // The destination reports its verdict back over the channel.
        self.advance(1);
        let verdict_msg = VerdictMsg {
            verdict: if verdict { "committed" } else { "rolled-back" }.to_string(),
            violations: self.violations.len() as u32,
        };
        let chan = self.chan_dst.as_mut().expect("channel established");
        let msg = chan.seal_send(&app_json(APP_VERDICT, &verdict_msg));
        let frame = Frame {
            label: FrameLabel::Control,
            bytes: msg.encode(),
        };
        let frames = self.pipe("destination", frame);
        let mut committed_ack = None;
        for frame in frames {
            let msg = match FrameBody::decode(&frame.bytes) {
                Some(FrameBody::Data(msg)) => msg,
                _ => return Err(self.abort_channel("source", "tamper-detected")),
            };
            let chan = self.chan_src.as_mut().expect("channel established");
            match chan.open_recv(&msg) {
                Ok(plaintext) => {
                    self.log.push(
                        self.tick,
                        "source",
                        EventKind::Recv,
                        format!("label={:?} seq={}", frame.label, msg.seq),
                    );
                    match parse_app(&plaintext) {
                        Some(AppMsg::Verdict(v)) => committed_ack = Some(v.verdict == "committed"),
                        _ => {
                            return Err(
                                self.abort_channel("source", "malformed application message")
                            )
                        }
                    }
                }
                Err(err) => return Err(self.abort_channel("source", err)),
            }
        }
        let Some(committed) = committed_ack else {
            self.metrics.detections += 1;
            return Err(Halt::Abort(
                "source: protocol incomplete (verdict missing)".into(),
            ));
        };

        if !committed {
            return Err(Halt::RolledBack(format!(
                "verification found {} violation(s); destination discarded, source remains authoritative",
                self.violations.len()
            )));
        }

        // Commit: destination activates; the source removes the guest's
        // memory pages and proves it.
        self.enter(Phase::Commit);
        self.advance(1);
        self.memory.zeroize();
        let zero_reference = VirtualDisk::zeroed(
            "zero",
            self.memory.original().chunk_size(),
            self.memory.original().chunk_count(),
        )
        .expect("geometry already validated");
        let zero_root = disk_manifest(&zero_reference).expect("indices valid").root;
        let actual_root = disk_manifest(&self.memory.merged())
            .expect("indices valid")
            .root;
        self.zeroization_verified = Some(actual_root == zero_root);
        Ok(())
    }

    fn handshake(&mut self) -> Result<(), Halt> {
        let source_identity = self.source_host.identity.clone();
        let destination_identity = self.destination_host.identity.clone();

        let (ihs, init) = InitiatorHandshake::start(&source_identity, &mut self.rng_handshake);
        self.advance(1);
        let frames = self.pipe(
            "source",
            Frame {
                label: FrameLabel::Handshake,
                bytes: init.encode(),
            },
        );
        let mut responder: Option<(ResponderHandshake, HsResp)> = None;
        for frame in frames {
            let init: HsInit = match FrameBody::decode(&frame.bytes) {
                Some(FrameBody::HsInit(m)) if responder.is_none() => m,
                Some(FrameBody::HsInit(_)) => {
                    return Err(self.hs_fail("destination", "replayed handshake opening"))
                }
                _ => return Err(self.hs_fail("destination", "unexpected handshake frame")),
            };
            match ResponderHandshake::respond(
                &destination_identity,
                &init,
                &self.root_key,
                &mut self.rng_handshake,
            ) {
                Ok(pair) => responder = Some(pair),
                Err(e) => return Err(self.hs_fail("destination", e)),
            }
        }
        let Some((rhs, resp)) = responder else {
            return Err(self.hs_fail("destination", "handshake opening lost"));
        };

        self.advance(1);
        let frames = self.pipe(
            "destination",
            Frame {
                label: FrameLabel::Handshake,
                bytes: resp.encode(),
            },
        );
        let mut ihs = Some(ihs);
        let mut initiator_done: Option<(SecureChannel, HsFin)> = None;
        for frame in frames {
            let resp: HsResp = match FrameBody::decode(&frame.bytes) {
                Some(FrameBody::HsResp(m)) if initiator_done.is_none() => m,
                Some(FrameBody::HsResp(_)) => {
                    return Err(self.hs_fail("source", "replayed handshake response"))
                }
                _ => return Err(self.hs_fail("source", "unexpected handshake frame")),
            };
            // Duplicates return above, so the initiator state is present.
            match ihs.take().expect("single response frame").finish(&resp, &self.root_key) {
                Ok((chan, fin, _evidence)) => initiator_done = Some((chan, fin)),
                Err(e) => return Err(self.hs_fail("source", e)),
            }
        }
        let Some((chan_src, fin)) = initiator_done else {
            return Err(self.hs_fail("source", "handshake response lost"));
        };

        self.advance(1);
        let frames = self.pipe(
            "source",
            Frame {
                label: FrameLabel::Handshake,
                bytes: fin.encode(),
            },
        );
        let mut rhs = Some(rhs);
        let mut established = None;
        for frame in frames {
            let fin: HsFin = match FrameBody::decode(&frame.bytes) {
                Some(FrameBody::HsFin(m)) if established.is_none() => m,
                Some(FrameBody::HsFin(_)) => {
                    return Err(self.hs_fail("destination", "replayed handshake closing"))
                }
                _ => return Err(self.hs_fail("destination", "unexpected handshake frame")),
            };
            match rhs.take().expect("single closing frame").finish(&fin) {
                Ok(pair) => established = Some(pair),
                Err(e) => return Err(self.hs_fail("destination", e)),
            }
        }
        let Some((chan_dst, evidence)) = established else {
            return Err(self.hs_fail("destination", "handshake closing lost"));
        };

        self.log.push(
            self.tick,
            "destination",
            EventKind::HsOk,
            format!(
                "peer={} evidence={}",
                chan_dst.peer,
                hex::encode(evidence.encode())
            ),
        );
        self.chan_src = Some(chan_src);
        self.chan_dst = Some(chan_dst);
        Ok(())
    }

    fn hs_fail(&mut self, who: &str, why: impl fmt::Display) -> Halt {
        self.metrics.detections += 1;
        self.log
            .push(self.tick, who, EventKind::HsFail, why.to_string());
        Halt::Abort(format!("handshake: {why}"))
    }

    fn send_diff(
        &mut self,
        store: StoreKind,
        round: u32,
        indices: &BTreeSet<u64>,
        label: FrameLabel,
    ) -> Result<(), Halt> {
        if indices.is_empty() {
            return Ok(());
        }
        let diff = match store {
            StoreKind::Disk => diff_encode(&self.disk.merged(), indices),
            StoreKind::Memory => diff_encode(&self.memory.merged(), indices),
        }
        .expect("dirty indices are in range");
        let bytes = diff.encode();
        if round == 0 {
            self.metrics.round0_bytes += bytes.len() as u64;
        } else {
            self.metrics.diff_bytes += bytes.len() as u64;
        }
        let ticks = self.transfer_ticks(indices.len() as u64);
        let msgs = self.src_send(label, app_diff(store, round, &bytes), ticks)?;
        self.dst_handle_all(msgs)?;
        Ok(())
    }

    fn dst_handle_all(&mut self, msgs: Vec<AppMsg>) -> Result<(), Halt> {
        for msg in msgs {
            self.dst_handle(msg)?;
        }
        Ok(())
    }

    fn dst_handle(&mut self, msg: AppMsg) -> Result<(), Halt> {
        match msg {
            AppMsg::Offer(offer) => {
                let manifest0 = offer
                    .manifest0
                    .to_manifest()
                    .ok_or_else(|| Halt::Abort("destination: malformed manifest".into()))?;
                self.dst.vm_id = offer.vm_id;
                self.dst.manifest0_counter = Some(manifest0.vtpm_counter);
                self.dst.disk = Some(
                    VirtualDisk::zeroed(&offer.disk_id, offer.chunk_size, offer.disk_chunks)
                        .map_err(|e| Halt::Abort(format!("destination: {e}")))?,
                );
                self.dst.memory = Some(
                    VirtualDisk::zeroed(&offer.memory_id, offer.page_size, offer.memory_pages)
                        .map_err(|e| Halt::Abort(format!("destination: {e}")))?,
                );
            }
            AppMsg::Files(files) => {
                let decode = |m| {
                    unhex_files(m).ok_or_else(|| Halt::Abort("destination: malformed files".into()))
                };
                self.dst.config_files = decode(&files.config)?;
                self.dst.system_files = decode(&files.system)?;
                self.dst.data_files = decode(&files.data)?;
                let decode_hashes = |m| {
                    unhexmap(m).ok_or_else(|| Halt::Abort("destination: malformed hashes".into()))
                };
                self.dst.declared = DeclaredHashes {
                    config: decode_hashes(&files.declared_config)?,
                    system: decode_hashes(&files.declared_system)?,
                    data: decode_hashes(&files.declared_data)?,
                };
            }
            AppMsg::Diff { store, bytes, .. } => {
                let diff = DiffFile::decode(&bytes)
                    .map_err(|e| self.abort_channel("destination", format!("diff rejected: {e}")))?;
                let target = match store {
                    StoreKind::Disk => self.dst.disk.as_mut(),
                    StoreKind::Memory => self.dst.memory.as_mut(),
                };
                let target = target
                    .ok_or_else(|| Halt::Abort("destination: diff before offer".into()))?;
                diff_apply(target, &diff)
                    .map_err(|e| Halt::Abort(format!("destination: diff rejected: {e}")))?;
            }
            AppMsg::Vtpm(blob) => {
                let sealed = SealedState::decode(&blob)
                    .map_err(|e| self.abort_channel("destination", e))?;
                let transport_key = self
                    .chan_dst
                    .as_ref()
                    .expect("channel established")
                    .export_key(VTPM_TRANSPORT_LABEL);
                let instance = unseal_state(&sealed, &transport_key)
                    .map_err(|e| self.abort_channel("destination", e))?;
                self.dst.vtpm = Some(instance);
            }
            AppMsg::Manifest(m) => {
                let manifest = m
                    .to_manifest()
                    .ok_or_else(|| Halt::Abort("destination: malformed manifest".into()))?;
                self.dst.final_manifest = Some(manifest);
            }
            AppMsg::Verdict(_) => {
                return Err(Halt::Abort(
                    "destination: unexpected verdict message".into(),
                ));
            }
        }
        Ok(())
    }

    /// Destination-side verification. Returns true to commit; false means
    /// the state was discarded and flags were recorded.
    fn dst_verify(&mut self) -> Result<bool, Halt> {
        let final_manifest = self
            .dst
            .final_manifest
            .clone()
            .expect("checked by caller");
        let vtpm = self
            .dst
            .vtpm
            .clone()
            .ok_or_else(|| Halt::Abort("destination: vtpm state missing".into()))?;
        let disk = self
            .dst
            .disk
            .clone()
            .ok_or_else(|| Halt::Abort("destination: disk missing".into()))?;
        let memory = self
            .dst
            .memory
            .clone()
            .ok_or_else(|| Halt::Abort("destination: memory missing".into()))?;

        let mut dest_vm = VmSpec {
            vm_id: self.dst.vm_id.clone(),
            config_files: self.dst.config_files.clone(),
            system_files: self.dst.system_files.clone(),
            data_files: self.dst.data_files.clone(),
            declared: self.dst.declared.clone(),
            disk,
            memory,
            vtpm,
        };

        let mut violations = verify_destination(&final_manifest, &dest_vm);

        // Counter regression means an old TPM state was substituted.
        if let Some(baseline) = self.dst.manifest0_counter {
            if dest_vm.vtpm.counter() < baseline {
                violations.push(IntegrityViolation {
                    class: ArtifactClass::Vtpm,
                    name: None,
                    detail: format!(
                        "counter regression: {} < baseline {}",
                        dest_vm.vtpm.counter(),
                        baseline
                    ),
                });
            }
        }

        // Declared-hash audit: transferred bytes must match what the files
        // were declared to contain when produced. Failures are flagged and
        // the originals quarantined.
        let classes: [(ArtifactClass, &BTreeMap<String, [u8; 32]>); 3] = [
            (ArtifactClass::Config, &self.dst.declared.config),
            (ArtifactClass::System, &self.dst.declared.system),
            (ArtifactClass::Data, &self.dst.declared.data),
        ];
        let mut flagged: Vec<(ArtifactClass, String)> = Vec::new();
        for (class, declared) in classes {
            let files = match class {
                ArtifactClass::Config => &dest_vm.config_files,
                ArtifactClass::System => &dest_vm.system_files,
                ArtifactClass::Data => &dest_vm.data_files,
                _ => unreachable!(),
            };
            for (name, want) in declared {
                if let Some(bytes) = files.get(name) {
                    let got: [u8; 32] = Sha256::digest(bytes).into();
                    if &got != want {
                        flagged.push((class, name.clone()));
                    }
                }
            }
        }
        for (class, name) in flagged {
            let files = match class {
                ArtifactClass::Config => &mut dest_vm.config_files,
                ArtifactClass::System => &mut dest_vm.system_files,
                ArtifactClass::Data => &mut dest_vm.data_files,
                _ => unreachable!(),
            };
            let original = files.get(&name).expect("flagged file exists").clone();
            let record_id = format!("{class}:{name}");
            let record = self.quarantine.flag_and_quarantine(
                &record_id,
                &original,
                "declared hash mismatch",
            );
            files.insert(name.clone(), record.flag_value.clone());
            self.flags.push(record);
            violations.push(IntegrityViolation {
                class,
                name: Some(name),
                detail: "declared hash mismatch; record flagged and original quarantined".into(),
            });
        }

        self.metrics.detections += violations.len() as u32;
        self.violations = violations;
        if self.violations.is_empty() {
            self.destination_vm = Some(dest_vm);
            Ok(true)
        } else {
            // Tampered or unverifiable state never activates.
            self.destination_vm = None;
            Ok(false)
        }
    }

    fn finish(mut self, verdict: Verdict, detail: String) -> MigrationOutcome {
        let evaluation = Evaluation {
            target: format!(
                "live migration of VM {} from {} to {}",
                self.vm_id, self.source_host.host_id, self.destination_host.host_id
            ),
            criteria: "authorized start, mutual authentication, confidentiality and integrity \
                       in transit, replay immunity, non-repudiation of the session"
                .into(),
            yardstick: "byte-exact destination state, zero unverified deliveries, source memory \
                        removed after commit"
                .into(),
            data_gathering: format!(
                "session event log and transfer metrics under seed {}",
                self.inputs_seed
            ),
            synthesis: "verdict with violation and flag evidence, plus byte and round accounting"
                .into(),
            process: format!("seeded simulation run of scenario {}", self.scenario_name),
        };
        self.metrics.protocol_overhead_bytes = self.metrics.bytes_sent
            - self.metrics.round0_bytes
            - self.metrics.diff_bytes
            - self.metrics.vtpm_blob_bytes;
        let report = MigrationReport {
            version: REPORT_VERSION.to_string(),
            scenario: self.scenario_name.clone(),
            seed: self.inputs_seed,
            vm_id: self.vm_id.clone(),
            source_host: self.source_host.host_id.clone(),
            destination_host: self.destination_host.host_id.clone(),
            verdict,
            verdict_detail: detail,
            phases: self.phases.clone(),
            metrics: self.metrics,
            violations: self.violations.clone(),
            flags: self.flags.iter().map(FlagEntry::from).collect(),
            crypto_rule: self.crypto_rule.clone(),
            zeroization_verified: self.zeroization_verified,
            evaluation,
            session_log_digest: hex::encode(self.log.digest()),
            generated_at: now_stamp(),
        };
        let source_memory_root = disk_manifest(&self.memory.merged())
            .expect("indices valid")
            .root;
        MigrationOutcome {
            report,
            log: self.log,
            quarantine: self.quarantine,
            destination_vm: self.destination_vm,
            source_memory_root,
            source_final_manifest: self.source_final_manifest,
            source_pcrs: *self.vtpm.pcrs(),
            captured: std::mem::take(&mut self.adversary.captured),
            op_log: self.workload.log().to_vec(),
        }
    }
}

fn now_stamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::TrustRoot;
    use crate::policy::{IntegrityLevel, SecurityLevel};
    use crate::workload::{AccessPattern, WorkloadConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn test_host(name: &str, root: &TrustRoot, r: &mut ChaCha20Rng) -> HostDescriptor {
        HostDescriptor {
            host_id: name.to_string(),
            hypervisor: HYPERVISOR.to_string(),
            capabilities: REQUIRED_CAPABILITIES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            memory_units: 1024,
            storage_units: 1024,
            identity: Identity::new(name, root, r),
            acl: [(SubjectId::new("admin"), "migrate".to_string())]
                .into_iter()
                .collect(),
        }
    }

    fn test_vm(r: &mut ChaCha20Rng) -> VmSpec {
        let mut disk = VirtualDisk::zeroed("vm0-disk", 64, 16).unwrap();
        for i in 0..16 {
            disk.write_chunk(i, &[i as u8 + 1; 64]).unwrap();
        }
        let mut memory = VirtualDisk::zeroed("vm0-mem", 64, 8).unwrap();
        for i in 0..8 {
            memory.write_chunk(i, &[0x80 + i as u8; 64]).unwrap();
        }
        let mut vtpm = VtpmInstance::new("vm0", r);
        vtpm.pcr_extend(0, b"bootloader").unwrap();
        let mut vm = VmSpec {
            vm_id: "vm0".to_string(),
            config_files: [("vm0.cfg".to_string(), b"cpus=2 mem=8".to_vec())]
                .into_iter()
                .collect(),
            system_files: [("kernel.img".to_string(), vec![0xee; 96])]
                .into_iter()
                .collect(),
            data_files: [("payload.db".to_string(), vec![0x11; 128])]
                .into_iter()
                .collect(),
            declared: DeclaredHashes::default(),
            disk,
            memory,
            vtpm,
        };
        vm.declare_current_hashes();
        vm
    }

    fn test_policy() -> (SystemState, SubjectId, ObjectId) {
        let mut st = SystemState::new();
        let admin = SubjectId::new("admin");
        let vm_obj = ObjectId::new("vm0");
        // Execute observes the object, so the admin must not sit above it.
        st.set_subject_level(
            admin.clone(),
            SecurityLevel::new(IntegrityLevel::Rp, Vec::<String>::new()),
        );
        st.set_object_level(
            vm_obj.clone(),
            SecurityLevel::new(IntegrityLevel::Rp, Vec::<String>::new()),
        );
        st.grant(admin.clone(), vm_obj.clone(), AccessAttribute::Execute);
        (st, admin, vm_obj)
    }

    fn test_inputs(seed: u64, adversary: AdversaryConfig) -> MigrationInputs {
        let mut r = rng(seed ^ 0xfeed);
        let root = TrustRoot::new(&mut r);
        let source = test_host("src-host", &root, &mut r);
        let destination = test_host("dst-host", &root, &mut r);
        let vm = test_vm(&mut r);
        let (policy, requester, vm_object) = test_policy();
        let workload = Workload::new(
            crate::workload::derive_rng(seed, "workload"),
            WorkloadConfig {
                pattern: AccessPattern::Uniform,
                write_fraction: 0.4,
                ops_per_tick: 2,
            },
            vm.disk.chunk_count(),
            vm.memory.chunk_count(),
        );
        MigrationInputs {
            source,
            destination,
            trust_root_key: root.verifying_key(),
            vm,
            policy,
            requester,
            vm_object,
            workload,
            popularity_threshold: 3,
            stop_threshold: 1,
            max_rounds: 30,
            capacity: 8,
            adversary,
            seed,
            scenario_name: "unit-fixture".to_string(),
        }
    }

    #[test]
    fn precheck_happy_and_failures() {
        let mut r = rng(1);
        let root = TrustRoot::new(&mut r);
        let src = test_host("a", &root, &mut r);
        let mut dst = test_host("b", &root, &mut r);
        let vm = test_vm(&mut r);
        assert!(precheck(&src, &dst, &vm).is_ok());

        dst.hypervisor = "kvm".to_string();
        assert!(matches!(
            precheck(&src, &dst, &vm),
            Err(PrecheckError::HypervisorMismatch { .. })
        ));
        dst.hypervisor = HYPERVISOR.to_string();

        dst.capabilities.remove("vtpm");
        assert!(matches!(
            precheck(&src, &dst, &vm),
            Err(PrecheckError::MissingCapability(c)) if c == "vtpm"
        ));
        dst.capabilities.insert("vtpm".to_string());

        dst.memory_units = 2;
        assert!(matches!(
            precheck(&src, &dst, &vm),
            Err(PrecheckError::InsufficientResources { kind: "memory", .. })
        ));
    }

    #[test]
    fn authorize_migration_paths() {
        let mut r = rng(2);
        let root = TrustRoot::new(&mut r);
        let src = test_host("a", &root, &mut r);
        let (policy, admin, vm_obj) = test_policy();
        assert_eq!(
            authorize_migration(&admin, &vm_obj, &src, &policy),
            Response::Yes
        );
        assert_eq!(
            authorize_migration(&SubjectId::new("admin"), &ObjectId::new("ghost"), &src, &policy),
            Response::Error
        );
        assert_eq!(
            authorize_migration(&SubjectId::new("nobody"), &vm_obj, &src, &policy),
            Response::Error
        );

        // In the ACL but the policy's access matrix never granted Execute.
        let mut st = SystemState::new();
        st.set_subject_level(
            admin.clone(),
            SecurityLevel::new(IntegrityLevel::Ua, Vec::<String>::new()),
        );
        st.set_object_level(
            vm_obj.clone(),
            SecurityLevel::new(IntegrityLevel::Tpm, Vec::<String>::new()),
        );
        // No matrix grant: denied by the matrix even though rank permits.
        assert_eq!(
            authorize_migration(&admin, &vm_obj, &src, &st),
            Response::No
        );
    }

    #[test]
    fn snapshot_manifest_localizes_config_edit() {
        let mut r = rng(3);
        let mut vm = test_vm(&mut r);
        let m1 = snapshot_manifest(&vm);
        let m2 = snapshot_manifest(&vm);
        assert_eq!(m1, m2);
        vm.config_files
            .insert("vm0.cfg".to_string(), b"cpus=4 mem=16".to_vec());
        let m3 = snapshot_manifest(&vm);
        assert_ne!(m3.config_hashes["vm0.cfg"], m1.config_hashes["vm0.cfg"]);
        assert_eq!(m3.system_file_hashes, m1.system_file_hashes);
        assert_eq!(m3.data_file_hashes, m1.data_file_hashes);
        assert_eq!(m3.disk_root, m1.disk_root);
    }

    #[test]
    fn verify_destination_finds_single_disk_mutation() {
        let mut r = rng(4);
        let vm = test_vm(&mut r);
        let manifest = snapshot_manifest(&vm);
        let mut dest = vm.clone();
        assert!(verify_destination(&manifest, &dest).is_empty());
        dest.disk.write_chunk(3, &[0xff; 64]).unwrap();
        let violations = verify_destination(&manifest, &dest);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].class, ArtifactClass::Disk);
    }

    #[test]
    fn quarantine_roundtrip_and_distinct_refs() {
        let mut store = QuarantineStore::default();
        let a = store.flag_and_quarantine("data:x", b"original-a", "test");
        let b = store.flag_and_quarantine("data:y", b"original-b", "test");
        assert_ne!(a.quarantine_ref, b.quarantine_ref);
        assert_eq!(store.retrieve(&a.quarantine_ref).unwrap(), b"original-a");
        assert!(a.flag_value.starts_with(FLAG_SENTINEL));
        let digest: [u8; 32] = Sha256::digest(b"original-a").into();
        assert_eq!(a.quarantine_ref, digest);
    }

    #[test]
    fn clean_run_commits_with_fidelity() {
        let outcome = run_migration(test_inputs(11, AdversaryConfig::passive()));
        assert_eq!(outcome.report.verdict, Verdict::Committed);
        assert!(outcome.report.violations.is_empty());
        assert_eq!(outcome.report.zeroization_verified, Some(true));
        let dest = outcome.destination_vm.expect("activated");
        let final_manifest = outcome.source_final_manifest.expect("present");
        assert_eq!(snapshot_manifest(&dest).disk_root, final_manifest.disk_root);
        assert_eq!(
            snapshot_manifest(&dest).memory_root,
            final_manifest.memory_root
        );
        assert_eq!(*dest.vtpm.pcrs(), outcome.source_pcrs);
        // Source memory was wiped.
        let zero = VirtualDisk::zeroed("z", 64, 8).unwrap();
        assert_eq!(
            outcome.source_memory_root,
            disk_manifest(&zero).unwrap().root
        );
        // Byte accounting equals the sum over SEND events.
        let sent: u64 = outcome
            .log
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::Send)
            .map(|e| {
                e.detail
                    .split_whitespace()
                    .find_map(|t| t.strip_prefix("bytes="))
                    .unwrap()
                    .parse::<u64>()
                    .unwrap()
            })
            .sum();
        assert_eq!(outcome.report.metrics.bytes_sent, sent);
        assert_eq!(
            outcome.report.metrics.bytes_sent,
            outcome.report.metrics.round0_bytes
                + outcome.report.metrics.diff_bytes
                + outcome.report.metrics.vtpm_blob_bytes
                + outcome.report.metrics.protocol_overhead_bytes
        );
    }

    #[test]
    fn phases_follow_canonical_order() {
        let outcome = run_migration(test_inputs(12, AdversaryConfig::passive()));
        let phases = &outcome.report.phases;
        assert_eq!(phases[0], "pre-check");
        assert_eq!(phases[1], "authorize");
        assert_eq!(phases[2], "authenticate");
        assert_eq!(phases[3], "pre-copy-0");
        assert_eq!(phases.last().unwrap(), "commit");
        let stop = phases.iter().position(|p| p == "stop-and-copy").unwrap();
        assert!(phases[3..stop].iter().all(|p| p.starts_with("pre-copy-")));
        assert_eq!(phases[stop + 1], "vtpm-transfer");
        assert_eq!(phases[stop + 2], "verify");
    }

    #[test]
    fn corrupted_data_file_is_flagged_and_rolled_back() {
        let mut inputs = test_inputs(13, AdversaryConfig::passive());
        // The file was declared, then someone edited it.
        inputs
            .vm
            .data_files
            .insert("payload.db".to_string(), vec![0x22; 128]);
        let outcome = run_migration(inputs);
        assert_eq!(outcome.report.verdict, Verdict::RolledBack);
        assert!(outcome.destination_vm.is_none());
        assert_eq!(outcome.report.flags.len(), 1);
        let flag = &outcome.report.flags[0];
        assert_eq!(flag.record_id, "data:payload.db");
        let qref: [u8; 32] = hex::decode(&flag.quarantine_ref)
            .unwrap()
            .try_into()
            .unwrap();
        let original = outcome.quarantine.retrieve(&qref).unwrap();
        assert_eq!(original, vec![0x22; 128]);
        // Source memory not wiped on rollback.
        assert_eq!(outcome.report.zeroization_verified, None);
    }

    #[test]
    fn tampered_precopy_frame_aborts() {
        use crate::channel::{AdversaryMode, TargetSpec};
        let adversary = AdversaryConfig {
            modes: vec![AdversaryMode::Tamper(TargetSpec::FirstLabeled(
                FrameLabel::Round0,
            ))],
            seed: 5,
        };
        let outcome = run_migration(test_inputs(14, adversary));
        assert_eq!(outcome.report.verdict, Verdict::Aborted);
        assert!(outcome.destination_vm.is_none());
        assert!(outcome.report.verdict_detail.contains("tamper"));
        assert!(outcome.report.metrics.detections >= 1);
    }

    #[test]
    fn impersonation_fails_handshake() {
        use crate::channel::AdversaryMode;
        let adversary = AdversaryConfig {
            modes: vec![AdversaryMode::Impersonate],
            seed: 5,
        };
        let outcome = run_migration(test_inputs(15, adversary));
        assert_eq!(outcome.report.verdict, Verdict::Aborted);
        assert!(outcome.report.verdict_detail.contains("bad-certificate"));
        assert!(outcome
            .log
            .events()
            .iter()
            .any(|e| e.kind == EventKind::HsFail));
    }

    #[test]
    fn dropped_frame_aborts_with_sequence_error() {
        use crate::channel::{AdversaryMode, TargetSpec};
        let adversary = AdversaryConfig {
            modes: vec![AdversaryMode::Drop(TargetSpec::FirstLabeled(
                FrameLabel::Round0,
            ))],
            seed: 5,
        };
        let outcome = run_migration(test_inputs(16, adversary));
        assert_eq!(outcome.report.verdict, Verdict::Aborted);
        assert!(outcome.report.verdict_detail.contains("replay-detected"));
    }

    #[test]
    fn replayed_data_frame_aborts() {
        use crate::channel::{AdversaryMode, TargetSpec};
        let adversary = AdversaryConfig {
            modes: vec![AdversaryMode::Replay(TargetSpec::FirstLabeled(
                FrameLabel::Round0,
            ))],
            seed: 5,
        };
        let outcome = run_migration(test_inputs(17, adversary));
        assert_eq!(outcome.report.verdict, Verdict::Aborted);
        assert!(outcome.report.verdict_detail.contains("replay-detected"));
    }

    #[test]
    fn eavesdropper_cannot_block_and_sees_no_plaintext() {
        use crate::channel::AdversaryMode;
        let adversary = AdversaryConfig {
            modes: vec![AdversaryMode::Eavesdrop],
            seed: 5,
        };
        let outcome = run_migration(test_inputs(18, adversary));
        assert_eq!(outcome.report.verdict, Verdict::Committed);
        assert!(!outcome.captured.is_empty());
        // The data file's bytes must not appear in any captured frame.
        let needle = hex::encode(vec![0x11u8; 128]);
        assert!(outcome.captured.iter().all(|c| !c.contains(&needle)));
    }

    #[test]
    fn non_repudiation_from_the_log_alone() {
        let inputs = test_inputs(19, AdversaryConfig::passive());
        let root_key = inputs.trust_root_key;
        let outcome = run_migration(inputs);
        let verified = outcome
            .log
            .verify_session_evidence(&root_key)
            .expect("HS-OK present")
            .expect("evidence verifies");
        assert_eq!(verified, ("src-host".to_string(), "dst-host".to_string()));
    }

    #[test]
    fn unauthorized_requester_aborts_before_any_traffic() {
        let mut inputs = test_inputs(20, AdversaryConfig::passive());
        inputs.requester = SubjectId::new("intruder");
        inputs.policy.set_subject_level(
            "intruder",
            SecurityLevel::new(IntegrityLevel::Ua, Vec::<String>::new()),
        );
        let outcome = run_migration(inputs);
        assert_eq!(outcome.report.verdict, Verdict::Aborted);
        assert!(outcome.report.verdict_detail.contains("authorization"));
        assert_eq!(outcome.report.metrics.bytes_sent, 0);
    }

    #[test]
    fn insecure_policy_state_aborts() {
        let mut inputs = test_inputs(21, AdversaryConfig::passive());
        // Plant a read-down triple in the policy state.
        inputs.policy.set_subject_level(
            "hi",
            SecurityLevel::new(IntegrityLevel::Tpm, Vec::<String>::new()),
        );
        inputs.policy.set_object_level(
            "lo",
            SecurityLevel::new(IntegrityLevel::Ua, Vec::<String>::new()),
        );
        inputs.policy.insert_triple(crate::policy::AccessTriple {
            subject: SubjectId::new("hi"),
            object: ObjectId::new("lo"),
            attribute: AccessAttribute::Read,
        });
        let outcome = run_migration(inputs);
        assert_eq!(outcome.report.verdict, Verdict::Aborted);
        assert!(outcome.report.verdict_detail.contains("policy"));
    }

    #[test]
    fn determinism_identical_runs_modulo_timestamp() {
        let a = run_migration(test_inputs(22, AdversaryConfig::passive()));
        let b = run_migration(test_inputs(22, AdversaryConfig::passive()));
        let mut ra = a.report.clone();
        let mut rb = b.report.clone();
        ra.generated_at = String::new();
        rb.generated_at = String::new();
        assert_eq!(ra, rb);
        assert_eq!(a.log.render(), b.log.render());
    }
}
