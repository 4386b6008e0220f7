// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Scenario files: the versioned JSON schema that describes one simulated
//! deployment (VM geometry, workload shape, transfer knobs, hosts, policy
//! fixture, adversary preset), its validation, and its conversion into the
//! runtime inputs of a migration session.
//!
//! Everything a run does is a pure function of the scenario document and
//! the effective seed; initial disk content, key material, and workload
//! streams are all derived from labeled seed expansions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    AdversaryConfig, AdversaryMode, FrameLabel, Identity, TargetSpec, TrustRoot,
};
use crate::migration::{DeclaredHashes, HostDescriptor, MigrationInputs, VmSpec};
use crate::policy::{
    AccessAttribute, AccessTriple, IntegrityLevel, ObjectId, SecurityLevel, SubjectId, SystemState,
};
use crate::storage::VirtualDisk;
use crate::vtpm::VtpmInstance;
use crate::workload::{derive_rng, AccessPattern, Workload, WorkloadConfig};
use rand::RngCore;

pub const SCENARIO_VERSION: &str = "korora_scenario_v1";

/// Stable adversary preset names, in attack-matrix row order.
pub const ATTACK_PRESETS: [&str; 8] = [
    "none",
    "eavesdrop",
    "tamper-precopy",
    "tamper-vtpm",
    "replay-handshake",
    "replay-data",
    "impersonate",
    "drop",
];

pub const DEFAULT_MAX_ROUNDS: u32 = 30;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("field {field}: {problem}")]
    Invalid { field: &'static str, problem: String },
}

fn invalid(field: &'static str, problem: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field,
        problem: problem.into(),
    }
}

// ---------------------------------------------------------------------------
// Schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: String,
    pub name: String,
    pub seed: u64,
    pub vm: VmSection,
    pub workload: WorkloadSection,
    pub migration: TransferSection,
    /// Adversary preset name; one of [`ATTACK_PRESETS`].
    #[serde(default = "default_adversary")]
    pub adversary: String,
    pub hosts: HostsSection,
    pub policy: PolicyFixture,
    /// Subject asking to migrate; must appear in the policy fixture.
    pub requester: String,
    #[serde(default)]
    pub faults: FaultsSection,
}

fn default_adversary() -> String {
    "none".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmSection {
    pub vm_id: String,
    /// Chunk and page size in bytes; pages and chunks share one size.
    pub chunk_size: u32,
    pub disk_chunks: u64,
    pub memory_pages: u64,
    #[serde(default)]
    pub config_files: BTreeMap<String, String>,
    #[serde(default)]
    pub system_files: BTreeMap<String, String>,
    #[serde(default)]
    pub data_files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub pattern: AccessPattern,
    pub write_fraction: f64,
    pub ops_per_tick: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Reads of one chunk before it is outsourced to the replacement device.
    pub popularity_threshold: u64,
    /// Stop pre-copy when the dirty set is at most this many chunks;
    /// default is 2% of all chunks and pages.
    #[serde(default)]
    pub stop_threshold: Option<u64>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    /// Transfer capacity in chunks per tick.
    pub capacity: u64,
}

fn default_max_rounds() -> u32 {
    DEFAULT_MAX_ROUNDS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostsSection {
    pub source: HostSection,
    pub destination: HostSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSection {
    pub host_id: String,
    #[serde(default = "default_hypervisor")]
    pub hypervisor: String,
    pub capabilities: BTreeSet<String>,
    pub memory_units: u64,
    pub storage_units: u64,
    #[serde(default)]
    pub acl: Vec<AclEntry>,
}

fn default_hypervisor() -> String {
    crate::migration::HYPERVISOR.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AclEntry {
    pub subject: String,
    pub action: String,
}

/// Integrity-policy fixture: the machine state a scenario starts from,
/// also loadable standalone for audits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFixture {
    pub subjects: BTreeMap<String, LevelSection>,
    pub objects: BTreeMap<String, LevelSection>,
    #[serde(default)]
    pub matrix: Vec<MatrixEntry>,
    #[serde(default)]
    pub triples: Vec<TripleEntry>,
    #[serde(default)]
    pub hierarchy: Vec<HierarchyEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    /// Integrity level name: TPM, TA, IDP, RP, or UA.
    pub level: String,
    #[serde(default)]
    pub categories: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub subject: String,
    pub object: String,
    /// Access codes: r, w, a, e.
    pub attrs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleEntry {
    pub subject: String,
    pub object: String,
    pub attr: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyEntry {
    pub child: String,
    pub parent: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultsSection {
    /// Replace this data file's bytes after its hash was declared, so the
    /// transfer carries content that fails its declaration.
    #[serde(default)]
    pub corrupt_data_file: Option<String>,
}

// ---------------------------------------------------------------------------
// Parsing and validation.

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return Err(invalid(
                "version",
                format!("expected {SCENARIO_VERSION}, got {}", self.version),
            ));
        }
        if self.name.is_empty() || self.name.len() > 64 {
            return Err(invalid("name", "must be 1..=64 characters"));
        }
        if self.vm.vm_id.is_empty() {
            return Err(invalid("vm.vm_id", "must not be empty"));
        }
        let cs = self.vm.chunk_size;
        if !cs.is_power_of_two() || !(64..=1_048_576).contains(&cs) {
            return Err(invalid(
                "vm.chunk_size",
                "must be a power of two in 64..=1048576",
            ));
        }
        if !(1..=1_048_576).contains(&self.vm.disk_chunks) {
            return Err(invalid("vm.disk_chunks", "must be in 1..=1048576"));
        }
        if !(1..=1_048_576).contains(&self.vm.memory_pages) {
            return Err(invalid("vm.memory_pages", "must be in 1..=1048576"));
        }
        let total_bytes =
            (self.vm.disk_chunks + self.vm.memory_pages).saturating_mul(cs as u64);
        if total_bytes > 1 << 28 {
            return Err(invalid(
                "vm",
                "disk plus memory exceeds the 256 MiB desk-scale cap",
            ));
        }
        if !self.workload.write_fraction.is_finite()
            || !(0.0..=1.0).contains(&self.workload.write_fraction)
        {
            return Err(invalid("workload.write_fraction", "must be in [0, 1]"));
        }
        if self.workload.ops_per_tick > 1_000_000 {
            return Err(invalid("workload.ops_per_tick", "must be at most 1000000"));
        }
        if let AccessPattern::Zipf { s } = self.workload.pattern {
            if !s.is_finite() || s <= 0.0 || s > 10.0 {
                return Err(invalid("workload.pattern.s", "must be in (0, 10]"));
            }
        }
        if self.migration.popularity_threshold == 0 {
            return Err(invalid("migration.popularity_threshold", "must be at least 1"));
        }
        if !(1..=1000).contains(&self.migration.max_rounds) {
            return Err(invalid("migration.max_rounds", "must be in 1..=1000"));
        }
        if !(1..=1_048_576).contains(&self.migration.capacity) {
            return Err(invalid("migration.capacity", "must be in 1..=1048576"));
        }
        if let Some(st) = self.migration.stop_threshold {
            if st > self.vm.disk_chunks + self.vm.memory_pages {
                return Err(invalid(
                    "migration.stop_threshold",
                    "exceeds total chunk and page count",
                ));
            }
        }
        if !ATTACK_PRESETS.contains(&self.adversary.as_str()) {
            return Err(invalid(
                "adversary",
                format!("unknown preset {:?}", self.adversary),
            ));
        }
        for (field, host) in [
            ("hosts.source", &self.hosts.source),
            ("hosts.destination", &self.hosts.destination),
        ] {
            if host.host_id.is_empty() {
                return Err(invalid(field, "host_id must not be empty"));
            }
        }
        if !self.policy.subjects.contains_key(&self.requester) {
            return Err(invalid(
                "requester",
                "must be declared in policy.subjects",
            ));
        }
        if !self.policy.objects.contains_key(&self.vm.vm_id) {
            return Err(invalid(
                "policy.objects",
                format!("must declare the VM object {:?}", self.vm.vm_id),
            ));
        }
        if let Some(name) = &self.faults.corrupt_data_file {
            if !self.vm.data_files.contains_key(name) {
                return Err(invalid(
                    "faults.corrupt_data_file",
                    format!("no data file named {name:?}"),
                ));
            }
        }
        // Surface policy-fixture problems at load time too.
        self.policy.to_state()?;
        Ok(())
    }

    /// Stop threshold in chunks: explicit value or 2% of everything.
    pub fn effective_stop_threshold(&self) -> u64 {
        self.migration
            .stop_threshold
            .unwrap_or((self.vm.disk_chunks + self.vm.memory_pages) * 2 / 100)
    }

    /// The seed a run should use: command line beats environment beats the
    /// scenario file.
    pub fn effective_seed(&self, cli: Option<u64>, env: Option<u64>) -> u64 {
        cli.or(env).unwrap_or(self.seed)
    }

    /// Build the runtime inputs for one session. `seed` is the effective
    /// seed; `preset` the adversary preset to apply.
    pub fn build_inputs(&self, seed: u64, preset: &str) -> Result<MigrationInputs, ScenarioError> {
        let adversary = adversary_preset(preset, seed)?;
        let policy = self.policy.to_state()?;

        let mut root_rng = derive_rng(seed, "trust-root");
        let root = TrustRoot::new(&mut root_rng);
        let source = build_host(&self.hosts.source, &root, seed, "identity-source");
        let destination = build_host(&self.hosts.destination, &root, seed, "identity-destination");

        let vm = self.build_vm(seed)?;
        let workload = Workload::new(
            derive_rng(seed, "workload"),
            WorkloadConfig {
                pattern: self.workload.pattern,
                write_fraction: self.workload.write_fraction,
                ops_per_tick: self.workload.ops_per_tick,
            },
            self.vm.disk_chunks,
            self.vm.memory_pages,
        );

        Ok(MigrationInputs {
            source,
            destination,
            trust_root_key: root.verifying_key(),
            vm,
            policy,
            requester: SubjectId::new(&self.requester),
            vm_object: ObjectId::new(&self.vm.vm_id),
            workload,
            popularity_threshold: self.migration.popularity_threshold,
            stop_threshold: self.effective_stop_threshold(),
            max_rounds: self.migration.max_rounds,
            capacity: self.migration.capacity,
            adversary,
            seed,
            scenario_name: self.name.clone(),
        })
    }

    fn build_vm(&self, seed: u64) -> Result<VmSpec, ScenarioError> {
        let mut disk = VirtualDisk::zeroed(
            format!("{}-disk", self.vm.vm_id),
            self.vm.chunk_size,
            self.vm.disk_chunks,
        )
        .map_err(|e| invalid("vm.chunk_size", e.to_string()))?;
        let mut fill = derive_rng(seed, "disk-init");
        let mut buf = vec![0u8; self.vm.chunk_size as usize];
        for i in 0..self.vm.disk_chunks {
            fill.fill_bytes(&mut buf);
            disk.write_chunk(i, &buf).expect("index in range");
        }
        let mut memory = VirtualDisk::zeroed(
            format!("{}-memory", self.vm.vm_id),
            self.vm.chunk_size,
            self.vm.memory_pages,
        )
        .map_err(|e| invalid("vm.chunk_size", e.to_string()))?;
        let mut fill = derive_rng(seed, "memory-init");
        for i in 0..self.vm.memory_pages {
            fill.fill_bytes(&mut buf);
            memory.write_chunk(i, &buf).expect("index in range");
        }

        let mut vtpm = VtpmInstance::new(&self.vm.vm_id, &mut derive_rng(seed, "vtpm"));
        vtpm.pcr_extend(0, b"firmware").expect("index in range");
        vtpm.pcr_extend(4, self.vm.vm_id.as_bytes())
            .expect("index in range");

        let to_bytes = |m: &BTreeMap<String, String>| -> BTreeMap<String, Vec<u8>> {
            m.iter()
                .map(|(k, v)| (k.clone(), v.as_bytes().to_vec()))
                .collect()
        };
        let mut vm = VmSpec {
            vm_id: self.vm.vm_id.clone(),
            config_files: to_bytes(&self.vm.config_files),
            system_files: to_bytes(&self.vm.system_files),
            data_files: to_bytes(&self.vm.data_files),
            declared: DeclaredHashes::default(),
            disk,
            memory,
            vtpm,
        };
        vm.declare_current_hashes();

        if let Some(name) = &self.faults.corrupt_data_file {
            let bytes = vm
                .data_files
                .get_mut(name)
                .expect("presence checked in validate");
            let mut corrupt = vec![0u8; bytes.len().max(16)];
            derive_rng(seed, "fault-corrupt").fill_bytes(&mut corrupt);
            *bytes = corrupt;
        }
        Ok(vm)
    }
}

fn build_host(section: &HostSection, root: &TrustRoot, seed: u64, label: &str) -> HostDescriptor {
    let mut rng = derive_rng(seed, label);
    HostDescriptor {
        host_id: section.host_id.clone(),
        hypervisor: section.hypervisor.clone(),
        capabilities: section.capabilities.clone(),
        memory_units: section.memory_units,
        storage_units: section.storage_units,
        identity: Identity::new(&section.host_id, root, &mut rng),
        acl: section
            .acl
            .iter()
            .map(|e| (SubjectId::new(&e.subject), e.action.clone()))
            .collect(),
    }
}

/// Map a preset name to an adversary configuration.
pub fn adversary_preset(name: &str, seed: u64) -> Result<AdversaryConfig, ScenarioError> {
    let modes = match name {
        "none" => vec![],
        "eavesdrop" => vec![AdversaryMode::Eavesdrop],
        "tamper-precopy" => vec![AdversaryMode::Tamper(TargetSpec::FirstLabeled(
            FrameLabel::Round0,
        ))],
        "tamper-vtpm" => vec![AdversaryMode::Tamper(TargetSpec::FirstLabeled(
            FrameLabel::Vtpm,
        ))],
        "replay-handshake" => vec![AdversaryMode::Replay(TargetSpec::FirstLabeled(
            FrameLabel::Handshake,
        ))],
        "replay-data" => vec![AdversaryMode::Replay(TargetSpec::FirstLabeled(
            FrameLabel::Round0,
        ))],
        "impersonate" => vec![AdversaryMode::Impersonate],
        "drop" => vec![AdversaryMode::Drop(TargetSpec::FirstLabeled(
            FrameLabel::Round0,
        ))],
        other => {
            return Err(invalid(
                "adversary",
                format!("unknown preset {other:?}"),
            ))
        }
    };
    Ok(AdversaryConfig { modes, seed })
}

impl PolicyFixture {
    /// Materialize the fixture as a policy machine state, checking that
    /// every reference resolves and the hierarchy is sound.
    pub fn to_state(&self) -> Result<SystemState, ScenarioError> {
        let mut state = SystemState::new();
        for (name, level) in &self.subjects {
            state.set_subject_level(name.as_str(), parse_level("policy.subjects", level)?);
        }
        for (name, level) in &self.objects {
            state.set_object_level(name.as_str(), parse_level("policy.objects", level)?);
        }
        for entry in &self.matrix {
            if !self.subjects.contains_key(&entry.subject) {
                return Err(invalid(
                    "policy.matrix",
                    format!("undeclared subject {:?}", entry.subject),
                ));
            }
            if !self.objects.contains_key(&entry.object) {
                return Err(invalid(
                    "policy.matrix",
                    format!("undeclared object {:?}", entry.object),
                ));
            }
            for code in &entry.attrs {
                let attr = parse_attr("policy.matrix", code)?;
                state.grant(entry.subject.as_str(), entry.object.as_str(), attr);
            }
        }
        for entry in &self.triples {
            if !self.subjects.contains_key(&entry.subject) {
                return Err(invalid(
                    "policy.triples",
                    format!("undeclared subject {:?}", entry.subject),
                ));
            }
            if !self.objects.contains_key(&entry.object) {
                return Err(invalid(
                    "policy.triples",
                    format!("undeclared object {:?}", entry.object),
                ));
            }
            state.insert_triple(AccessTriple {
                subject: SubjectId::new(&entry.subject),
                object: ObjectId::new(&entry.object),
                attribute: parse_attr("policy.triples", &entry.attr)?,
            });
        }
        for entry in &self.hierarchy {
            for name in [&entry.child, &entry.parent] {
                if !self.objects.contains_key(name) {
                    return Err(invalid(
                        "policy.hierarchy",
                        format!("undeclared object {name:?}"),
                    ));
                }
            }
            state.set_parent(entry.child.as_str(), entry.parent.as_str());
        }
        state
            .validate()
            .map_err(|e| invalid("policy", e.to_string()))?;
        Ok(state)
    }
}

fn parse_level(field: &'static str, section: &LevelSection) -> Result<SecurityLevel, ScenarioError> {
    let level = IntegrityLevel::from_name(&section.level)
        .ok_or_else(|| invalid(field, format!("unknown level {:?}", section.level)))?;
    Ok(SecurityLevel::new(level, section.categories.iter().cloned()))
}

fn parse_attr(field: &'static str, code: &str) -> Result<AccessAttribute, ScenarioError> {
    let c = match code.as_bytes() {
        [c] => *c as char,
        _ => return Err(invalid(field, format!("bad access code {code:?}"))),
    };
    AccessAttribute::from_code(c).ok_or_else(|| invalid(field, format!("bad access code {code:?}")))
}

// ---------------------------------------------------------------------------
// A ready-to-run baseline, used by fixtures and harnesses.

/// A small baseline scenario that commits cleanly: 64 disk chunks and 32
/// pages of 256 bytes, a mild uniform workload, and ample host headroom.
pub fn baseline_scenario(name: &str, seed: u64) -> Scenario {
    let caps: BTreeSet<String> = crate::migration::REQUIRED_CAPABILITIES
        .iter()
        .map(|s| s.to_string())
        .collect();
    Scenario {
        version: SCENARIO_VERSION.to_string(),
        name: name.to_string(),
        seed,
        vm: VmSection {
            vm_id: "vm0".to_string(),
            chunk_size: 256,
            disk_chunks: 64,
            memory_pages: 32,
            config_files: [(
                "vm0.cfg".to_string(),
                "cpus=2\nmemory=32\ndisk=vm0-disk\n".to_string(),
            )]
            .into_iter()
            .collect(),
            system_files: [(
                "kernel.img".to_string(),
                "stub kernel image for the simulated guest\n".to_string(),
            )]
            .into_iter()
            .collect(),
            data_files: [(
                "ledger.db".to_string(),
                "account,balance\nalpha,100\nbeta,250\n".to_string(),
            )]
            .into_iter()
            .collect(),
        },
        workload: WorkloadSection {
            pattern: AccessPattern::Uniform,
            write_fraction: 0.3,
            ops_per_tick: 4,
        },
        migration: TransferSection {
            popularity_threshold: 3,
            stop_threshold: None,
            max_rounds: DEFAULT_MAX_ROUNDS,
            capacity: 16,
        },
        adversary: "none".to_string(),
        hosts: HostsSection {
            source: HostSection {
                host_id: "host-a".to_string(),
                hypervisor: default_hypervisor(),
                capabilities: caps.clone(),
                memory_units: 4096,
                storage_units: 4096,
                acl: vec![AclEntry {
                    subject: "admin".to_string(),
                    action: "migrate".to_string(),
                }],
            },
            destination: HostSection {
                host_id: "host-b".to_string(),
                hypervisor: default_hypervisor(),
                capabilities: caps,
                memory_units: 4096,
                storage_units: 4096,
                acl: vec![],
            },
        },
        policy: PolicyFixture {
            subjects: [(
                "admin".to_string(),
                LevelSection {
                    level: "RP".to_string(),
                    categories: BTreeSet::new(),
                },
            )]
            .into_iter()
            .collect(),
            objects: [(
                "vm0".to_string(),
                LevelSection {
                    level: "RP".to_string(),
                    categories: BTreeSet::new(),
                },
            )]
            .into_iter()
            .collect(),
            matrix: vec![MatrixEntry {
                subject: "admin".to_string(),
                object: "vm0".to_string(),
                attrs: vec!["e".to_string(), "r".to_string()],
            }],
            triples: vec![],
            hierarchy: vec![],
        },
        requester: "admin".to_string(),
        faults: FaultsSection::default(),
    }
}
