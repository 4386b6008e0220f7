// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Integrity state machine: a fixed five-rank integrity lattice, an access
//! matrix, a rule-driven request evaluator, and an auditor that checks every
//! live access against the mandatory-integrity axioms.
//!
//! The model state is the quadruple (live access triples, access matrix,
//! level assignment, object hierarchy). Requests acquire or release access
//! triples; an ordered rule list decides each request, and a state is secure
//! when every live triple would still be authorized from scratch. The
//! default axiom is no-read-down / no-write-up with category containment;
//! the literal subject-dominates form can be selected for comparison runs.
//!
//! Everything here is a pure value type: operations take states in and hand
//! states back, so callers may share them freely across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// The five integrity ranks, highest integrity first. Rank 1 is the most
/// trusted component (the measurement root) and rank 5 the least (the user
/// agent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IntegrityLevel {
    Tpm,
    Ta,
    Idp,
    Rp,
    Ua,
}

impl IntegrityLevel {
    pub const ALL: [IntegrityLevel; 5] = [
        IntegrityLevel::Tpm,
        IntegrityLevel::Ta,
        IntegrityLevel::Idp,
        IntegrityLevel::Rp,
        IntegrityLevel::Ua,
    ];

    /// Numeric rank, 1..=5. Smaller means higher integrity.
    pub fn rank(self) -> u8 {
        match self {
            IntegrityLevel::Tpm => 1,
            IntegrityLevel::Ta => 2,
            IntegrityLevel::Idp => 3,
            IntegrityLevel::Rp => 4,
            IntegrityLevel::Ua => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntegrityLevel::Tpm => "TPM",
            IntegrityLevel::Ta => "TA",
            IntegrityLevel::Idp => "IDP",
            IntegrityLevel::Rp => "RP",
            IntegrityLevel::Ua => "UA",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }
}

impl fmt::Display for IntegrityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An integrity level plus a set of category labels. Categories are opaque
/// strings; the empty set is fine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityLevel {
    pub level: IntegrityLevel,
    pub categories: BTreeSet<String>,
}

impl SecurityLevel {
    pub fn new<I, S>(level: IntegrityLevel, categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            level,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    /// True when `self` is at least as trustworthy as `other`: rank is
    /// equal-or-higher integrity (numerically <=) and the category set
    /// contains the other's. This is a partial order.
    pub fn dominates(&self, other: &SecurityLevel) -> bool {
        self.level.rank() <= other.level.rank() && other.categories.is_subset(&self.categories)
    }
}

/// The four access attributes. Serialized as `r`/`w`/`a`/`e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessAttribute {
    Read,
    Write,
    Append,
    Execute,
}

impl AccessAttribute {
    pub const ALL: [AccessAttribute; 4] = [
        AccessAttribute::Read,
        AccessAttribute::Write,
        AccessAttribute::Append,
        AccessAttribute::Execute,
    ];

    pub fn code(self) -> char {
        match self {
            AccessAttribute::Read => 'r',
            AccessAttribute::Write => 'w',
            AccessAttribute::Append => 'a',
            AccessAttribute::Execute => 'e',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.code() == c)
    }

    /// Read-like attributes observe the object; write-like ones alter it.
    pub fn is_observe(self) -> bool {
        matches!(self, AccessAttribute::Read | AccessAttribute::Execute)
    }
}

impl fmt::Display for AccessAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

macro_rules! id_newtype {
    ($name:ident) => {
        /// Cheaply clonable interned identifier.
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: impl AsRef<str>) -> Self {
                Self(Arc::from(id.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self::new(s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

id_newtype!(SubjectId);
id_newtype!(ObjectId);

/// One live access: subject `s` currently holds attribute `x` on object `o`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AccessTriple {
    pub subject: SubjectId,
    pub object: ObjectId,
    pub attribute: AccessAttribute,
}

/// System state: live triples, access matrix, clearance assignment for
/// subjects and objects, and the object hierarchy.
///
/// States are plain values. Structural well-formedness (every referenced id
/// has a clearance entry, the hierarchy is acyclic) is checked by
/// [`SystemState::validate`]; whether the live triples are actually
/// authorized is the business of [`ssp_check`], so that insecure states can
/// be represented and audited.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SystemState {
    triples: BTreeSet<AccessTriple>,
    matrix: BTreeMap<(SubjectId, ObjectId), BTreeSet<AccessAttribute>>,
    subject_levels: BTreeMap<SubjectId, SecurityLevel>,
    object_levels: BTreeMap<ObjectId, SecurityLevel>,
    hierarchy: BTreeMap<ObjectId, ObjectId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("subject {0} appears in the state but has no clearance entry")]
    UnknownSubject(String),
    #[error("object {0} appears in the state but has no clearance entry")]
    UnknownObject(String),
    #[error("hierarchy contains a cycle through {0}")]
    HierarchyCycle(String),
}

impl SystemState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_subject_level(&mut self, subject: impl Into<SubjectId>, level: SecurityLevel) {
        self.subject_levels.insert(subject.into(), level);
    }

    pub fn set_object_level(&mut self, object: impl Into<ObjectId>, level: SecurityLevel) {
        self.object_levels.insert(object.into(), level);
    }

    pub fn subject_level(&self, subject: &SubjectId) -> Option<&SecurityLevel> {
        self.subject_levels.get(subject)
    }

    pub fn object_level(&self, object: &ObjectId) -> Option<&SecurityLevel> {
        self.object_levels.get(object)
    }

    pub fn subjects(&self) -> impl Iterator<Item = &SubjectId> {
        self.subject_levels.keys()
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectId> {
        self.object_levels.keys()
    }

    /// Grant `attribute` in the access matrix cell (subject, object).
    pub fn grant(
        &mut self,
        subject: impl Into<SubjectId>,
        object: impl Into<ObjectId>,
        attribute: AccessAttribute,
    ) {
        self.matrix
            .entry((subject.into(), object.into()))
            .or_default()
            .insert(attribute);
    }

    /// Remove `attribute` from the matrix cell, if present.
    pub fn revoke(&mut self, subject: &SubjectId, object: &ObjectId, attribute: AccessAttribute) {
        if let Some(cell) = self
            .matrix
            .get_mut(&(subject.clone(), object.clone()))
        {
            cell.remove(&attribute);
            if cell.is_empty() {
                self.matrix.remove(&(subject.clone(), object.clone()));
            }
        }
    }

    pub fn matrix_grants(
        &self,
        subject: &SubjectId,
        object: &ObjectId,
        attribute: AccessAttribute,
    ) -> bool {
        self.matrix
            .get(&(subject.clone(), object.clone()))
            .is_some_and(|cell| cell.contains(&attribute))
    }

    pub fn matrix_cells(
        &self,
    ) -> impl Iterator<Item = (&(SubjectId, ObjectId), &BTreeSet<AccessAttribute>)> {
        self.matrix.iter()
    }

    pub fn insert_triple(&mut self, triple: AccessTriple) {
        self.triples.insert(triple);
    }

    pub fn remove_triple(&mut self, triple: &AccessTriple) -> bool {
        self.triples.remove(triple)
    }

    pub fn contains_triple(&self, triple: &AccessTriple) -> bool {
        self.triples.contains(triple)
    }

    pub fn triples(&self) -> impl Iterator<Item = &AccessTriple> {
        self.triples.iter()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// Record `child`'s parent in the object hierarchy. Cycles are caught by
    /// [`SystemState::validate`], not here.
    pub fn set_parent(&mut self, child: impl Into<ObjectId>, parent: impl Into<ObjectId>) {
        self.hierarchy.insert(child.into(), parent.into());
    }

    pub fn parent(&self, child: &ObjectId) -> Option<&ObjectId> {
        self.hierarchy.get(child)
    }

    pub fn hierarchy_edges(&self) -> impl Iterator<Item = (&ObjectId, &ObjectId)> {
        self.hierarchy.iter()
    }

    /// Structural well-formedness: every id referenced by a triple, matrix
    /// cell, or hierarchy edge has a clearance entry, and the hierarchy is a
    /// forest (acyclic parent links).
    pub fn validate(&self) -> Result<(), StateError> {
        for t in &self.triples {
            if !self.subject_levels.contains_key(&t.subject) {
                return Err(StateError::UnknownSubject(t.subject.to_string()));
            }
            if !self.object_levels.contains_key(&t.object) {
                return Err(StateError::UnknownObject(t.object.to_string()));
            }
        }
        for (s, o) in self.matrix.keys() {
            if !self.subject_levels.contains_key(s) {
                return Err(StateError::UnknownSubject(s.to_string()));
            }
            if !self.object_levels.contains_key(o) {
                return Err(StateError::UnknownObject(o.to_string()));
            }
        }
        for (child, parent) in &self.hierarchy {
            for o in [child, parent] {
                if !self.object_levels.contains_key(o) {
                    return Err(StateError::UnknownObject(o.to_string()));
                }
            }
        }
        // Walk parent links from every node; a repeat within one walk is a cycle.
        for start in self.hierarchy.keys() {
            let mut seen = BTreeSet::new();
            let mut cur = start;
            while let Some(next) = self.hierarchy.get(cur) {
                if !seen.insert(cur.clone()) {
                    return Err(StateError::HierarchyCycle(cur.to_string()));
                }
                cur = next;
            }
        }
        Ok(())
    }
}

/// Outcome of evaluating a request or a single rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Yes,
    No,
    Error,
    /// The rule (or the whole rule list) cannot deal with this request.
    /// Never terminates evaluation by itself.
    Question,
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Response::Yes => "yes",
            Response::No => "no",
            Response::Error => "error",
            Response::Question => "question",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Add the triple to the live set on Yes.
    Acquire,
    /// Remove the triple from the live set on Yes.
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub requester: SubjectId,
    pub target: ObjectId,
    pub attribute: AccessAttribute,
    pub action: Action,
}

impl Request {
    pub fn acquire(
        requester: impl Into<SubjectId>,
        target: impl Into<ObjectId>,
        attribute: AccessAttribute,
    ) -> Self {
        Self {
            requester: requester.into(),
            target: target.into(),
            attribute,
            action: Action::Acquire,
        }
    }

    pub fn release(
        requester: impl Into<SubjectId>,
        target: impl Into<ObjectId>,
        attribute: AccessAttribute,
    ) -> Self {
        Self {
            requester: requester.into(),
            target: target.into(),
            attribute,
            action: Action::Release,
        }
    }

    pub fn triple(&self) -> AccessTriple {
        AccessTriple {
            subject: self.requester.clone(),
            object: self.target.clone(),
            attribute: self.attribute,
        }
    }
}

/// Which mandatory-integrity check `authorize` applies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum IntegrityAxiom {
    /// No read down, no write up: observe attributes (`r`, `e`) need the
    /// object at equal-or-higher integrity; alter attributes (`w`, `a`)
    /// need the object at equal-or-lower integrity.
    #[default]
    Biba,
    /// Subject must dominate the object for every attribute. Kept for
    /// comparison experiments with the strict-dominance reading.
    SubjectDominates,
}

impl IntegrityAxiom {
    fn rank_permits(self, attribute: AccessAttribute, subject: u8, object: u8) -> bool {
        match self {
            IntegrityAxiom::Biba => {
                if attribute.is_observe() {
                    object <= subject
                } else {
                    subject <= object
                }
            }
            IntegrityAxiom::SubjectDominates => subject <= object,
        }
    }
}

/// Mandatory + discretionary access decision for one (subject, object,
/// attribute) question against the current state.
///
/// `Error` for ids without clearance entries, `No` for any policy denial,
/// never `Question`.
pub fn authorize(
    subject: &SubjectId,
    object: &ObjectId,
    attribute: AccessAttribute,
    state: &SystemState,
) -> Response {
    authorize_with(IntegrityAxiom::Biba, subject, object, attribute, state)
}

/// [`authorize`] with an explicit axiom.
pub fn authorize_with(
    axiom: IntegrityAxiom,
    subject: &SubjectId,
    object: &ObjectId,
    attribute: AccessAttribute,
    state: &SystemState,
) -> Response {
    let Some(s) = state.subject_level(subject) else {
        return Response::Error;
    };
    let Some(o) = state.object_level(object) else {
        return Response::Error;
    };
    if !state.matrix_grants(subject, object, attribute) {
        return Response::No;
    }
    if !axiom.rank_permits(attribute, s.level.rank(), o.level.rank()) {
        return Response::No;
    }
    if !o.categories.is_subset(&s.categories) {
        return Response::No;
    }
    Response::Yes
}

/// A decision rule. The guard says whether the rule applies at all; the
/// effect produces a response and the successor state. A rule whose guard
/// fails counts as answering `Question` and must leave the state unchanged.
pub trait Rule {
    fn id(&self) -> u32;
    fn guard(&self, request: &Request, state: &SystemState) -> bool;
    fn effect(&self, request: &Request, state: &SystemState) -> (Response, SystemState);
}

/// The one rule in the default rule set: wraps [`authorize`], inserting the
/// triple on a granted acquire and removing it on release.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultRule {
    pub axiom: IntegrityAxiom,
}

impl Rule for DefaultRule {
    fn id(&self) -> u32 {
        1
    }

    fn guard(&self, _request: &Request, _state: &SystemState) -> bool {
        true
    }

    fn effect(&self, request: &Request, state: &SystemState) -> (Response, SystemState) {
        match request.action {
            Action::Acquire => {
                match authorize_with(
                    self.axiom,
                    &request.requester,
                    &request.target,
                    request.attribute,
                    state,
                ) {
                    Response::Yes => {
                        let mut next = state.clone();
                        next.insert_triple(request.triple());
                        (Response::Yes, next)
                    }
                    other => (other, state.clone()),
                }
            }
            Action::Release => {
                let triple = request.triple();
                if state.contains_triple(&triple) {
                    let mut next = state.clone();
                    next.remove_triple(&triple);
                    (Response::Yes, next)
                } else {
                    // Cannot release an access that is not held.
                    (Response::Error, state.clone())
                }
            }
        }
    }
}

/// The default rule list: exactly one rule wrapping [`authorize`].
pub fn default_rules() -> Vec<Box<dyn Rule>> {
    vec![Box::new(DefaultRule::default())]
}

/// Run `request` through `rules` in order. The first rule whose guard holds
/// and whose effect is not `Question` decides; if every rule answers
/// `Question` (or the list is empty) the result is `(Question, unchanged)`.
pub fn evaluate_request(
    request: &Request,
    state: &SystemState,
    rules: &[Box<dyn Rule>],
) -> (Response, SystemState) {
    for rule in rules {
        if !rule.guard(request, state) {
            continue;
        }
        let (response, next) = rule.effect(request, state);
        if response != Response::Question {
            return (response, next);
        }
        debug_assert_eq!(&next, state, "rule {} answered Question but mutated state", rule.id());
    }
    (Response::Question, state.clone())
}

/// Why a live triple is not authorized. `reason` names the first failing
/// check in the order rank, category, matrix; a triple whose ids have no
/// clearance entry is reported under `matrix` (it sits outside the granted
/// authority structure entirely).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationReason {
    ReadDown,
    WriteUp,
    Category,
    Matrix,
}

impl ViolationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationReason::ReadDown => "read-down",
            ViolationReason::WriteUp => "write-up",
            ViolationReason::Category => "category",
            ViolationReason::Matrix => "matrix",
        }
    }
}

/// One audit finding, printable in the line-oriented audit format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: SubjectId,
    pub object: ObjectId,
    pub attribute: AccessAttribute,
    pub reason: ViolationReason,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "VIOLATION subject={} object={} attr={} reason={}",
            self.subject,
            self.object,
            self.attribute,
            self.reason.as_str()
        )
    }
}

/// Audit every live triple against the integrity axioms and the matrix.
/// Empty result iff the state is secure.
pub fn ssp_check(state: &SystemState) -> Vec<Violation> {
    ssp_check_with(IntegrityAxiom::Biba, state)
}

/// [`ssp_check`] with an explicit axiom.
pub fn ssp_check_with(axiom: IntegrityAxiom, state: &SystemState) -> Vec<Violation> {
    let mut violations = Vec::new();
    for t in state.triples() {
        let reason = triple_violation(axiom, t, state);
        if let Some(reason) = reason {
            violations.push(Violation {
                subject: t.subject.clone(),
                object: t.object.clone(),
                attribute: t.attribute,
                reason,
            });
        }
    }
    violations
}

fn triple_violation(
    axiom: IntegrityAxiom,
    triple: &AccessTriple,
    state: &SystemState,
) -> Option<ViolationReason> {
    let (Some(s), Some(o)) = (
        state.subject_level(&triple.subject),
        state.object_level(&triple.object),
    ) else {
        return Some(ViolationReason::Matrix);
    };
    if !axiom.rank_permits(triple.attribute, s.level.rank(), o.level.rank()) {
        return Some(if triple.attribute.is_observe() {
            ViolationReason::ReadDown
        } else {
            ViolationReason::WriteUp
        });
    }
    if !o.categories.is_subset(&s.categories) {
        return Some(ViolationReason::Category);
    }
    if !state.matrix_grants(&triple.subject, &triple.object, triple.attribute) {
        return Some(ViolationReason::Matrix);
    }
    None
}

/// One step of a recorded evaluation: the request, the response it drew,
/// and the state after the step.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub request: Request,
    pub response: Response,
    pub state: SystemState,
}

/// An initial state plus the recorded evaluation steps that followed it.
#[derive(Debug, Clone)]
pub struct Trace {
    pub initial: SystemState,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn new(initial: SystemState) -> Self {
        Self {
            initial,
            steps: Vec::new(),
        }
    }

    /// Evaluate `requests` in order with `rules`, recording every step.
    pub fn record<I>(initial: SystemState, requests: I, rules: &[Box<dyn Rule>]) -> Self
    where
        I: IntoIterator<Item = Request>,
    {
        let mut trace = Trace::new(initial);
        for request in requests {
            trace.step(request, rules);
        }
        trace
    }

    /// Evaluate one request against the latest state and record the step.
    pub fn step(&mut self, request: Request, rules: &[Box<dyn Rule>]) -> Response {
        let current = self.steps.last().map(|s| &s.state).unwrap_or(&self.initial);
        let (response, next) = evaluate_request(&request, current, rules);
        self.steps.push(TraceStep {
            request,
            response,
            state: next,
        });
        response
    }

    pub fn final_state(&self) -> &SystemState {
        self.steps.last().map(|s| &s.state).unwrap_or(&self.initial)
    }
}

/// True iff the initial state and every post-step state pass [`ssp_check`]
/// with no findings: the inductive security condition as a checker.
pub fn verify_trace(trace: &Trace) -> bool {
    verify_trace_with(IntegrityAxiom::Biba, trace)
}

/// [`verify_trace`] with an explicit axiom.
pub fn verify_trace_with(axiom: IntegrityAxiom, trace: &Trace) -> bool {
    if !ssp_check_with(axiom, &trace.initial).is_empty() {
        return false;
    }
    trace
        .steps
        .iter()
        .all(|step| ssp_check_with(axiom, &step.state).is_empty())
}
