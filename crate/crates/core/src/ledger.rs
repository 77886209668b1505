//! The key-release authority.
//!
//! Holds one upload keypair per registered policy and hands out per-blob
//! decryption keys, wrapped to an attested enclave's session key, only when
//! every check passes. Every register, authorize and revoke call appends one
//! record to a hash-chained audit log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{
    self, session_config_digest, Enclave, Evidence, ReferenceValues, TrustRoot,
};
use crate::envelope::{self, BlobHeader, BlobKey, EncryptedBlob, EnvelopeError, KeyPair};
use crate::policy::{self, workloads, AccessPolicy, PolicyError, PolicyHash, TransformKind};
use crate::types::{BlobId, Digest32, Nonce};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("policy refused: {0}")]
    InvalidPolicy(String),
    #[error("unknown_policy: {0}")]
    UnknownPolicy(PolicyHash),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Denial reasons, in the order the checks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    UnknownPolicy,
    Revoked,
    ExpiredTtl,
    AttestationFailed,
    NodeNotInPolicy,
    DigestNotAllowed,
    BudgetExhausted,
    ThresholdUnmet,
    EdgeViolation,
}

impl DenyReason {
    pub const ALL: [DenyReason; 9] = [
        DenyReason::UnknownPolicy,
        DenyReason::Revoked,
        DenyReason::ExpiredTtl,
        DenyReason::AttestationFailed,
        DenyReason::NodeNotInPolicy,
        DenyReason::DigestNotAllowed,
        DenyReason::BudgetExhausted,
        DenyReason::ThresholdUnmet,
        DenyReason::EdgeViolation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DenyReason::UnknownPolicy => "unknown_policy",
            DenyReason::Revoked => "revoked",
            DenyReason::ExpiredTtl => "expired_ttl",
            DenyReason::AttestationFailed => "attestation_failed",
            DenyReason::NodeNotInPolicy => "node_not_in_policy",
            DenyReason::DigestNotAllowed => "digest_not_allowed",
            DenyReason::BudgetExhausted => "budget_exhausted",
            DenyReason::ThresholdUnmet => "threshold_unmet",
            DenyReason::EdgeViolation => "edge_violation",
        }
    }
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a derived blob came to be: the producer (the header's
/// `entry_node_id`) read `inputs` and emitted its `sequence`-th output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub inputs: Vec<BlobId>,
    pub sequence: u64,
}

/// Identifier of a blob produced inside the pipeline. The ledger recomputes
/// it to check a requester's lineage claim.
pub fn derived_blob_id(
    policy_hash: &PolicyHash,
    producer: &str,
    inputs: &[BlobId],
    sequence: u64,
) -> BlobId {
    let mut sorted = inputs.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut parts: Vec<&[u8]> = vec![
        b"fedconf/derived/v1",
        policy_hash.as_bytes(),
        producer.as_bytes(),
        b"\0",
    ];
    let seq = sequence.to_be_bytes();
    parts.push(&seq);
    for id in &sorted {
        parts.push(id.as_bytes());
    }
    BlobId::derive(&parts)
}

#[derive(Debug, Clone, Serialize)]
pub struct GrantRequest {
    pub blob_header: BlobHeader,
    pub encapsulated_key: [u8; 32],
    pub requesting_node: String,
    pub evidence: Evidence,
    pub nonce: Nonce,
    pub session_public_key: Vec<u8>,
    /// For aggregate nodes, every blob being combined.
    pub claimed_inputs: Vec<BlobId>,
    /// `None` for device uploads.
    pub lineage: Option<Lineage>,
}

impl GrantRequest {
    /// A request for `blob` by `enclave` acting as `node`, attested under `nonce`.
    pub fn new(blob: &EncryptedBlob, node: &str, enclave: &Enclave, nonce: Nonce) -> Self {
        Self {
            blob_header: blob.header.clone(),
            encapsulated_key: blob.encapsulated_key().unwrap_or([0; 32]),
            requesting_node: node.to_owned(),
            evidence: enclave.attest(nonce),
            nonce,
            session_public_key: enclave.session_public_key().to_vec(),
            claimed_inputs: Vec::new(),
            lineage: None,
        }
    }

    pub fn with_claimed_inputs(mut self, inputs: Vec<BlobId>) -> Self {
        self.claimed_inputs = inputs;
        self
    }

    pub fn with_lineage(mut self, lineage: Lineage) -> Self {
        self.lineage = Some(lineage);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GrantDecision {
    /// The blob key, encrypted to the requester's session key.
    Granted(EncryptedBlob),
    Denied(DenyReason),
}

impl GrantDecision {
    pub fn is_granted(&self) -> bool {
        matches!(self, GrantDecision::Granted(_))
    }

    pub fn reason(&self) -> Option<DenyReason> {
        match self {
            GrantDecision::Denied(r) => Some(*r),
            GrantDecision::Granted(_) => None,
        }
    }
}

/// Opens a wrapped grant with the enclave's session key.
pub fn unwrap_blob_key(wrapped: &EncryptedBlob, session: &KeyPair) -> Result<BlobKey, EnvelopeError> {
    let raw = envelope::decrypt(wrapped, session.private_key())?;
    let key: [u8; 32] = raw
        .try_into()
        .map_err(|_| EnvelopeError::Malformed("wrapped key is not 32 bytes".into()))?;
    Ok(BlobKey(key))
}

/// Config digest the ledger's evidence carries for a published upload key.
pub fn upload_key_config_digest(policy_hash: &PolicyHash, public_key: &[u8]) -> Digest32 {
    Digest32::of(&[b"fedconf/upload-key/v1", policy_hash.as_bytes(), public_key])
}

/// Device-side check that `public_key` was generated by an approved ledger
/// binary for `policy_hash`.
pub fn verify_upload_key(
    evidence: &Evidence,
    ledger_refs: &ReferenceValues,
    nonce: &Nonce,
    root_public_key: &[u8],
    policy_hash: &PolicyHash,
    public_key: &[u8],
) -> bool {
    attestation::verify_evidence(evidence, ledger_refs, nonce, root_public_key).is_accepted()
        && evidence.config_digest == upload_key_config_digest(policy_hash, public_key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOp {
    Register,
    Authorize,
    Revoke,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub tick: u64,
    pub op: AuditOp,
    pub policy_hash: Option<PolicyHash>,
    pub blob_id: Option<BlobId>,
    pub node_id: Option<String>,
    pub digest: Option<Digest32>,
    pub decision: String,
    pub reason: Option<String>,
    pub running_hash: Digest32,
}

impl AuditRecord {
    /// Canonical JSON of every field except `running_hash`.
    pub fn record_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("record serializes");
        v.as_object_mut().expect("object").remove("running_hash");
        serde_json::to_vec(&v).expect("value serializes")
    }

    pub fn to_json_line(&self) -> String {
        let v = serde_json::to_value(self).expect("record serializes");
        serde_json::to_string(&v).expect("value serializes")
    }
}

pub fn chain_step(prev: &Digest32, record_bytes: &[u8]) -> Digest32 {
    Digest32::of(&[prev.as_bytes(), record_bytes])
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("audit chain breaks at record {index}: {detail}")]
pub struct ChainBreak {
    pub index: usize,
    pub detail: String,
}

/// Recomputes every running hash from the all-zero genesis value.
pub fn verify_audit_chain(records: &[AuditRecord]) -> Result<(), ChainBreak> {
    let mut prev = Digest32::default();
    for (i, r) in records.iter().enumerate() {
        if r.seq != i as u64 {
            return Err(ChainBreak {
                index: i,
                detail: format!("sequence number {} out of place", r.seq),
            });
        }
        let expected = chain_step(&prev, &r.record_bytes());
        if expected != r.running_hash {
            return Err(ChainBreak {
                index: i,
                detail: "running hash mismatch".into(),
            });
        }
        prev = expected;
    }
    Ok(())
}

/// Parses and verifies an exported log. Each line must be the canonical
/// encoding of its record. Returns the record count.
pub fn verify_audit_jsonl(text: &str) -> Result<usize, ChainBreak> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parsed = serde_json::from_str::<serde_json::Value>(line)
            .map_err(|e| e.to_string())
            .and_then(|v| {
                if serde_json::to_string(&v).map_err(|e| e.to_string())? != line {
                    return Err("line is not canonical JSON".to_owned());
                }
                serde_json::from_value::<AuditRecord>(v).map_err(|e| e.to_string())
            });
        match parsed {
            Ok(r) => records.push(r),
            Err(detail) => return Err(ChainBreak { index: i, detail }),
        }
    }
    verify_audit_chain(&records)?;
    Ok(records.len())
}

struct Registered {
    policy: AccessPolicy,
    upload: KeyPair,
}

/// Serialized state machine; every mutating call takes `&mut self`.
pub struct Ledger {
    root_public_key: Vec<u8>,
    enclave: Enclave,
    nonce_seed: Digest32,
    nonces_issued: u64,
    outstanding: BTreeSet<Nonce>,
    /// Session keys already run through the low-order check.
    checked_session_keys: BTreeMap<Vec<u8>, bool>,
    policies: BTreeMap<PolicyHash, Registered>,
    decrypt_counts: BTreeMap<(BlobId, String), u64>,
    revoked: BTreeSet<PolicyHash>,
    clock: u64,
    audit_log: Vec<AuditRecord>,
}

impl Ledger {
    pub fn new(root: &TrustRoot, seed: &[u8; 32]) -> Self {
        let session_seed = Digest32::of(&[b"fedconf/ledger-session/v1", seed]);
        Self {
            root_public_key: root.root_public_key.clone(),
            enclave: Enclave::launch(root, workloads::LEDGER, &session_seed.0),
            nonce_seed: Digest32::of(&[b"fedconf/ledger-nonce/v1", seed]),
            nonces_issued: 0,
            outstanding: BTreeSet::new(),
            checked_session_keys: BTreeMap::new(),
            policies: BTreeMap::new(),
            decrypt_counts: BTreeMap::new(),
            revoked: BTreeSet::new(),
            clock: 0,
            audit_log: Vec::new(),
        }
    }

    /// Reference values a device uses to recognise a genuine ledger.
    pub fn reference_values() -> ReferenceValues {
        ReferenceValues::new([attestation::binary_digest(workloads::LEDGER)])
    }

    pub fn root_public_key(&self) -> &[u8] {
        &self.root_public_key
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn advance_clock(&mut self, ticks: u64) -> u64 {
        self.clock = self.clock.saturating_add(ticks);
        self.clock
    }

    /// Moves the clock forward to `tick`; never backwards.
    pub fn set_clock(&mut self, tick: u64) -> u64 {
        self.clock = self.clock.max(tick);
        self.clock
    }

    /// A fresh single-use challenge for an attestation round trip.
    pub fn issue_nonce(&mut self) -> Nonce {
        let n = Nonce::from_slice(
            &Digest32::of(&[
                self.nonce_seed.as_bytes(),
                &self.nonces_issued.to_be_bytes(),
            ])
            .0[..16],
        )
        .expect("16 bytes");
        self.nonces_issued += 1;
        self.outstanding.insert(n);
        n
    }

    pub fn policy(&self, hash: &PolicyHash) -> Option<&AccessPolicy> {
        self.policies.get(hash).map(|r| &r.policy)
    }

    pub fn upload_public_key(&self, hash: &PolicyHash) -> Option<&[u8]> {
        self.policies.get(hash).map(|r| r.upload.public_key.as_slice())
    }

    pub fn is_revoked(&self, hash: &PolicyHash) -> bool {
        self.revoked.contains(hash)
    }

    pub fn decrypt_count(&self, blob_id: &BlobId, node_id: &str) -> u64 {
        self.decrypt_counts
            .get(&(*blob_id, node_id.to_owned()))
            .copied()
            .unwrap_or(0)
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit_log
    }

    /// One canonical JSON record per line.
    pub fn export_audit_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.audit_log {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }

    /// Ledger evidence binding the upload key published for `hash`.
    pub fn upload_key_evidence(&self, hash: &PolicyHash, nonce: Nonce) -> Option<Evidence> {
        let pk = self.upload_public_key(hash)?;
        Some(
            self.enclave
                .attest_config(upload_key_config_digest(hash, pk), nonce),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn audit(
        &mut self,
        op: AuditOp,
        policy_hash: Option<PolicyHash>,
        blob_id: Option<BlobId>,
        node_id: Option<String>,
        digest: Option<Digest32>,
        decision: &str,
        reason: Option<&str>,
    ) {
        let prev = self
            .audit_log
            .last()
            .map_or(Digest32::default(), |r| r.running_hash);
        let mut record = AuditRecord {
            seq: self.audit_log.len() as u64,
            tick: self.clock,
            op,
            policy_hash,
            blob_id,
            node_id,
            digest,
            decision: decision.to_owned(),
            reason: reason.map(str::to_owned),
            running_hash: Digest32::default(),
        };
        record.running_hash = chain_step(&prev, &record.record_bytes());
        self.audit_log.push(record);
    }

    /// Stores a valid policy and returns its hash and upload public key.
    /// Registering the same policy again returns the existing key.
    pub fn register_policy(
        &mut self,
        policy: &AccessPolicy,
        entropy: &[u8; 32],
    ) -> Result<(PolicyHash, Vec<u8>), LedgerError> {
        let report = policy::validate(policy);
        if !report.is_ok() {
            self.audit(AuditOp::Register, None, None, None, None, "refused", Some("invalid_policy"));
            return Err(LedgerError::InvalidPolicy(report.to_string()));
        }
        let hash = policy::hash(policy)?;
        if let Some(existing) = self.policies.get(&hash) {
            let pk = existing.upload.public_key.clone();
            self.audit(AuditOp::Register, Some(hash), None, None, None, "registered", Some("already_registered"));
            return Ok((hash, pk));
        }
        let key_seed = Digest32::of(&[b"fedconf/upload-keygen/v1", entropy, hash.as_bytes()]);
        let upload = envelope::generate_keypair(&key_seed.0);
        let pk = upload.public_key.clone();
        self.policies.insert(
            hash,
            Registered {
                policy: policy.clone(),
                upload,
            },
        );
        self.audit(AuditOp::Register, Some(hash), None, None, None, "registered", None);
        Ok((hash, pk))
    }

    pub fn revoke(&mut self, hash: &PolicyHash) -> Result<(), LedgerError> {
        if !self.policies.contains_key(hash) {
            self.audit(AuditOp::Revoke, Some(*hash), None, None, None, "refused", Some("unknown_policy"));
            return Err(LedgerError::UnknownPolicy(*hash));
        }
        self.revoked.insert(*hash);
        self.audit(AuditOp::Revoke, Some(*hash), None, None, None, "revoked", None);
        Ok(())
    }

    pub fn authorize(&mut self, req: &GrantRequest) -> GrantDecision {
        // The nonce is spent whatever the outcome.
        let fresh_nonce = self.outstanding.remove(&req.nonce);
        let session_ok = *self
            .checked_session_keys
            .entry(req.session_public_key.clone())
            .or_insert_with(|| envelope::check_public_key(&req.session_public_key).is_ok());
        let decision = match self.check(req, fresh_nonce, session_ok) {
            Ok(wrapped) => {
                *self
                    .decrypt_counts
                    .entry((req.blob_header.blob_id, req.requesting_node.clone()))
                    .or_insert(0) += 1;
                GrantDecision::Granted(wrapped)
            }
            Err(reason) => GrantDecision::Denied(reason),
        };
        let (label, reason) = match &decision {
            GrantDecision::Granted(_) => ("granted", None),
            GrantDecision::Denied(r) => ("denied", Some(r.as_str())),
        };
        self.audit(
            AuditOp::Authorize,
            Some(req.blob_header.policy_hash),
            Some(req.blob_header.blob_id),
            Some(req.requesting_node.clone()),
            Some(req.evidence.binary_digest),
            label,
            reason,
        );
        decision
    }

    fn check(&self, req: &GrantRequest, fresh_nonce: bool, session_ok: bool) -> Result<EncryptedBlob, DenyReason> {
        let header = &req.blob_header;
        let hash = header.policy_hash;
        let reg = self.policies.get(&hash).ok_or(DenyReason::UnknownPolicy)?;
        let policy = &reg.policy;
        if self.revoked.contains(&hash) {
            return Err(DenyReason::Revoked);
        }
        if self.clock >= header.created_at.saturating_add(policy.ttl_ticks()) {
            return Err(DenyReason::ExpiredTtl);
        }

        let quote_ok = fresh_nonce
            && attestation::verify_quote(&req.evidence, &req.nonce, &self.root_public_key)
                .is_accepted()
            && session_ok
            && req.evidence.config_digest == session_config_digest(&req.session_public_key);
        if !quote_ok {
            return Err(DenyReason::AttestationFailed);
        }

        let node = policy
            .node(&req.requesting_node)
            .ok_or(DenyReason::NodeNotInPolicy)?;
        if !node
            .allowed_digests
            .allowed_digests
            .contains(&req.evidence.binary_digest)
        {
            return Err(DenyReason::DigestNotAllowed);
        }
        if self.decrypt_count(&header.blob_id, &node.node_id) >= node.constraints.max_decrypt_count {
            return Err(DenyReason::BudgetExhausted);
        }
        let is_aggregate = node.transform_kind == TransformKind::Aggregate;
        if is_aggregate {
            let distinct: BTreeSet<&BlobId> = req.claimed_inputs.iter().collect();
            if (distinct.len() as u64) < node.constraints.min_inputs {
                return Err(DenyReason::ThresholdUnmet);
            }
        }
        if !self.lineage_permits(policy, req, is_aggregate) {
            return Err(DenyReason::EdgeViolation);
        }

        // A low-order encapsulated key cannot come from a genuine upload; the
        // key agreement rejects it here, still under the last check.
        let key = envelope::derive_blob_key(reg.upload.private_key(), header, &req.encapsulated_key)
            .map_err(|_| DenyReason::EdgeViolation)?;
        let wrap_header = BlobHeader {
            blob_id: header.blob_id,
            created_at: self.clock,
            entry_node_id: req.requesting_node.clone(),
            policy_hash: hash,
        };
        envelope::encrypt(&key.0, &req.session_public_key, &wrap_header)
            .map_err(|_| DenyReason::AttestationFailed)
    }

    fn lineage_permits(&self, policy: &AccessPolicy, req: &GrantRequest, is_aggregate: bool) -> bool {
        let header = &req.blob_header;
        if is_aggregate && !req.claimed_inputs.contains(&header.blob_id) {
            return false;
        }
        let producer = header.entry_node_id.as_str();
        match &req.lineage {
            None => policy.entry_nodes.contains(producer) && req.requesting_node == producer,
            Some(lineage) => {
                !lineage.inputs.is_empty()
                    && policy
                        .edges
                        .contains(&(producer.to_owned(), req.requesting_node.clone()))
                    && derived_blob_id(&header.policy_hash, producer, &lineage.inputs, lineage.sequence)
                        == header.blob_id
                    && lineage
                        .inputs
                        .iter()
                        .all(|input| self.decrypt_count(input, producer) > 0)
            }
        }
    }
}
