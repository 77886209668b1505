//! The untrusted side of a run. Simulated devices upload to blob storage and a
//! scheduler drives the enclave workloads through the ledger on a discrete
//! tick clock.
//!
//! Everything the orchestrator touches is appended to an
//! [`ObserverTranscript`]; [`observer_check`] then asks whether any client
//! plaintext leaked into it.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::PrivacyBudget;
use crate::attestation::{Enclave, TrustRoot};
use crate::envelope::{self, BlobHeader, BlobKey, EncryptedBlob};
use crate::ledger::{self, derived_blob_id, GrantDecision, GrantRequest, Ledger, Lineage};
use crate::model::{decode_examples, encode_examples};
use crate::policy::{self, workloads, AccessPolicy, PolicyHash};
use crate::training::{
    self, device_blob_id, evaluate, select_clients, AbortReason, AbortedRound, Metrics,
    MetricsRow, Plan, ServerState, SyntheticDataset, TrainingConfig, TrainingError,
};
use crate::transforms::{
    self, l2_norm, AggregateState, ClientUpdate, ModelParams, NoiseStage,
};
use crate::types::{BlobId, Digest32, Nonce};

/// Grant attempts per blob and node before the blob is abandoned.
pub const MAX_GRANT_ATTEMPTS: u32 = 3;
/// Ticks between grant attempts.
pub const RETRY_BACKOFF: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FailureInjection {
    /// Upload attempts in `[from, to]` drop with at least this probability.
    DropoutSpike { probability: f64, from: u64, to: u64 },
    /// The ledger is unreachable in `[from, to]`.
    LedgerDenialBurst { from: u64, to: u64 },
    /// Blobs written in `[from, to]` become visible `ticks` later.
    StorageDelay { ticks: u64, from: u64, to: u64 },
}

impl FailureInjection {
    fn window(&self) -> (u64, u64) {
        match *self {
            FailureInjection::DropoutSpike { from, to, .. }
            | FailureInjection::LedgerDenialBurst { from, to }
            | FailureInjection::StorageDelay { from, to, .. } => (from, to),
        }
    }

    fn active(&self, tick: u64) -> bool {
        let (from, to) = self.window();
        (from..=to).contains(&tick)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub max_ticks: u64,
    /// Devices are available during `[upload_start, upload_end)`.
    pub upload_start: u64,
    pub upload_end: u64,
    /// After this tick a round may start with fewer than a full cohort.
    pub upload_deadline: u64,
    /// Minimum ticks between the end of one round and the start of the next.
    pub round_gap: u64,
    pub dropout_probability: f64,
    /// Devices that never upload.
    pub stragglers: Vec<usize>,
    pub failures: Vec<FailureInjection>,
    /// Explicit upload tick per device, overriding the seeded schedule.
    pub upload_ticks: Vec<u64>,
    /// Reassigns the scheduled upload ticks among devices.
    pub arrival_shuffle: Option<u64>,
    /// Negative control: devices also store their plaintext.
    pub plaintext_leak: bool,
    /// Negative control: devices are shown evidence from a rogue root.
    pub forged_ledger: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            max_ticks: 10_000,
            upload_start: 0,
            upload_end: 20,
            upload_deadline: 25,
            round_gap: 1,
            dropout_probability: 0.0,
            stragglers: Vec::new(),
            failures: Vec::new(),
            upload_ticks: Vec::new(),
            arrival_shuffle: None,
            plaintext_leak: false,
            forged_ledger: false,
        }
    }
}

impl SimConfig {
    pub fn inject_failure(&mut self, failure: FailureInjection) {
        self.failures.push(failure);
    }

    fn check(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Simulation(m.to_owned()));
        if self.upload_end <= self.upload_start {
            return bad("upload window is empty");
        }
        if self
            .upload_ticks
            .iter()
            .any(|t| !(self.upload_start..self.upload_end).contains(t))
        {
            return bad("explicit upload tick outside the availability window");
        }
        if self.round_gap == 0 {
            return bad("round_gap must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return bad("dropout_probability must lie in [0, 1]");
        }
        for f in &self.failures {
            let (from, to) = f.window();
            if from > to {
                return bad("failure window ends before it starts");
            }
            if let FailureInjection::DropoutSpike { probability, .. } = f {
                if !(0.0..=1.0).contains(probability) {
                    return bad("dropout spike probability must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }

    fn dropout_at(&self, tick: u64) -> f64 {
        self.failures
            .iter()
            .filter(|f| f.active(tick))
            .filter_map(|f| match f {
                FailureInjection::DropoutSpike { probability, .. } => Some(*probability),
                _ => None,
            })
            .fold(self.dropout_probability, f64::max)
    }

    fn ledger_down(&self, tick: u64) -> bool {
        self.failures
            .iter()
            .any(|f| matches!(f, FailureInjection::LedgerDenialBurst { .. }) && f.active(tick))
    }

    fn storage_delay(&self, tick: u64) -> u64 {
        self.failures
            .iter()
            .filter(|f| f.active(tick))
            .filter_map(|f| match f {
                FailureInjection::StorageDelay { ticks, .. } => Some(*ticks),
                _ => None,
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub device_id: usize,
    pub availability: Vec<(u64, u64)>,
    pub dropout_probability: f64,
    pub upload_tick: Option<u64>,
}

/// Upload schedule for every device: one attempt at a seeded tick inside the
/// availability window; stragglers never attempt.
pub fn device_schedule(run_seed: u64, devices: usize, sim: &SimConfig) -> Vec<DeviceState> {
    let span = sim.upload_end - sim.upload_start;
    let mut ticks: Vec<u64> = if !sim.upload_ticks.is_empty() {
        sim.upload_ticks.clone()
    } else {
        (0..devices)
        .map(|d| {
            let h = Digest32::of(&[
                b"fedconf/upload-tick/v1",
                &run_seed.to_be_bytes(),
                &(d as u64).to_be_bytes(),
            ]);
            sim.upload_start + u64::from_be_bytes(h.0[..8].try_into().unwrap()) % span
        })
        .collect()
    };
    if let Some(shuffle) = sim.arrival_shuffle {
        ticks.shuffle(&mut ChaCha20Rng::seed_from_u64(shuffle));
    }
    let stragglers: BTreeSet<usize> = sim.stragglers.iter().copied().collect();
    ticks
        .into_iter()
        .enumerate()
        .map(|(d, t)| DeviceState {
            device_id: d,
            availability: vec![(sim.upload_start, sim.upload_end)],
            dropout_probability: sim.dropout_probability,
            upload_tick: (!stragglers.contains(&d)).then_some(t),
        })
        .collect()
}

/// Uniform draw a device compares against the dropout probability in force
/// when it tries to upload.
pub fn dropout_draw(run_seed: u64, device: usize) -> f64 {
    let h = Digest32::of(&[
        b"fedconf/dropout/v1",
        &run_seed.to_be_bytes(),
        &(device as u64).to_be_bytes(),
    ]);
    ChaCha20Rng::from_seed(h.0).random()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    Untrusted,
    /// Inside the named enclave; invisible to the orchestrator.
    Tee(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub tick: u64,
    pub label: String,
    pub scope: Scope,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObserverTranscript {
    entries: Vec<TranscriptEntry>,
}

impl ObserverTranscript {
    pub fn record(&mut self, tick: u64, label: &str, scope: Scope, bytes: Vec<u8>) {
        self.entries.push(TranscriptEntry {
            tick,
            label: label.to_owned(),
            scope,
            bytes,
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn untrusted_bytes(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.scope == Scope::Untrusted)
            .map(|e| e.bytes.len())
            .sum()
    }
}

const WINDOW: usize = 16;

/// True iff no secret, nor any 16-byte substring of one, appears in an
/// entry outside enclave scope.
pub fn observer_check(transcript: &ObserverTranscript, secrets: &[Vec<u8>]) -> bool {
    let mut short: Vec<&[u8]> = Vec::new();
    let mut windows: HashSet<[u8; WINDOW]> = HashSet::new();
    for s in secrets {
        if s.is_empty() {
            continue;
        }
        if s.len() < WINDOW {
            short.push(s);
        } else {
            windows.extend(s.windows(WINDOW).map(|w| <[u8; WINDOW]>::try_from(w).unwrap()));
        }
    }
    transcript
        .entries
        .iter()
        .filter(|e| e.scope == Scope::Untrusted)
        .all(|e| {
            !e.bytes
                .windows(WINDOW)
                .any(|w| windows.contains(<&[u8; WINDOW]>::try_from(w).unwrap()))
                && !short
                    .iter()
                    .any(|s| e.bytes.windows(s.len()).any(|w| w == *s))
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StoredBlob {
    blob: EncryptedBlob,
    visible_at: u64,
}

/// Write-once blob storage.
#[derive(Debug, Default)]
pub struct BlobStore {
    blobs: BTreeMap<BlobId, StoredBlob>,
    log: Vec<(u64, BlobId)>,
}

impl BlobStore {
    pub fn put(&mut self, tick: u64, visible_at: u64, blob: EncryptedBlob) -> bool {
        let id = blob.header.blob_id;
        if self.blobs.contains_key(&id) {
            return false;
        }
        self.blobs.insert(id, StoredBlob { blob, visible_at });
        self.log.push((tick, id));
        true
    }

    pub fn get(&self, id: &BlobId, tick: u64) -> Option<&EncryptedBlob> {
        self.blobs
            .get(id)
            .filter(|s| s.visible_at <= tick)
            .map(|s| &s.blob)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn insertion_log(&self) -> &[(u64, BlobId)] {
        &self.log
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub seq: u64,
    pub tick: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blob_ids: Vec<BlobId>,
    pub outcome: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub metrics: Metrics,
    pub final_params: Vec<f64>,
    /// Released update per completed round, as the server received it.
    pub releases: Vec<(u64, Vec<f64>)>,
    pub rho_reported: PrivacyBudget,
    pub policy_hash: PolicyHash,
    pub uploads: usize,
    pub upload_refusals: usize,
    pub end_tick: u64,
    pub audit_jsonl: String,
    pub trace: Vec<TraceEvent>,
    pub transcript: ObserverTranscript,
    /// Blob decryptions performed inside enclaves.
    pub tee_decryptions: u64,
    client_update_payloads: Vec<Vec<u8>>,
}

impl RunOutcome {
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            let v = serde_json::to_value(e).expect("event serializes");
            out.push_str(&serde_json::to_string(&v).expect("value serializes"));
            out.push('\n');
        }
        out
    }

    /// Per-device plaintexts: uploaded datasets and computed updates.
    pub fn client_secrets(&self, data: &SyntheticDataset) -> Vec<Vec<u8>> {
        data.clients
            .iter()
            .map(|c| encode_examples(c))
            .chain(self.client_update_payloads.iter().cloned())
            .collect()
    }

    pub fn grants_in_audit(&self) -> usize {
        self.audit_jsonl
            .lines()
            .filter(|l| l.contains("\"decision\":\"granted\""))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    ClientUpdate,
    Aggregate,
    Noise,
    Release,
}

#[derive(Debug, Clone)]
struct Pending {
    blob: BlobId,
    attempts: u32,
    next_try: u64,
}

impl Pending {
    fn new(blob: BlobId, tick: u64) -> Self {
        Self {
            blob,
            attempts: 0,
            next_try: tick,
        }
    }
}

#[derive(Debug)]
enum Phase {
    ClientUpdate {
        pending: Vec<Pending>,
        /// Update blob and the device blob it came from.
        outputs: Vec<(BlobId, BlobId)>,
    },
    Aggregate {
        lineage: BTreeMap<BlobId, BlobId>,
        pending: Vec<Pending>,
        candidates: Vec<BlobId>,
        granted: Vec<(BlobId, ClientUpdate)>,
    },
    Noise {
        agg_blob: BlobId,
        agg_inputs: Vec<BlobId>,
        pending: Pending,
    },
    Release {
        noise_blob: BlobId,
        agg_blob: BlobId,
        pending: Pending,
    },
}

struct ActiveRound {
    round: u64,
    ready_at: u64,
    selected: Vec<BlobId>,
    phase: Phase,
}

enum StepResult {
    Waiting,
    Released(Vec<f64>, usize),
    Aborted(AbortReason),
}

struct Enclaves {
    client_update: Enclave,
    aggregate: Enclave,
    noise: Enclave,
    release: Enclave,
}

impl Enclaves {
    fn launch(root: &TrustRoot, seed: u64) -> Self {
        let launch = |identity: &str| {
            let s = Digest32::of(&[b"fedconf/enclave/v1", &seed.to_be_bytes(), identity.as_bytes()]);
            Enclave::launch(root, identity, &s.0)
        };
        Self {
            client_update: launch(workloads::CLIENT_UPDATE),
            aggregate: launch(workloads::AGGREGATE),
            noise: launch(workloads::DP_NOISE),
            release: launch(workloads::RELEASE),
        }
    }

    fn get(&self, stage: Stage) -> &Enclave {
        match stage {
            Stage::ClientUpdate => &self.client_update,
            Stage::Aggregate => &self.aggregate,
            Stage::Noise => &self.noise,
            Stage::Release => &self.release,
        }
    }
}

struct Simulation<'a> {
    config: &'a TrainingConfig,
    plan: Plan,
    sim: &'a SimConfig,
    data: &'a SyntheticDataset,
    pooled: Vec<crate::model::Example>,
    ledger: Ledger,
    hash: PolicyHash,
    upload_pk: Vec<u8>,
    store: BlobStore,
    transcript: ObserverTranscript,
    trace: Vec<TraceEvent>,
    enclaves: Enclaves,
    noise: NoiseStage,
    server: ServerState,
    device_of: BTreeMap<BlobId, usize>,
    participation: Vec<u32>,
    tee_decryptions: u64,
    update_payloads: Vec<Vec<u8>>,
}

fn seed_bytes(label: &str, seed: u64) -> [u8; 32] {
    Digest32::of(&[label.as_bytes(), &seed.to_be_bytes()]).0
}

impl<'a> Simulation<'a> {
    fn event(&mut self, tick: u64, kind: &str, outcome: impl Into<String>) -> &mut TraceEvent {
        let seq = self.trace.len() as u64;
        self.trace.push(TraceEvent {
            seq,
            tick,
            kind: kind.to_owned(),
            round: None,
            node: None,
            device: None,
            blob_ids: Vec::new(),
            outcome: outcome.into(),
        });
        self.trace.last_mut().expect("just pushed")
    }

    fn node_id(&self, stage: Stage) -> &str {
        match stage {
            Stage::ClientUpdate => &self.plan.stages.client_update,
            Stage::Aggregate => &self.plan.stages.aggregate,
            Stage::Noise => &self.plan.stages.dp_noise,
            Stage::Release => &self.plan.stages.release,
        }
    }

    fn write_blob(&mut self, tick: u64, label: &str, blob: EncryptedBlob) -> u64 {
        let visible_at = tick + self.sim.storage_delay(tick);
        self.transcript
            .record(tick, label, Scope::Untrusted, blob.to_bytes());
        let fresh = self.store.put(tick, visible_at, blob);
        debug_assert!(fresh, "blob ids are unique per run");
        visible_at
    }

    /// Devices fetch and check the ledger's key evidence, then upload.
    fn device_uploads(&mut self, tick: u64, devices: &[DeviceState], rogue: &TrustRoot) -> (usize, usize) {
        let (mut uploads, mut refusals) = (0, 0);
        for dev in devices.iter().filter(|d| d.upload_tick == Some(tick)) {
            let d = dev.device_id;
            let nonce = Nonce::from_slice(
                &Digest32::of(&[b"fedconf/device-nonce/v1", &self.config.seed.to_be_bytes(), &(d as u64).to_be_bytes()]).0[..16],
            )
            .expect("16 bytes");
            let evidence = if self.sim.forged_ledger {
                let fake = Enclave::launch(rogue, workloads::LEDGER, &[0x66; 32]);
                fake.attest_config(ledger::upload_key_config_digest(&self.hash, &self.upload_pk), nonce)
            } else {
                self.ledger
                    .upload_key_evidence(&self.hash, nonce)
                    .expect("policy registered")
            };
            self.transcript.record(
                tick,
                "ledger_evidence",
                Scope::Untrusted,
                evidence.to_canonical_json().into_bytes(),
            );
            let trusted = ledger::verify_upload_key(
                &evidence,
                &Ledger::reference_values(),
                &nonce,
                self.ledger.root_public_key(),
                &self.hash,
                &self.upload_pk,
            );
            if !trusted {
                refusals += 1;
                self.event(tick, "device_upload", "refused_bad_ledger_evidence").device = Some(d);
                continue;
            }
            if dropout_draw(self.config.seed, d) < self.sim.dropout_at(tick) {
                self.event(tick, "device_upload", "dropout").device = Some(d);
                continue;
            }
            let payload = encode_examples(&self.data.clients[d]);
            let header = BlobHeader {
                blob_id: device_blob_id(self.config.seed, d),
                created_at: tick,
                entry_node_id: self.plan.stages.client_update.clone(),
                policy_hash: self.hash,
            };
            let blob = envelope::encrypt(&payload, &self.upload_pk, &header).expect("valid upload key");
            if self.sim.plaintext_leak {
                self.transcript
                    .record(tick, "storage_debug", Scope::Untrusted, payload);
            }
            self.device_of.insert(header.blob_id, d);
            let visible = self.write_blob(tick, "storage", blob);
            uploads += 1;
            let e = self.event(tick, "device_upload", "deposited");
            e.device = Some(d);
            e.blob_ids = vec![header.blob_id];
            if visible > tick {
                e.outcome = format!("deposited_visible_at_{visible}");
            }
        }
        (uploads, refusals)
    }

    /// Asks the ledger for `blob`'s key on behalf of `stage`'s enclave.
    fn request_key(
        &mut self,
        tick: u64,
        round: u64,
        stage: Stage,
        blob_id: BlobId,
        claimed: &[BlobId],
        lineage: Option<Lineage>,
        attempt: u32,
    ) -> Result<(EncryptedBlob, BlobKey), ()> {
        let node = self.node_id(stage).to_owned();
        let outcome = if self.sim.ledger_down(tick) {
            Err("ledger_unavailable".to_owned())
        } else if let Some(blob) = self.store.get(&blob_id, tick).cloned() {
            let enclave = self.enclaves.get(stage);
            let nonce = self.ledger.issue_nonce();
            let mut req = GrantRequest::new(&blob, &node, enclave, nonce)
                .with_claimed_inputs(claimed.to_vec());
            req.lineage = lineage;
            self.transcript.record(
                tick,
                "grant_request",
                Scope::Untrusted,
                serde_json::to_vec(&req).expect("request serializes"),
            );
            match self.ledger.authorize(&req) {
                GrantDecision::Granted(wrapped) => {
                    self.transcript
                        .record(tick, "wrapped_key", Scope::Untrusted, wrapped.to_bytes());
                    let session = self.enclaves.get(stage).session_keypair();
                    match ledger::unwrap_blob_key(&wrapped, session) {
                        Ok(key) => Ok((blob, key)),
                        Err(e) => Err(format!("unwrap_failed: {e}")),
                    }
                }
                GrantDecision::Denied(reason) => Err(format!("denied:{reason}")),
            }
        } else {
            Err("blob_not_visible".to_owned())
        };
        let label = match &outcome {
            Ok(_) => "granted".to_owned(),
            Err(reason) => format!("{reason} (attempt {attempt})"),
        };
        let e = self.event(tick, "grant", label);
        e.round = Some(round);
        e.node = Some(node);
        e.blob_ids = vec![blob_id];
        outcome.map_err(|_| ())
    }

    fn open(&mut self, blob: &EncryptedBlob, key: &BlobKey) -> Option<Vec<u8>> {
        let pt = envelope::decrypt_with_blob_key(blob, key).ok()?;
        self.tee_decryptions += 1;
        Some(pt)
    }

    fn seal(&mut self, tick: u64, stage: Stage, inputs: &[BlobId], round: u64, payload: &[u8]) -> (BlobId, u64) {
        let producer = self.node_id(stage).to_owned();
        let header = BlobHeader {
            blob_id: derived_blob_id(&self.hash, &producer, inputs, round),
            created_at: tick,
            entry_node_id: producer,
            policy_hash: self.hash,
        };
        let blob = envelope::encrypt(payload, &self.upload_pk, &header).expect("valid upload key");
        let id = header.blob_id;
        (id, self.write_blob(tick, "storage", blob))
    }

    /// Indices of the pending requests whose retry time has come.
    fn due(pending: &[Pending], tick: u64) -> Vec<usize> {
        (0..pending.len())
            .filter(|&i| pending[i].next_try <= tick)
            .collect()
    }

    fn fail(&mut self, p: &mut Pending, tick: u64, round: u64, node: &str) -> bool {
        if p.attempts >= MAX_GRANT_ATTEMPTS {
            let e = self.event(tick, "abandon", "max_attempts");
            e.round = Some(round);
            e.node = Some(node.to_owned());
            e.blob_ids = vec![p.blob];
            true
        } else {
            p.next_try = tick + RETRY_BACKOFF;
            false
        }
    }

    fn step(&mut self, tick: u64, r: &mut ActiveRound) -> StepResult {
        loop {
            if tick < r.ready_at {
                return StepResult::Waiting;
            }
            let round = r.round;
            match &mut r.phase {
                Phase::ClientUpdate { pending, outputs } => {
                    let work = std::mem::take(pending);
                    let mut keep = Vec::new();
                    let mut ready = r.ready_at;
                    let due = Self::due(&work, tick);
                    let params = self.server.params.clone();
                    for (i, mut p) in work.into_iter().enumerate() {
                        if !due.contains(&i) {
                            keep.push(p);
                            continue;
                        }
                        p.attempts += 1;
                        let node = self.plan.stages.client_update.clone();
                        match self.request_key(tick, round, Stage::ClientUpdate, p.blob, &[], None, p.attempts) {
                            Ok((blob, key)) => {
                                let Some(pt) = self.open(&blob, &key) else {
                                    continue;
                                };
                                let cfg = self.plan.client_config(self.config);
                                let update = decode_examples(&pt).ok().and_then(|ex| {
                                    let params = ModelParams::new(params.clone()).ok()?;
                                    transforms::compute_client_update(&params, &ex, &cfg).ok()
                                });
                                let Some(update) = update else {
                                    let e = self.event(tick, "transform", "client_update_failed");
                                    e.round = Some(round);
                                    e.blob_ids = vec![p.blob];
                                    continue;
                                };
                                let payload = update.to_payload();
                                self.transcript.record(
                                    tick,
                                    "client_update_payload",
                                    Scope::Tee(node.clone()),
                                    payload.clone(),
                                );
                                self.update_payloads.push(payload.clone());
                                let (out, vis) = self.seal(tick, Stage::ClientUpdate, &[p.blob], round, &payload);
                                ready = ready.max(vis);
                                outputs.push((out, p.blob));
                            }
                            Err(()) => {
                                if !self.fail(&mut p, tick, round, &node) {
                                    keep.push(p);
                                }
                            }
                        }
                    }
                    *pending = keep;
                    if !pending.is_empty() {
                        return StepResult::Waiting;
                    }
                    let outputs = std::mem::take(outputs);
                    let node = self.plan.stages.client_update.clone();
                    let e = self.event(tick, "transform", format!("client_update_done:{}", outputs.len()));
                    e.round = Some(round);
                    e.node = Some(node);
                    r.ready_at = ready;
                    let candidates: Vec<BlobId> = outputs.iter().map(|(u, _)| *u).collect();
                    r.phase = Phase::Aggregate {
                        lineage: outputs.into_iter().collect(),
                        pending: candidates.iter().map(|b| Pending::new(*b, ready)).collect(),
                        candidates,
                        granted: Vec::new(),
                    };
                }
                Phase::Aggregate {
                    lineage,
                    pending,
                    candidates,
                    granted,
                } => {
                    let work = std::mem::take(pending);
                    let due = Self::due(&work, tick);
                    let mut keep = Vec::new();
                    let node = self.plan.stages.aggregate.clone();
                    for (i, mut p) in work.into_iter().enumerate() {
                        if !due.contains(&i) {
                            keep.push(p);
                            continue;
                        }
                        p.attempts += 1;
                        let lin = Lineage {
                            inputs: vec![lineage[&p.blob]],
                            sequence: round,
                        };
                        match self.request_key(tick, round, Stage::Aggregate, p.blob, candidates, Some(lin), p.attempts) {
                            Ok((blob, key)) => {
                                let update = self.open(&blob, &key)
                                    .and_then(|pt| ClientUpdate::from_payload(&pt).ok());
                                match update {
                                    Some(u) => granted.push((p.blob, u)),
                                    None => candidates.retain(|c| *c != p.blob),
                                }
                            }
                            Err(()) => {
                                if self.fail(&mut p, tick, round, &node) {
                                    candidates.retain(|c| *c != p.blob);
                                } else {
                                    keep.push(p);
                                }
                            }
                        }
                    }
                    *pending = keep;
                    if !pending.is_empty() {
                        return StepResult::Waiting;
                    }
                    let agg = match transforms::aggregate(granted, self.plan.min_inputs) {
                        Ok(a) => a,
                        Err(e) => return StepResult::Aborted(AbortReason::from(&e)),
                    };
                    let inputs = agg.contributing_blob_ids.clone();
                    let (agg_blob, vis) = self.seal(tick, Stage::Aggregate, &inputs, round, &agg.to_payload());
                    let e = self.event(tick, "transform", format!("aggregate_done:{}", agg.count));
                    e.round = Some(round);
                    e.node = Some(node);
                    e.blob_ids = vec![agg_blob];
                    r.ready_at = vis;
                    r.phase = Phase::Noise {
                        agg_blob,
                        agg_inputs: inputs,
                        pending: Pending::new(agg_blob, vis),
                    };
                }
                Phase::Noise {
                    agg_blob,
                    agg_inputs,
                    pending,
                } => {
                    if pending.next_try > tick {
                        return StepResult::Waiting;
                    }
                    pending.attempts += 1;
                    let lin = Lineage {
                        inputs: agg_inputs.clone(),
                        sequence: round,
                    };
                    let (agg_blob, attempt) = (*agg_blob, pending.attempts);
                    match self.request_key(tick, round, Stage::Noise, agg_blob, &[], Some(lin), attempt) {
                        Ok((blob, key)) => {
                            let Some(agg) = self.open(&blob, &key)
                                .and_then(|pt| AggregateState::from_payload(&pt).ok())
                            else {
                                return StepResult::Aborted(AbortReason::TransformFailed);
                            };
                            let noised = match self.noise.process(&agg.sum) {
                                Ok(n) => n,
                                Err(e) => return StepResult::Aborted(AbortReason::from(&e)),
                            };
                            let out = AggregateState { sum: noised, ..agg };
                            let (noise_blob, vis) = self.seal(tick, Stage::Noise, &[agg_blob], round, &out.to_payload());
                            let node = self.plan.stages.dp_noise.clone();
                            let e = self.event(tick, "transform", "dp_noise_done");
                            e.round = Some(round);
                            e.node = Some(node);
                            e.blob_ids = vec![noise_blob];
                            r.ready_at = vis;
                            r.phase = Phase::Release {
                                noise_blob,
                                agg_blob,
                                pending: Pending::new(noise_blob, vis),
                            };
                        }
                        Err(()) => {
                            let node = self.plan.stages.dp_noise.clone();
                            let Phase::Noise { pending, .. } = &mut r.phase else { unreachable!() };
                            let mut p = pending.clone();
                            let abandoned = self.fail(&mut p, tick, round, &node);
                            if abandoned {
                                return StepResult::Aborted(AbortReason::GrantDenied);
                            }
                            if let Phase::Noise { pending, .. } = &mut r.phase {
                                *pending = p;
                            }
                            return StepResult::Waiting;
                        }
                    }
                }
                Phase::Release {
                    noise_blob,
                    agg_blob,
                    pending,
                } => {
                    if pending.next_try > tick {
                        return StepResult::Waiting;
                    }
                    pending.attempts += 1;
                    let lin = Lineage {
                        inputs: vec![*agg_blob],
                        sequence: round,
                    };
                    let (noise_blob, attempt) = (*noise_blob, pending.attempts);
                    match self.request_key(tick, round, Stage::Release, noise_blob, &[], Some(lin), attempt) {
                        Ok((blob, key)) => {
                            let Some(noised) = self.open(&blob, &key)
                                .and_then(|pt| AggregateState::from_payload(&pt).ok())
                            else {
                                return StepResult::Aborted(AbortReason::TransformFailed);
                            };
                            return match transforms::release(&noised, &noised.sum, &self.plan.gates()) {
                                Ok(v) => StepResult::Released(v, noised.count),
                                Err(refusal) => StepResult::Aborted(refusal.into()),
                            };
                        }
                        Err(()) => {
                            let node = self.plan.stages.release.clone();
                            let Phase::Release { pending, .. } = &mut r.phase else { unreachable!() };
                            let mut p = pending.clone();
                            if self.fail(&mut p, tick, round, &node) {
                                return StepResult::Aborted(AbortReason::GrantDenied);
                            }
                            if let Phase::Release { pending, .. } = &mut r.phase {
                                *pending = p;
                            }
                            return StepResult::Waiting;
                        }
                    }
                }
            }
        }
    }

    /// Device blobs the orchestrator can see and the ledger will still honour.
    fn live_uploads(&self, tick: u64) -> Vec<BlobId> {
        let ttl = self
            .ledger
            .policy(&self.hash)
            .map_or(0, AccessPolicy::ttl_ticks);
        self.device_of
            .keys()
            .filter(|id| {
                self.store.get(id, tick).is_some_and(|b| {
                    tick < b.header.created_at.saturating_add(ttl)
                })
            })
            .copied()
            .collect()
    }

    fn record_round(&mut self, tick: u64, round: u64, released: &[f64], participants: usize, selected: &[BlobId]) -> MetricsRow {
        self.server.apply(released);
        self.transcript.record(
            tick,
            "released_update",
            Scope::Untrusted,
            released.iter().flat_map(|v| v.to_le_bytes()).collect(),
        );
        for id in selected {
            if let Some(&d) = self.device_of.get(id) {
                self.participation[d] += 1;
            }
        }
        let (train_loss, eval_loss, eval_accuracy) =
            evaluate(self.config.model, &self.server.params, &self.pooled, &self.data.eval)
                .unwrap_or((f64::NAN, f64::NAN, None));
        MetricsRow {
            round,
            tick,
            participants,
            max_client_participations: self.participation.iter().copied().max().unwrap_or(0),
            train_loss,
            eval_loss,
            eval_accuracy,
            update_norm: l2_norm(released),
            rho_spent: self.plan.rho_after(self.noise.released()),
        }
    }
}

/// Runs `config` end to end under `policy`: registration, device uploads,
/// and every round through the ledger and the enclave workloads.
pub fn run_pipeline(
    config: &TrainingConfig,
    policy: &AccessPolicy,
    data: &SyntheticDataset,
    sim: &SimConfig,
) -> Result<RunOutcome, TrainingError> {
    let plan = training::plan(config, policy)?;
    sim.check()?;
    if !sim.upload_ticks.is_empty() && sim.upload_ticks.len() != data.clients.len() {
        return Err(TrainingError::Simulation(
            "upload_ticks must list one tick per device".to_owned(),
        ));
    }
    if data.clients.len() != config.data.clients {
        return Err(TrainingError::Simulation(format!(
            "dataset has {} clients, config declares {}",
            data.clients.len(),
            config.data.clients
        )));
    }
    let seed = config.seed;
    let root = TrustRoot::from_seed(&seed_bytes("fedconf/trust-root/v1", seed));
    let rogue = TrustRoot::from_seed(&seed_bytes("fedconf/rogue-root/v1", seed));
    let mut ledger = Ledger::new(&root, &seed_bytes("fedconf/ledger/v1", seed));
    let (hash, upload_pk) = ledger
        .register_policy(policy, &seed_bytes("fedconf/ledger-entropy/v1", seed))
        .map_err(|e| TrainingError::Mismatch(e.to_string()))?;
    debug_assert_eq!(Some(hash), policy::hash(policy).ok());
    let initial = config.model.init_params(config.data.dim, seed)?;
    let noise = plan.noise_stage(initial.len(), seed)?;

    let mut s = Simulation {
        config,
        sim,
        data,
        pooled: data.pooled(),
        ledger,
        hash,
        upload_pk,
        store: BlobStore::default(),
        transcript: ObserverTranscript::default(),
        trace: Vec::new(),
        enclaves: Enclaves::launch(&root, seed),
        noise,
        server: ServerState::new(initial, config.server_optimizer),
        device_of: BTreeMap::new(),
        participation: vec![0; data.clients.len()],
        tee_decryptions: 0,
        update_payloads: Vec::new(),
        plan,
    };
    s.transcript
        .record(0, "upload_public_key", Scope::Untrusted, s.upload_pk.clone());
    s.event(0, "register_policy", hash.to_hex());

    let devices = device_schedule(seed, data.clients.len(), sim);
    let mut metrics = Metrics::empty();
    let mut releases = Vec::new();
    let (mut uploads, mut refusals) = (0, 0);
    let mut active: Option<ActiveRound> = None;
    let mut rounds_started = 0u64;
    let mut next_round_at = 0u64;
    let mut tick = 0u64;
    let status = loop {
        if tick >= sim.max_ticks {
            break RunStatus::Incomplete;
        }
        s.ledger.set_clock(tick);
        let (u, r) = s.device_uploads(tick, &devices, &rogue);
        uploads += u;
        refusals += r;

        if active.is_none() && rounds_started < s.plan.rounds && tick >= next_round_at {
            let live = s.live_uploads(tick);
            let full = live.len() >= s.plan.clients_per_round;
            let late = tick >= sim.upload_deadline && live.len() >= s.plan.min_inputs;
            if full || late {
                rounds_started += 1;
                let selected = select_clients(seed, rounds_started, &live, s.plan.clients_per_round);
                let e = s.event(tick, "round_start", format!("selected:{}", selected.len()));
                e.round = Some(rounds_started);
                e.blob_ids = selected.clone();
                active = Some(ActiveRound {
                    round: rounds_started,
                    ready_at: tick,
                    phase: Phase::ClientUpdate {
                        pending: selected.iter().map(|b| Pending::new(*b, tick)).collect(),
                        outputs: Vec::new(),
                    },
                    selected,
                });
            }
        }

        if let Some(mut r) = active.take() {
            match s.step(tick, &mut r) {
                StepResult::Waiting => active = Some(r),
                StepResult::Released(v, count) => {
                    let row = s.record_round(tick, r.round, &v, count, &r.selected);
                    let node = s.plan.stages.release.clone();
                    let e = s.event(tick, "release", format!("norm:{}", training::fmt_sig10(row.update_norm)));
                    e.round = Some(r.round);
                    e.node = Some(node);
                    metrics.rows.push(row);
                    releases.push((r.round, v));
                    next_round_at = tick + sim.round_gap;
                }
                StepResult::Aborted(reason) => {
                    let e = s.event(tick, "round_aborted", reason.as_str());
                    e.round = Some(r.round);
                    metrics.aborted.push(AbortedRound {
                        round: r.round,
                        tick,
                        reason,
                    });
                    next_round_at = tick + sim.round_gap;
                }
            }
        }
        if rounds_started == s.plan.rounds && active.is_none() {
            break RunStatus::Complete;
        }
        tick += 1;
    };
    let status_label = match status {
        RunStatus::Complete => "complete",
        RunStatus::Incomplete => "incomplete",
    };
    s.event(tick, "run_end", status_label);
    metrics.rho_spent = s.plan.rho_after(s.noise.released());
    Ok(RunOutcome {
        status,
        rho_reported: metrics.rho_spent,
        metrics,
        final_params: s.server.params.clone(),
        releases,
        policy_hash: hash,
        uploads,
        upload_refusals: refusals,
        end_tick: tick,
        audit_jsonl: s.ledger.export_audit_jsonl(),
        trace: s.trace,
        transcript: s.transcript,
        tee_decryptions: s.tee_decryptions,
        client_update_payloads: s.update_payloads,
    })
}
