//! Device-approved access policies: a small DAG of permitted transformations,
//! each node carrying an attestation allowlist and privacy constraints.
//!
//! The on-disk form is canonical JSON: keys sorted, no whitespace, numerics
//! that matter for privacy written as decimal strings. The policy hash is the
//! SHA-256 of those bytes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::accounting::{self, NoiseConfig, NoiseMechanism, PrivacyBudget, REPORTING_DELTA};
use crate::attestation::{binary_digest, ReferenceValues};
use crate::types::Digest32;

pub type PolicyHash = Digest32;

/// Upper bound on nodes so a policy stays reviewable by a person.
pub const MAX_NODES: usize = 32;

const RHO_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy does not parse: {0}")]
    Parse(String),
    #[error("policy is invalid: {0}")]
    Invalid(ValidationReport),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

/// Non-negative decimal kept as its exact source text.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal(String);

impl Decimal {
    /// Accepts `0`, `12`, `0.5`, `1.10`; rejects signs, exponents, leading zeros.
    pub fn parse(s: &str) -> Result<Self, String> {
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (s, None),
        };
        let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
        if !digits(int) || (int.len() > 1 && int.starts_with('0')) {
            return Err(format!("`{s}` is not a plain decimal"));
        }
        if let Some(f) = frac {
            if !digits(f) {
                return Err(format!("`{s}` is not a plain decimal"));
            }
        }
        Ok(Decimal(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.parse().expect("validated decimal")
    }

    pub fn is_zero(&self) -> bool {
        self.0.bytes().all(|b| b == b'0' || b == b'.')
    }
}

impl fmt::Debug for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Decimal({})", self.0)
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Decimal::parse(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Declared ρ-zCDP cap; `unbounded` marks an explicitly non-private baseline.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RhoBudget {
    Finite(Decimal),
    Unbounded,
}

impl fmt::Display for RhoBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoBudget::Finite(d) => f.write_str(d.as_str()),
            RhoBudget::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl Serialize for RhoBudget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RhoBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "unbounded" {
            return Ok(RhoBudget::Unbounded);
        }
        Decimal::parse(&s)
            .map(RhoBudget::Finite)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    ClientUpdate,
    Aggregate,
    DpNoise,
    Release,
}

impl TransformKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::ClientUpdate => "client_update",
            TransformKind::Aggregate => "aggregate",
            TransformKind::DpNoise => "dp_noise",
            TransformKind::Release => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    pub clip_norm: Decimal,
    pub max_decrypt_count: u64,
    pub min_inputs: u64,
    pub noise_multiplier: Decimal,
    pub rho_budget: RhoBudget,
    pub ttl_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mechanism: NoiseMechanism,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformNode {
    pub allowed_digests: ReferenceValues,
    pub constraints: ConstraintSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub node_id: String,
    pub transform_kind: TransformKind,
}

impl TransformNode {
    pub fn noise_config(&self) -> Option<(NoiseMechanism, NoiseConfig)> {
        self.noise.map(|n| {
            (
                n.mechanism,
                NoiseConfig::new(
                    self.constraints.clip_norm.to_f64(),
                    self.constraints.noise_multiplier.to_f64(),
                    n.rounds,
                ),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessPolicy {
    pub edges: BTreeSet<(String, String)>,
    pub entry_nodes: BTreeSet<String>,
    pub nodes: BTreeMap<String, TransformNode>,
    pub policy_id: String,
    pub release_nodes: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCode {
    TooManyNodes,
    NodeIdMismatch,
    DuplicateNodeId,
    EmptyEntrySet,
    EmptyReleaseSet,
    UnknownNode,
    CycleDetected,
    ReleaseKindMismatch,
    ReleaseUnreachable,
    ReleaseBypassesNoise,
    EmptyAllowlist,
    NonpositiveThreshold,
    NonpositiveClip,
    NonpositiveDecryptCount,
    NonpositiveTtl,
    MissingNoiseConfig,
    UnexpectedNoiseConfig,
    NonpositiveRounds,
    TreeNotPowerOfTwo,
    ClipMismatch,
    InconsistentRhoBudget,
    DpGateUnmet,
    RhoBudgetExceeded,
}

impl DiagnosticCode {
    pub fn as_str(&self) -> &'static str {
        use DiagnosticCode::*;
        match self {
            TooManyNodes => "too_many_nodes",
            NodeIdMismatch => "node_id_mismatch",
            DuplicateNodeId => "duplicate_node_id",
            EmptyEntrySet => "empty_entry_set",
            EmptyReleaseSet => "empty_release_set",
            UnknownNode => "unknown_node",
            CycleDetected => "cycle_detected",
            ReleaseKindMismatch => "release_kind_mismatch",
            ReleaseUnreachable => "release_unreachable",
            ReleaseBypassesNoise => "release_bypasses_noise",
            EmptyAllowlist => "empty_allowlist",
            NonpositiveThreshold => "nonpositive_threshold",
            NonpositiveClip => "nonpositive_clip",
            NonpositiveDecryptCount => "nonpositive_decrypt_count",
            NonpositiveTtl => "nonpositive_ttl",
            MissingNoiseConfig => "missing_noise_config",
            UnexpectedNoiseConfig => "unexpected_noise_config",
            NonpositiveRounds => "nonpositive_rounds",
            TreeNotPowerOfTwo => "tree_not_power_of_two",
            ClipMismatch => "clip_mismatch",
            InconsistentRhoBudget => "inconsistent_rho_budget",
            DpGateUnmet => "dp_gate_unmet",
            RhoBudgetExceeded => "rho_budget_exceeded",
        }
    }
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn has(&self, code: DiagnosticCode) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }

    fn push(&mut self, code: DiagnosticCode, message: impl Into<String>) {
        self.diagnostics.push(Diagnostic {
            code,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", d.code, d.message)?;
        }
        Ok(())
    }
}

/// Kahn's algorithm over known nodes with lexicographic tie-breaking.
/// Returns the order and whether every node was placed (i.e. no cycle).
fn topo_order(policy: &AccessPolicy) -> (Vec<&str>, bool) {
    let mut indegree: BTreeMap<&str, usize> =
        policy.nodes.keys().map(|k| (k.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (s, d) in &policy.edges {
        if policy.nodes.contains_key(s) && policy.nodes.contains_key(d) {
            *indegree.get_mut(d.as_str()).unwrap() += 1;
            succ.entry(s.as_str()).or_default().push(d.as_str());
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(k, _)| *k)
        .collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(n) = ready.pop_first() {
        order.push(n);
        for &m in succ.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            let e = indegree.get_mut(m).unwrap();
            *e -= 1;
            if *e == 0 {
                ready.insert(m);
            }
        }
    }
    let complete = order.len() == indegree.len();
    (order, complete)
}

/// Nodes reachable from the entry set, optionally refusing to pass through
/// nodes of one kind.
fn reachable(policy: &AccessPolicy, blocked: Option<TransformKind>) -> BTreeSet<&str> {
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (s, d) in &policy.edges {
        succ.entry(s.as_str()).or_default().push(d.as_str());
    }
    let passable = |n: &str| {
        blocked.is_none_or(|k| policy.nodes.get(n).is_none_or(|node| node.transform_kind != k))
    };
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&str> = policy
        .entry_nodes
        .iter()
        .map(String::as_str)
        .filter(|n| policy.nodes.contains_key(*n) && passable(n))
        .collect();
    seen.extend(queue.iter().copied());
    while let Some(n) = queue.pop_front() {
        for &m in succ.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            if policy.nodes.contains_key(m) && passable(m) && seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

impl AccessPolicy {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PolicyError> {
        serde_json::from_slice(bytes).map_err(|e| PolicyError::Parse(e.to_string()))
    }

    pub fn node(&self, id: &str) -> Option<&TransformNode> {
        self.nodes.get(id)
    }

    pub fn nodes_of_kind(&self, kind: TransformKind) -> impl Iterator<Item = &TransformNode> {
        self.nodes.values().filter(move |n| n.transform_kind == kind)
    }

    /// Composed ρ of every dp_noise stage. Errors surface as validation
    /// diagnostics, so this assumes a structurally valid noise spec.
    pub fn accounted_budget(&self) -> Result<PrivacyBudget, accounting::AccountingError> {
        let mut parts = Vec::new();
        for node in self.nodes_of_kind(TransformKind::DpNoise) {
            if let Some((mech, cfg)) = node.noise_config() {
                parts.push(accounting::mechanism_zcdp(mech, &cfg)?);
            }
        }
        if parts.is_empty() {
            return Ok(PrivacyBudget::Unbounded);
        }
        Ok(accounting::compose(parts))
    }

    /// The policy-wide declared budget (all nodes must agree).
    pub fn declared_budget(&self) -> Option<&RhoBudget> {
        self.nodes.values().next().map(|n| &n.constraints.rho_budget)
    }

    /// Smallest TTL over all nodes; applies to every blob under the policy.
    pub fn ttl_ticks(&self) -> u64 {
        self.nodes
            .values()
            .map(|n| n.constraints.ttl_ticks)
            .min()
            .unwrap_or(0)
    }

    pub fn topological_order(&self) -> Vec<&str> {
        topo_order(self).0
    }
}

pub fn validate(policy: &AccessPolicy) -> ValidationReport {
    use DiagnosticCode::*;
    let mut r = ValidationReport::default();

    if policy.nodes.len() > MAX_NODES {
        r.push(
            TooManyNodes,
            format!("{} nodes exceeds the cap of {MAX_NODES}", policy.nodes.len()),
        );
    }
    let mut seen_ids = BTreeSet::new();
    for (key, node) in &policy.nodes {
        if key != &node.node_id {
            r.push(
                NodeIdMismatch,
                format!("map key `{key}` holds node `{}`", node.node_id),
            );
        }
        if !seen_ids.insert(node.node_id.as_str()) {
            r.push(DuplicateNodeId, format!("node id `{}` repeats", node.node_id));
        }
    }
    if policy.entry_nodes.is_empty() {
        r.push(EmptyEntrySet, "no entry nodes");
    }
    if policy.release_nodes.is_empty() {
        r.push(EmptyReleaseSet, "no release nodes");
    }
    for (s, d) in &policy.edges {
        for end in [s, d] {
            if !policy.nodes.contains_key(end) {
                r.push(UnknownNode, format!("edge ({s}, {d}) names unknown node `{end}`"));
            }
        }
    }
    for id in &policy.entry_nodes {
        if !policy.nodes.contains_key(id) {
            r.push(UnknownNode, format!("entry node `{id}` is not defined"));
        }
    }
    for id in &policy.release_nodes {
        if !policy.nodes.contains_key(id) {
            r.push(UnknownNode, format!("release node `{id}` is not defined"));
        }
    }
    let (_, acyclic) = topo_order(policy);
    if !acyclic {
        r.push(CycleDetected, "the transformation graph contains a cycle");
    }

    for id in &policy.release_nodes {
        if let Some(n) = policy.nodes.get(id) {
            if n.transform_kind != TransformKind::Release {
                r.push(
                    ReleaseKindMismatch,
                    format!("release node `{id}` has kind {}", n.transform_kind.as_str()),
                );
            }
        }
    }
    let reach = reachable(policy, None);
    for id in &policy.release_nodes {
        if policy.nodes.contains_key(id) && !reach.contains(id.as_str()) {
            r.push(
                ReleaseUnreachable,
                format!("release node `{id}` is not reachable from any entry"),
            );
        }
    }

    for node in policy.nodes.values() {
        let id = &node.node_id;
        let c = &node.constraints;
        if node.allowed_digests.allowed_digests.is_empty() {
            r.push(EmptyAllowlist, format!("`{id}` allows no workload digest"));
        }
        if c.min_inputs == 0 {
            r.push(NonpositiveThreshold, format!("`{id}` has min_inputs = 0"));
        }
        if c.clip_norm.is_zero() {
            r.push(NonpositiveClip, format!("`{id}` has clip_norm = 0"));
        }
        if c.max_decrypt_count == 0 {
            r.push(
                NonpositiveDecryptCount,
                format!("`{id}` has max_decrypt_count = 0"),
            );
        }
        if c.ttl_ticks == 0 {
            r.push(NonpositiveTtl, format!("`{id}` has ttl_ticks = 0"));
        }
        match (node.transform_kind, node.noise) {
            (TransformKind::DpNoise, None) => {
                r.push(MissingNoiseConfig, format!("dp_noise node `{id}` has no noise spec"))
            }
            (TransformKind::DpNoise, Some(n)) => {
                if n.rounds == 0 {
                    r.push(NonpositiveRounds, format!("`{id}` has rounds = 0"));
                } else if n.mechanism == NoiseMechanism::TreeAggregation
                    && !n.rounds.is_power_of_two()
                {
                    r.push(
                        TreeNotPowerOfTwo,
                        format!("`{id}` tree size {} is not a power of two", n.rounds),
                    );
                }
            }
            (kind, Some(_)) => r.push(
                UnexpectedNoiseConfig,
                format!("{} node `{id}` carries a noise spec", kind.as_str()),
            ),
            (_, None) => {}
        }
    }

    let first_budget = policy.declared_budget();
    if policy
        .nodes
        .values()
        .any(|n| Some(&n.constraints.rho_budget) != first_budget)
    {
        r.push(
            InconsistentRhoBudget,
            "nodes declare different rho budgets for one policy",
        );
    }

    let clip_nodes: Vec<&TransformNode> = policy
        .nodes
        .values()
        .filter(|n| matches!(n.transform_kind, TransformKind::ClientUpdate | TransformKind::DpNoise))
        .collect();
    if let Some(first) = clip_nodes.first() {
        let c0 = first.constraints.clip_norm.to_f64();
        if clip_nodes
            .iter()
            .any(|n| n.constraints.clip_norm.to_f64() != c0)
        {
            r.push(
                ClipMismatch,
                "client_update and dp_noise nodes must share one clip_norm",
            );
        }
    }

    if let Some(RhoBudget::Finite(declared)) = policy.declared_budget() {
        if !policy.release_nodes.is_empty() {
            let clean = reachable(policy, Some(TransformKind::DpNoise));
            for id in &policy.release_nodes {
                if clean.contains(id.as_str()) {
                    r.push(
                        ReleaseBypassesNoise,
                        format!("release node `{id}` is reachable without a dp_noise stage"),
                    );
                }
            }
        }
        for node in policy.nodes_of_kind(TransformKind::DpNoise) {
            if node.constraints.noise_multiplier.is_zero() {
                r.push(
                    DpGateUnmet,
                    format!(
                        "`{}` adds no noise but the policy declares a finite rho budget",
                        node.node_id
                    ),
                );
            }
        }
        if !r.has(DpGateUnmet) && !r.has(MissingNoiseConfig) && !r.has(TreeNotPowerOfTwo) {
            match policy.accounted_budget() {
                Ok(PrivacyBudget::Rho(rho)) => {
                    let cap = declared.to_f64();
                    if rho > cap * (1.0 + RHO_SLACK) {
                        r.push(
                            RhoBudgetExceeded,
                            format!("noise configuration spends rho={rho} > declared {declared}"),
                        );
                    }
                }
                Ok(PrivacyBudget::Unbounded) => r.push(
                    DpGateUnmet,
                    "finite rho budget declared but no noise stage accounts for it",
                ),
                Err(e) => r.push(RhoBudgetExceeded, e.to_string()),
            }
        }
    }
    r
}

pub fn canonical_serialize(policy: &AccessPolicy) -> Result<Vec<u8>, PolicyError> {
    let report = validate(policy);
    if !report.is_ok() {
        return Err(PolicyError::Invalid(report));
    }
    let value = serde_json::to_value(policy).expect("policy serializes");
    Ok(serde_json::to_vec(&value).expect("value serializes"))
}

pub fn hash(policy: &AccessPolicy) -> Result<PolicyHash, PolicyError> {
    canonical_serialize(policy).map(|b| Digest32::of(&[&b]))
}

pub fn check_edge(policy: &AccessPolicy, src: &str, dst: &str) -> Result<bool, PolicyError> {
    for id in [src, dst] {
        if !policy.nodes.contains_key(id) {
            return Err(PolicyError::UnknownNode(id.to_owned()));
        }
    }
    Ok(policy.edges.contains(&(src.to_owned(), dst.to_owned())))
}

/// Six significant digits, fixed notation.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn describe_budget(b: PrivacyBudget) -> String {
    match b {
        PrivacyBudget::Unbounded => "rho=unbounded (no formal guarantee)".into(),
        PrivacyBudget::Rho(r) => match b.epsilon(REPORTING_DELTA) {
            Ok(Some(e)) => format!(
                "rho={} (epsilon={} at delta=1e-10)",
                format_sig6(r),
                format_sig6(e)
            ),
            _ => format!("rho={}", format_sig6(r)),
        },
    }
}

/// Plain-text description of what the policy permits, one line per node in
/// topological order followed by a release statement.
pub fn summarize(policy: &AccessPolicy) -> Result<String, PolicyError> {
    let report = validate(policy);
    if !report.is_ok() {
        return Err(PolicyError::Invalid(report));
    }
    let mut out = String::new();
    for (i, id) in policy.topological_order().into_iter().enumerate() {
        let node = &policy.nodes[id];
        let c = &node.constraints;
        let n = node.allowed_digests.allowed_digests.len();
        let noise = match node.noise_config() {
            Some((mech, cfg)) => {
                let budget = accounting::mechanism_zcdp(mech, &cfg).unwrap_or(PrivacyBudget::Unbounded);
                let mech = match mech {
                    NoiseMechanism::TreeAggregation => "tree-aggregation",
                    NoiseMechanism::GaussianPerRound => "per-round Gaussian",
                };
                format!("adds {mech} noise over {} rounds: {}", cfg.rounds, describe_budget(budget))
            }
            None => "adds no noise".into(),
        };
        writeln!(
            out,
            "{}. {} [{}]: {} approved binar{}, min_inputs={}, C={}, sigma={}, ttl={} ticks, max_decrypts={}, {}",
            i + 1,
            id,
            node.transform_kind.as_str(),
            n,
            if n == 1 { "y" } else { "ies" },
            c.min_inputs,
            c.clip_norm,
            c.noise_multiplier,
            c.ttl_ticks,
            c.max_decrypt_count,
            noise
        )
        .unwrap();
    }
    let spent = policy.accounted_budget().unwrap_or(PrivacyBudget::Unbounded);
    match policy.declared_budget() {
        Some(RhoBudget::Finite(d)) => {
            let declared = describe_budget(PrivacyBudget::Rho(d.to_f64()));
            write!(
                out,
                "policy {} releases only differentially private model parameters; spends {}; declared budget {}",
                policy.policy_id,
                describe_budget(spent),
                declared
            )
            .unwrap();
        }
        _ => write!(
            out,
            "policy {} releases model parameters WITHOUT a differential privacy guarantee (non-private baseline)",
            policy.policy_id
        )
        .unwrap(),
    }
    out.push('\n');
    Ok(out)
}

/// Registered identity strings of the standard workloads.
pub mod workloads {
    pub const LEDGER: &str = "fedconf/ledger@1";
    pub const CLIENT_UPDATE: &str = "fedconf/client_update@1";
    pub const AGGREGATE: &str = "fedconf/aggregate@1";
    pub const DP_NOISE: &str = "fedconf/dp_noise@1";
    pub const RELEASE: &str = "fedconf/release@1";
}

/// Parameters for the standard client_update → aggregate → dp_noise → release chain.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub policy_id: String,
    pub clip_norm: Decimal,
    pub noise_multiplier: Decimal,
    pub mechanism: NoiseMechanism,
    pub rounds: u64,
    pub min_inputs: u64,
    pub ttl_ticks: u64,
    pub rho_budget: RhoBudget,
}

impl PipelineSpec {
    pub fn dp_ftrl(policy_id: &str, clip: &str, sigma: &str, rounds: u64, rho_budget: &str) -> Self {
        Self {
            policy_id: policy_id.into(),
            clip_norm: Decimal::parse(clip).expect("clip decimal"),
            noise_multiplier: Decimal::parse(sigma).expect("sigma decimal"),
            mechanism: NoiseMechanism::TreeAggregation,
            rounds,
            min_inputs: 2,
            ttl_ticks: 100_000,
            rho_budget: if rho_budget == "unbounded" {
                RhoBudget::Unbounded
            } else {
                RhoBudget::Finite(Decimal::parse(rho_budget).expect("rho decimal"))
            },
        }
    }
}

pub fn federated_pipeline(spec: &PipelineSpec) -> AccessPolicy {
    let stages = [
        ("client_update", TransformKind::ClientUpdate, workloads::CLIENT_UPDATE),
        ("aggregate", TransformKind::Aggregate, workloads::AGGREGATE),
        ("dp_noise", TransformKind::DpNoise, workloads::DP_NOISE),
        ("release", TransformKind::Release, workloads::RELEASE),
    ];
    let mut nodes = BTreeMap::new();
    for (id, kind, identity) in stages {
        let (min_inputs, max_decrypt) = match kind {
            // Uploaded data is re-read once per round.
            TransformKind::ClientUpdate => (1, spec.rounds.max(1)),
            TransformKind::Aggregate => (spec.min_inputs, 1),
            _ => (1, 1),
        };
        nodes.insert(
            id.to_owned(),
            TransformNode {
                allowed_digests: ReferenceValues::new([binary_digest(identity)]),
                constraints: ConstraintSet {
                    clip_norm: spec.clip_norm.clone(),
                    max_decrypt_count: max_decrypt,
                    min_inputs,
                    noise_multiplier: spec.noise_multiplier.clone(),
                    rho_budget: spec.rho_budget.clone(),
                    ttl_ticks: spec.ttl_ticks,
                },
                noise: (kind == TransformKind::DpNoise).then_some(NoiseSpec {
                    mechanism: spec.mechanism,
                    rounds: spec.rounds,
                }),
                node_id: id.to_owned(),
                transform_kind: kind,
            },
        );
    }
    let edge = |a: &str, b: &str| (a.to_owned(), b.to_owned());
    AccessPolicy {
        edges: [
            edge("client_update", "aggregate"),
            edge("aggregate", "dp_noise"),
            edge("dp_noise", "release"),
        ]
        .into(),
        entry_nodes: ["client_update".to_owned()].into(),
        nodes,
        policy_id: spec.policy_id.clone(),
        release_nodes: ["release".to_owned()].into(),
    }
}
