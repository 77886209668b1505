//! Federated averaging at desk scale: synthetic data, the training plan a
//! policy permits, server optimizers and per-round metrics.
//!
//! [`Trainer`] runs rounds in memory and is the reference for the encrypted
//! pipeline in [`crate::orchestrator`], which shares the plan, noise stage,
//! release gates and server step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{self, NoiseConfig, NoiseMechanism, PrivacyBudget, REPORTING_DELTA};
use crate::model::{Example, ModelError, ModelKind, MAX_PARAMS};
use crate::policy::{self, AccessPolicy, RhoBudget, TransformKind, ValidationReport};
use crate::transforms::{
    self, l2_norm, AggregateState, ClientConfig, ClientUpdate, ModelParams, NoiseStage,
    ReleaseGates, ReleaseRefusal, TransformError,
};
use crate::types::{BlobId, Digest32};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("policy is invalid: {0}")]
    InvalidPolicy(ValidationReport),
    #[error("config does not match policy: {0}")]
    Mismatch(String),
    #[error("bad synthetic data spec: {0}")]
    DataSpec(String),
    #[error("bad simulation config: {0}")]
    Simulation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

impl TrainingError {
    /// The diagnostic code an operator sees first.
    pub fn code(&self) -> &'static str {
        match self {
            TrainingError::InvalidPolicy(r) => r
                .diagnostics
                .first()
                .map_or("invalid_policy", |d| d.code.as_str()),
            TrainingError::Mismatch(_) => "config_mismatch",
            TrainingError::DataSpec(_) => "bad_data_spec",
            TrainingError::Simulation(_) => "bad_sim_config",
            TrainingError::Model(_) => "model_error",
            TrainingError::Transform(_) => "transform_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub examples_per_client: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Scale of each client's cluster offset; 0 makes all clients identical
    /// in distribution.
    pub heterogeneity: f64,
    /// Label flip probability, or response noise stddev for regression.
    pub label_noise: f64,
    /// Classification examples closer than this to the true separator are
    /// redrawn.
    pub margin: f64,
    pub eval_examples: usize,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub clients: Vec<Vec<Example>>,
    pub eval: Vec<Example>,
    pub true_weights: Vec<f64>,
}

impl SyntheticDataset {
    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn pooled(&self) -> Vec<Example> {
        self.clients.iter().flatten().cloned().collect()
    }
}

fn stream(seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let key = Digest32::of(&[
        b"fedconf/synthetic/v1",
        &seed.to_be_bytes(),
        label.as_bytes(),
        &index.to_be_bytes(),
    ]);
    ChaCha20Rng::from_seed(key.0)
}

fn gaussian_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn draw_example(rng: &mut ChaCha20Rng, w: &[f64], center: &[f64], spec: &SyntheticSpec) -> Example {
    const MAX_REDRAWS: usize = 10_000;
    for _ in 0..MAX_REDRAWS {
        let features: Vec<f64> = gaussian_vec(rng, spec.dim)
            .iter()
            .zip(center)
            .map(|(z, c)| z + spec.heterogeneity * c)
            .collect();
        let score: f64 = features.iter().zip(w).map(|(x, wi)| x * wi).sum();
        match spec.task {
            Task::Classification => {
                if score.abs() < spec.margin {
                    continue;
                }
                let u: f64 = rand::Rng::random(rng);
                let positive = (score > 0.0) != (u < spec.label_noise);
                return Example {
                    features,
                    label: if positive { 1.0 } else { 0.0 },
                };
            }
            Task::Regression => {
                let eps: f64 = StandardNormal.sample(rng);
                return Example {
                    features,
                    label: score + spec.label_noise * eps,
                };
            }
        }
    }
    unreachable!("margin rejection exhausted; spec validation bounds the margin")
}

/// Deterministic in `(seed, spec)`. Each client draws from its own stream,
/// so client `i`'s data does not depend on how many clients follow it.
pub fn generate_synthetic_data(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticDataset, TrainingError> {
    if spec.dim == 0 || spec.clusters == 0 {
        return Err(TrainingError::DataSpec("dim and clusters must be positive".into()));
    }
    if !(0.0..=0.5).contains(&spec.label_noise) && spec.task == Task::Classification {
        return Err(TrainingError::DataSpec("label flip probability must lie in [0, 0.5]".into()));
    }
    if !(spec.margin >= 0.0 && spec.margin <= 2.0) || !spec.heterogeneity.is_finite() {
        return Err(TrainingError::DataSpec("margin must lie in [0, 2]; heterogeneity finite".into()));
    }
    let mut truth = stream(seed, "truth", 0);
    let mut w = gaussian_vec(&mut truth, spec.dim);
    let norm = l2_norm(&w);
    w.iter_mut().for_each(|x| *x /= norm);
    let mut centers_rng = stream(seed, "centers", 0);
    let centers: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| gaussian_vec(&mut centers_rng, spec.dim))
        .collect();

    let clients = (0..spec.clients)
        .map(|i| {
            let mut rng = stream(seed, "client", i as u64);
            let center = &centers[i % spec.clusters];
            (0..spec.examples_per_client)
                .map(|_| draw_example(&mut rng, &w, center, spec))
                .collect()
        })
        .collect();
    let mut eval_rng = stream(seed, "eval", 0);
    let eval = (0..spec.eval_examples)
        .map(|j| draw_example(&mut eval_rng, &w, &centers[j % spec.clusters], spec))
        .collect();
    Ok(SyntheticDataset {
        clients,
        eval,
        true_weights: w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerOptimizer {
    /// `params += lr · mean update`; no noise.
    Sgd { lr: f64 },
    /// `params += lr · noised sum / m`, fresh noise each round.
    DpSgd { lr: f64, clip_norm: f64, noise_multiplier: f64 },
    /// `params = params₀ + lr · noised prefix sum / m`.
    DpFtrl { lr: f64, clip_norm: f64, noise_multiplier: f64 },
}

impl ServerOptimizer {
    pub fn lr(&self) -> f64 {
        match *self {
            ServerOptimizer::Sgd { lr }
            | ServerOptimizer::DpSgd { lr, .. }
            | ServerOptimizer::DpFtrl { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub model: ModelKind,
    pub rounds: u64,
    pub clients_per_round: usize,
    pub client_lr: f64,
    pub local_steps: u32,
    pub server_optimizer: ServerOptimizer,
    pub seed: u64,
    pub data: SyntheticSpec,
}

impl TrainingConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Key-sorted compact JSON.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }
}

/// Node ids of the four pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageIds {
    pub client_update: String,
    pub aggregate: String,
    pub dp_noise: String,
    pub release: String,
}

/// Everything a run needs from the (config, policy) pair, checked for
/// consistency before any round starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub stages: StageIds,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub mechanism: NoiseMechanism,
    pub tree_rounds: u64,
    pub rounds: u64,
    pub min_inputs: usize,
    pub clients_per_round: usize,
    pub finite_budget: bool,
    pub denominator: Option<f64>,
}

impl Plan {
    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig::new(self.clip_norm, self.noise_multiplier, self.tree_rounds)
    }

    pub fn gates(&self) -> ReleaseGates {
        ReleaseGates {
            min_inputs: self.min_inputs,
            noise_multiplier: self.noise_multiplier,
            finite_budget: self.finite_budget,
            denominator: self.denominator,
        }
    }

    /// ρ spent once `released` rounds have been released.
    pub fn rho_after(&self, released: u64) -> PrivacyBudget {
        let cfg = self.noise_config();
        match self.mechanism {
            NoiseMechanism::TreeAggregation => accounting::tree_zcdp_after(&cfg, released),
            NoiseMechanism::GaussianPerRound => accounting::compose(std::iter::repeat_n(
                accounting::gaussian_zcdp(cfg.clip_norm, cfg.noise_stddev()),
                released as usize,
            )),
        }
    }

    pub fn noise_stage(&self, dim: usize, run_seed: u64) -> Result<NoiseStage, TransformError> {
        let seed = Digest32::of(&[b"fedconf/dp-noise/v1", &run_seed.to_be_bytes()]);
        NoiseStage::new(
            self.mechanism,
            self.tree_rounds,
            dim,
            self.noise_multiplier * self.clip_norm,
            seed.0,
        )
    }

    pub fn client_config(&self, config: &TrainingConfig) -> ClientConfig {
        ClientConfig {
            model: config.model,
            learning_rate: config.client_lr,
            local_steps: config.local_steps,
            clip_norm: self.clip_norm,
        }
    }
}

fn single_of_kind(policy: &AccessPolicy, kind: TransformKind) -> Result<String, TrainingError> {
    let ids: Vec<&str> = policy.nodes_of_kind(kind).map(|n| n.node_id.as_str()).collect();
    match ids.as_slice() {
        [one] => Ok((*one).to_owned()),
        _ => Err(TrainingError::Mismatch(format!(
            "policy needs exactly one {} node, found {}",
            kind.as_str(),
            ids.len()
        ))),
    }
}

fn mismatch<T>(msg: impl Into<String>) -> Result<T, TrainingError> {
    Err(TrainingError::Mismatch(msg.into()))
}

/// Checks that `config` is something `policy` permits and extracts the plan.
pub fn plan(config: &TrainingConfig, policy: &AccessPolicy) -> Result<Plan, TrainingError> {
    let report = policy::validate(policy);
    if !report.is_ok() {
        return Err(TrainingError::InvalidPolicy(report));
    }
    let stages = StageIds {
        client_update: single_of_kind(policy, TransformKind::ClientUpdate)?,
        aggregate: single_of_kind(policy, TransformKind::Aggregate)?,
        dp_noise: single_of_kind(policy, TransformKind::DpNoise)?,
        release: single_of_kind(policy, TransformKind::Release)?,
    };
    let chain = [
        (&stages.client_update, &stages.aggregate),
        (&stages.aggregate, &stages.dp_noise),
        (&stages.dp_noise, &stages.release),
    ];
    for (a, b) in chain {
        if !policy.edges.contains(&(a.clone(), b.clone())) {
            return mismatch(format!("policy lacks edge {a} -> {b}"));
        }
    }
    if !policy.entry_nodes.contains(&stages.client_update) {
        return mismatch(format!("`{}` is not an entry node", stages.client_update));
    }

    let cu = &policy.nodes[&stages.client_update];
    let agg = &policy.nodes[&stages.aggregate];
    let noise_node = &policy.nodes[&stages.dp_noise];
    let Some((mechanism, noise_cfg)) = noise_node.noise_config() else {
        return mismatch("dp_noise node has no noise spec");
    };

    let params = config.model.param_count(config.data.dim);
    if params > MAX_PARAMS {
        return Err(ModelError::TooLarge(params).into());
    }
    if !(config.client_lr.is_finite() && config.client_lr > 0.0) || config.local_steps == 0 {
        return mismatch("client_lr must be positive and local_steps at least 1");
    }
    let clip = cu.constraints.clip_norm.to_f64();
    let sigma = noise_cfg.noise_multiplier;
    match (config.server_optimizer, mechanism) {
        (ServerOptimizer::Sgd { .. }, NoiseMechanism::GaussianPerRound) if sigma == 0.0 => {}
        (ServerOptimizer::Sgd { .. }, _) => {
            return mismatch("sgd needs a gaussian_per_round noise stage with noise_multiplier 0")
        }
        (
            ServerOptimizer::DpSgd { clip_norm, noise_multiplier, .. },
            NoiseMechanism::GaussianPerRound,
        )
        | (
            ServerOptimizer::DpFtrl { clip_norm, noise_multiplier, .. },
            NoiseMechanism::TreeAggregation,
        ) => {
            if clip_norm != clip || noise_multiplier != sigma {
                return mismatch(format!(
                    "optimizer uses clip_norm={clip_norm}, noise_multiplier={noise_multiplier}; policy fixes {clip}, {sigma}"
                ));
            }
        }
        (opt, mech) => return mismatch(format!("{opt:?} cannot run on a {mech:?} noise stage")),
    }
    if !config.server_optimizer.lr().is_finite() {
        return mismatch("server lr must be finite");
    }
    if config.rounds > noise_cfg.rounds {
        return mismatch(format!(
            "config asks for {} rounds; policy accounts for {}",
            config.rounds, noise_cfg.rounds
        ));
    }
    if cu.constraints.max_decrypt_count < config.rounds {
        return mismatch(format!(
            "uploads may be read {} times but training needs {}",
            cu.constraints.max_decrypt_count, config.rounds
        ));
    }
    let min_inputs = agg.constraints.min_inputs as usize;
    if config.clients_per_round < min_inputs {
        return mismatch(format!(
            "clients_per_round {} is below the aggregation threshold {min_inputs}",
            config.clients_per_round
        ));
    }
    let finite_budget = matches!(policy.declared_budget(), Some(RhoBudget::Finite(_)));
    Ok(Plan {
        stages,
        clip_norm: clip,
        noise_multiplier: sigma,
        mechanism,
        tree_rounds: noise_cfg.rounds,
        rounds: config.rounds,
        min_inputs,
        clients_per_round: config.clients_per_round,
        finite_budget,
        denominator: match config.server_optimizer {
            ServerOptimizer::Sgd { .. } => None,
            _ => Some(config.clients_per_round as f64),
        },
    })
}

/// The untrusted server's model state.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub initial: Vec<f64>,
    pub params: Vec<f64>,
    optimizer: ServerOptimizer,
}

impl ServerState {
    pub fn new(initial: Vec<f64>, optimizer: ServerOptimizer) -> Self {
        Self {
            params: initial.clone(),
            initial,
            optimizer,
        }
    }

    /// Applies one released vector.
    pub fn apply(&mut self, released: &[f64]) {
        let lr = self.optimizer.lr();
        match self.optimizer {
            ServerOptimizer::DpFtrl { .. } => {
                for ((p, p0), r) in self.params.iter_mut().zip(&self.initial).zip(released) {
                    *p = p0 + lr * r;
                }
            }
            _ => {
                for (p, r) in self.params.iter_mut().zip(released) {
                    *p += lr * r;
                }
            }
        }
    }
}

/// Identifier of a device's upload.
pub fn device_blob_id(run_seed: u64, device: usize) -> BlobId {
    BlobId::derive(&[
        b"fedconf/device-blob/v1",
        &run_seed.to_be_bytes(),
        &(device as u64).to_be_bytes(),
    ])
}

/// Seeded choice of up to `m` candidates, returned in ascending order. Depends
/// only on the candidate set, not its order.
pub fn select_clients(run_seed: u64, round: u64, candidates: &[BlobId], m: usize) -> Vec<BlobId> {
    let mut pool = candidates.to_vec();
    pool.sort();
    pool.dedup();
    let key = Digest32::of(&[
        b"fedconf/select/v1",
        &run_seed.to_be_bytes(),
        &round.to_be_bytes(),
    ]);
    pool.shuffle(&mut ChaCha20Rng::from_seed(key.0));
    pool.truncate(m);
    pool.sort();
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    ThresholdUnmet,
    DpGateUnmet,
    NonFinite,
    TransformFailed,
    GrantDenied,
}

impl AbortReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            AbortReason::ThresholdUnmet => "threshold_unmet",
            AbortReason::DpGateUnmet => "dp_gate_unmet",
            AbortReason::NonFinite => "non_finite",
            AbortReason::TransformFailed => "transform_failed",
            AbortReason::GrantDenied => "grant_denied",
        }
    }
}

impl From<ReleaseRefusal> for AbortReason {
    fn from(r: ReleaseRefusal) -> Self {
        match r {
            ReleaseRefusal::ThresholdUnmet => AbortReason::ThresholdUnmet,
            ReleaseRefusal::DpGateUnmet => AbortReason::DpGateUnmet,
            ReleaseRefusal::NonFinite => AbortReason::NonFinite,
            ReleaseRefusal::DimMismatch => AbortReason::TransformFailed,
        }
    }
}

impl From<&TransformError> for AbortReason {
    fn from(e: &TransformError) -> Self {
        match e {
            TransformError::ThresholdUnmet { .. } => AbortReason::ThresholdUnmet,
            TransformError::NonFinite(_) => AbortReason::NonFinite,
            _ => AbortReason::TransformFailed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub tick: u64,
    pub participants: usize,
    pub max_client_participations: u32,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub update_norm: f64,
    pub rho_spent: PrivacyBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbortedRound {
    pub round: u64,
    pub tick: u64,
    pub reason: AbortReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
    pub aborted: Vec<AbortedRound>,
    pub rho_spent: PrivacyBudget,
}

pub const METRICS_HEADER: [&str; 10] = [
    "round",
    "tick",
    "participants",
    "max_client_participations",
    "train_loss",
    "eval_loss",
    "eval_accuracy",
    "update_norm",
    "rho_spent",
    "epsilon",
];

/// Ten significant digits in scientific notation.
pub fn fmt_sig10(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.9e}")
    } else {
        format!("{x}")
    }
}

impl Metrics {
    pub fn empty() -> Self {
        Self {
            rows: Vec::new(),
            aborted: Vec::new(),
            rho_spent: PrivacyBudget::ZERO,
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.eval_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER).expect("in-memory write");
        for r in &self.rows {
            let (rho, eps) = match r.rho_spent {
                PrivacyBudget::Rho(rho) => (
                    fmt_sig10(rho),
                    accounting::zcdp_to_epsilon(rho, REPORTING_DELTA)
                        .map(fmt_sig10)
                        .unwrap_or_default(),
                ),
                PrivacyBudget::Unbounded => ("inf".into(), "inf".into()),
            };
            w.write_record([
                r.round.to_string(),
                r.tick.to_string(),
                r.participants.to_string(),
                r.max_client_participations.to_string(),
                fmt_sig10(r.train_loss),
                fmt_sig10(r.eval_loss),
                r.eval_accuracy.map(fmt_sig10).unwrap_or_default(),
                fmt_sig10(r.update_norm),
                rho,
                eps,
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii")
    }
}

/// Evaluation on the pooled training data and the held-out set.
pub fn evaluate(
    model: ModelKind,
    params: &[f64],
    train: &[Example],
    eval: &[Example],
) -> Result<(f64, f64, Option<f64>), ModelError> {
    let (train_loss, _) = model.evaluate(params, train)?;
    let (eval_loss, acc) = model.evaluate(params, eval)?;
    Ok((train_loss, eval_loss, acc))
}

/// In-memory FedAvg: same algorithm as the encrypted pipeline, without
/// devices, storage or the ledger.
pub struct Trainer<'a> {
    config: TrainingConfig,
    plan: Plan,
    data: &'a SyntheticDataset,
    pooled: Vec<Example>,
    ids: Vec<BlobId>,
    server: ServerState,
    noise: NoiseStage,
    participation: Vec<u32>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &TrainingConfig,
        policy: &AccessPolicy,
        data: &'a SyntheticDataset,
    ) -> Result<Self, TrainingError> {
        let plan = plan(config, policy)?;
        let dim = config.data.dim;
        let initial = config.model.init_params(dim, config.seed)?;
        let noise = plan.noise_stage(initial.len(), config.seed)?;
        Ok(Self {
            ids: (0..data.clients.len())
                .map(|i| device_blob_id(config.seed, i))
                .collect(),
            pooled: data.pooled(),
            server: ServerState::new(initial, config.server_optimizer),
            noise,
            participation: vec![0; data.clients.len()],
            config: config.clone(),
            plan,
            data,
        })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[f64] {
        &self.server.params
    }

    /// One round: select, compute clipped updates, aggregate, noise,
    /// release, server step.
    pub fn run_round(&mut self, round: u64) -> Result<MetricsRow, AbortReason> {
        let candidates: Vec<BlobId> = self
            .ids
            .iter()
            .zip(&self.data.clients)
            .filter(|(_, d)| !d.is_empty())
            .map(|(id, _)| *id)
            .collect();
        let chosen = select_clients(self.config.seed, round, &candidates, self.plan.clients_per_round);
        let params = ModelParams::new(self.server.params.clone()).map_err(|e| AbortReason::from(&e))?;
        let client_cfg = self.plan.client_config(&self.config);
        let mut updates: Vec<(BlobId, ClientUpdate)> = Vec::with_capacity(chosen.len());
        for id in &chosen {
            let idx = self.ids.iter().position(|x| x == id).expect("known id");
            let u = transforms::compute_client_update(&params, &self.data.clients[idx], &client_cfg)
                .map_err(|e| AbortReason::from(&e))?;
            updates.push((*id, u));
        }
        let agg: AggregateState =
            transforms::aggregate(&updates, self.plan.min_inputs).map_err(|e| AbortReason::from(&e))?;
        let noised = self.noise.process(&agg.sum).map_err(|e| AbortReason::from(&e))?;
        let released = transforms::release(&agg, &noised, &self.plan.gates())?;
        self.server.apply(&released);
        for id in &chosen {
            let idx = self.ids.iter().position(|x| x == id).expect("known id");
            self.participation[idx] += 1;
        }
        let (train_loss, eval_loss, eval_accuracy) = evaluate(
            self.config.model,
            &self.server.params,
            &self.pooled,
            &self.data.eval,
        )
        .map_err(|_| AbortReason::TransformFailed)?;
        Ok(MetricsRow {
            round,
            tick: 0,
            participants: agg.count,
            max_client_participations: self.participation.iter().copied().max().unwrap_or(0),
            train_loss,
            eval_loss,
            eval_accuracy,
            update_norm: l2_norm(&released),
            rho_spent: self.plan.rho_after(self.noise.released()),
        })
    }

    pub fn run(&mut self) -> Metrics {
        let mut metrics = Metrics::empty();
        for round in 1..=self.plan.rounds {
            match self.run_round(round) {
                Ok(row) => metrics.rows.push(row),
                Err(reason) => metrics.aborted.push(AbortedRound {
                    round,
                    tick: 0,
                    reason,
                }),
            }
        }
        metrics.rho_spent = self.plan.rho_after(self.noise.released());
        metrics
    }
}
