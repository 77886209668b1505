//! Pure computations performed inside the simulated TEEs: clipped client
//! updates, thresholded aggregation, tree-aggregation noise and release gates.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::accounting::NoiseMechanism;
use crate::model::{Example, ModelError, ModelKind};
use crate::types::{BlobId, Digest32};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("clip norm must be positive (got {0})")]
    NonPositiveClip(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("updates disagree on clip norm")]
    ClipMismatch,
    #[error("blob {0} contributes twice")]
    DuplicateInput(BlobId),
    #[error("threshold unmet: {have} inputs, {need} required")]
    ThresholdUnmet { have: usize, need: usize },
    #[error("round {t} outside 1..={rounds}")]
    RoundOutOfRange { t: u64, rounds: u64 },
    #[error("tree needs at least one round")]
    EmptyTree,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self, TransformError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TransformError::NonFinite("model params"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub delta: Vec<f64>,
    pub pre_clip_norm: f64,
    pub clip_norm: f64,
}

impl ClientUpdate {
    /// `u32 BE dim ‖ dim f64 LE ‖ pre_clip_norm f64 LE ‖ clip_norm f64 LE`.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * (self.delta.len() + 2));
        out.extend_from_slice(&(self.delta.len() as u32).to_be_bytes());
        for v in self
            .delta
            .iter()
            .chain([&self.pre_clip_norm, &self.clip_norm])
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, TransformError> {
        if bytes.len() < 4 {
            return Err(TransformError::Payload("short update".into()));
        }
        let dim = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + 8 * (dim + 2) {
            return Err(TransformError::Payload(format!(
                "update of dim {dim} must be {} bytes, found {}",
                4 + 8 * (dim + 2),
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            delta: vals[..dim].to_vec(),
            pre_clip_norm: vals[dim],
            clip_norm: vals[dim + 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub local_steps: u32,
    /// May be `f64::INFINITY` for unclipped baselines.
    pub clip_norm: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` by `min(1, clip / ‖v‖₂)`.
pub fn clip(v: &[f64], clip_norm: f64) -> Result<Vec<f64>, TransformError> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(TransformError::NonPositiveClip(clip_norm));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TransformError::NonFinite("clip input"));
    }
    let norm = l2_norm(v);
    if norm <= clip_norm {
        return Ok(v.to_vec());
    }
    let scale = clip_norm / norm;
    Ok(v.iter().map(|x| x * scale).collect())
}

/// Runs `local_steps` full-batch gradient steps from `params` and returns the
/// clipped difference `w_local − w_init`.
pub fn compute_client_update(
    params: &ModelParams,
    examples: &[Example],
    config: &ClientConfig,
) -> Result<ClientUpdate, TransformError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }
    let mut w = params.values.clone();
    for _ in 0..config.local_steps {
        let (loss, grad) = config.model.loss_and_grad(&w, examples)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TransformError::NonFinite("loss or gradient"));
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= config.learning_rate * gi;
        }
    }
    let raw: Vec<f64> = w.iter().zip(&params.values).map(|(a, b)| a - b).collect();
    let pre_clip_norm = l2_norm(&raw);
    Ok(ClientUpdate {
        delta: clip(&raw, config.clip_norm)?,
        pre_clip_norm,
        clip_norm: config.clip_norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateState {
    pub sum: Vec<f64>,
    pub count: usize,
    pub contributing_blob_ids: Vec<BlobId>,
}

impl AggregateState {
    /// `u32 BE count ‖ u32 BE dim ‖ count × blob id ‖ dim f64 LE`.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.count as u32).to_be_bytes());
        out.extend_from_slice(&(self.sum.len() as u32).to_be_bytes());
        for id in &self.contributing_blob_ids {
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.sum {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, TransformError> {
        if bytes.len() < 8 {
            return Err(TransformError::Payload("short aggregate".into()));
        }
        let count = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let dim = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 16 * count + 8 * dim {
            return Err(TransformError::Payload("aggregate length mismatch".into()));
        }
        let ids_end = 8 + 16 * count;
        Ok(Self {
            count,
            contributing_blob_ids: bytes[8..ids_end]
                .chunks_exact(16)
                .map(|c| BlobId::from_slice(c).unwrap())
                .collect(),
            sum: bytes[ids_end..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

/// Sums updates in ascending blob-id order, refusing below `min_inputs`.
pub fn aggregate(
    updates: &[(BlobId, ClientUpdate)],
    min_inputs: usize,
) -> Result<AggregateState, TransformError> {
    if updates.len() < min_inputs {
        return Err(TransformError::ThresholdUnmet {
            have: updates.len(),
            need: min_inputs,
        });
    }
    let mut ordered: Vec<&(BlobId, ClientUpdate)> = updates.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    for pair in ordered.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(TransformError::DuplicateInput(pair[0].0));
        }
    }
    let Some((_, first)) = ordered.first() else {
        return Ok(AggregateState {
            sum: Vec::new(),
            count: 0,
            contributing_blob_ids: Vec::new(),
        });
    };
    let dim = first.delta.len();
    let mut sum = vec![0.0; dim];
    for (_, u) in &ordered {
        if u.delta.len() != dim {
            return Err(TransformError::DimMismatch {
                expected: dim,
                got: u.delta.len(),
            });
        }
        if u.clip_norm != first.clip_norm {
            return Err(TransformError::ClipMismatch);
        }
        for (s, d) in sum.iter_mut().zip(&u.delta) {
            *s += d;
        }
    }
    Ok(AggregateState {
        sum,
        count: ordered.len(),
        contributing_blob_ids: ordered.iter().map(|(id, _)| *id).collect(),
    })
}

/// A node of the binary tree over rounds: covers rounds
/// `index·2^level + 1 ..= (index+1)·2^level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreeNode {
    pub level: u32,
    pub index: u64,
}

/// Splits `[1, t]` into maximal complete dyadic intervals, largest first.
pub fn dyadic_decomposition(t: u64) -> Vec<TreeNode> {
    let mut nodes = Vec::with_capacity(t.count_ones() as usize);
    let mut start = 0u64;
    for level in (0..u64::BITS).rev() {
        if t & (1 << level) != 0 {
            nodes.push(TreeNode {
                level,
                index: start >> level,
            });
            start += 1 << level;
        }
    }
    nodes
}

/// Stateful noise for prefix sums over `rounds` rounds. Every tree node's
/// noise vector is drawn once from a generator keyed by (seed, node) and kept.
#[derive(Debug, Clone)]
pub struct TreeNoiseState {
    rounds: u64,
    dim: usize,
    stddev: f64,
    seed: [u8; 32],
    node_noise: BTreeMap<TreeNode, Vec<f64>>,
    rounds_consumed: u64,
}

impl TreeNoiseState {
    /// `stddev` is the absolute per-coordinate standard deviation (σ·C).
    /// `rounds` is padded up to a power of two.
    pub fn new(rounds: u64, dim: usize, stddev: f64, seed: [u8; 32]) -> Result<Self, TransformError> {
        if rounds == 0 {
            return Err(TransformError::EmptyTree);
        }
        let rounds = rounds.next_power_of_two();
        if !(stddev.is_finite() && stddev >= 0.0) {
            return Err(TransformError::NonFinite("noise stddev"));
        }
        Ok(Self {
            rounds,
            dim,
            stddev,
            seed,
            node_noise: BTreeMap::new(),
            rounds_consumed: 0,
        })
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn rounds_consumed(&self) -> u64 {
        self.rounds_consumed
    }

    pub fn cached_nodes(&self) -> usize {
        self.node_noise.len()
    }

    pub fn node_noise(&self, node: &TreeNode) -> Option<&[f64]> {
        self.node_noise.get(node).map(Vec::as_slice)
    }

    fn draw(&self, node: TreeNode) -> Vec<f64> {
        let key = Digest32::of(&[
            b"fedconf/tree-node/v1",
            &self.seed,
            &node.level.to_be_bytes(),
            &node.index.to_be_bytes(),
        ]);
        let mut rng = ChaCha20Rng::from_seed(key.0);
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * self.stddev
            })
            .collect()
    }

    /// `raw_prefix_sum + Σ_{v ∈ D(t)} noise(v)`.
    pub fn add_tree_noise(&mut self, t: u64, raw_prefix_sum: &[f64]) -> Result<Vec<f64>, TransformError> {
        if t == 0 || t > self.rounds {
            return Err(TransformError::RoundOutOfRange {
                t,
                rounds: self.rounds,
            });
        }
        if raw_prefix_sum.len() != self.dim {
            return Err(TransformError::DimMismatch {
                expected: self.dim,
                got: raw_prefix_sum.len(),
            });
        }
        self.rounds_consumed = self.rounds_consumed.max(t);
        let mut out = raw_prefix_sum.to_vec();
        if self.stddev == 0.0 {
            return Ok(out);
        }
        for node in dyadic_decomposition(t) {
            if !self.node_noise.contains_key(&node) {
                let fresh = self.draw(node);
                self.node_noise.insert(node, fresh);
            }
            for (o, n) in out.iter_mut().zip(&self.node_noise[&node]) {
                *o += n;
            }
        }
        Ok(out)
    }
}

/// Independent Gaussian noise per round, keyed by (seed, round).
pub fn gaussian_round_noise(seed: &[u8; 32], round: u64, dim: usize, stddev: f64) -> Vec<f64> {
    if stddev == 0.0 {
        return vec![0.0; dim];
    }
    let key = Digest32::of(&[b"fedconf/round-noise/v1", seed, &round.to_be_bytes()]);
    let mut rng = ChaCha20Rng::from_seed(key.0);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * stddev
        })
        .collect()
}

/// State held by the noise enclave across rounds.
#[derive(Debug, Clone)]
pub enum NoiseStage {
    /// Tree aggregation over running prefix sums; releases noised prefixes.
    Tree { tree: TreeNoiseState, prefix: Vec<f64> },
    /// Fresh Gaussian noise on each round's sum.
    PerRound {
        seed: [u8; 32],
        stddev: f64,
        dim: usize,
        released: u64,
    },
}

impl NoiseStage {
    pub fn new(
        mechanism: NoiseMechanism,
        rounds: u64,
        dim: usize,
        stddev: f64,
        seed: [u8; 32],
    ) -> Result<Self, TransformError> {
        Ok(match mechanism {
            NoiseMechanism::TreeAggregation => NoiseStage::Tree {
                tree: TreeNoiseState::new(rounds, dim, stddev, seed)?,
                prefix: vec![0.0; dim],
            },
            NoiseMechanism::GaussianPerRound => NoiseStage::PerRound {
                seed,
                stddev,
                dim,
                released: 0,
            },
        })
    }

    pub fn released(&self) -> u64 {
        match self {
            NoiseStage::Tree { tree, .. } => tree.rounds_consumed(),
            NoiseStage::PerRound { released, .. } => *released,
        }
    }

    /// Folds in one round's aggregate sum and returns the noised quantity:
    /// the prefix sum for trees, the round sum otherwise.
    pub fn process(&mut self, round_sum: &[f64]) -> Result<Vec<f64>, TransformError> {
        match self {
            NoiseStage::Tree { tree, prefix } => {
                if round_sum.len() != prefix.len() {
                    return Err(TransformError::DimMismatch {
                        expected: prefix.len(),
                        got: round_sum.len(),
                    });
                }
                let t = tree.rounds_consumed() + 1;
                let mut next = prefix.clone();
                for (p, s) in next.iter_mut().zip(round_sum) {
                    *p += s;
                }
                let noised = tree.add_tree_noise(t, &next)?;
                *prefix = next;
                Ok(noised)
            }
            NoiseStage::PerRound {
                seed,
                stddev,
                dim,
                released,
            } => {
                if round_sum.len() != *dim {
                    return Err(TransformError::DimMismatch {
                        expected: *dim,
                        got: round_sum.len(),
                    });
                }
                *released += 1;
                let noise = gaussian_round_noise(seed, *released, *dim, *stddev);
                Ok(round_sum.iter().zip(&noise).map(|(s, n)| s + n).collect())
            }
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseRefusal {
    #[error("threshold_unmet")]
    ThresholdUnmet,
    #[error("dp_gate_unmet")]
    DpGateUnmet,
    #[error("non_finite")]
    NonFinite,
    #[error("dim_mismatch")]
    DimMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseGates {
    pub min_inputs: usize,
    /// Noise multiplier actually applied upstream.
    pub noise_multiplier: f64,
    /// False when the policy declares an unbounded (non-private) budget.
    pub finite_budget: bool,
    /// Divides the noised sum; defaults to the aggregate count.
    pub denominator: Option<f64>,
}

/// Emits `noised / denominator` if every gate holds.
pub fn release(
    agg: &AggregateState,
    noised: &[f64],
    gates: &ReleaseGates,
) -> Result<Vec<f64>, ReleaseRefusal> {
    if agg.count < gates.min_inputs || agg.count == 0 {
        return Err(ReleaseRefusal::ThresholdUnmet);
    }
    if gates.finite_budget && gates.noise_multiplier <= 0.0 {
        return Err(ReleaseRefusal::DpGateUnmet);
    }
    if noised.len() != agg.sum.len() {
        return Err(ReleaseRefusal::DimMismatch);
    }
    let denom = gates.denominator.unwrap_or(agg.count as f64);
    let out: Vec<f64> = noised.iter().map(|v| v / denom).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ReleaseRefusal::NonFinite);
    }
    Ok(out)
}
