//! Small models with hand-written gradients, plus the dataset wire format.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Parameter cap; larger models are outside the desk-scale target.
pub const MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp1Hidden { hidden: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has length {got}, model expects {expected}")]
    ParamMismatch { expected: usize, got: usize },
    #[error("example has {got} features, model expects {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("model needs {0} parameters, cap is {MAX_PARAMS}")]
    TooLarge(usize),
    #[error("malformed dataset payload: {0}")]
    Payload(String),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ModelKind {
    pub fn param_count(&self, dim: usize) -> usize {
        match self {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => dim,
            ModelKind::Mlp1Hidden { hidden } => hidden * dim + 2 * hidden + 1,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelKind::LinearRegression)
    }

    /// Zeros for the linear models; small seeded Gaussian weights for the MLP.
    pub fn init_params(&self, dim: usize, seed: u64) -> Result<Vec<f64>, ModelError> {
        let n = self.param_count(dim);
        if n > MAX_PARAMS {
            return Err(ModelError::TooLarge(n));
        }
        match self {
            ModelKind::Mlp1Hidden { .. } => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d6c_7069_6e69_7400);
                let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
                Ok((0..n).map(|_| normal.sample(&mut rng)).collect())
            }
            _ => Ok(vec![0.0; n]),
        }
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<(), ModelError> {
        let dim = x.len();
        let expected = self.param_count(dim);
        if params.len() != expected {
            return Err(ModelError::ParamMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Regression output or positive-class probability.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> f64 {
        match self {
            ModelKind::LinearRegression => dot(params, x),
            ModelKind::LogisticRegression => sigmoid(dot(params, x)),
            ModelKind::Mlp1Hidden { hidden } => {
                let (z, _) = self.mlp_forward(*hidden, params, x);
                sigmoid(z)
            }
        }
    }

    fn mlp_forward(&self, hidden: usize, params: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let d = x.len();
        let (w1, rest) = params.split_at(hidden * d);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(hidden);
        let h: Vec<f64> = (0..hidden)
            .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
            .collect();
        (dot(w2, &h) + b2[0], h)
    }

    /// Mean loss and its gradient over `examples`.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        examples: &[Example],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let first = examples.first().ok_or(ModelError::EmptyDataset)?;
        let d = first.features.len();
        self.check(params, &first.features)?;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for ex in examples {
            if ex.features.len() != d {
                return Err(ModelError::FeatureMismatch {
                    expected: d,
                    got: ex.features.len(),
                });
            }
            let x = &ex.features;
            match self {
                ModelKind::LinearRegression => {
                    let r = dot(params, x) - ex.label;
                    loss += 0.5 * r * r;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                }
                ModelKind::LogisticRegression => {
                    let z = dot(params, x);
                    loss += softplus(z) - ex.label * z;
                    let r = sigmoid(z) - ex.label;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                }
                ModelKind::Mlp1Hidden { hidden } => {
                    let hidden = *hidden;
                    let (z, h) = self.mlp_forward(hidden, params, x);
                    loss += softplus(z) - ex.label * z;
                    let r = sigmoid(z) - ex.label;
                    let w2_off = hidden * d + hidden;
                    for j in 0..hidden {
                        let w2j = params[w2_off + j];
                        grad[w2_off + j] += r * h[j];
                        let back = r * w2j * (1.0 - h[j] * h[j]);
                        grad[hidden * d + j] += back;
                        for (k, xk) in x.iter().enumerate() {
                            grad[j * d + k] += back * xk;
                        }
                    }
                    grad[w2_off + hidden] += r;
                }
            }
        }
        let n = examples.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    /// Mean loss and, for classifiers, accuracy at threshold 0.5.
    pub fn evaluate(
        &self,
        params: &[f64],
        examples: &[Example],
    ) -> Result<(f64, Option<f64>), ModelError> {
        let (loss, _) = self.loss_and_grad(params, examples)?;
        if !self.is_classifier() {
            return Ok((loss, None));
        }
        let correct = examples
            .iter()
            .filter(|ex| (self.predict(params, &ex.features) >= 0.5) == (ex.label >= 0.5))
            .count();
        Ok((loss, Some(correct as f64 / examples.len() as f64)))
    }
}

/// `u32 BE count ‖ u32 BE dim ‖ count × (dim f64 LE features ‖ f64 LE label)`.
pub fn encode_examples(examples: &[Example]) -> Vec<u8> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    let mut out = Vec::with_capacity(8 + examples.len() * (dim + 1) * 8);
    out.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    out.extend_from_slice(&(dim as u32).to_be_bytes());
    for ex in examples {
        for v in ex.features.iter().chain(std::iter::once(&ex.label)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_examples(bytes: &[u8]) -> Result<Vec<Example>, ModelError> {
    if bytes.len() < 8 {
        return Err(ModelError::Payload("short header".into()));
    }
    let count = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    let dim = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let row = (dim + 1) * 8;
    let body = &bytes[8..];
    if count.checked_mul(row) != Some(body.len()) {
        return Err(ModelError::Payload(format!(
            "expected {count} rows of {row} bytes, found {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(row)
        .map(|r| {
            let vals: Vec<f64> = r
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Example {
                label: vals[dim],
                features: vals[..dim].to_vec(),
            }
        })
        .collect())
}
