//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or a JSON string and returns JSON, so the
//! page needs no bundler. The `*_json` functions hold the logic and are what
//! the native tests exercise.

use fedconf::accounting::{self, NoiseConfig, PrivacyBudget};
use fedconf::policy::{self, AccessPolicy};
use fedconf::transforms::{dyadic_decomposition, TreeNoiseState};
use fedconf::types::Digest32;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest tree the page may request; keeps the JSON small.
pub const MAX_DEMO_ROUNDS: u64 = 4096;

#[derive(Debug, Serialize)]
struct CurvePoint {
    rounds: u64,
    rho: f64,
    epsilon: f64,
    epsilon_loose: f64,
}

/// Budget of tree aggregation for every power-of-two horizon up to
/// `max_rounds`.
pub fn accountant_curve_json(sigma: f64, clip: f64, max_rounds: u64, delta: f64) -> Result<String, String> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err("noise multiplier must be positive".into());
    }
    if !(1..=MAX_DEMO_ROUNDS).contains(&max_rounds) {
        return Err(format!("rounds must lie in 1..={MAX_DEMO_ROUNDS}"));
    }
    let mut points = Vec::new();
    let mut rounds = 1;
    while rounds <= max_rounds {
        let cfg = NoiseConfig::new(clip, sigma, rounds);
        let rho = match accounting::tree_zcdp(&cfg).map_err(|e| e.to_string())? {
            PrivacyBudget::Rho(r) => r,
            PrivacyBudget::Unbounded => return Err("no guarantee without noise".into()),
        };
        points.push(CurvePoint {
            rounds,
            rho,
            epsilon: accounting::zcdp_to_epsilon(rho, delta).map_err(|e| e.to_string())?,
            epsilon_loose: accounting::loose_epsilon(rho, delta),
        });
        rounds *= 2;
    }
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct PrefixNoise {
    round: u64,
    nodes: usize,
    noise: f64,
    stddev: f64,
}

/// Noise added to each released prefix sum of a one-dimensional stream.
pub fn tree_noise_json(rounds: u64, sigma: f64, clip: f64, seed: u64) -> Result<String, String> {
    if !(1..=MAX_DEMO_ROUNDS).contains(&rounds) {
        return Err(format!("rounds must lie in 1..={MAX_DEMO_ROUNDS}"));
    }
    let stddev = sigma * clip;
    let seed = Digest32::of(&[b"fedconf-demo/tree", &seed.to_be_bytes()]).0;
    let mut tree = TreeNoiseState::new(rounds, 1, stddev, seed).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(rounds as usize);
    for t in 1..=rounds {
        let noise = tree.add_tree_noise(t, &[0.0]).map_err(|e| e.to_string())?[0];
        let nodes = dyadic_decomposition(t).len();
        out.push(PrefixNoise {
            round: t,
            nodes,
            noise,
            stddev: stddev * (nodes as f64).sqrt(),
        });
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct PolicyReport {
    valid: bool,
    hash: Option<String>,
    diagnostics: Vec<String>,
    summary: Option<String>,
}

/// Validation result, hash and plain-text summary of a policy document.
pub fn policy_summary_json(policy_json: &str) -> Result<String, String> {
    let policy = AccessPolicy::from_json(policy_json.as_bytes()).map_err(|e| e.to_string())?;
    let report = policy::validate(&policy);
    let out = PolicyReport {
        valid: report.is_ok(),
        hash: policy::hash(&policy).ok().map(|h| h.to_hex()),
        diagnostics: report
            .diagnostics
            .iter()
            .map(|d| format!("{}: {}", d.code, d.message))
            .collect(),
        summary: policy::summarize(&policy).ok(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn accountant_curve(sigma: f64, clip: f64, max_rounds: u32, delta: f64) -> Result<String, JsError> {
    accountant_curve_json(sigma, clip, max_rounds.into(), delta).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tree_noise(rounds: u32, sigma: f64, clip: f64, seed: u32) -> Result<String, JsError> {
    tree_noise_json(rounds.into(), sigma, clip, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn policy_summary(policy_json: &str) -> Result<String, JsError> {
    policy_summary_json(policy_json).map_err(|e| JsError::new(&e))
}
