//! Zero-concentrated DP accounting for Gaussian noise and tree aggregation.
//!
//! Budgets are tracked as ρ-zCDP. A budget produced by Gaussian mechanisms
//! (including any composition of them) is equivalent to a single Gaussian
//! mechanism with sensitivity-to-noise ratio `μ = √(2ρ)`, so its exact
//! `(ε, δ)` profile is available in closed form and inverted numerically.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// δ used in every human-facing privacy statement.
pub const REPORTING_DELTA: f64 = 1e-10;

const EPSILON_REL_TOL: f64 = 1e-10;
const MAX_BISECTION_STEPS: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("noise multiplier must be positive for a finite budget (got {0})")]
    NonPositiveNoise(f64),
    #[error("tree size must be a power of two (got {0})")]
    TreeNotPowerOfTwo(u64),
    #[error("{0} participations per client per tree is unsupported; only single participation is accounted")]
    MultipleParticipations(u32),
    #[error("rho must be finite and positive (got {0})")]
    InvalidRho(f64),
    #[error("delta must lie in (0, 1) (got {0})")]
    InvalidDelta(f64),
    #[error("epsilon search did not converge: rho={rho}, delta={delta}, bracket=[{lo}, {hi}] after {steps} steps")]
    NonConvergence {
        rho: f64,
        delta: f64,
        lo: f64,
        hi: f64,
        steps: usize,
    },
}

/// A ρ-zCDP guarantee, or the marker for a release with no formal guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyBudget {
    Rho(f64),
    /// Produced by zero-noise baselines. Absorbing under composition.
    Unbounded,
}

impl PrivacyBudget {
    pub const ZERO: PrivacyBudget = PrivacyBudget::Rho(0.0);

    pub fn rho(&self) -> Option<f64> {
        match self {
            PrivacyBudget::Rho(r) => Some(*r),
            PrivacyBudget::Unbounded => None,
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, PrivacyBudget::Rho(_))
    }

    /// ε at the given δ; `None` for unbounded budgets and `Some(0)` for ρ = 0.
    pub fn epsilon(&self, delta: f64) -> Result<Option<f64>, AccountingError> {
        match self {
            PrivacyBudget::Unbounded => Ok(None),
            PrivacyBudget::Rho(r) if *r == 0.0 => Ok(Some(0.0)),
            PrivacyBudget::Rho(r) => zcdp_to_epsilon(*r, delta).map(Some),
        }
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrivacyBudget::Rho(r) => write!(f, "rho={r}"),
            PrivacyBudget::Unbounded => f.write_str("rho=unbounded"),
        }
    }
}

/// How the dp_noise stage perturbs aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMechanism {
    /// Binary-tree prefix-sum noise (DP-FTRL).
    TreeAggregation,
    /// Independent Gaussian noise on every round's sum (DP-SGD style).
    GaussianPerRound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub clip_norm: f64,
    /// Noise standard deviation in units of `clip_norm`.
    pub noise_multiplier: f64,
    pub rounds: u64,
    pub participations_per_client: u32,
}

impl NoiseConfig {
    pub fn new(clip_norm: f64, noise_multiplier: f64, rounds: u64) -> Self {
        Self {
            clip_norm,
            noise_multiplier,
            rounds,
            participations_per_client: 1,
        }
    }

    /// Absolute per-coordinate noise standard deviation.
    pub fn noise_stddev(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }
}

/// ρ for one release of a sensitivity-`clip_norm` query with absolute noise
/// standard deviation `stddev`: `C² / (2σ²)`.
pub fn gaussian_zcdp(clip_norm: f64, stddev: f64) -> PrivacyBudget {
    if stddev <= 0.0 {
        return PrivacyBudget::Unbounded;
    }
    PrivacyBudget::Rho(clip_norm * clip_norm / (2.0 * stddev * stddev))
}

/// Number of tree nodes on a leaf-to-root path of a complete binary tree with
/// `rounds` leaves.
pub fn tree_path_len(rounds: u64) -> Result<u32, AccountingError> {
    if rounds == 0 || !rounds.is_power_of_two() {
        return Err(AccountingError::TreeNotPowerOfTwo(rounds));
    }
    Ok(rounds.trailing_zeros() + 1)
}

/// ρ of the whole tree-aggregation release when every client contributes to at
/// most one leaf.
pub fn tree_zcdp(cfg: &NoiseConfig) -> Result<PrivacyBudget, AccountingError> {
    if cfg.participations_per_client != 1 {
        return Err(AccountingError::MultipleParticipations(
            cfg.participations_per_client,
        ));
    }
    let path = tree_path_len(cfg.rounds)?;
    Ok(match gaussian_zcdp(cfg.clip_norm, cfg.noise_stddev()) {
        PrivacyBudget::Rho(r) => PrivacyBudget::Rho(f64::from(path) * r),
        PrivacyBudget::Unbounded => PrivacyBudget::Unbounded,
    })
}

/// ρ spent by the first `released` prefix releases of a tree.
///
/// A leaf's path restricted to dyadic intervals inside `[1, released]` has
/// `⌊log₂ released⌋ + 1` nodes, so this reaches [`tree_zcdp`] at `released = T`.
pub fn tree_zcdp_after(cfg: &NoiseConfig, released: u64) -> PrivacyBudget {
    if released == 0 {
        return PrivacyBudget::ZERO;
    }
    let levels = f64::from(u64::BITS - released.leading_zeros());
    match gaussian_zcdp(cfg.clip_norm, cfg.noise_stddev()) {
        PrivacyBudget::Rho(r) => PrivacyBudget::Rho(levels * r),
        PrivacyBudget::Unbounded => PrivacyBudget::Unbounded,
    }
}

/// ρ of `rounds` independent Gaussian releases.
pub fn per_round_zcdp(cfg: &NoiseConfig) -> PrivacyBudget {
    compose(std::iter::repeat_n(
        gaussian_zcdp(cfg.clip_norm, cfg.noise_stddev()),
        cfg.rounds as usize,
    ))
}

pub fn mechanism_zcdp(
    mechanism: NoiseMechanism,
    cfg: &NoiseConfig,
) -> Result<PrivacyBudget, AccountingError> {
    match mechanism {
        NoiseMechanism::TreeAggregation => tree_zcdp(cfg),
        NoiseMechanism::GaussianPerRound => Ok(per_round_zcdp(cfg)),
    }
}

/// Additive zCDP composition.
pub fn compose<I: IntoIterator<Item = PrivacyBudget>>(budgets: I) -> PrivacyBudget {
    budgets
        .into_iter()
        .fold(PrivacyBudget::ZERO, |acc, b| match (acc, b) {
            (PrivacyBudget::Rho(a), PrivacyBudget::Rho(b)) => PrivacyBudget::Rho(a + b),
            _ => PrivacyBudget::Unbounded,
        })
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact δ(ε) of a Gaussian mechanism with `μ = sensitivity / stddev`.
pub fn gaussian_delta(mu: f64, epsilon: f64) -> f64 {
    let a = -epsilon / mu + mu / 2.0;
    let b = -epsilon / mu - mu / 2.0;
    let tail_b = phi(b);
    let second = if tail_b == 0.0 {
        0.0
    } else {
        (epsilon + tail_b.ln()).exp()
    };
    (phi(a) - second).max(0.0)
}

/// Closed-form bound `ρ + 2√(ρ ln(1/δ))`.
pub fn loose_epsilon(rho: f64, delta: f64) -> f64 {
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

fn check_args(rho: f64, delta: f64) -> Result<(), AccountingError> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(AccountingError::InvalidRho(rho));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountingError::InvalidDelta(delta));
    }
    Ok(())
}

/// Bisection for the smallest ε in `[0, hi]` with `excess(ε) <= 0`, where
/// `excess` is decreasing.
fn bisect_epsilon<F: Fn(f64) -> f64>(
    rho: f64,
    delta: f64,
    hi: f64,
    excess: F,
) -> Result<f64, AccountingError> {
    if excess(0.0) <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0_f64, hi);
    if excess(hi) > 0.0 {
        return Err(AccountingError::NonConvergence {
            rho,
            delta,
            lo,
            hi,
            steps: 0,
        });
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= EPSILON_REL_TOL * hi {
            return Ok(hi);
        }
    }
    Err(AccountingError::NonConvergence {
        rho,
        delta,
        lo,
        hi,
        steps: MAX_BISECTION_STEPS,
    })
}

/// Tight ε for a ρ-zCDP guarantee arising from Gaussian noise.
///
/// Inverts the exact Gaussian privacy profile with `μ = √(2ρ)`. Never exceeds
/// [`cks_epsilon`] or [`loose_epsilon`].
pub fn zcdp_to_epsilon(rho: f64, delta: f64) -> Result<f64, AccountingError> {
    check_args(rho, delta)?;
    let mu = (2.0 * rho).sqrt();
    let log_delta = delta.ln();
    bisect_epsilon(rho, delta, loose_epsilon(rho, delta), |eps| {
        let d = gaussian_delta(mu, eps);
        if d <= 0.0 {
            -1.0
        } else {
            d.ln() - log_delta
        }
    })
}

/// log of `exp((α−1)(αρ−ε)) / (α−1) · (1−1/α)^α`.
fn cks_log_delta(rho: f64, eps: f64, alpha: f64) -> f64 {
    (alpha - 1.0) * (alpha * rho - eps) - (alpha - 1.0).ln() + alpha * (-1.0 / alpha).ln_1p()
}

/// Minimises [`cks_log_delta`] over α > 1 by golden-section search on ln(α−1).
fn cks_min_log_delta(rho: f64, eps: f64) -> f64 {
    let f = |u: f64| cks_log_delta(rho, eps, 1.0 + u.exp());
    let (mut a, mut b) = (-30.0_f64, 20.0_f64);
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    fc.min(fd)
}

/// zCDP → (ε, δ) via the generic Rényi bound
/// `δ = min_α exp((α−1)(αρ−ε)) / (α−1) · (1−1/α)^α`.
///
/// Valid for any ρ-zCDP mechanism; looser than [`zcdp_to_epsilon`] for
/// Gaussian noise.
pub fn cks_epsilon(rho: f64, delta: f64) -> Result<f64, AccountingError> {
    check_args(rho, delta)?;
    let log_delta = delta.ln();
    bisect_epsilon(rho, delta, loose_epsilon(rho, delta), |eps| {
        cks_min_log_delta(rho, eps) - log_delta
    })
}
