//! Masked, regularized non-negative matrix factorization.
//!
//! For one participant with readings `R`, mask `F` and factors `(P, Q)` the
//! loss is
//!
//! ```text
//! L(P, Q) = ||F o (R - PQ)||_F^2 + reg_p ||P||_F^2 + reg_q ||Q||_F^2
//! ```
//!
//! [`gradients`] returns
//!
//! ```text
//! g_p = (F o (R - PQ)) Q^T - reg_p P
//! g_q = P^T (F o (R - PQ)) - reg_q Q
//! ```
//!
//! which is `-1/2` times the analytic gradient of `L`. A descent step is
//! therefore `P <- P + eta * g_p`, followed by clamping negative entries to
//! zero. [`UpdateRule::Literal`] applies `P <- P - eta * g_p` instead, which
//! climbs the data term; it exists only for side-by-side comparison.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_shape, FactorPair, Hyperparams, LocalObservations};
use crate::rng::{stream, Stream};

/// Sign convention used when applying a gradient pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `P + eta * g_p`: descends the loss.
    #[default]
    Descent,
    /// `P - eta * g_p`: the sign as usually printed for this update.
    Literal,
}

impl UpdateRule {
    pub fn from_literal_flag(literal: bool) -> Self {
        if literal {
            UpdateRule::Literal
        } else {
            UpdateRule::Descent
        }
    }

    fn sign(self) -> f64 {
        match self {
            UpdateRule::Descent => 1.0,
            UpdateRule::Literal => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub g_p: Array2<f64>,
    pub g_q: Array2<f64>,
}

impl GradPair {
    /// `max(|g_p|_inf, |g_q|_inf)` with the element-wise max norm.
    pub fn max_abs(&self) -> f64 {
        self.g_p
            .iter()
            .chain(self.g_q.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

fn check_dims(obs: &LocalObservations, f: &FactorPair) -> Result<()> {
    check_shape("factor product vs observations", obs.dim(), f.target_dim())
}

fn masked_residual(obs: &LocalObservations, f: &FactorPair) -> Array2<f64> {
    (obs.values() - &f.product()) * obs.mask()
}

fn sq_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn masked_loss(obs: &LocalObservations, f: &FactorPair, reg_p: f64, reg_q: f64) -> Result<f64> {
    check_dims(obs, f)?;
    let resid = masked_residual(obs, f);
    Ok(sq_norm(&resid) + reg_p * sq_norm(&f.p) + reg_q * sq_norm(&f.q))
}

pub fn gradients(
    obs: &LocalObservations,
    f: &FactorPair,
    reg_p: f64,
    reg_q: f64,
) -> Result<GradPair> {
    check_dims(obs, f)?;
    let resid = masked_residual(obs, f);
    let g_p = resid.dot(&f.q.t()) - &(&f.p * reg_p);
    let g_q = f.p.t().dot(&resid) - &(&f.q * reg_q);
    Ok(GradPair { g_p, g_q })
}

/// Element-wise `max(x, 0)` on both factors.
pub fn truncate(f: FactorPair) -> FactorPair {
    let FactorPair { mut p, mut q } = f;
    p.mapv_inplace(|v| v.max(0.0));
    q.mapv_inplace(|v| v.max(0.0));
    FactorPair { p, q }
}

/// One descent step with truncation. Returns the new factors and the
/// gradients evaluated at the old ones.
pub fn sgd_step(
    obs: &LocalObservations,
    f: &FactorPair,
    eta: f64,
    reg_p: f64,
    reg_q: f64,
) -> Result<(FactorPair, GradPair)> {
    sgd_step_with_rule(obs, f, eta, reg_p, reg_q, UpdateRule::Descent)
}

pub fn sgd_step_with_rule(
    obs: &LocalObservations,
    f: &FactorPair,
    eta: f64,
    reg_p: f64,
    reg_q: f64,
    rule: UpdateRule,
) -> Result<(FactorPair, GradPair)> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::param(format!("step size must be positive, got {eta}")));
    }
    let grads = gradients(obs, f, reg_p, reg_q)?;
    let scale = rule.sign() * eta;
    let p = &f.p + &(&grads.g_p * scale);
    let q = &f.q + &(&grads.g_q * scale);
    let next = truncate(FactorPair { p, q });
    if !next.is_finite() || !grads.max_abs().is_finite() {
        return Err(Error::Diverged {
            chain: None,
            iteration: 0,
        });
    }
    Ok((next, grads))
}

/// Random non-negative factors with entries `|N(0,1)| * sqrt(obs_scale / l)`,
/// so that `E[(PQ)_ij] = obs_scale * 2/pi`.
pub fn random_factors(
    num_subareas: usize,
    window: usize,
    latent: usize,
    obs_scale: f64,
    rng: &mut Stream,
) -> FactorPair {
    let scale = (obs_scale / latent as f64).sqrt();
    let mut draw = || {
        let z: f64 = rng.sample(StandardNormal);
        z.abs() * scale
    };
    let p = Array2::from_shape_simple_fn((num_subareas, latent), &mut draw);
    let q = Array2::from_shape_simple_fn((latent, window), &mut draw);
    FactorPair { p, q }
}

/// Full-batch masked NMF on organizer-aggregated observations: the
/// centralized counterpart of the decentralized protocol. Iterates until the
/// largest gradient entry is at most `grad_tol` or `max_iters` updates ran.
pub fn solve_centralized(
    aggregated: &LocalObservations,
    params: &Hyperparams,
) -> Result<(FactorPair, usize)> {
    solve_centralized_with_rule(aggregated, params, UpdateRule::Descent)
}

pub fn solve_centralized_with_rule(
    aggregated: &LocalObservations,
    params: &Hyperparams,
    rule: UpdateRule,
) -> Result<(FactorPair, usize)> {
    let (rows, cols) = aggregated.dim();
    params.validate(rows)?;
    check_shape("aggregated window", (rows, params.window), (rows, cols))?;
    let scale = aggregated.observed_mean().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let mut rng = stream(params.seed, "centralized-init", &[]);
    let mut f = random_factors(rows, cols, params.latent, scale, &mut rng);
    for i in 1..=params.max_iters {
        let (next, grads) = sgd_step_with_rule(
            aggregated,
            &f,
            params.step_size,
            params.reg_p,
            params.reg_q,
            rule,
        )
        .map_err(|e| e.at_iteration(i))?;
        f = next;
        if grads.max_abs() <= params.grad_tol {
            return Ok((f, i));
        }
    }
    Ok((f, params.max_iters))
}
