//! Uniform error bounds between the GP mean and the unknown dynamics.
//!
//! With probability at least `1 - delta`, `|mu(x) - f_i(x)| <= beta * sigma_D(x)`
//! holds for all `x`, where
//! `beta = (sigma / sqrt(lambda)) * (B + sigma * sqrt(2 (alpha + 1 + ln(1/delta))))`.
//! The margin `epsilon` used by the abstraction is either given directly or
//! derived from `beta` and the worst posterior standard deviation over the grid.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::gp::GpModel;

/// Smallest margin the abstraction accepts.
pub const EPSILON_FLOOR: f64 = 1e-12;

/// How the abstraction margin `epsilon` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsilonMode {
    /// Taken verbatim from configuration.
    Explicit,
    /// `max beta_i * sigma_D`, matching the pointwise error bound.
    DerivedLemma,
    /// `max sqrt(beta_i) * sigma_D`, the square-root scaling variant.
    DerivedPaperLiteral,
}

impl FromStr for EpsilonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(EpsilonMode::Explicit),
            "derived_lemma" => Ok(EpsilonMode::DerivedLemma),
            "derived_paper_literal" => Ok(EpsilonMode::DerivedPaperLiteral),
            other => Err(Error::Config(format!(
                "bounds.epsilon_mode must be explicit, derived_lemma or derived_paper_literal, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for EpsilonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpsilonMode::Explicit => "explicit",
            EpsilonMode::DerivedLemma => "derived_lemma",
            EpsilonMode::DerivedPaperLiteral => "derived_paper_literal",
        })
    }
}

/// Empirical information gain `1/2 log det(I + K / lambda)`.
pub fn information_gain(model: &GpModel) -> f64 {
    let n = model.num_points() as f64;
    (model.half_log_det() - 0.5 * n * (model.lambda + model.jitter).ln()).max(0.0)
}

/// Confidence scaling for the uniform error bound.
pub fn beta(rkhs_norm: f64, sigma: f64, lambda: f64, info_gain: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if lambda <= 0.0 || rkhs_norm < 0.0 || sigma < 0.0 || info_gain < 0.0 {
        return Err(Error::Domain(format!(
            "beta needs B, sigma, alpha >= 0 and lambda > 0 (got B={rkhs_norm}, sigma={sigma}, alpha={info_gain}, lambda={lambda})"
        )));
    }
    let root = (2.0 * (info_gain + 1.0 + (1.0 / delta).ln())).sqrt();
    Ok(sigma / lambda.sqrt() * (rkhs_norm + sigma * root))
}

/// `(1 - delta)^n`, the joint confidence of `n` independent per-dimension bounds.
pub fn dimension_confidence(delta: f64, n: usize) -> f64 {
    (1.0 - delta).powi(n as i32)
}

/// `sqrt(Y^T (K + lambda I)^-1 Y)`: the RKHS norm of the posterior mean,
/// used as a stand-in when no norm bound is configured. Not a certified bound.
pub fn rkhs_norm_proxy(model: &GpModel) -> f64 {
    model
        .targets()
        .iter()
        .zip(model.weights())
        .map(|(y, w)| y * w)
        .sum::<f64>()
        .max(0.0)
        .sqrt()
}

/// Error-bound ingredients for one `(action, output dimension)` model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBound {
    pub action: usize,
    pub output_dim: usize,
    pub rkhs_norm: f64,
    /// True when `rkhs_norm` came from [`rkhs_norm_proxy`].
    pub rkhs_norm_estimated: bool,
    pub lambda: f64,
    pub info_gain: f64,
    /// Absent when `delta` is outside `(0, 1)` (explicit mode only).
    pub beta: Option<f64>,
}

/// User-facing knobs (`bounds.*` configuration keys).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsConfig {
    pub delta: f64,
    /// One norm bound per output dimension; estimated from data when `None`.
    pub rkhs_norms: Option<Vec<f64>>,
    pub mode: EpsilonMode,
    pub epsilon: Option<f64>,
}

/// Everything the abstraction needs from the error analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub delta: f64,
    pub sigma: f64,
    pub mode: EpsilonMode,
    pub epsilon: f64,
    pub models: Vec<ModelBound>,
}

impl BoundParams {
    /// Probability that all `n` per-dimension bounds hold together.
    pub fn confidence(&self, n: usize) -> f64 {
        dimension_confidence(self.delta, n)
    }
}

/// Computes `alpha`, `beta` per model and resolves `epsilon`.
pub fn resolve_bounds(
    config: &BoundsConfig,
    models: &[GpModel],
    sigma: f64,
    cells: &[Region],
    subgrid_k: usize,
) -> Result<BoundParams> {
    let derived = config.mode != EpsilonMode::Explicit;
    if !(0.0..1.0).contains(&config.delta) || (derived && config.delta == 0.0) {
        return Err(Error::Domain(format!(
            "bounds.delta = {} is outside {}",
            config.delta,
            if derived { "(0, 1)" } else { "[0, 1)" }
        )));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for m in models {
        let (rkhs_norm, estimated) = match &config.rkhs_norms {
            Some(list) => (
                *list.get(m.output_dim).ok_or_else(|| {
                    Error::Config(format!(
                        "bounds.B has {} entries but output dimension {} needs one",
                        list.len(),
                        m.output_dim
                    ))
                })?,
                false,
            ),
            None => (rkhs_norm_proxy(m), true),
        };
        let info_gain = information_gain(m);
        let beta = if config.delta > 0.0 {
            Some(beta(rkhs_norm, sigma, m.lambda, info_gain, config.delta)?)
        } else {
            None
        };
        per_model.push(ModelBound {
            action: m.action,
            output_dim: m.output_dim,
            rkhs_norm,
            rkhs_norm_estimated: estimated,
            lambda: m.lambda,
            info_gain,
            beta,
        });
    }
    let mut params = BoundParams {
        delta: config.delta,
        sigma,
        mode: config.mode,
        epsilon: config.epsilon.unwrap_or(0.0),
        models: per_model,
    };
    params.epsilon = epsilon_from_delta(&params, config.epsilon, models, cells, subgrid_k)?;
    Ok(params)
}

/// The abstraction margin for the configured mode.
///
/// Derived modes take the supremum of the posterior standard deviation over
/// every cell, for every model.
pub fn epsilon_from_delta(
    params: &BoundParams,
    explicit: Option<f64>,
    models: &[GpModel],
    cells: &[Region],
    subgrid_k: usize,
) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::State("no fitted models to derive epsilon from".into()));
    }
    let eps = match params.mode {
        EpsilonMode::Explicit => {
            let eps = explicit.ok_or_else(|| {
                Error::Config("bounds.epsilon is required when bounds.epsilon_mode = explicit".into())
            })?;
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("bounds.epsilon must be positive, got {eps}")));
            }
            return Ok(eps);
        }
        mode => {
            let mut eps: f64 = 0.0;
            for (m, b) in models.iter().zip(&params.models) {
                let beta = b.beta.ok_or_else(|| Error::State("beta missing for a derived epsilon".into()))?;
                let scale = if mode == EpsilonMode::DerivedLemma { beta } else { beta.sqrt() };
                let worst_var = cells
                    .par_iter()
                    .map(|q| m.var_max_over_box(q, subgrid_k))
                    .reduce(|| 0.0, f64::max);
                eps = eps.max(scale * worst_var.sqrt());
            }
            eps
        }
    };
    if eps < EPSILON_FLOOR {
        warn!("derived epsilon {eps:e} is below the floor; using {EPSILON_FLOOR:e}");
        return Ok(EPSILON_FLOOR);
    }
    Ok(eps)
}
