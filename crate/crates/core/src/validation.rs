//! Independent checks of the pipeline: Monte Carlo simulation of the true
//! system, an exhaustive oracle for small IMDPs, and an empirical check of
//! individual transition intervals.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::abstraction::{Imdp, ImdpRow, TransitionInterval};
use crate::dynamics::{sample_noise, SystemSpec};
use crate::error::{Error, Result};
use crate::geometry::Region;

/// Default two-sided confidence of the Clopper–Pearson intervals.
pub const DEFAULT_CONFIDENCE: f64 = 0.99;

/// Exact binomial (Clopper–Pearson) interval for `successes` out of `trials`.
pub fn clopper_pearson(successes: usize, trials: usize, confidence: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::Domain(format!("invalid binomial count {successes}/{trials}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let alpha = 1.0 - confidence;
    let (k, n) = (successes as f64, trials as f64);
    let beta = |a: f64, b: f64| Beta::new(a, b).map_err(|e| Error::Numeric(format!("beta distribution: {e}")));
    let lo = if successes == 0 {
        0.0
    } else {
        beta(k, n - k + 1.0)?.inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        beta(k + 1.0, n - k)?.inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lo, hi))
}

/// Estimated probability with its confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McResult {
    pub successes: usize,
    pub trials: usize,
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl McResult {
    pub fn from_counts(successes: usize, trials: usize, confidence: f64) -> Result<Self> {
        let (ci_low, ci_high) = clopper_pearson(successes, trials, confidence)?;
        let point_estimate = successes as f64 / trials as f64;
        Ok(McResult {
            successes,
            trials,
            point_estimate,
            ci_low: ci_low.min(point_estimate),
            ci_high: ci_high.max(point_estimate),
        })
    }

    pub const CSV_HEADER: &'static str = "successes,trials,point_estimate,ci_low,ci_high";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.successes, self.trials, self.point_estimate, self.ci_low, self.ci_high
        )
    }

    /// True if `[lo, hi]` meets the confidence interval.
    pub fn meets(&self, lo: f64, hi: f64) -> bool {
        self.ci_low <= hi && lo <= self.ci_high
    }
}

impl fmt::Display for McResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{} = {:.4} [{:.4}, {:.4}]",
            self.successes, self.trials, self.point_estimate, self.ci_low, self.ci_high
        )
    }
}

/// Picks an action from the observations seen so far (oldest first).
pub type Strategy<'a> = dyn Fn(&[Vec<f64>], &mut ChaCha8Rng) -> usize + Sync + 'a;

/// Always plays `action`.
pub fn constant_strategy(action: usize) -> impl Fn(&[Vec<f64>], &mut ChaCha8Rng) -> usize + Sync {
    move |_, _| action
}

/// Plays a uniformly random action at every step.
pub fn uniform_random_strategy(num_actions: usize) -> impl Fn(&[Vec<f64>], &mut ChaCha8Rng) -> usize + Sync {
    move |_, rng| rng.random_range(0..num_actions)
}

/// Monte Carlo settings shared by the simulation routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub horizon: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    pub confidence: f64,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Fraction of trajectories from `x0` that stay in `safe_box` for steps
/// `0..=horizon`. The state evolves by the noise-free map; the strategy sees
/// observations `x(k) + v(k)`. Trials are independent of the thread count.
pub fn monte_carlo_safety(
    spec: &SystemSpec,
    safe_box: &Region,
    x0: &[f64],
    strategy: &Strategy<'_>,
    settings: McSettings,
) -> Result<McResult> {
    if settings.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if x0.len() != spec.dim() || safe_box.dim() != spec.dim() {
        return Err(Error::Config("initial state, safe box and system dimensions differ".into()));
    }
    let n = spec.dim();
    let outcomes: Vec<bool> = (0..settings.trials)
        .into_par_iter()
        .map(|trial| -> Result<bool> {
            let mut rng = trial_rng(settings.seed, trial);
            let mut x = x0.to_vec();
            let mut history = Vec::with_capacity(settings.horizon + 1);
            for k in 0..=settings.horizon {
                if !safe_box.contains_point(&x) {
                    return Ok(false);
                }
                if k == settings.horizon {
                    break;
                }
                let v = sample_noise(&mut rng, settings.sigma, n);
                history.push(x.iter().zip(&v).map(|(a, b)| a + b).collect());
                let a = strategy(&history, &mut rng);
                x = spec.step_true(&x, a)?;
            }
            Ok(true)
        })
        .collect::<Result<_>>()?;
    let successes = outcomes.iter().filter(|&&s| s).count();
    McResult::from_counts(successes, settings.trials, settings.confidence)
}

/// Largest instance accepted by [`enumerate_extreme_adversaries`].
pub const ORACLE_MAX_STATES: usize = 5;
pub const ORACLE_MAX_ACTIONS: usize = 2;
pub const ORACLE_MAX_HORIZON: usize = 5;

/// All vertices of `{p : lo <= p <= hi, sum p = 1}`: every coordinate but one
/// sits on a bound and the free one takes the remaining mass.
fn polytope_vertices(bounds: &[TransitionInterval]) -> Vec<Vec<f64>> {
    let n = bounds.len();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for free in 0..n {
        for mask in 0..(1usize << (n - 1)) {
            let mut p = vec![0.0; n];
            let mut bit = 0;
            let mut rest = 0.0;
            for (i, b) in bounds.iter().enumerate() {
                if i == free {
                    continue;
                }
                p[i] = if mask >> bit & 1 == 1 { b.upper } else { b.lower };
                rest += p[i];
                bit += 1;
            }
            p[free] = 1.0 - rest;
            if bounds[free].lower <= p[free] && p[free] <= bounds[free].upper && !out.contains(&p) {
                out.push(p);
            }
        }
    }
    out
}

/// Exact lower and upper safety values by brute force: at every step the
/// strategy ranges over all actions and nature over all polytope vertices.
/// Backward induction over `(state, step)` covers history-dependent choices
/// because both players act on the current state only through the future.
pub fn enumerate_extreme_adversaries(imdp: &Imdp, horizon: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if imdp.num_states() > ORACLE_MAX_STATES
        || imdp.num_actions() > ORACLE_MAX_ACTIONS
        || horizon > ORACLE_MAX_HORIZON
    {
        return Err(Error::Size(format!(
            "oracle limited to {ORACLE_MAX_STATES} states, {ORACLE_MAX_ACTIONS} actions and horizon {ORACLE_MAX_HORIZON}; got {} states, {} actions, horizon {horizon}",
            imdp.num_states(),
            imdp.num_actions()
        )));
    }
    let ns = imdp.num_states();
    let vertices: Vec<Vec<Vec<Vec<f64>>>> = (0..ns)
        .map(|q| {
            (0..imdp.num_actions())
                .map(|a| {
                    let bounds: Vec<TransitionInterval> = (0..ns).map(|d| imdp.interval(q, a, d)).collect();
                    polytope_vertices(&bounds)
                })
                .collect()
        })
        .collect();
    let mut lower = vec![1.0; ns];
    lower[imdp.unsafe_index()] = 0.0;
    let mut upper = lower.clone();
    for _ in 0..horizon {
        let mut next_lo = vec![0.0; ns];
        let mut next_hi = vec![0.0; ns];
        for q in 0..ns {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for per_action in &vertices[q] {
                for p in per_action {
                    let vl: f64 = p.iter().zip(&lower).map(|(a, b)| a * b).sum();
                    let vh: f64 = p.iter().zip(&upper).map(|(a, b)| a * b).sum();
                    lo = lo.min(vl);
                    hi = hi.max(vh);
                }
            }
            next_lo[q] = lo;
            next_hi[q] = hi;
        }
        lower = next_lo;
        upper = next_hi;
    }
    Ok((lower, upper))
}

/// Interval endpoints of the exhaustive test family.
pub const ENDPOINTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn random_interval<R: Rng>(rng: &mut R) -> TransitionInterval {
    let a = ENDPOINTS[rng.random_range(0..ENDPOINTS.len())];
    let b = ENDPOINTS[rng.random_range(0..ENDPOINTS.len())];
    TransitionInterval {
        lower: a.min(b),
        upper: a.max(b),
    }
}

/// A random well-formed IMDP with `1..=max_safe` safe states, `1..=max_actions`
/// actions and endpoints in [`ENDPOINTS`]. About a third of the rows use a
/// non-trivial default interval for unlisted safe destinations.
pub fn random_endpoint_imdp<R: Rng>(rng: &mut R, max_safe: usize, max_actions: usize) -> Imdp {
    let num_safe = rng.random_range(1..=max_safe);
    let num_actions = rng.random_range(1..=max_actions);
    let rows = (0..num_safe)
        .map(|_| {
            (0..num_actions)
                .map(|_| loop {
                    let default = if rng.random_bool(1.0 / 3.0) {
                        random_interval(rng)
                    } else {
                        TransitionInterval::ZERO
                    };
                    let entries: Vec<(usize, TransitionInterval)> = (0..=num_safe)
                        .filter_map(|d| {
                            let t = random_interval(rng);
                            let implied = if d < num_safe { default } else { TransitionInterval::ZERO };
                            (t != implied).then_some((d, t))
                        })
                        .collect();
                    let row = ImdpRow::new(entries, default);
                    if row.check(num_safe).is_ok() {
                        break row;
                    }
                })
                .collect()
        })
        .collect();
    Imdp::new(num_safe, num_actions, rows).expect("rows are checked")
}

/// Where a transition should land.
#[derive(Debug, Clone, PartialEq)]
pub enum Destination {
    /// Inside this cell.
    Cell(Region),
    /// Outside this box (the unsafe state).
    Outside(Region),
}

impl Destination {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Destination::Cell(r) => r.contains_point(x),
            Destination::Outside(r) => !r.contains_point(x),
        }
    }
}

/// Smallest and largest per-state estimate of `Pr(f(x, a) + v in dest)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionEnvelope {
    pub min: McResult,
    pub max: McResult,
}

impl TransitionEnvelope {
    /// Statistical containment in `interval`. A violation needs evidence:
    /// the minimum estimate is confidently below the lower bound, or the
    /// maximum estimate is confidently above the upper bound.
    pub fn consistent_with(&self, interval: &TransitionInterval) -> bool {
        self.min.ci_high >= interval.lower && self.max.ci_low <= interval.upper
    }
}

/// Samples `samples_x` states uniformly in `cell` and for each one estimates
/// the probability of landing in `dest` from `noise_draws` noise draws.
pub fn empirical_transition_check(
    spec: &SystemSpec,
    cell: &Region,
    action: usize,
    dest: &Destination,
    sigma: f64,
    samples_x: usize,
    noise_draws: usize,
    seed: u64,
    confidence: f64,
) -> Result<TransitionEnvelope> {
    if samples_x == 0 || noise_draws == 0 {
        return Err(Error::Config("samples_x and noise_draws must be at least 1".into()));
    }
    let n = spec.dim();
    let counts: Vec<usize> = (0..samples_x)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut rng = trial_rng(seed, i);
            let x: Vec<f64> = (0..n)
                .map(|d| {
                    if cell.hi()[d] > cell.lo()[d] {
                        rng.random_range(cell.lo()[d]..cell.hi()[d])
                    } else {
                        cell.lo()[d]
                    }
                })
                .collect();
            let fx = spec.step_true(&x, action)?;
            let mut hits = 0;
            for _ in 0..noise_draws {
                let v = sample_noise(&mut rng, sigma, n);
                let y: Vec<f64> = fx.iter().zip(&v).map(|(a, b)| a + b).collect();
                if dest.contains(&y) {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    let lo = *counts.iter().min().expect("samples_x >= 1");
    let hi = *counts.iter().max().expect("samples_x >= 1");
    Ok(TransitionEnvelope {
        min: McResult::from_counts(lo, noise_draws, confidence)?,
        max: McResult::from_counts(hi, noise_draws, confidence)?,
    })
}
