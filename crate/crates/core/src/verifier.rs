//! Interval value iteration for safety probabilities.
//!
//! The lower bound `p_min` assumes a controller that picks the worst action
//! and a nature that picks the worst distribution; the upper bound `p_max`
//! takes the best action and the best distribution. Starting from 1 on safe
//! states and 0 on the unsafe state, each iteration solves one linear program
//! per `(state, action)` over the interval polytope, which the greedy budget
//! allocation in [`o_optimize`] solves exactly.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::abstraction::{Imdp, ImdpRow};
use crate::error::{Error, Result};

/// Default convergence tolerance for the infinite horizon.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Iteration cap for the infinite horizon.
pub const MAX_ITERATIONS: usize = 100_000;

/// Number of steps the system must remain safe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(t) => write!(f, "{t}"),
            Horizon::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" | "∞" => Ok(Horizon::Infinite),
            t => t
                .parse::<usize>()
                .map(Horizon::Finite)
                .map_err(|_| Error::Config(format!("horizon must be a non-negative integer or `inf`, got `{s}`"))),
        }
    }
}

/// Per-state bounds on the probability of remaining safe.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyBounds {
    pub horizon: Horizon,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Tolerance used for the infinite horizon.
    pub tol: Option<f64>,
}

impl SafetyBounds {
    fn initial(imdp: &Imdp, horizon: Horizon) -> Self {
        let mut ones = vec![1.0; imdp.num_states()];
        ones[imdp.unsafe_index()] = 0.0;
        SafetyBounds {
            horizon,
            lower: ones.clone(),
            upper: ones,
            iterations_run: 0,
            converged: true,
            tol: None,
        }
    }

    pub fn num_states(&self) -> usize {
        self.lower.len()
    }
}

fn order_by(values: &[f64], maximize: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        let by_value = if maximize {
            values[j].total_cmp(&values[i])
        } else {
            values[i].total_cmp(&values[j])
        };
        by_value.then(i.cmp(&j))
    });
    order
}

/// Core allocation. `order` lists every state, best first. Calls `record`
/// with each destination's final probability when `record` is given and
/// returns the expected value.
fn allocate(
    values: &[f64],
    row: &ImdpRow,
    num_safe: usize,
    order: Option<&[usize]>,
    maximize: bool,
    mut record: Option<&mut Vec<f64>>,
) -> f64 {
    let default_count = row.default_count(num_safe);
    let default_cap = row.default.upper - row.default.lower;
    let (sum_lower, _) = row.sums(num_safe);
    let mut budget = (1.0 - sum_lower).max(0.0);

    let mut value = 0.0;
    if let Some(dist) = record.as_deref_mut() {
        dist.clear();
        dist.resize(values.len(), 0.0);
        if row.default.lower > 0.0 {
            dist[..num_safe].fill(row.default.lower);
        }
        for (d, t) in &row.entries {
            dist[*d] = t.lower;
        }
    }
    if row.default.lower > 0.0 && default_count > 0 {
        for (q, &v) in values.iter().enumerate().take(num_safe) {
            if row.entries.binary_search_by_key(&q, |(d, _)| *d).is_err() {
                value += row.default.lower * v;
            }
        }
    }
    for (d, t) in &row.entries {
        value += t.lower * values[*d];
    }

    let mut give = |d: usize, cap: f64, budget: &mut f64, value: &mut f64| {
        let extra = cap.min(*budget);
        if extra > 0.0 {
            *budget -= extra;
            *value += extra * values[d];
            if let Some(dist) = record.as_deref_mut() {
                dist[d] += extra;
            }
        }
    };

    if default_count == 0 || default_cap <= 0.0 {
        let mut listed: Vec<(usize, f64)> = row.entries.iter().map(|(d, t)| (*d, t.upper - t.lower)).collect();
        listed.sort_by(|a, b| {
            let by_value = if maximize {
                values[b.0].total_cmp(&values[a.0])
            } else {
                values[a.0].total_cmp(&values[b.0])
            };
            by_value.then(a.0.cmp(&b.0))
        });
        for (d, cap) in listed {
            if budget <= 0.0 {
                break;
            }
            give(d, cap, &mut budget, &mut value);
        }
    } else {
        let owned;
        let order = match order {
            Some(o) => o,
            None => {
                owned = order_by(values, maximize);
                &owned
            }
        };
        for &d in order {
            if budget <= 0.0 {
                break;
            }
            let t = row.interval(d, num_safe);
            give(d, t.upper - t.lower, &mut budget, &mut value);
        }
    }
    value
}

/// Exact optimum of `sum_d p(d) values[d]` over the distributions allowed by
/// `row`, together with an optimal distribution over all `values.len()` states.
///
/// Ties in value are broken by ascending state index.
pub fn o_optimize(values: &[f64], row: &ImdpRow, num_safe: usize, maximize: bool) -> Result<(Vec<f64>, f64)> {
    if values.len() != num_safe + 1 {
        return Err(Error::Config(format!(
            "value vector has {} entries, expected {}",
            values.len(),
            num_safe + 1
        )));
    }
    row.check(num_safe)?;
    let mut dist = Vec::new();
    let value = allocate(values, row, num_safe, None, maximize, Some(&mut dist));
    Ok((dist, value))
}

/// One synchronous update of both bounds.
pub fn bellman_step(imdp: &Imdp, prev_lower: &[f64], prev_upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = imdp.num_safe();
    let asc = order_by(prev_lower, false);
    let desc = order_by(prev_upper, true);
    let pairs: Vec<(f64, f64)> = (0..imdp.num_states())
        .into_par_iter()
        .map(|q| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for a in 0..imdp.num_actions() {
                let row = imdp.row(q, a);
                lo = lo.min(allocate(prev_lower, row, m, Some(&asc), false, None));
                hi = hi.max(allocate(prev_upper, row, m, Some(&desc), true, None));
            }
            (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0))
        })
        .collect();
    pairs.into_iter().unzip()
}

/// Bounds after `t` steps. `observe` sees the vectors after every step,
/// starting with step 0.
pub fn verify_finite_observed(
    imdp: &Imdp,
    t: usize,
    mut observe: impl FnMut(usize, &[f64], &[f64]),
) -> SafetyBounds {
    let mut b = SafetyBounds::initial(imdp, Horizon::Finite(t));
    observe(0, &b.lower, &b.upper);
    for k in 1..=t {
        let (lo, hi) = bellman_step(imdp, &b.lower, &b.upper);
        b.lower = lo;
        b.upper = hi;
        b.iterations_run = k;
        observe(k, &b.lower, &b.upper);
    }
    b
}

/// Bounds after `t` steps.
pub fn verify_finite(imdp: &Imdp, t: usize) -> SafetyBounds {
    verify_finite_observed(imdp, t, |_, _, _| {})
}

/// Iterates until the largest change of either vector is below `tol`.
/// Stops after `max_iterations` with `converged = false`.
pub fn verify_infinite(imdp: &Imdp, tol: f64, max_iterations: usize) -> Result<SafetyBounds> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut b = SafetyBounds::initial(imdp, Horizon::Infinite);
    b.tol = Some(tol);
    b.converged = false;
    for k in 1..=max_iterations {
        let (lo, hi) = bellman_step(imdp, &b.lower, &b.upper);
        let change = lo
            .iter()
            .zip(&b.lower)
            .chain(hi.iter().zip(&b.upper))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        b.lower = lo;
        b.upper = hi;
        b.iterations_run = k;
        if change < tol {
            b.converged = true;
            return Ok(b);
        }
    }
    warn!("value iteration did not converge to tolerance {tol} within {max_iterations} iterations");
    Ok(b)
}

/// Dispatches on the horizon.
pub fn verify(imdp: &Imdp, horizon: Horizon, tol: f64) -> Result<SafetyBounds> {
    match horizon {
        Horizon::Finite(t) => Ok(verify_finite(imdp, t)),
        Horizon::Infinite => verify_infinite(imdp, tol, MAX_ITERATIONS),
    }
}

/// Writes `state_index,p_min,p_max` preceded by `# key=value` metadata lines.
/// `extra` is appended to the metadata (for example the run configuration).
pub fn write_results_csv<W: Write>(bounds: &SafetyBounds, extra: &[(String, String)], mut sink: W) -> Result<()> {
    writeln!(sink, "# horizon={}", bounds.horizon)?;
    if let Some(tol) = bounds.tol {
        writeln!(sink, "# tol={tol}")?;
    }
    writeln!(sink, "# iterations={}", bounds.iterations_run)?;
    writeln!(sink, "# converged={}", bounds.converged)?;
    for (k, v) in extra {
        writeln!(sink, "# {k}={v}")?;
    }
    writeln!(sink, "state_index,p_min,p_max")?;
    for (i, (lo, hi)) in bounds.lower.iter().zip(&bounds.upper).enumerate() {
        writeln!(sink, "{i},{lo},{hi}")?;
    }
    Ok(())
}

/// Reads the output of [`write_results_csv`]; metadata keys other than the
/// verifier's own are returned separately.
pub fn read_results_csv<R: BufRead>(source: R) -> Result<(SafetyBounds, Vec<(String, String)>)> {
    let mut meta: Vec<(String, String)> = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut saw_header = false;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if !saw_header {
            if t != "state_index,p_min,p_max" {
                return Err(Error::parse(lineno, "expected header `state_index,p_min,p_max`"));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("invalid state index `{}`", fields[0])))?;
        if idx != lower.len() {
            return Err(Error::parse(lineno, format!("state index {idx} out of order")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(lineno, format!("invalid probability `{s}`")))
        };
        lower.push(num(fields[1])?);
        upper.push(num(fields[2])?);
    }
    if !saw_header {
        return Err(Error::parse(1, "missing header `state_index,p_min,p_max`"));
    }
    let take = |key: &str, meta: &mut Vec<(String, String)>| -> Option<String> {
        meta.iter().position(|(k, _)| k == key).map(|p| meta.remove(p).1)
    };
    let horizon = take("horizon", &mut meta)
        .ok_or_else(|| Error::parse(0, "missing `# horizon=` metadata"))?
        .parse()?;
    let tol = take("tol", &mut meta)
        .map(|s| s.parse::<f64>().map_err(|_| Error::parse(0, "invalid tol")))
        .transpose()?;
    let iterations_run = take("iterations", &mut meta)
        .map(|s| s.parse::<usize>().map_err(|_| Error::parse(0, "invalid iterations")))
        .transpose()?
        .unwrap_or(0);
    let converged = take("converged", &mut meta)
        .map(|s| s.parse::<bool>().map_err(|_| Error::parse(0, "invalid converged flag")))
        .transpose()?
        .unwrap_or(true);
    Ok((
        SafetyBounds {
            horizon,
            lower,
            upper,
            iterations_run,
            converged,
            tol,
        },
        meta,
    ))
}

/// Compares two bound vectors exactly; used by tests and audits.
pub fn first_mismatch(a: &[f64], b: &[f64]) -> Option<(usize, f64, f64)> {
    a.iter()
        .zip(b)
        .enumerate()
        .find(|(_, (x, y))| x.partial_cmp(y) != Some(Ordering::Equal))
        .map(|(i, (x, y))| (i, *x, *y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::TransitionInterval;

    fn ti(lo: f64, hi: f64) -> TransitionInterval {
        TransitionInterval::new(lo, hi).unwrap()
    }

    fn chain() -> Imdp {
        let row = ImdpRow::new(vec![(0, ti(0.8, 0.9)), (1, ti(0.1, 0.2))], TransitionInterval::ZERO);
        Imdp::new(1, 1, vec![vec![row]]).unwrap()
    }

    #[test]
    fn o_optimize_example() {
        let row = ImdpRow::new(
            vec![(0, ti(0.2, 0.6)), (1, ti(0.2, 0.6)), (2, ti(0.2, 0.6))],
            TransitionInterval::ZERO,
        );
        let (dist, v) = o_optimize(&[1.0, 0.5, 0.0], &row, 2, true).unwrap();
        let expect = [0.6, 0.2, 0.2];
        for (d, e) in dist.iter().zip(expect) {
            assert!((d - e).abs() < 1e-15);
        }
        assert!((v - 0.7).abs() < 1e-15);
        let (dist, v) = o_optimize(&[1.0, 0.5, 0.0], &row, 2, false).unwrap();
        assert!((dist[2] - 0.6).abs() < 1e-15);
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn o_optimize_degenerate_row() {
        let row = ImdpRow::new(vec![(0, ti(0.25, 0.25)), (1, ti(0.75, 0.75))], TransitionInterval::ZERO);
        for values in [[0.0, 1.0], [1.0, 0.0], [0.3, 0.3]] {
            for maximize in [true, false] {
                let (dist, _) = o_optimize(&values, &row, 1, maximize).unwrap();
                assert_eq!(dist, vec![0.25, 0.75]);
            }
        }
    }

    #[test]
    fn o_optimize_ties_go_to_lower_index() {
        let row = ImdpRow::new(vec![(0, ti(0.0, 1.0)), (1, ti(0.0, 1.0))], TransitionInterval::ZERO);
        let (dist, _) = o_optimize(&[0.5, 0.5], &row, 1, true).unwrap();
        assert_eq!(dist, vec![1.0, 0.0]);
        let (dist, _) = o_optimize(&[0.5, 0.5], &row, 1, false).unwrap();
        assert_eq!(dist, vec![1.0, 0.0]);
    }

    #[test]
    fn o_optimize_with_default_capacity() {
        // four safe states, all unlisted safe destinations may take up to 0.5
        let row = ImdpRow::new(vec![(1, ti(0.5, 0.5)), (4, ti(0.0, 0.5))], ti(0.0, 0.5));
        let values = [0.1, 0.9, 0.4, 0.7, 0.0];
        let (dist, v) = o_optimize(&values, &row, 4, true).unwrap();
        assert_eq!(dist, vec![0.0, 0.5, 0.0, 0.5, 0.0]);
        assert!((v - 0.8).abs() < 1e-15);
        let (dist, v) = o_optimize(&values, &row, 4, false).unwrap();
        assert_eq!(dist, vec![0.0, 0.5, 0.0, 0.0, 0.5]);
        assert!((v - 0.45).abs() < 1e-15);
    }

    #[test]
    fn o_optimize_rejects_ill_formed_rows() {
        let row = ImdpRow::new(vec![(0, ti(0.1, 0.2)), (1, ti(0.1, 0.2))], TransitionInterval::ZERO);
        assert!(matches!(o_optimize(&[1.0, 0.0], &row, 1, true), Err(Error::Soundness(_))));
    }

    #[test]
    fn bellman_on_chain() {
        let imdp = chain();
        let (lo, hi) = bellman_step(&imdp, &[1.0, 0.0], &[1.0, 0.0]);
        assert_eq!(lo, vec![0.8, 0.0]);
        assert_eq!(hi, vec![0.9, 0.0]);
    }

    #[test]
    fn finite_horizon_chain() {
        let imdp = chain();
        let b = verify_finite(&imdp, 0);
        assert_eq!((b.lower.clone(), b.upper.clone()), (vec![1.0, 0.0], vec![1.0, 0.0]));
        let b = verify_finite(&imdp, 2);
        assert!((b.lower[0] - 0.64).abs() < 1e-15);
        assert!((b.upper[0] - 0.81).abs() < 1e-15);
        assert_eq!(b.lower[1], 0.0);
        assert_eq!(b.upper[1], 0.0);
    }

    #[test]
    fn infinite_horizon_cases() {
        let to_unsafe = ImdpRow::new(vec![(2, ti(1.0, 1.0))], TransitionInterval::ZERO);
        let imdp = Imdp::new(2, 1, vec![vec![to_unsafe.clone()], vec![to_unsafe]]).unwrap();
        let b = verify_infinite(&imdp, DEFAULT_TOL, MAX_ITERATIONS).unwrap();
        assert!(b.converged);
        assert_eq!(b.lower, vec![0.0; 3]);
        assert_eq!(b.upper, vec![0.0; 3]);
        assert!(b.iterations_run <= 2);

        let stay = ImdpRow::new(vec![(0, ti(1.0, 1.0))], TransitionInterval::ZERO);
        let imdp = Imdp::new(1, 1, vec![vec![stay]]).unwrap();
        let b = verify_infinite(&imdp, DEFAULT_TOL, MAX_ITERATIONS).unwrap();
        assert!(b.converged);
        assert_eq!(b.lower[0], 1.0);
        assert_eq!(b.upper[0], 1.0);

        let decay = ImdpRow::new(vec![(0, ti(0.9, 0.9)), (1, ti(0.1, 0.1))], TransitionInterval::ZERO);
        let imdp = Imdp::new(1, 1, vec![vec![decay]]).unwrap();
        let b = verify_infinite(&imdp, DEFAULT_TOL, MAX_ITERATIONS).unwrap();
        assert!(b.converged);
        assert!(b.lower[0] < 1e-5 && b.upper[0] < 1e-5);
        assert_eq!(b.lower[0], b.upper[0]);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let decay = ImdpRow::new(vec![(0, ti(0.9, 0.9)), (1, ti(0.1, 0.1))], TransitionInterval::ZERO);
        let imdp = Imdp::new(1, 1, vec![vec![decay]]).unwrap();
        let b = verify_infinite(&imdp, 1e-12, 5).unwrap();
        assert!(!b.converged);
        assert_eq!(b.iterations_run, 5);
    }

    #[test]
    fn min_strategy_and_max_strategy() {
        // action 0 stays safe surely, action 1 leaves surely
        let stay = ImdpRow::new(vec![(0, ti(1.0, 1.0))], TransitionInterval::ZERO);
        let leave = ImdpRow::new(vec![(1, ti(1.0, 1.0))], TransitionInterval::ZERO);
        let imdp = Imdp::new(1, 2, vec![vec![stay, leave]]).unwrap();
        let b = verify_finite(&imdp, 3);
        assert_eq!(b.lower[0], 0.0);
        assert_eq!(b.upper[0], 1.0);
    }

    #[test]
    fn horizon_parsing() {
        assert_eq!("10".parse::<Horizon>().unwrap(), Horizon::Finite(10));
        assert_eq!("inf".parse::<Horizon>().unwrap(), Horizon::Infinite);
        assert!("-1".parse::<Horizon>().is_err());
        assert_eq!(Horizon::Infinite.to_string(), "inf");
    }

    #[test]
    fn results_csv_round_trip() {
        let mut b = verify_finite(&chain(), 3);
        b.lower[0] = 0.1 + 0.2;
        let extra = vec![("epsilon".to_string(), "0.12".to_string())];
        let mut buf = Vec::new();
        write_results_csv(&b, &extra, &mut buf).unwrap();
        let (back, meta) = read_results_csv(&buf[..]).unwrap();
        assert_eq!(back, b);
        assert_eq!(meta, extra);
        assert!(first_mismatch(&back.lower, &b.lower).is_none());
    }
}
