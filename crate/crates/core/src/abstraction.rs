//! Grid abstraction of the safe set into an interval MDP.
//!
//! Every grid cell becomes a state; everything outside the safe set collapses
//! into one absorbing unsafe state, which is always the last index. For a
//! cell `q`, action `a` and target `q'`, the transition interval is obtained
//! from a box `M` enclosing the GP mean image of `q`:
//!
//! * lower = `c` if `M` lies inside `q'` shrunk by `epsilon`, else 0;
//! * upper = 1 if `M` meets `q'` grown by `epsilon`, else `1 - c`,
//!
//! where `c = prod_i c_i` is the joint confidence that every output component
//! of the GP is within `epsilon` of the true dynamics over `q`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use log::warn;
use rayon::prelude::*;

use crate::bounds::{dimension_confidence, BoundParams};
use crate::error::{Error, Result};
use crate::geometry::{Interval, Region};
use crate::gp::GpModel;

const TOL: f64 = 1e-12;

/// Uniform partition of an axis-aligned safe box into cubes of side `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    safe_box: Region,
    side: f64,
    counts: Vec<usize>,
}

impl Grid {
    /// Cells are indexed row-major, last axis fastest.
    pub fn new(safe_box: Region, side: f64) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::Config(format!("grid.h must be positive, got {side}")));
        }
        let mut counts = Vec::with_capacity(safe_box.dim());
        for axis in 0..safe_box.dim() {
            let len = safe_box.hi()[axis] - safe_box.lo()[axis];
            let ratio = len / side;
            let count = ratio.round();
            if count < 1.0 || (ratio - count).abs() > 1e-9 * count.max(1.0) {
                return Err(Error::Config(format!(
                    "grid.safe_box axis {axis} has length {len}, which is not a positive integer multiple of h = {side}"
                )));
            }
            counts.push(count as usize);
        }
        Ok(Grid {
            safe_box,
            side,
            counts,
        })
    }

    pub fn safe_box(&self) -> &Region {
        &self.safe_box
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_cells(&self) -> usize {
        self.counts.iter().product()
    }

    /// Index of the absorbing unsafe state.
    pub fn unsafe_index(&self) -> usize {
        self.num_cells()
    }

    fn axis_bounds(&self, axis: usize, j: usize) -> (f64, f64) {
        let lo = self.safe_box.lo()[axis] + j as f64 * self.side;
        let hi = if j + 1 == self.counts[axis] {
            self.safe_box.hi()[axis]
        } else {
            self.safe_box.lo()[axis] + (j + 1) as f64 * self.side
        };
        (lo, hi)
    }

    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            out[axis] = index % self.counts[axis];
            index /= self.counts[axis];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.counts)
            .fold(0, |acc, (j, c)| acc * c + j)
    }

    pub fn cell(&self, index: usize) -> Region {
        let multi = self.multi_index(index);
        let (lo, hi) = multi
            .iter()
            .enumerate()
            .map(|(axis, &j)| self.axis_bounds(axis, j))
            .unzip();
        Region::new(lo, hi).expect("grid cells are well formed")
    }

    pub fn cells(&self) -> Vec<Region> {
        (0..self.num_cells()).map(|i| self.cell(i)).collect()
    }

    /// The cell containing `x`, or the unsafe index outside the safe box.
    /// Points on shared faces go to the higher cell, except on the upper boundary.
    pub fn locate(&self, x: &[f64]) -> usize {
        if !self.safe_box.contains_point(x) {
            return self.unsafe_index();
        }
        let multi: Vec<usize> = (0..self.dim())
            .map(|axis| {
                let j = ((x[axis] - self.safe_box.lo()[axis]) / self.side).floor() as usize;
                j.min(self.counts[axis] - 1)
            })
            .collect();
        self.flat_index(&multi)
    }

    /// Indices of cells whose `margin`-expansion intersects `b`.
    fn cells_meeting(&self, b: &Region, margin: f64) -> Vec<usize> {
        let mut ranges = Vec::with_capacity(self.dim());
        for axis in 0..self.dim() {
            let origin = self.safe_box.lo()[axis];
            let first = ((b.lo()[axis] - margin - origin) / self.side).floor() - 1.0;
            let last = ((b.hi()[axis] + margin - origin) / self.side).ceil() + 1.0;
            let count = self.counts[axis] as f64;
            let first = first.clamp(0.0, count) as usize;
            let last = last.clamp(-1.0, count - 1.0);
            if last < first as f64 {
                return Vec::new();
            }
            let kept: Vec<usize> = (first..=last as usize)
                .filter(|&j| {
                    let (lo, hi) = self.axis_bounds(axis, j);
                    lo - margin <= b.hi()[axis] && b.lo()[axis] <= hi + margin
                })
                .collect();
            if kept.is_empty() {
                return Vec::new();
            }
            ranges.push(kept);
        }
        let mut out = vec![Vec::new()];
        for r in &ranges {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<usize>| {
                    r.iter().map(move |&j| {
                        let mut p = prefix.clone();
                        p.push(j);
                        p
                    })
                })
                .collect();
        }
        let mut flat: Vec<usize> = out.iter().map(|m| self.flat_index(m)).collect();
        flat.sort_unstable();
        flat
    }
}

/// Lower and upper bound on one transition probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionInterval {
    pub lower: f64,
    pub upper: f64,
}

impl TransitionInterval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower > upper {
            return Err(Error::Soundness(format!(
                "invalid transition interval [{lower}, {upper}]"
            )));
        }
        Ok(TransitionInterval { lower, upper })
    }

    pub const ZERO: TransitionInterval = TransitionInterval { lower: 0.0, upper: 0.0 };
    pub const ONE: TransitionInterval = TransitionInterval { lower: 1.0, upper: 1.0 };

    pub fn contains(&self, other: &TransitionInterval) -> bool {
        self.lower <= other.lower && other.upper <= self.upper
    }
}

/// Bounds for reaching `target` when the mean image is enclosed by `image`.
///
/// `confidence` holds one per-dimension probability that the GP error stays
/// below `epsilon`; the uniform RKHS instantiation uses `1 - delta` for all.
pub fn transition_interval(
    image: &Region,
    target: &Region,
    epsilon: f64,
    confidence: &[f64],
) -> TransitionInterval {
    let c: f64 = confidence.iter().product();
    let lower = match target.shrink(epsilon) {
        Some(inner) if inner.contains_box(image) => c,
        _ => 0.0,
    };
    let upper = if target.expand(epsilon).intersects(image) {
        1.0
    } else {
        1.0 - c
    };
    TransitionInterval { lower, upper }
}

/// Bounds for leaving the safe set in one step.
pub fn unsafe_transition_interval(
    image: &Region,
    safe_box: &Region,
    epsilon: f64,
    confidence: &[f64],
) -> TransitionInterval {
    let stay = transition_interval(image, safe_box, epsilon, confidence);
    TransitionInterval {
        lower: 1.0 - stay.upper,
        upper: 1.0 - stay.lower,
    }
}

/// Box enclosing `{ mu^a(x) : x in cell }`, one GP per output dimension.
pub fn mean_image(models: &[&GpModel], cell: &Region, subgrid_k: usize) -> Result<Region> {
    let ranges: Vec<Interval> = models
        .iter()
        .map(|m| m.mean_range_over_box(cell, subgrid_k))
        .collect();
    Region::from_intervals(&ranges)
}

/// Models for `action` ordered by output dimension.
pub fn models_for_action(models: &[GpModel], action: usize, dim: usize) -> Result<Vec<&GpModel>> {
    (0..dim)
        .map(|i| {
            models
                .iter()
                .find(|m| m.action == action && m.output_dim == i)
                .ok_or_else(|| Error::State(format!("no model fitted for action {action}, output dimension {i}")))
        })
        .collect()
}

/// Outgoing intervals of one `(state, action)` pair.
///
/// Destinations not listed take `default` if they are safe cells and `[0, 0]`
/// if they are the unsafe state.
#[derive(Debug, Clone, PartialEq)]
pub struct ImdpRow {
    /// Sorted by destination index, no duplicates.
    pub entries: Vec<(usize, TransitionInterval)>,
    pub default: TransitionInterval,
}

impl ImdpRow {
    pub fn new(mut entries: Vec<(usize, TransitionInterval)>, default: TransitionInterval) -> Self {
        entries.sort_by_key(|(d, _)| *d);
        ImdpRow { entries, default }
    }

    pub fn absorbing(state: usize) -> Self {
        ImdpRow {
            entries: vec![(state, TransitionInterval::ONE)],
            default: TransitionInterval::ZERO,
        }
    }

    /// Interval towards `dest` in an IMDP with `num_safe` safe states.
    pub fn interval(&self, dest: usize, num_safe: usize) -> TransitionInterval {
        match self.entries.binary_search_by_key(&dest, |(d, _)| *d) {
            Ok(pos) => self.entries[pos].1,
            Err(_) if dest < num_safe => self.default,
            Err(_) => TransitionInterval::ZERO,
        }
    }

    /// Number of safe destinations covered by the default interval.
    pub fn default_count(&self, num_safe: usize) -> usize {
        num_safe - self.entries.iter().filter(|(d, _)| *d < num_safe).count()
    }

    /// `(sum of lowers, sum of uppers)` over all destinations.
    pub fn sums(&self, num_safe: usize) -> (f64, f64) {
        let k = self.default_count(num_safe) as f64;
        self.entries.iter().fold(
            (k * self.default.lower, k * self.default.upper),
            |(lo, hi), (_, t)| (lo + t.lower, hi + t.upper),
        )
    }

    /// Checks `sum lower <= 1 <= sum upper` and the per-entry ordering.
    pub fn check(&self, num_safe: usize) -> Result<()> {
        for (d, t) in &self.entries {
            if *d > num_safe {
                return Err(Error::Soundness(format!("destination {d} out of range")));
            }
            if !(0.0 <= t.lower && t.lower <= t.upper && t.upper <= 1.0) {
                return Err(Error::Soundness(format!("destination {d}: invalid interval [{}, {}]", t.lower, t.upper)));
            }
        }
        if self.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Soundness("row entries are not sorted and unique".into()));
        }
        let (lo, hi) = self.sums(num_safe);
        if lo > 1.0 + TOL || hi < 1.0 - TOL {
            return Err(Error::Soundness(format!(
                "row violates sum(lower) <= 1 <= sum(upper): sum(lower) = {lo}, sum(upper) = {hi}"
            )));
        }
        Ok(())
    }
}

/// Interval MDP over `num_safe` safe states plus one absorbing unsafe state.
#[derive(Debug, Clone, PartialEq)]
pub struct Imdp {
    num_safe: usize,
    num_actions: usize,
    /// Row `q * num_actions + a`.
    rows: Vec<ImdpRow>,
    pub dim: usize,
    pub delta: f64,
    pub epsilon: f64,
}

impl Imdp {
    /// `rows[q][a]` for the safe states only; unsafe rows are added here.
    pub fn new(num_safe: usize, num_actions: usize, safe_rows: Vec<Vec<ImdpRow>>) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::Config("an IMDP needs at least one action".into()));
        }
        if safe_rows.len() != num_safe {
            return Err(Error::Config(format!("{} rows given for {num_safe} safe states", safe_rows.len())));
        }
        let mut rows = Vec::with_capacity((num_safe + 1) * num_actions);
        for (q, per_action) in safe_rows.into_iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(Error::Config(format!("state {q} has {} actions, expected {num_actions}", per_action.len())));
            }
            rows.extend(per_action);
        }
        rows.extend((0..num_actions).map(|_| ImdpRow::absorbing(num_safe)));
        let imdp = Imdp {
            num_safe,
            num_actions,
            rows,
            dim: 0,
            delta: 0.0,
            epsilon: 0.0,
        };
        imdp.check()?;
        Ok(imdp)
    }

    pub fn num_safe(&self) -> usize {
        self.num_safe
    }

    pub fn num_states(&self) -> usize {
        self.num_safe + 1
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn unsafe_index(&self) -> usize {
        self.num_safe
    }

    pub fn row(&self, state: usize, action: usize) -> &ImdpRow {
        &self.rows[state * self.num_actions + action]
    }

    pub fn interval(&self, state: usize, action: usize, dest: usize) -> TransitionInterval {
        self.row(state, action).interval(dest, self.num_safe)
    }

    /// Validates every row, and that the unsafe state is absorbing.
    pub fn check(&self) -> Result<()> {
        for q in 0..self.num_states() {
            for a in 0..self.num_actions {
                self.row(q, a)
                    .check(self.num_safe)
                    .map_err(|e| Error::Soundness(format!("row (state {q}, action {a}): {e}")))?;
            }
        }
        let u = self.unsafe_index();
        for a in 0..self.num_actions {
            if *self.row(u, a) != ImdpRow::absorbing(u) {
                return Err(Error::Soundness(format!("unsafe state is not absorbing under action {a}")));
            }
        }
        Ok(())
    }
}

/// Abstraction-time settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbstractionSettings {
    pub subgrid_k: usize,
}

impl Default for AbstractionSettings {
    fn default() -> Self {
        AbstractionSettings { subgrid_k: 3 }
    }
}

fn build_row(
    grid: &Grid,
    image: &Region,
    epsilon: f64,
    confidence: &[f64],
    default: TransitionInterval,
) -> ImdpRow {
    let mut entries: Vec<(usize, TransitionInterval)> = grid
        .cells_meeting(image, epsilon)
        .into_iter()
        .map(|d| (d, transition_interval(image, &grid.cell(d), epsilon, confidence)))
        .filter(|(_, t)| *t != default)
        .collect();
    entries.push((
        grid.unsafe_index(),
        unsafe_transition_interval(image, grid.safe_box(), epsilon, confidence),
    ));
    ImdpRow::new(entries, default)
}

/// Builds the full IMDP. Rows are computed in parallel and assembled by index.
pub fn build_imdp(
    grid: &Grid,
    models: &[GpModel],
    num_actions: usize,
    bounds: &BoundParams,
    settings: AbstractionSettings,
) -> Result<Imdp> {
    let n = grid.dim();
    let eps = bounds.epsilon;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    if eps >= 0.5 * grid.side() {
        warn!(
            "epsilon {eps} >= h/2 = {}: every shrunk cell is empty, so all lower bounds to safe cells are 0",
            0.5 * grid.side()
        );
    }
    let per_action: Vec<Vec<&GpModel>> = (0..num_actions)
        .map(|a| models_for_action(models, a, n))
        .collect::<Result<_>>()?;
    let confidence = vec![1.0 - bounds.delta; n];
    let default = TransitionInterval {
        lower: 0.0,
        upper: 1.0 - dimension_confidence(bounds.delta, n),
    };
    let rows: Vec<Vec<ImdpRow>> = (0..grid.num_cells())
        .into_par_iter()
        .map(|q| {
            let cell = grid.cell(q);
            per_action
                .iter()
                .map(|ms| {
                    let image = mean_image(ms, &cell, settings.subgrid_k)?;
                    Ok(build_row(grid, &image, eps, &confidence, default))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    for (q, per_a) in rows.iter().enumerate() {
        for (a, row) in per_a.iter().enumerate() {
            if let Err(e) = row.check(grid.num_cells()) {
                return Err(Error::Soundness(format!("{e}; offending row (state {q}, action {a}): {row:?}")));
            }
        }
    }
    let mut imdp = Imdp::new(grid.num_cells(), num_actions, rows)?;
    imdp.dim = n;
    imdp.delta = bounds.delta;
    imdp.epsilon = eps;
    Ok(imdp)
}

const IMDP_MAGIC: &str = "gpverify-imdp v1";

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the text form.
///
/// ```text
/// gpverify-imdp v1
/// safe_states <m>
/// actions <|A|>
/// dim <n>
/// delta <delta>
/// epsilon <epsilon>
/// default <lo> <hi>
/// row_default <q> <a> <lo> <hi>     (only rows whose default differs)
/// <q> <a> <q'> <p_low> <p_high>     (one line per listed entry)
/// ```
/// The unsafe state is index `m`. Reals carry 17 significant digits.
pub fn export_imdp<W: Write>(imdp: &Imdp, mut sink: W) -> Result<()> {
    let global = most_common_default(imdp);
    writeln!(sink, "{IMDP_MAGIC}")?;
    writeln!(sink, "safe_states {}", imdp.num_safe)?;
    writeln!(sink, "actions {}", imdp.num_actions)?;
    writeln!(sink, "dim {}", imdp.dim)?;
    writeln!(sink, "delta {}", fmt17(imdp.delta))?;
    writeln!(sink, "epsilon {}", fmt17(imdp.epsilon))?;
    writeln!(sink, "default {} {}", fmt17(global.lower), fmt17(global.upper))?;
    let mut line = String::new();
    for q in 0..imdp.num_safe {
        for a in 0..imdp.num_actions {
            let d = imdp.row(q, a).default;
            if d != global {
                writeln!(sink, "row_default {q} {a} {} {}", fmt17(d.lower), fmt17(d.upper))?;
            }
        }
    }
    for q in 0..imdp.num_states() {
        for a in 0..imdp.num_actions {
            for (dest, t) in &imdp.row(q, a).entries {
                line.clear();
                write!(line, "{q} {a} {dest} {} {}", fmt17(t.lower), fmt17(t.upper)).unwrap();
                writeln!(sink, "{line}")?;
            }
        }
    }
    Ok(())
}

fn most_common_default(imdp: &Imdp) -> TransitionInterval {
    let mut seen: Vec<(TransitionInterval, usize)> = Vec::new();
    for q in 0..imdp.num_safe {
        for a in 0..imdp.num_actions {
            let d = imdp.row(q, a).default;
            match seen.iter_mut().find(|(t, _)| *t == d) {
                Some((_, c)) => *c += 1,
                None => seen.push((d, 1)),
            }
        }
    }
    seen.into_iter()
        .max_by_key(|(_, c)| *c)
        .map_or(TransitionInterval::ZERO, |(t, _)| t)
}

/// Reads the text form written by [`export_imdp`]. Rows of the unsafe state
/// may be omitted; when present they must be the `[1, 1]` self-loop.
pub fn import_imdp<R: BufRead>(source: R) -> Result<Imdp> {
    let mut header: Vec<(String, Vec<String>)> = Vec::new();
    let mut body: Vec<(usize, Vec<String>)> = Vec::new();
    let mut saw_magic = false;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !saw_magic {
            if t != IMDP_MAGIC {
                return Err(Error::parse(lineno, format!("missing `{IMDP_MAGIC}` header")));
            }
            saw_magic = true;
            continue;
        }
        let parts: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        if parts[0].chars().all(|c| c.is_ascii_digit()) {
            body.push((lineno, parts));
        } else if parts[0] == "row_default" {
            body.push((lineno, parts));
        } else {
            header.push((parts[0].clone(), parts[1..].to_vec()));
            if !body.is_empty() {
                return Err(Error::parse(lineno, "header line after transition entries"));
            }
        }
    }
    if !saw_magic {
        return Err(Error::parse(1, format!("missing `{IMDP_MAGIC}` header")));
    }
    let get = |key: &str| -> Result<&Vec<String>> {
        header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::parse(0, format!("missing header field `{key}`")))
    };
    let num = |lineno: usize, s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::parse(lineno, format!("invalid number `{s}`")))
    };
    let idx = |lineno: usize, s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::parse(lineno, format!("invalid index `{s}`")))
    };
    let one = |key: &str| -> Result<String> {
        let v = get(key)?;
        v.first()
            .cloned()
            .ok_or_else(|| Error::parse(0, format!("header field `{key}` has no value")))
    };
    let num_safe = idx(0, &one("safe_states")?)?;
    let num_actions = idx(0, &one("actions")?)?;
    let dim = idx(0, &one("dim")?)?;
    let delta = num(0, &one("delta")?)?;
    let epsilon = num(0, &one("epsilon")?)?;
    let d = get("default")?;
    if d.len() != 2 {
        return Err(Error::parse(0, "`default` takes two values"));
    }
    let global = TransitionInterval::new(num(0, &d[0])?, num(0, &d[1])?)
        .map_err(|e| Error::parse(0, e.to_string()))?;
    if num_actions == 0 {
        return Err(Error::parse(0, "`actions` must be positive"));
    }

    let mut defaults = vec![global; num_safe * num_actions];
    let mut entries: Vec<Vec<(usize, TransitionInterval)>> = vec![Vec::new(); (num_safe + 1) * num_actions];
    for (lineno, parts) in body {
        if parts[0] == "row_default" {
            if parts.len() != 5 {
                return Err(Error::parse(lineno, "row_default takes q a lo hi"));
            }
            let (q, a) = (idx(lineno, &parts[1])?, idx(lineno, &parts[2])?);
            if q >= num_safe || a >= num_actions {
                return Err(Error::parse(lineno, "row_default index out of range"));
            }
            defaults[q * num_actions + a] = TransitionInterval::new(num(lineno, &parts[3])?, num(lineno, &parts[4])?)
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
            continue;
        }
        if parts.len() != 5 {
            return Err(Error::parse(lineno, format!("expected `q a q' p_low p_high`, found {} fields", parts.len())));
        }
        let (q, a, dest) = (idx(lineno, &parts[0])?, idx(lineno, &parts[1])?, idx(lineno, &parts[2])?);
        if q > num_safe || a >= num_actions || dest > num_safe {
            return Err(Error::parse(lineno, "state or action index out of range"));
        }
        let t = TransitionInterval::new(num(lineno, &parts[3])?, num(lineno, &parts[4])?)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        let row = &mut entries[q * num_actions + a];
        if row.iter().any(|(d, _)| *d == dest) {
            return Err(Error::parse(lineno, format!("duplicate entry for ({q}, {a}, {dest})")));
        }
        row.push((dest, t));
    }
    let u = num_safe;
    for a in 0..num_actions {
        let row = &mut entries[u * num_actions + a];
        if row.is_empty() {
            row.push((u, TransitionInterval::ONE));
        } else if row.as_slice() != [(u, TransitionInterval::ONE)] {
            return Err(Error::parse(0, format!("unsafe state must be absorbing under action {a}")));
        }
    }
    let safe_rows: Vec<Vec<ImdpRow>> = (0..num_safe)
        .map(|q| {
            (0..num_actions)
                .map(|a| ImdpRow::new(std::mem::take(&mut entries[q * num_actions + a]), defaults[q * num_actions + a]))
                .collect()
        })
        .collect();
    let mut imdp = Imdp::new(num_safe, num_actions, safe_rows)?;
    imdp.dim = dim;
    imdp.delta = delta;
    imdp.epsilon = epsilon;
    Ok(imdp)
}
