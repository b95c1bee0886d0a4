//! Gaussian-process regression with a squared-exponential kernel.
//!
//! One [`GpModel`] is trained per (action, output dimension). Besides the
//! posterior mean and variance it provides certified enclosures of the mean
//! and of the variance over axis-aligned boxes, which the abstraction needs
//! to evaluate indicator conditions on whole cells.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::DataSet;
use crate::error::{Error, Result};
use crate::geometry::{Interval, Region};

const FRAC_1_SQRT_E: f64 = 0.606_530_659_712_633_4;
const INV_E: f64 = 0.367_879_441_171_442_3;

/// Isotropic squared-exponential kernel `s^2 exp(-|x - x'|^2 / (2 l^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeKernelParams {
    pub signal_variance: f64,
    pub lengthscale: f64,
}

impl SeKernelParams {
    pub fn new(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(signal_variance) || !ok(lengthscale) {
            return Err(Error::Config(format!(
                "kernel parameters must be positive and finite (signal variance {signal_variance}, lengthscale {lengthscale})"
            )));
        }
        Ok(SeKernelParams {
            signal_variance,
            lengthscale,
        })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.signal_variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    /// Global bound on `|grad_x k(x, x')|`, attained at distance one lengthscale.
    pub fn gradient_bound(&self) -> f64 {
        self.signal_variance * FRAC_1_SQRT_E / self.lengthscale
    }

    /// Global bounds on second partials of `k(., x')`: `(diagonal, off-diagonal)`.
    fn hessian_bounds(&self) -> (f64, f64) {
        let s = self.signal_variance / (self.lengthscale * self.lengthscale);
        (s, s * INV_E)
    }
}

/// A fitted posterior for one output component under one action.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub action: usize,
    pub output_dim: usize,
    pub kernel: SeKernelParams,
    pub lambda: f64,
    /// Diagonal jitter that was needed on top of `lambda` (usually 0).
    pub jitter: f64,
    inputs: Vec<Vec<f64>>,
    targets: DVector<f64>,
    weights: DVector<f64>,
    /// Lower Cholesky factor of `K(X, X) + (lambda + jitter) I`.
    factor: DMatrix<f64>,
}

/// `1 + 2 / n`, the regularisation under which the RKHS error bound holds.
pub fn default_lambda(n_points: usize) -> f64 {
    1.0 + 2.0 / n_points.max(1) as f64
}

fn gram(kernel: &SeKernelParams, inputs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.signal_variance;
        for j in 0..i {
            let v = kernel.eval(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with escalating diagonal jitter (1e-10, 1e-9, 1e-8).
fn factorize(mut m: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let mut jitter = 0.0;
    for attempt in 0..4 {
        if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
            if attempt > 0 {
                warn!("Cholesky needed diagonal jitter {jitter:e}");
            }
            return Ok((chol.l(), jitter));
        }
        let add = if attempt == 0 { 1e-10 } else { jitter * 9.0 };
        for i in 0..m.nrows() {
            m[(i, i)] += add;
        }
        jitter += add;
    }
    let diag: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)]).collect();
    let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sym = (&m - m.transpose()).abs().max();
    Err(Error::Numeric(format!(
        "kernel matrix not positive definite after jitter {jitter:e} (n={}, diag range [{dmin:e}, {dmax:e}], diag ratio {:e}, asymmetry {sym:e})",
        m.nrows(),
        dmax / dmin
    )))
}

impl GpModel {
    /// Fits directly on input/target arrays. An empty training set yields the prior.
    pub fn fit_points(
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        kernel: SeKernelParams,
        lambda: f64,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Config(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::Config("training inputs have mixed dimensions".into()));
            }
        }
        let n = inputs.len();
        let mut k = gram(&kernel, &inputs);
        for i in 0..n {
            k[(i, i)] += lambda;
        }
        let (factor, jitter) = factorize(k)?;
        let targets = DVector::from_vec(targets);
        let mut weights = targets.clone();
        factor.solve_lower_triangular_mut(&mut weights);
        factor.tr_solve_lower_triangular_mut(&mut weights);
        Ok(GpModel {
            action: 0,
            output_dim: 0,
            kernel,
            lambda,
            jitter,
            inputs,
            targets,
            weights,
            factor,
        })
    }

    /// Fits output component `dim` of the samples recorded under `action`.
    pub fn fit(
        dataset: &DataSet,
        action: usize,
        dim: usize,
        kernel: SeKernelParams,
        lambda: f64,
    ) -> Result<Self> {
        let (inputs, targets) = training_data(dataset, action, dim, usize::MAX)?;
        let mut model = GpModel::fit_points(inputs, targets, kernel, lambda)?;
        model.action = action;
        model.output_dim = dim;
        Ok(model)
    }

    pub fn num_points(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        self.targets.as_slice()
    }

    pub fn weights(&self) -> &[f64] {
        self.weights.as_slice()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    fn kernel_vector(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.kernel.eval(x, xi)),
        )
    }

    pub fn posterior_mean(&self, x: &[f64]) -> f64 {
        self.inputs
            .iter()
            .zip(self.weights.iter())
            .map(|(xi, w)| w * self.kernel.eval(x, xi))
            .sum()
    }

    pub fn posterior_var(&self, x: &[f64]) -> f64 {
        let prior = self.kernel.signal_variance;
        if self.inputs.is_empty() {
            return prior;
        }
        let mut v = self.kernel_vector(x);
        self.factor.solve_lower_triangular_mut(&mut v);
        let raw = prior - v.norm_squared();
        if raw < 0.0 {
            if raw < -1e-10 {
                warn!("posterior variance {raw:e} clamped to 0");
            } else {
                debug!("posterior variance {raw:e} clamped to 0");
            }
            0.0
        } else {
            raw
        }
    }

    /// Mean and its gradient at `x` in one pass over the training set.
    fn mean_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let inv_l2 = 1.0 / (self.kernel.lengthscale * self.kernel.lengthscale);
        let mut mean = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (xi, w) in self.inputs.iter().zip(self.weights.iter()) {
            let kw = w * self.kernel.eval(x, xi);
            mean += kw;
            for d in 0..x.len() {
                grad[d] -= kw * (x[d] - xi[d]) * inv_l2;
            }
        }
        (mean, grad)
    }

    fn abs_weight_sum(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// Global Lipschitz constant of the posterior mean in the Euclidean norm.
    pub fn mean_lipschitz_bound(&self) -> f64 {
        self.kernel.gradient_bound() * self.abs_weight_sum()
    }

    /// Enclosure of the mean over one box: the first-order Taylor model with
    /// a Hessian remainder bound, intersected with the global Lipschitz interval.
    fn mean_enclosure(&self, b: &Region, lipschitz: f64, hess: (f64, f64)) -> Interval {
        let c = b.center();
        let rho = b.radii();
        let (mean, grad) = self.mean_and_gradient(&c);
        let rho2: f64 = rho.iter().map(|r| r * r).sum();
        let rho1: f64 = rho.iter().sum();
        let linear: f64 = grad.iter().zip(&rho).map(|(g, r)| g.abs() * r).sum();
        let remainder = 0.5 * (hess.0 * rho2 + hess.1 * (rho1 * rho1 - rho2));
        let taylor = linear + remainder;
        let lip = lipschitz * rho2.sqrt();
        let r = taylor.min(lip);
        Interval::new(mean - r, mean + r)
    }

    /// Guaranteed enclosure of `{ mu(x) : x in b }`.
    ///
    /// For every level `j = 1..=k` the box is split into `j^n` sub-boxes whose
    /// enclosures are joined; the result is the intersection over levels, so
    /// raising `k` never widens it.
    pub fn mean_range_over_box(&self, b: &Region, k: usize) -> Interval {
        let k = k.max(1);
        let lipschitz = self.mean_lipschitz_bound();
        let (hd, ho) = self.kernel.hessian_bounds();
        let wsum = self.abs_weight_sum();
        let hess = (hd * wsum, ho * wsum);
        let mut out: Option<Interval> = None;
        for level in 1..=k {
            let joined = b
                .subdivide(level)
                .iter()
                .map(|s| self.mean_enclosure(s, lipschitz, hess))
                .reduce(|a, c| a.hull(&c))
                .expect("subdivision is never empty");
            out = Some(match out {
                None => joined,
                Some(prev) => prev.meet(&joined),
            });
        }
        out.unwrap()
    }

    /// Upper bound on the posterior variance over `b`, from the `k^n`
    /// sub-box centres.
    ///
    /// The posterior standard deviation is 1-Lipschitz with respect to the
    /// kernel metric `sqrt(k(x,x) + k(x',x') - 2 k(x,x'))`, which bounds its
    /// growth away from each centre.
    pub fn var_max_over_box(&self, b: &Region, k: usize) -> f64 {
        let prior = self.kernel.signal_variance;
        let l2 = self.kernel.lengthscale * self.kernel.lengthscale;
        let mut best: f64 = 0.0;
        for s in b.subdivide(k.max(1)) {
            let rho2: f64 = s.radii().iter().map(|r| r * r).sum();
            let slack = (2.0 * prior * (-(-rho2 / (2.0 * l2)).exp_m1())).sqrt();
            best = best.max(self.posterior_var(&s.center()).sqrt() + slack);
        }
        (best * best).min(prior)
    }

    /// `-1/2 Y^T (K + lambda I)^-1 Y - 1/2 log det(K + lambda I) - n/2 log(2 pi)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.inputs.len() as f64;
        let logdet: f64 = 2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * self.targets.dot(&self.weights) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// `sum_i log L_ii`, i.e. half the log-determinant of `K + lambda I`.
    pub(crate) fn half_log_det(&self) -> f64 {
        self.factor.diagonal().iter().map(|d| d.ln()).sum()
    }
}

/// Inputs and `dim`-th observation components of the first `limit` samples under `action`.
pub fn training_data(
    dataset: &DataSet,
    action: usize,
    dim: usize,
    limit: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if dim >= dataset.dim {
        return Err(Error::Config(format!(
            "output dimension {dim} out of range for {}-dimensional data",
            dataset.dim
        )));
    }
    let (inputs, targets): (Vec<_>, Vec<_>) = dataset
        .for_action(action)
        .take(limit)
        .map(|s| (s.x.clone(), s.y[dim]))
        .unzip();
    if inputs.is_empty() {
        return Err(Error::State(format!("no samples recorded for action {action}")));
    }
    Ok((inputs, targets))
}

/// Candidate hyperparameters for the grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub signal_variances: Vec<f64>,
    pub lengthscales: Vec<f64>,
    /// Only the first `max_points` samples of the action take part in the search.
    pub max_points: usize,
}

/// `per_decade` log-spaced points per decade from `lo` to `hi`, inclusive.
pub fn log_space(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    let steps = ((b - a) * per_decade as f64).round() as usize;
    (0..=steps)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / steps.max(1) as f64))
        .collect()
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            signal_variances: log_space(1e-2, 1e3, 10),
            lengthscales: log_space(1e-1, 1e2, 10),
            max_points: 300,
        }
    }
}

/// Every evaluated candidate with its log marginal likelihood, plus the winner.
#[derive(Debug, Clone)]
pub struct HyperSearch {
    pub best: SeKernelParams,
    pub best_log_likelihood: f64,
    pub evaluated: Vec<(SeKernelParams, f64)>,
}

/// Exhaustive grid search maximising the log marginal likelihood.
pub fn grid_search(
    inputs: &[Vec<f64>],
    targets: &[f64],
    grid: &HyperGrid,
    lambda: f64,
) -> Result<HyperSearch> {
    let candidates: Vec<SeKernelParams> = grid
        .signal_variances
        .iter()
        .flat_map(|&s| grid.lengthscales.iter().map(move |&l| (s, l)))
        .map(|(s, l)| SeKernelParams::new(s, l))
        .collect::<Result<_>>()?;
    if candidates.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let evaluated: Vec<(SeKernelParams, f64)> = candidates
        .par_iter()
        .filter_map(|&p| {
            GpModel::fit_points(inputs.to_vec(), targets.to_vec(), p, lambda)
                .ok()
                .map(|m| (p, m.log_marginal_likelihood()))
        })
        .collect();
    let (best, best_log_likelihood) = evaluated
        .iter()
        .copied()
        .filter(|(_, ll)| ll.is_finite())
        .fold(None, |acc: Option<(SeKernelParams, f64)>, c| match acc {
            Some(a) if a.1 >= c.1 => Some(a),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Numeric("no hyperparameter candidate could be fitted".into()))?;
    Ok(HyperSearch {
        best,
        best_log_likelihood,
        evaluated,
    })
}

/// Picks kernel parameters for the `(action, dim)` model by grid search.
/// `lambda` defaults to [`default_lambda`] of the action's sample count.
pub fn optimize_hyperparameters(
    dataset: &DataSet,
    action: usize,
    dim: usize,
    grid: &HyperGrid,
    lambda: Option<f64>,
) -> Result<SeKernelParams> {
    let n_action = dataset.count_for_action(action);
    let (inputs, targets) = training_data(dataset, action, dim, grid.max_points)?;
    if grid.signal_variances.len() * grid.lengthscales.len() > 1 && inputs.len() < 10 {
        return Err(Error::State(format!(
            "hyperparameter search needs at least 10 samples, action {action} has {}",
            inputs.len()
        )));
    }
    let first = targets[0];
    if targets.iter().all(|t| (t - first).abs() <= 1e-15 * first.abs().max(1.0)) {
        let s = grid.signal_variances.iter().copied().fold(f64::INFINITY, f64::min);
        let l = grid.lengthscales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        warn!("targets for action {action}, dim {dim} are constant; using smallest signal variance {s}");
        return SeKernelParams::new(s, l);
    }
    let lambda = lambda.unwrap_or_else(|| default_lambda(n_action));
    Ok(grid_search(&inputs, &targets, grid, lambda)?.best)
}

const MODEL_MAGIC: &str = "gpverify-gp-models v1";

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes models in the versioned text dump.
///
/// ```text
/// gpverify-gp-models v1
/// count <m>
/// model
/// action <a>
/// output_dim <i>
/// signal_variance <s>
/// lengthscale <l>
/// lambda <lambda>
/// jitter <j>
/// points <N> <n>
/// p <x_1> ... <x_n> <y> <w>        (N lines)
/// l <L_i0> ... <L_ii>              (N lines, lower factor rows)
/// end
/// ```
/// Reals carry 17 significant digits so reading back is bit-exact.
pub fn write_models<W: Write>(models: &[GpModel], mut sink: W) -> Result<()> {
    writeln!(sink, "{MODEL_MAGIC}")?;
    writeln!(sink, "count {}", models.len())?;
    let mut line = String::new();
    for m in models {
        writeln!(sink, "model")?;
        writeln!(sink, "action {}", m.action)?;
        writeln!(sink, "output_dim {}", m.output_dim)?;
        writeln!(sink, "signal_variance {}", fmt17(m.kernel.signal_variance))?;
        writeln!(sink, "lengthscale {}", fmt17(m.kernel.lengthscale))?;
        writeln!(sink, "lambda {}", fmt17(m.lambda))?;
        writeln!(sink, "jitter {}", fmt17(m.jitter))?;
        let n = m.inputs.first().map_or(0, Vec::len);
        writeln!(sink, "points {} {n}", m.inputs.len())?;
        for (i, x) in m.inputs.iter().enumerate() {
            line.clear();
            line.push('p');
            for v in x.iter().chain([&m.targets[i], &m.weights[i]]) {
                write!(line, " {}", fmt17(*v)).unwrap();
            }
            writeln!(sink, "{line}")?;
        }
        for i in 0..m.inputs.len() {
            line.clear();
            line.push('l');
            for j in 0..=i {
                write!(line, " {}", fmt17(m.factor[(i, j)])).unwrap();
            }
            writeln!(sink, "{line}")?;
        }
        writeln!(sink, "end")?;
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    lineno: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        loop {
            self.lineno += 1;
            match self.inner.next() {
                None => return Err(Error::parse(self.lineno, "unexpected end of file")),
                Some(l) => {
                    let l = l?;
                    let t = l.trim();
                    if !t.is_empty() && !t.starts_with('#') {
                        return Ok(t.to_string());
                    }
                }
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self.next_line()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::parse(self.lineno, format!("expected `{key}`, found `{l}`")));
        }
        Ok(parts.map(str::to_string).collect())
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse()
            .map_err(|_| Error::parse(self.lineno, format!("invalid number `{s}`")))
    }

    fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        if v.len() != 1 {
            return Err(Error::parse(self.lineno, format!("`{key}` takes one value")));
        }
        self.num(&v[0])
    }
}

pub fn read_models<R: BufRead>(source: R) -> Result<Vec<GpModel>> {
    let mut lines = Lines {
        inner: source.lines(),
        lineno: 0,
    };
    if lines.next_line()? != MODEL_MAGIC {
        return Err(Error::parse(lines.lineno, format!("missing `{MODEL_MAGIC}` header")));
    }
    let count: usize = lines.single("count")?;
    let mut models = Vec::with_capacity(count);
    for _ in 0..count {
        lines.keyed("model")?;
        let action = lines.single("action")?;
        let output_dim = lines.single("output_dim")?;
        let s = lines.single("signal_variance")?;
        let l = lines.single("lengthscale")?;
        let kernel = SeKernelParams::new(s, l).map_err(|e| Error::parse(lines.lineno, e.to_string()))?;
        let lambda = lines.single("lambda")?;
        let jitter = lines.single("jitter")?;
        let pts = lines.keyed("points")?;
        if pts.len() != 2 {
            return Err(Error::parse(lines.lineno, "`points` takes a count and a dimension"));
        }
        let npts: usize = lines.num(&pts[0])?;
        let dim: usize = lines.num(&pts[1])?;
        let mut inputs = Vec::with_capacity(npts);
        let mut targets = Vec::with_capacity(npts);
        let mut weights = Vec::with_capacity(npts);
        for _ in 0..npts {
            let vals = lines
                .keyed("p")?
                .iter()
                .map(|v| lines.num::<f64>(v))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != dim + 2 {
                return Err(Error::parse(lines.lineno, format!("expected {} values", dim + 2)));
            }
            inputs.push(vals[..dim].to_vec());
            targets.push(vals[dim]);
            weights.push(vals[dim + 1]);
        }
        let mut factor = DMatrix::zeros(npts, npts);
        for i in 0..npts {
            let vals = lines
                .keyed("l")?
                .iter()
                .map(|v| lines.num::<f64>(v))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != i + 1 {
                return Err(Error::parse(lines.lineno, format!("factor row {i} needs {} values", i + 1)));
            }
            for (j, v) in vals.into_iter().enumerate() {
                factor[(i, j)] = v;
            }
        }
        lines.keyed("end")?;
        models.push(GpModel {
            action,
            output_dim,
            kernel,
            lambda,
            jitter,
            inputs,
            targets: DVector::from_vec(targets),
            weights: DVector::from_vec(weights),
            factor,
        });
    }
    Ok(models)
}
