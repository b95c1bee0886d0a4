//! Benchmark systems, bounded observation noise and training-data generation.
//!
//! The true system evolves as `x(k+1) = f(x(k), u(k))` and is only observed
//! through `y = x + v`, with `v` bounded componentwise by `sigma`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Region;

/// Closed-form nonlinear maps available by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonlinearMap {
    /// `[x1 - 0.05 x2, x2 + 0.1 sin(x1)]`, a slow outward spiral.
    Spiral,
}

impl NonlinearMap {
    fn apply(self, x: &[f64]) -> Vec<f64> {
        match self {
            NonlinearMap::Spiral => vec![x[0] - 0.05 * x[1], x[1] + 0.1 * x[0].sin()],
        }
    }

    fn dim(self) -> usize {
        match self {
            NonlinearMap::Spiral => 2,
        }
    }
}

/// Dynamics attached to a single action.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// `f(x) = A x`; the matrix is stored row-major.
    Linear(Vec<Vec<f64>>),
    Nonlinear(NonlinearMap),
}

impl Dynamics {
    pub fn dim(&self) -> usize {
        match self {
            Dynamics::Linear(rows) => rows.len(),
            Dynamics::Nonlinear(map) => map.dim(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Dynamics::Linear(rows) => rows
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
            Dynamics::Nonlinear(map) => map.apply(x),
        }
    }
}

pub const A_ROTATION: [[f64; 2]; 2] = [[0.9, -0.4], [0.4, 0.5]];
pub const A_UPPER: [[f64; 2]; 2] = [[0.8, 0.5], [0.0, 0.5]];
pub const A_LOWER: [[f64; 2]; 2] = [[0.5, 0.0], [-0.5, 0.8]];

fn linear2(m: [[f64; 2]; 2]) -> Dynamics {
    Dynamics::Linear(m.iter().map(|r| r.to_vec()).collect())
}

/// A known system `f: R^n x U -> R^n` with a finite, ordered action set.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    dim: usize,
    actions: Vec<(String, Dynamics)>,
}

impl SystemSpec {
    pub fn new(actions: Vec<(String, Dynamics)>) -> Result<Self> {
        let Some((_, first)) = actions.first() else {
            return Err(Error::Config("a system needs at least one action".into()));
        };
        let dim = first.dim();
        if dim == 0 {
            return Err(Error::Config("system dimension must be positive".into()));
        }
        for (name, dynamics) in &actions {
            if dynamics.dim() != dim {
                return Err(Error::Config(format!(
                    "action `{name}` has dimension {} but the system has dimension {dim}",
                    dynamics.dim()
                )));
            }
            if let Dynamics::Linear(rows) = dynamics {
                if rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("matrix for action `{name}` is not square")));
                }
            }
        }
        for (i, (name, _)) in actions.iter().enumerate() {
            if actions[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::Config(format!("duplicate action name `{name}`")));
            }
        }
        Ok(SystemSpec { dim, actions })
    }

    /// Looks up one of the built-in benchmark systems: `rotation`, `upper`,
    /// `lower`, `switched`, `nonlinear`, or `linear:[[a,b],[c,d]]`.
    pub fn builtin(name: &str) -> Result<Self> {
        let name = name.trim();
        let actions = match name {
            "rotation" => vec![("rotation".to_string(), linear2(A_ROTATION))],
            "upper" => vec![("upper".to_string(), linear2(A_UPPER))],
            "lower" => vec![("lower".to_string(), linear2(A_LOWER))],
            "switched" => vec![
                ("upper".to_string(), linear2(A_UPPER)),
                ("lower".to_string(), linear2(A_LOWER)),
            ],
            "nonlinear" => vec![(
                "nonlinear".to_string(),
                Dynamics::Nonlinear(NonlinearMap::Spiral),
            )],
            other => match other.strip_prefix("linear:") {
                Some(literal) => vec![("linear".to_string(), Dynamics::Linear(parse_matrix(literal)?))],
                None => return Err(Error::Config(format!("unknown system `{other}`"))),
            },
        };
        SystemSpec::new(actions)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action_names(&self) -> Vec<String> {
        self.actions.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|(n, _)| n == name)
    }

    /// Noise-free successor `f(x, a)`.
    pub fn step_true(&self, x: &[f64], action: usize) -> Result<Vec<f64>> {
        let (_, dynamics) = self
            .actions
            .get(action)
            .ok_or_else(|| Error::Config(format!("unknown action index {action}")))?;
        if x.len() != self.dim {
            return Err(Error::Config(format!(
                "state has dimension {} but the system has dimension {}",
                x.len(),
                self.dim
            )));
        }
        Ok(dynamics.apply(x))
    }
}

/// Parses `[[a,b],[c,d]]` into a row-major square matrix.
pub fn parse_matrix(literal: &str) -> Result<Vec<Vec<f64>>> {
    let bad = || Error::Config(format!("malformed matrix literal `{literal}`"));
    let s: String = literal.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = s.strip_prefix("[[").and_then(|r| r.strip_suffix("]]")).ok_or_else(bad)?;
    let rows = inner
        .split("],[")
        .map(|row| {
            row.split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::Config(format!("matrix literal `{literal}` is not square")));
    }
    Ok(rows)
}

/// Draws one noise vector with independent components uniform on `[-sigma, sigma]`.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64, n: usize) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.random_range(-sigma..=sigma)).collect()
}

/// One noisy observation `(x, u, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub action: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub samples: Vec<Sample>,
    pub noise_bound: f64,
    pub seed: u64,
    pub action_names: Vec<String>,
    pub dim: usize,
}

impl DataSet {
    /// Samples recorded under `action`, in generation order.
    pub fn for_action(&self, action: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.action == action)
    }

    pub fn count_for_action(&self, action: usize) -> usize {
        self.for_action(action).count()
    }

    /// Writes the CSV form: `#`-prefixed metadata, a header
    /// `x1,...,xn,u,y1,...,yn`, then one row per sample.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "# sigma={}", self.noise_bound)?;
        writeln!(sink, "# seed={}", self.seed)?;
        writeln!(sink, "# actions={}", self.action_names.join(";"))?;
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        header.push("u".into());
        header.extend((1..=self.dim).map(|i| format!("y{i}")));
        writeln!(sink, "{}", header.join(","))?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            for v in &s.x {
                write!(line, "{v},").unwrap();
            }
            write!(line, "{}", self.action_names[s.action]).unwrap();
            for v in &s.y {
                write!(line, ",{v}").unwrap();
            }
            writeln!(sink, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(source: R) -> Result<Self> {
        let mut sigma = None;
        let mut seed = None;
        let mut actions: Option<Vec<String>> = None;
        let mut dim = None;
        let mut samples = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k.trim() {
                        "sigma" => {
                            sigma = Some(v.trim().parse::<f64>().map_err(|e| Error::parse(lineno, e.to_string()))?)
                        }
                        "seed" => {
                            seed = Some(v.trim().parse::<u64>().map_err(|e| Error::parse(lineno, e.to_string()))?)
                        }
                        "actions" => actions = Some(v.trim().split(';').map(str::to_string).collect()),
                        _ => {}
                    }
                }
                continue;
            }
            if dim.is_none() {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() < 3 || cols.len() % 2 == 0 || cols[cols.len() / 2] != "u" {
                    return Err(Error::parse(lineno, "expected header x1,...,xn,u,y1,...,yn"));
                }
                dim = Some(cols.len() / 2);
                continue;
            }
            let n = dim.unwrap();
            let names = actions
                .as_ref()
                .ok_or_else(|| Error::parse(lineno, "missing `# actions=` metadata"))?;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 2 * n + 1 {
                return Err(Error::parse(lineno, format!("expected {} columns, found {}", 2 * n + 1, cols.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::parse(lineno, e.to_string()));
            let x = cols[..n].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let y = cols[n + 1..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let action = names
                .iter()
                .position(|a| a == cols[n].trim())
                .ok_or_else(|| Error::parse(lineno, format!("unknown action `{}`", cols[n])))?;
            samples.push(Sample { x, action, y });
        }
        Ok(DataSet {
            samples,
            noise_bound: sigma.ok_or_else(|| Error::parse(0, "missing `# sigma=` metadata"))?,
            seed: seed.ok_or_else(|| Error::parse(0, "missing `# seed=` metadata"))?,
            action_names: actions.ok_or_else(|| Error::parse(0, "missing `# actions=` metadata"))?,
            dim: dim.ok_or_else(|| Error::parse(0, "missing header"))?,
        })
    }
}

/// Draws `n_samples` i.i.d. states uniformly over `region`, assigns each a
/// uniformly random action and records `y = f(x, u) + v`.
pub fn generate_dataset(
    spec: &SystemSpec,
    region: &Region,
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<DataSet> {
    if region.dim() != spec.dim() {
        return Err(Error::Config(format!(
            "region has dimension {} but the system has dimension {}",
            region.dim(),
            spec.dim()
        )));
    }
    if (0..region.dim()).any(|i| region.hi()[i] <= region.lo()[i]) {
        return Err(Error::Config("sampling region has empty interior".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_D must be at least 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise bound must be nonnegative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.dim();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x: Vec<f64> = (0..n)
            .map(|i| rng.random_range(region.lo()[i]..region.hi()[i]))
            .collect();
        let action = rng.random_range(0..spec.num_actions());
        let fx = spec.step_true(&x, action)?;
        let v = sample_noise(&mut rng, sigma, n);
        let y = fx.iter().zip(&v).map(|(a, b)| a + b).collect();
        samples.push(Sample { x, action, y });
    }
    Ok(DataSet {
        samples,
        noise_bound: sigma,
        seed,
        action_names: spec.action_names(),
        dim: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Region {
        Region::cube(-4.0, 4.0, 2).unwrap()
    }

    #[test]
    fn step_true_matches_hand_products() {
        let rot = SystemSpec::builtin("rotation").unwrap();
        assert_eq!(rot.step_true(&[1.0, 0.0], 0).unwrap(), vec![0.9, 0.4]);
        let lower = SystemSpec::builtin("lower").unwrap();
        assert_eq!(lower.step_true(&[0.0, 1.0], 0).unwrap(), vec![0.0, 0.8]);
        let nl = SystemSpec::builtin("nonlinear").unwrap();
        assert_eq!(nl.step_true(&[0.0, 0.0], 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unknown_action_is_a_config_error() {
        let rot = SystemSpec::builtin("rotation").unwrap();
        assert!(matches!(rot.step_true(&[0.0, 0.0], 1), Err(Error::Config(_))));
        assert!(SystemSpec::builtin("pendulum").is_err());
    }

    #[test]
    fn custom_linear_literal() {
        let spec = SystemSpec::builtin("linear:[[1, 2],[3, 4]]").unwrap();
        assert_eq!(spec.step_true(&[1.0, 1.0], 0).unwrap(), vec![3.0, 7.0]);
        assert!(SystemSpec::builtin("linear:[[1,2],[3]]").is_err());
    }

    #[test]
    fn noise_is_bounded_and_collapses_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let v = sample_noise(&mut rng, 0.01, 2);
            assert!(v.iter().all(|c| c.abs() <= 0.01));
        }
        assert_eq!(sample_noise(&mut rng, 0.0, 3), vec![0.0; 3]);
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let sigma = 0.01;
        let draws = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0f64; 2];
        for _ in 0..draws {
            let v = sample_noise(&mut rng, sigma, 2);
            sum[0] += v[0];
            sum[1] += v[1];
        }
        // four standard errors of a uniform[-s, s] mean
        let tol = 4.0 * (sigma / 3f64.sqrt()) / (draws as f64).sqrt();
        for s in sum {
            assert!((s / draws as f64).abs() <= tol);
        }
    }

    #[test]
    fn dataset_respects_noise_bound_and_is_reproducible() {
        let spec = SystemSpec::builtin("rotation").unwrap();
        let d1 = generate_dataset(&spec, &square(), 1000, 0.01, 7).unwrap();
        let d2 = generate_dataset(&spec, &square(), 1000, 0.01, 7).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.count_for_action(0), 1000);
        for s in &d1.samples {
            let fx = spec.step_true(&s.x, s.action).unwrap();
            let err = fx.iter().zip(&s.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 0.01);
            assert!(square().contains_point(&s.x));
        }
    }

    #[test]
    fn switched_dataset_splits_actions() {
        let spec = SystemSpec::builtin("switched").unwrap();
        let d = generate_dataset(&spec, &square(), 1000, 0.01, 1).unwrap();
        let a = d.count_for_action(0);
        let b = d.count_for_action(1);
        assert_eq!(a + b, 1000);
        assert!(a > 400 && b > 400);
    }

    #[test]
    fn empty_region_rejected() {
        let spec = SystemSpec::builtin("rotation").unwrap();
        let flat = Region::from_bounds(&[(0.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!(matches!(generate_dataset(&spec, &flat, 10, 0.01, 0), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let spec = SystemSpec::builtin("switched").unwrap();
        let d = generate_dataset(&spec, &square(), 50, 0.01, 9).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(3).unwrap() == "x1,x2,u,y1,y2");
        let back = DataSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, d);
    }
}
