//! Run configuration: a TOML file of flat `section.key = value` lines.
//!
//! ```toml
//! system.name = "rotation"
//! grid.safe_box = [[-4.0, 4.0], [-4.0, 4.0]]
//! grid.h = 0.25
//! data.n = 1000
//! data.sigma = 0.01
//! data.seed = 1
//! bounds.delta = 0.0
//! bounds.epsilon_mode = "explicit"
//! bounds.epsilon = 0.12
//! verify.horizon = 10
//! output.dir = "out/rotation"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::abstraction::{AbstractionSettings, Grid};
use crate::bounds::{BoundsConfig, EpsilonMode};
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::gp::{log_space, HyperGrid};
use crate::verifier::{Horizon, DEFAULT_TOL};

/// Keys that must be present in every configuration.
pub const REQUIRED_KEYS: &[&str] = &[
    "system.name",
    "grid.safe_box",
    "grid.h",
    "data.n",
    "data.sigma",
    "data.seed",
    "bounds.delta",
    "verify.horizon",
    "output.dir",
];

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `rotation`, `upper`, `lower`, `switched`, `nonlinear`, `linear:[[..]]`
    /// or `linear` together with `matrix`.
    pub name: String,
    pub matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub safe_box: Vec<[f64; 2]>,
    pub h: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Sampling region; defaults to the safe box.
    pub region: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    #[serde(default = "default_sv_range")]
    pub signal_variance_range: [f64; 2],
    #[serde(default = "default_ls_range")]
    pub lengthscale_range: [f64; 2],
    #[serde(default = "default_per_decade")]
    pub per_decade: usize,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    /// Fixes the signal variance instead of searching.
    pub signal_variance: Option<f64>,
    /// Fixes the lengthscale instead of searching.
    pub lengthscale: Option<f64>,
    /// Overrides the regularisation `1 + 2 / |D_a|`.
    pub lambda: Option<f64>,
}

fn default_sv_range() -> [f64; 2] {
    [1e-2, 1e3]
}
fn default_ls_range() -> [f64; 2] {
    [1e-1, 1e2]
}
fn default_per_decade() -> usize {
    10
}
fn default_max_points() -> usize {
    300
}

impl Default for GpSection {
    fn default() -> Self {
        GpSection {
            signal_variance_range: default_sv_range(),
            lengthscale_range: default_ls_range(),
            per_decade: default_per_decade(),
            max_points: default_max_points(),
            signal_variance: None,
            lengthscale: None,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub delta: f64,
    /// RKHS norm bound per output dimension; estimated when absent.
    #[serde(rename = "B")]
    pub rkhs_norms: Option<Vec<f64>>,
    #[serde(default = "default_mode")]
    pub epsilon_mode: String,
    pub epsilon: Option<f64>,
}

fn default_mode() -> String {
    "explicit".into()
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AbstractionSection {
    #[serde(default = "default_subgrid")]
    pub subgrid_k: usize,
}

fn default_subgrid() -> usize {
    3
}

impl Default for AbstractionSection {
    fn default() -> Self {
        AbstractionSection {
            subgrid_k: default_subgrid(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum HorizonValue {
    Steps(i64),
    /// Only `inf` is meaningful here (TOML reads a bare `inf` as a float).
    Real(f64),
    Word(String),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub horizon: HorizonValue,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    /// Number of cells audited by simulation.
    #[serde(default = "default_mc_cells")]
    pub cells: usize,
    #[serde(default = "default_mc_trials")]
    pub trials: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Simulated steps when the verification horizon is infinite.
    #[serde(default = "default_mc_horizon")]
    pub horizon: usize,
    /// Seed of the audit; defaults to `data.seed + 1`.
    pub seed: Option<u64>,
    /// Random test points for the GP error audit.
    #[serde(default = "default_error_points")]
    pub error_points: usize,
}

fn default_mc_cells() -> usize {
    32
}
fn default_mc_trials() -> usize {
    200
}
fn default_confidence() -> f64 {
    0.99
}
fn default_mc_horizon() -> usize {
    100
}
fn default_error_points() -> usize {
    2500
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            cells: default_mc_cells(),
            trials: default_mc_trials(),
            confidence: default_confidence(),
            horizon: default_mc_horizon(),
            seed: None,
            error_points: default_error_points(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// Optional per-artifact file names, relative to `output.dir` unless absolute.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub imdp: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
    pub mc_report: Option<PathBuf>,
}

/// Everything one run needs.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub grid: GridSection,
    pub data: DataSection,
    #[serde(default)]
    pub gp: GpSection,
    pub bounds: BoundsSection,
    #[serde(default)]
    pub abstraction: AbstractionSection,
    pub verify: VerifySection,
    #[serde(default)]
    pub mc: McSection,
    pub output: OutputSection,
    #[serde(default)]
    pub paths: PathsSection,
    /// Worker threads; 0 picks the number of cores.
    #[serde(default)]
    pub threads: usize,
}

fn has_key(table: &toml::Table, dotted: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(toml::Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

/// Sets `dotted` to `value` (parsed as a TOML value, or taken as a string).
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses configuration text, reporting every missing required key at once.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with(text, &[])
    }

    /// As [`RunConfig::from_toml_str`], after applying `key=value` overrides.
    pub fn from_toml_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !has_key(&table, k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing configuration keys: {}", missing.join(", "))));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {}", e.message().trim())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        Self::from_toml_str_with(&text, overrides)
    }

    /// Checks the numeric constraints of every stage up front.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: {msg}")))
            }
        };
        let spec = self.system_spec()?;
        let safe = self.safe_box()?;
        field("grid.safe_box", safe.dim() == spec.dim(), "dimension differs from the system")?;
        self.grid()?;
        let region = self.sampling_region()?;
        field("data.region", region.dim() == spec.dim(), "dimension differs from the system")?;
        field("data.n", self.data.n >= 1, "must be at least 1")?;
        field("data.sigma", self.data.sigma >= 0.0 && self.data.sigma.is_finite(), "must be nonnegative")?;
        let g = &self.gp;
        for (name, r) in [
            ("gp.signal_variance_range", g.signal_variance_range),
            ("gp.lengthscale_range", g.lengthscale_range),
        ] {
            field(name, r[0] > 0.0 && r[0] <= r[1], "must be [lo, hi] with 0 < lo <= hi")?;
        }
        field("gp.per_decade", g.per_decade >= 1, "must be at least 1")?;
        field("gp.max_points", g.max_points >= 1, "must be at least 1")?;
        for (name, v) in [("gp.signal_variance", g.signal_variance), ("gp.lengthscale", g.lengthscale), ("gp.lambda", g.lambda)] {
            if let Some(v) = v {
                field(name, v > 0.0 && v.is_finite(), "must be positive")?;
            }
        }
        let mode = self.epsilon_mode()?;
        let b = &self.bounds;
        field("bounds.delta", (0.0..1.0).contains(&b.delta), "must lie in [0, 1)")?;
        if mode == EpsilonMode::Explicit {
            field("bounds.epsilon", b.epsilon.is_some_and(|e| e > 0.0 && e.is_finite()), "a positive value is required in explicit mode")?;
        } else {
            field("bounds.delta", b.delta > 0.0, "derived epsilon modes need delta in (0, 1)")?;
        }
        if let Some(norms) = &b.rkhs_norms {
            field("bounds.B", norms.len() == spec.dim(), "needs one entry per state dimension")?;
            field("bounds.B", norms.iter().all(|v| *v >= 0.0), "entries must be nonnegative")?;
        }
        field("abstraction.subgrid_k", self.abstraction.subgrid_k >= 1, "must be at least 1")?;
        self.horizon()?;
        field("verify.tol", self.verify.tol > 0.0, "must be positive")?;
        let m = &self.mc;
        field("mc.trials", m.trials >= 1, "must be at least 1")?;
        field("mc.confidence", m.confidence > 0.0 && m.confidence < 1.0, "must lie in (0, 1)")?;
        field("mc.error_points", m.error_points >= 1, "must be at least 1")?;
        Ok(())
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        match (&self.system.name[..], &self.system.matrix) {
            ("linear", Some(m)) => {
                let literal = format!(
                    "[{}]",
                    m.iter()
                        .map(|r| format!("[{}]", r.iter().map(f64::to_string).collect::<Vec<_>>().join(",")))
                        .collect::<Vec<_>>()
                        .join(",")
                );
                SystemSpec::builtin(&format!("linear:{literal}"))
            }
            (_, Some(_)) => Err(Error::Config("system.matrix is only valid with system.name = \"linear\"".into())),
            (name, None) => SystemSpec::builtin(name).map_err(|e| Error::Config(format!("system.name: {e}"))),
        }
    }

    fn region(bounds: &[[f64; 2]], key: &str) -> Result<Region> {
        let pairs: Vec<(f64, f64)> = bounds.iter().map(|b| (b[0], b[1])).collect();
        Region::from_bounds(&pairs).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn safe_box(&self) -> Result<Region> {
        Self::region(&self.grid.safe_box, "grid.safe_box")
    }

    pub fn sampling_region(&self) -> Result<Region> {
        match &self.data.region {
            Some(r) => Self::region(r, "data.region"),
            None => self.safe_box(),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.safe_box()?, self.grid.h)
    }

    pub fn hyper_grid(&self) -> HyperGrid {
        let g = &self.gp;
        let axis = |fixed: Option<f64>, r: [f64; 2]| match fixed {
            Some(v) => vec![v],
            None => log_space(r[0], r[1], g.per_decade),
        };
        HyperGrid {
            signal_variances: axis(g.signal_variance, g.signal_variance_range),
            lengthscales: axis(g.lengthscale, g.lengthscale_range),
            max_points: g.max_points,
        }
    }

    pub fn epsilon_mode(&self) -> Result<EpsilonMode> {
        self.bounds
            .epsilon_mode
            .parse()
            .map_err(|e| Error::Config(format!("bounds.epsilon_mode: {e}")))
    }

    pub fn bounds_config(&self) -> Result<BoundsConfig> {
        Ok(BoundsConfig {
            delta: self.bounds.delta,
            rkhs_norms: self.bounds.rkhs_norms.clone(),
            mode: self.epsilon_mode()?,
            epsilon: self.bounds.epsilon,
        })
    }

    pub fn abstraction_settings(&self) -> AbstractionSettings {
        AbstractionSettings {
            subgrid_k: self.abstraction.subgrid_k,
        }
    }

    pub fn horizon(&self) -> Result<Horizon> {
        match &self.verify.horizon {
            HorizonValue::Steps(t) if *t >= 0 => Ok(Horizon::Finite(*t as usize)),
            HorizonValue::Steps(t) => Err(Error::Config(format!("verify.horizon: must be nonnegative, got {t}"))),
            HorizonValue::Real(r) if *r == f64::INFINITY => Ok(Horizon::Infinite),
            HorizonValue::Real(r) => Err(Error::Config(format!("verify.horizon: expected an integer or `inf`, got {r}"))),
            HorizonValue::Word(w) => w.parse().map_err(|e| Error::Config(format!("verify.horizon: {e}"))),
        }
    }

    fn artifact(&self, custom: &Option<PathBuf>, default: &str) -> PathBuf {
        match custom {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.output.dir.join(p),
            None => self.output.dir.join(default),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.artifact(&self.paths.dataset, "dataset.csv")
    }
    pub fn models_path(&self) -> PathBuf {
        self.artifact(&self.paths.models, "models.txt")
    }
    pub fn imdp_path(&self) -> PathBuf {
        self.artifact(&self.paths.imdp, "imdp.txt")
    }
    pub fn results_path(&self) -> PathBuf {
        self.artifact(&self.paths.results, "results.csv")
    }
    pub fn heatmap_path(&self) -> PathBuf {
        self.artifact(&self.paths.heatmap, "heatmap.csv")
    }
    pub fn mc_report_path(&self) -> PathBuf {
        self.artifact(&self.paths.mc_report, "mc_report.csv")
    }

    /// `(key, value)` pairs echoed into the header of every result file.
    pub fn echo(&self, epsilon: Option<f64>) -> Vec<(String, String)> {
        let mut out = vec![("system".to_string(), self.system.name.clone())];
        if let Some(e) = epsilon.or(self.bounds.epsilon) {
            out.push(("epsilon".into(), e.to_string()));
        }
        out.extend([
            ("epsilon_mode".to_string(), self.bounds.epsilon_mode.clone()),
            ("delta".to_string(), self.bounds.delta.to_string()),
            ("h".to_string(), self.grid.h.to_string()),
            (
                "T".to_string(),
                self.horizon().map(|h| h.to_string()).unwrap_or_default(),
            ),
            ("n_D".to_string(), self.data.n.to_string()),
            ("sigma".to_string(), self.data.sigma.to_string()),
            ("seed".to_string(), self.data.seed.to_string()),
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
system.name = "rotation"
grid.safe_box = [[-4.0, 4.0], [-4.0, 4.0]]
grid.h = 0.25
data.n = 1000
data.sigma = 0.01
data.seed = 7
bounds.delta = 0.0
bounds.epsilon = 0.12
verify.horizon = 10
output.dir = "out"
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.grid().unwrap().num_cells(), 1024);
        assert_eq!(c.horizon().unwrap(), Horizon::Finite(10));
        assert_eq!(c.epsilon_mode().unwrap(), EpsilonMode::Explicit);
        assert_eq!(c.abstraction.subgrid_k, 3);
        assert_eq!(c.hyper_grid(), HyperGrid::default());
        assert_eq!(c.results_path(), PathBuf::from("out/results.csv"));
    }

    #[test]
    fn lists_every_missing_key() {
        let text = BASE.replace("grid.h = 0.25\n", "").replace("data.seed = 7\n", "");
        match RunConfig::from_toml_str(&text) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("grid.h") && msg.contains("data.seed"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml_str(&format!("{BASE}grid.hh = 1\n")).is_err());
        assert!(RunConfig::from_toml_str(&BASE.replace("grid.h = 0.25", "grid.h = 0.3")).is_err());
        assert!(RunConfig::from_toml_str(&BASE.replace("bounds.delta = 0.0", "bounds.delta = 1.5")).is_err());
        assert!(RunConfig::from_toml_str(&BASE.replace("verify.horizon = 10", "verify.horizon = -1")).is_err());
    }

    #[test]
    fn infinite_horizon_and_overrides() {
        let c = RunConfig::from_toml_str(&BASE.replace("verify.horizon = 10", "verify.horizon = \"inf\"")).unwrap();
        assert_eq!(c.horizon().unwrap(), Horizon::Infinite);
        let c = RunConfig::from_toml_str_with(BASE, &["verify.horizon=inf".into()]).unwrap();
        assert_eq!(c.horizon().unwrap(), Horizon::Infinite);
        assert!(RunConfig::from_toml_str_with(BASE, &["verify.horizon=2.5".into()]).is_err());
        let c = RunConfig::from_toml_str_with(BASE, &["verify.horizon=0".into(), "system.name=switched".into()]).unwrap();
        assert_eq!(c.horizon().unwrap(), Horizon::Finite(0));
        assert_eq!(c.system_spec().unwrap().num_actions(), 2);
    }

    #[test]
    fn linear_matrix_key() {
        let text = BASE.replace("system.name = \"rotation\"", "system.name = \"linear\"\nsystem.matrix = [[0.5, 0.0], [0.0, 0.5]]");
        let c = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.system_spec().unwrap().step_true(&[2.0, 4.0], 0).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn echo_contains_run_parameters() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        let keys: Vec<String> = c.echo(None).into_iter().map(|(k, _)| k).collect();
        for k in ["epsilon", "delta", "h", "T", "n_D", "sigma", "seed"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
