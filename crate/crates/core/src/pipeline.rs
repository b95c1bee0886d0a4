//! Staged execution: generate → fit → abstract → verify → mc-check.
//!
//! Each stage reads its inputs from the output directory, writes one artifact
//! and a manifest (`<stage>.manifest`) recording the configuration digest,
//! tool version, wall time and the digests of the files it wrote. Apart from
//! the manifests' timing fields, reruns with the same configuration produce
//! byte-identical files.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::abstraction::{build_imdp, export_imdp, import_imdp, Grid, Imdp};
use crate::bounds::resolve_bounds;
use crate::config::RunConfig;
use crate::dynamics::{generate_dataset, DataSet, SystemSpec};
use crate::error::{Error, Result};
use crate::gp::{default_lambda, optimize_hyperparameters, read_models, write_models, GpModel};
use crate::validation::{constant_strategy, monte_carlo_safety, uniform_random_strategy, McResult, McSettings, Strategy};
use crate::verifier::{read_results_csv, verify, write_results_csv, Horizon, SafetyBounds};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One step of the pipeline, or all of them in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Fit,
    Abstract,
    Verify,
    McCheck,
    Pipeline,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [Stage::Generate, Stage::Fit, Stage::Abstract, Stage::Verify, Stage::McCheck];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Fit => "fit",
            Stage::Abstract => "abstract",
            Stage::Verify => "verify",
            Stage::McCheck => "mc-check",
            Stage::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Pipeline]
            .into_iter()
            .chain(Stage::ORDER)
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// What a stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn open_input(path: &Path, producer: Stage) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Config(format!(
            "stage input {} cannot be opened ({e}); run the `{producer}` stage first or fix the path",
            path.display()
        ))
    })
}

fn create_output(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_manifest(cfg: &RunConfig, digest: &str, stage: Stage, outputs: &[PathBuf], seconds: f64) -> Result<()> {
    let path = cfg.output.dir.join(format!("{}.manifest", stage.name()));
    let mut w = create_output(&path)?;
    writeln!(w, "tool = \"{TOOL_NAME}\"")?;
    writeln!(w, "version = \"{TOOL_VERSION}\"")?;
    writeln!(w, "stage = \"{stage}\"")?;
    writeln!(w, "config_sha256 = \"{digest}\"")?;
    writeln!(w, "wall_time_s = {seconds:.3}")?;
    writeln!(w, "[outputs]")?;
    for out in outputs {
        let bytes = fs::read(out)?;
        writeln!(w, "\"{}\" = \"{}\"", out.display(), sha256_hex(&bytes))?;
    }
    w.flush()?;
    Ok(())
}

fn write_echo<W: Write>(w: &mut W, echo: &[(String, String)]) -> Result<()> {
    for (k, v) in echo {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

/// Runs `stage` (all stages for [`Stage::Pipeline`]) inside a thread pool
/// sized by `threads`. `config_digest` identifies the configuration text.
pub fn run_stage(cfg: &RunConfig, stage: Stage, config_digest: &str) -> Result<Vec<StageReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("threads: {e}")))?;
    pool.install(|| {
        let stages: Vec<Stage> = match stage {
            Stage::Pipeline => Stage::ORDER.to_vec(),
            s => vec![s],
        };
        let mut reports = Vec::new();
        for s in stages {
            let start = Instant::now();
            let report = match s {
                Stage::Generate => stage_generate(cfg)?,
                Stage::Fit => stage_fit(cfg)?,
                Stage::Abstract => stage_abstract(cfg)?,
                Stage::Verify => stage_verify(cfg)?,
                Stage::McCheck => stage_mc_check(cfg)?,
                Stage::Pipeline => unreachable!("expanded above"),
            };
            write_manifest(cfg, config_digest, s, &report.outputs, start.elapsed().as_secs_f64())?;
            info!("{s}: {}", report.summary);
            reports.push(report);
        }
        Ok(reports)
    })
}

fn stage_generate(cfg: &RunConfig) -> Result<StageReport> {
    let spec = cfg.system_spec()?;
    let data = generate_dataset(&spec, &cfg.sampling_region()?, cfg.data.n, cfg.data.sigma, cfg.data.seed)?;
    let path = cfg.dataset_path();
    let mut w = create_output(&path)?;
    data.write_csv(&mut w)?;
    w.flush()?;
    let per_action: Vec<String> = (0..spec.num_actions())
        .map(|a| format!("{}={}", spec.action_names()[a], data.count_for_action(a)))
        .collect();
    Ok(StageReport {
        stage: Stage::Generate,
        outputs: vec![path],
        summary: format!("{} samples ({})", data.samples.len(), per_action.join(", ")),
    })
}

fn load_dataset(cfg: &RunConfig, spec: &SystemSpec) -> Result<DataSet> {
    let data = DataSet::read_csv(open_input(&cfg.dataset_path(), Stage::Generate)?)?;
    if data.action_names != spec.action_names() || data.dim != spec.dim() {
        return Err(Error::State(format!(
            "dataset actions {:?} (dimension {}) do not match system `{}`",
            data.action_names, data.dim, cfg.system.name
        )));
    }
    Ok(data)
}

/// Fits one GP per `(action, output dimension)`.
pub fn fit_models(cfg: &RunConfig, spec: &SystemSpec, data: &DataSet) -> Result<Vec<GpModel>> {
    let grid = cfg.hyper_grid();
    let mut models = Vec::new();
    for a in 0..spec.num_actions() {
        let lambda = cfg.gp.lambda.unwrap_or_else(|| default_lambda(data.count_for_action(a)));
        for i in 0..spec.dim() {
            let kernel = optimize_hyperparameters(data, a, i, &grid, Some(lambda))?;
            let model = GpModel::fit(data, a, i, kernel, lambda)?;
            info!(
                "action {} dim {i}: signal variance {}, lengthscale {}, lambda {lambda}, {} points",
                spec.action_names()[a],
                kernel.signal_variance,
                kernel.lengthscale,
                model.num_points()
            );
            models.push(model);
        }
    }
    Ok(models)
}

fn stage_fit(cfg: &RunConfig) -> Result<StageReport> {
    let spec = cfg.system_spec()?;
    let data = load_dataset(cfg, &spec)?;
    let models = fit_models(cfg, &spec, &data)?;
    let path = cfg.models_path();
    let mut w = create_output(&path)?;
    write_models(&models, &mut w)?;
    w.flush()?;
    Ok(StageReport {
        stage: Stage::Fit,
        outputs: vec![path],
        summary: format!("{} models", models.len()),
    })
}

fn load_models(cfg: &RunConfig) -> Result<Vec<GpModel>> {
    read_models(open_input(&cfg.models_path(), Stage::Fit)?)
}

/// Resolves the error bounds and builds the IMDP.
pub fn abstract_models(cfg: &RunConfig, models: &[GpModel]) -> Result<Imdp> {
    let spec = cfg.system_spec()?;
    let grid = cfg.grid()?;
    let bounds = resolve_bounds(
        &cfg.bounds_config()?,
        models,
        cfg.data.sigma,
        &grid.cells(),
        cfg.abstraction.subgrid_k,
    )?;
    for b in &bounds.models {
        info!(
            "action {} dim {}: B = {}{}, info gain = {}, beta = {:?}",
            b.action,
            b.output_dim,
            b.rkhs_norm,
            if b.rkhs_norm_estimated { " (estimated)" } else { "" },
            b.info_gain,
            b.beta
        );
    }
    build_imdp(&grid, models, spec.num_actions(), &bounds, cfg.abstraction_settings())
}

fn stage_abstract(cfg: &RunConfig) -> Result<StageReport> {
    let models = load_models(cfg)?;
    let imdp = abstract_models(cfg, &models)?;
    let path = cfg.imdp_path();
    let mut w = create_output(&path)?;
    write_echo(&mut w, &cfg.echo(Some(imdp.epsilon)))?;
    export_imdp(&imdp, &mut w)?;
    w.flush()?;
    Ok(StageReport {
        stage: Stage::Abstract,
        outputs: vec![path],
        summary: format!(
            "{} states, {} actions, epsilon {}",
            imdp.num_states(),
            imdp.num_actions(),
            imdp.epsilon
        ),
    })
}

/// Checks the invariants every verification result must satisfy.
pub fn check_safety_bounds(b: &SafetyBounds, unsafe_index: usize) -> Result<()> {
    for (q, (lo, hi)) in b.lower.iter().zip(&b.upper).enumerate() {
        if !(0.0 <= *lo && lo <= hi && *hi <= 1.0) {
            return Err(Error::Soundness(format!("state {q}: bounds [{lo}, {hi}] are not ordered within [0, 1]")));
        }
    }
    if b.iterations_run >= 1 && (b.lower[unsafe_index] != 0.0 || b.upper[unsafe_index] != 0.0) {
        return Err(Error::Soundness("the unsafe state has nonzero safety value".into()));
    }
    Ok(())
}

fn stage_verify(cfg: &RunConfig) -> Result<StageReport> {
    let grid = cfg.grid()?;
    let imdp = import_imdp(open_input(&cfg.imdp_path(), Stage::Abstract)?)?;
    if imdp.num_safe() != grid.num_cells() {
        return Err(Error::State(format!(
            "IMDP has {} safe states but the configured grid has {} cells",
            imdp.num_safe(),
            grid.num_cells()
        )));
    }
    let bounds = verify(&imdp, cfg.horizon()?, cfg.verify.tol)?;
    check_safety_bounds(&bounds, imdp.unsafe_index())?;
    let echo = cfg.echo(Some(imdp.epsilon));
    let results = cfg.results_path();
    let mut w = create_output(&results)?;
    write_results_csv(&bounds, &echo, &mut w)?;
    w.flush()?;
    let heatmap = cfg.heatmap_path();
    let mut w = create_output(&heatmap)?;
    export_heatmap(&bounds, &grid, &echo, &mut w)?;
    w.flush()?;
    let surely_safe = (0..grid.num_cells()).filter(|&q| bounds.lower[q] == 1.0).count();
    Ok(StageReport {
        stage: Stage::Verify,
        outputs: vec![results, heatmap],
        summary: format!(
            "horizon {}, {} iterations{}, {surely_safe} of {} cells with p_min = 1",
            bounds.horizon,
            bounds.iterations_run,
            if bounds.converged { "" } else { " (not converged)" },
            grid.num_cells()
        ),
    })
}

/// Writes `x_lo,x_hi,y_lo,y_hi,p_min,p_max` per cell and a final unsafe-state
/// row with empty geometry. Grids that are not 2-D get `state_index,p_min,p_max`.
pub fn export_heatmap<W: Write>(
    bounds: &SafetyBounds,
    grid: &Grid,
    echo: &[(String, String)],
    mut sink: W,
) -> Result<()> {
    if bounds.num_states() != grid.num_cells() + 1 {
        return Err(Error::State(format!(
            "{} result rows for a grid of {} cells",
            bounds.num_states(),
            grid.num_cells()
        )));
    }
    write_echo(&mut sink, echo)?;
    let u = grid.unsafe_index();
    if grid.dim() != 2 {
        warn!("heatmap geometry is 2-D only; writing the index-only format");
        writeln!(sink, "# notice=heatmap geometry is 2-D only; index-only format")?;
        writeln!(sink, "state_index,p_min,p_max")?;
        for q in 0..=u {
            writeln!(sink, "{q},{},{}", bounds.lower[q], bounds.upper[q])?;
        }
        return Ok(());
    }
    writeln!(sink, "x_lo,x_hi,y_lo,y_hi,p_min,p_max")?;
    for q in 0..u {
        let c = grid.cell(q);
        writeln!(
            sink,
            "{},{},{},{},{},{}",
            c.lo()[0],
            c.hi()[0],
            c.lo()[1],
            c.hi()[1],
            bounds.lower[q],
            bounds.upper[q]
        )?;
    }
    writeln!(sink, ",,,,{},{}", bounds.lower[u], bounds.upper[u])?;
    Ok(())
}

/// Reads the `(p_min, p_max)` columns of either heatmap format.
pub fn read_heatmap<R: BufRead>(source: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut header = false;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !header {
            if t != "x_lo,x_hi,y_lo,y_hi,p_min,p_max" && t != "state_index,p_min,p_max" {
                return Err(Error::parse(i + 1, "unrecognised heatmap header"));
            }
            header = true;
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        let n = fields.len();
        if n < 3 {
            return Err(Error::parse(i + 1, "too few fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(i + 1, format!("invalid number `{s}`")));
        lower.push(num(fields[n - 2])?);
        upper.push(num(fields[n - 1])?);
    }
    if !header {
        return Err(Error::parse(1, "missing heatmap header"));
    }
    Ok((lower, upper))
}

/// Largest `|mu(x) - f_i(x, a)|` over `points` random states of the safe box.
pub fn gp_error_audit(
    spec: &SystemSpec,
    models: &[GpModel],
    region: &crate::geometry::Region,
    points: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..points)
        .map(|_| {
            (0..region.dim())
                .map(|d| rng.random_range(region.lo()[d]..=region.hi()[d]))
                .collect()
        })
        .collect();
    models
        .iter()
        .map(|m| {
            let mut worst: f64 = 0.0;
            for x in &xs {
                let f = spec.step_true(x, m.action)?[m.output_dim];
                worst = worst.max((m.posterior_mean(x) - f).abs());
            }
            Ok((m.action, m.output_dim, worst))
        })
        .collect()
}

fn stage_mc_check(cfg: &RunConfig) -> Result<StageReport> {
    let spec = cfg.system_spec()?;
    let grid = cfg.grid()?;
    let models = load_models(cfg)?;
    let (bounds, meta) = read_results_csv(open_input(&cfg.results_path(), Stage::Verify)?)?;
    if bounds.num_states() != grid.num_cells() + 1 {
        return Err(Error::State(format!(
            "results have {} states but the configured grid has {} cells",
            bounds.num_states(),
            grid.num_cells()
        )));
    }
    let epsilon: Option<f64> = meta
        .iter()
        .find(|(k, _)| k == "epsilon")
        .and_then(|(_, v)| v.parse().ok());
    let seed = cfg.mc.seed.unwrap_or(cfg.data.seed.wrapping_add(1));

    let audit = gp_error_audit(&spec, &models, grid.safe_box(), cfg.mc.error_points, seed)?;

    let (steps, finite) = match bounds.horizon {
        Horizon::Finite(t) => (t, true),
        Horizon::Infinite => (cfg.mc.horizon, false),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<usize> = if cfg.mc.cells >= grid.num_cells() {
        (0..grid.num_cells()).collect()
    } else {
        sample(&mut rng, grid.num_cells(), cfg.mc.cells).into_vec()
    };
    cells.sort_unstable();

    let mut strategies: Vec<(String, Box<Strategy<'static>>)> = spec
        .action_names()
        .into_iter()
        .enumerate()
        .map(|(a, name)| (format!("constant:{name}"), Box::new(constant_strategy(a)) as Box<Strategy<'static>>))
        .collect();
    if spec.num_actions() > 1 {
        strategies.push(("uniform_random".into(), Box::new(uniform_random_strategy(spec.num_actions()))));
    }

    let path = cfg.mc_report_path();
    let mut w = create_output(&path)?;
    write_echo(&mut w, &cfg.echo(epsilon))?;
    writeln!(w, "# simulated_steps={steps}")?;
    let names = spec.action_names();
    for (a, i, worst) in &audit {
        let within = epsilon.map_or(String::new(), |e| format!(" within_epsilon={}", *worst <= e));
        writeln!(w, "# gp_error action={} dim={i} sup_abs_error={worst}{within}", names[*a])?;
    }
    let coords: Vec<String> = (1..=spec.dim()).map(|d| format!("x{d}")).collect();
    writeln!(
        w,
        "state_index,strategy,{},{},p_min,p_max,consistent",
        coords.join(","),
        McResult::CSV_HEADER
    )?;
    let (mut checked, mut consistent) = (0usize, 0usize);
    for &q in &cells {
        let cell = grid.cell(q);
        let x0: Vec<f64> = (0..spec.dim())
            .map(|d| rng.random_range(cell.lo()[d]..cell.hi()[d]))
            .collect();
        for (k, (name, strategy)) in strategies.iter().enumerate() {
            let settings = McSettings {
                horizon: steps,
                sigma: cfg.data.sigma,
                trials: cfg.mc.trials,
                seed: seed ^ ((q as u64) << 20) ^ k as u64,
                confidence: cfg.mc.confidence,
            };
            let r = monte_carlo_safety(&spec, grid.safe_box(), &x0, strategy.as_ref(), settings)?;
            let (lo, hi) = (bounds.lower[q], bounds.upper[q]);
            // An infinite-horizon upper bound says nothing about a finite simulation.
            let ok = if finite { r.meets(lo, hi) } else { r.ci_high >= lo };
            checked += 1;
            consistent += ok as usize;
            let xs: Vec<String> = x0.iter().map(f64::to_string).collect();
            writeln!(w, "{q},{name},{},{},{lo},{hi},{ok}", xs.join(","), r.csv_row())?;
        }
    }
    w.flush()?;
    if consistent < checked {
        warn!("{} of {checked} simulations fall outside their verified bounds", checked - consistent);
    }
    let worst = audit.iter().map(|t| t.2).fold(0.0, f64::max);
    Ok(StageReport {
        stage: Stage::McCheck,
        outputs: vec![path],
        summary: format!(
            "{consistent}/{checked} simulations consistent with the bounds; largest GP error {worst:.4}{}",
            epsilon.map_or(String::new(), |e| format!(" (epsilon {e})"))
        ),
    })
}
