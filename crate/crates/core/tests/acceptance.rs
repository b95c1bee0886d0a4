//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Run with `cargo test --release -p gpverify --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gpverify::abstraction::{Grid, Imdp};
use gpverify::bounds::{beta, information_gain};
use gpverify::config::RunConfig;
use gpverify::dynamics::{generate_dataset, sample_noise, SystemSpec};
use gpverify::gp::{default_lambda, GpModel, SeKernelParams};
use gpverify::pipeline::{abstract_models, fit_models, run_stage, sha256_hex, Stage};
use gpverify::validation::{
    empirical_transition_check, enumerate_extreme_adversaries, random_endpoint_imdp, Destination,
};
use gpverify::verifier::{verify_finite_observed, verify_infinite, SafetyBounds, DEFAULT_TOL, MAX_ITERATIONS};

type Outcome = Result<String, String>;

/// Collects verifier invariant violations across every run in the suite.
#[derive(Default)]
struct Invariants {
    runs: usize,
    steps: usize,
    violations: Vec<String>,
}

impl Invariants {
    /// Finite-horizon verification with every invariant asserted at every step.
    fn verify(&mut self, label: &str, imdp: &Imdp, t: usize) -> SafetyBounds {
        let u = imdp.unsafe_index();
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut bad = Vec::new();
        let b = verify_finite_observed(imdp, t, |k, lo, hi| {
            if k == 0 && (lo[..u].iter().chain(&hi[..u]).any(|v| *v != 1.0) || lo[u] != 0.0 || hi[u] != 0.0) {
                bad.push(format!("{label}: bad initialisation"));
            }
            if lo.iter().zip(hi).any(|(a, b)| a > b) {
                bad.push(format!("{label}: p_min > p_max at step {k}"));
            }
            if k >= 1 && (lo[u] != 0.0 || hi[u] != 0.0) {
                bad.push(format!("{label}: unsafe state nonzero at step {k}"));
            }
            if let Some((pl, ph)) = &prev {
                if lo.iter().zip(pl).chain(hi.iter().zip(ph)).any(|(a, b)| a > b) {
                    bad.push(format!("{label}: bounds increased at step {k}"));
                }
            }
            prev = Some((lo.to_vec(), hi.to_vec()));
        });
        self.runs += 1;
        self.steps += t + 1;
        self.violations.extend(bad);
        b
    }
}

fn config_text(system: &str, seed: u64, extra: &str) -> String {
    format!(
        r#"system.name = "{system}"
grid.safe_box = [[-4.0, 4.0], [-4.0, 4.0]]
grid.h = 0.25
data.n = 1000
data.sigma = 0.01
data.seed = {seed}
bounds.delta = 0.0
bounds.epsilon_mode = "explicit"
bounds.epsilon = 0.12
verify.horizon = 10
output.dir = "unused"
{extra}"#
    )
}

struct Run {
    cfg: RunConfig,
    spec: SystemSpec,
    grid: Grid,
    models: Vec<GpModel>,
    imdp: Imdp,
}

fn build(system: &str, seed: u64, extra: &str) -> Result<Run, String> {
    let cfg = RunConfig::from_toml_str(&config_text(system, seed, extra)).map_err(|e| e.to_string())?;
    let spec = cfg.system_spec().map_err(|e| e.to_string())?;
    let data = generate_dataset(&spec, &cfg.sampling_region().unwrap(), cfg.data.n, cfg.data.sigma, seed)
        .map_err(|e| e.to_string())?;
    let models = fit_models(&cfg, &spec, &data).map_err(|e| e.to_string())?;
    let imdp = abstract_models(&cfg, &models).map_err(|e| e.to_string())?;
    let grid = cfg.grid().map_err(|e| e.to_string())?;
    Ok(Run {
        cfg,
        spec,
        grid,
        models,
        imdp,
    })
}

fn within(limit: Duration, start: Instant) -> Result<String, String> {
    let took = start.elapsed();
    if took <= limit {
        Ok(format!("{:.1}s", took.as_secs_f64()))
    } else {
        Err(format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
    }
}

/// Posterior mean and variance against an explicit inverse of `K + lambda I`.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(10..=200);
        let kernel = SeKernelParams::new(rng.random_range(0.5..5.0), rng.random_range(0.5..3.0)).unwrap();
        let lambda = rng.random_range(0.1..2.0);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0].sin() + 0.3 * x[1] + rng.random_range(-0.1..0.1)).collect();
        let model = GpModel::fit_points(xs.clone(), ys.clone(), kernel, lambda).map_err(|e| e.to_string())?;
        let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(&xs[i], &xs[j]) + if i == j { lambda } else { 0.0 });
        let inv = k.full_piv_lu().try_inverse().ok_or("dense inverse failed")?;
        let y = DVector::from_vec(ys);
        for _ in 0..20 {
            let x = vec![rng.random_range(-4.5..4.5), rng.random_range(-4.5..4.5)];
            let kx = DVector::from_fn(n, |i, _| kernel.eval(&x, &xs[i]));
            let mean = (kx.transpose() * &inv * &y)[0];
            let var = kernel.signal_variance - (kx.transpose() * &inv * &kx)[0];
            worst = worst
                .max((model.posterior_mean(&x) - mean).abs())
                .max((model.posterior_var(&x) - var.max(0.0)).abs());
        }
    }
    if worst > 1e-8 {
        return Err(format!("largest deviation {worst:e}"));
    }
    Ok(format!("20 instances, largest deviation {worst:.1e}, {}", within(Duration::from_secs(10), start)?))
}

fn criterion_2(inv: &mut Invariants) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let count = 2000;
    for i in 0..count {
        let imdp = random_endpoint_imdp(&mut rng, 3, 2);
        let t = rng.random_range(0..=4);
        let (lo, hi) = enumerate_extreme_adversaries(&imdp, t).map_err(|e| e.to_string())?;
        let b = inv.verify("random endpoint IMDP", &imdp, t);
        if b.lower != lo || b.upper != hi {
            return Err(format!("instance {i}: value iteration {:?}/{:?}, oracle {lo:?}/{hi:?}", b.lower, b.upper));
        }
    }
    Ok(format!("{count} instances agree exactly, {}", within(Duration::from_secs(60), start)?))
}

fn criterion_3(inv: &mut Invariants) -> Outcome {
    use gpverify::abstraction::{ImdpRow, TransitionInterval};
    let row = ImdpRow::new(
        vec![
            (0, TransitionInterval::new(0.8, 0.9).unwrap()),
            (1, TransitionInterval::new(0.1, 0.2).unwrap()),
        ],
        TransitionInterval::ZERO,
    );
    let imdp = Imdp::new(1, 1, vec![vec![row]]).map_err(|e| e.to_string())?;
    let b = inv.verify("hand chain", &imdp, 2);
    // 0.8 * 0.8 and 0.9 * 0.9 are not representable; compare to the rounded products.
    if b.lower[0] != 0.8 * 0.8 || b.upper[0] != 0.9 * 0.9 {
        return Err(format!("got [{}, {}]", b.lower[0], b.upper[0]));
    }
    Ok(format!("p_min = {}, p_max = {}", b.lower[0], b.upper[0]))
}

fn criterion_4(rotation: &Run) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (imdp, grid) = (&rotation.imdp, &rotation.grid);
    let triples = 200;
    let mut contained = 0;
    let mut informative = 0;
    let mut failures = Vec::new();
    for i in 0..triples {
        let q = rng.random_range(0..grid.num_cells());
        let row = imdp.row(q, 0);
        // half of the triples target destinations with nontrivial bounds
        let informative_dests: Vec<usize> = row
            .entries
            .iter()
            .filter(|(_, t)| t.lower > 0.0 || t.upper < 1.0)
            .map(|(d, _)| *d)
            .collect();
        let dest = if i % 2 == 0 && !informative_dests.is_empty() {
            informative_dests[rng.random_range(0..informative_dests.len())]
        } else {
            rng.random_range(0..grid.num_cells() + 1)
        };
        let interval = imdp.interval(q, 0, dest);
        let target = if dest == grid.unsafe_index() {
            Destination::Outside(grid.safe_box().clone())
        } else {
            Destination::Cell(grid.cell(dest))
        };
        let env = empirical_transition_check(
            &rotation.spec,
            &grid.cell(q),
            0,
            &target,
            rotation.cfg.data.sigma,
            100,
            200,
            1000 + i,
            0.99,
        )
        .map_err(|e| e.to_string())?;
        informative += (interval.lower > 0.0 || interval.upper < 1.0) as usize;
        if env.consistent_with(&interval) {
            contained += 1;
        } else {
            failures.push(format!("({q},{dest}) [{}, {}] vs {} / {}", interval.lower, interval.upper, env.min, env.max));
        }
    }
    let rate = contained as f64 / triples as f64;
    if rate < 0.99 {
        return Err(format!("{contained}/{triples} contained; e.g. {}", failures.join("; ")));
    }
    Ok(format!(
        "{contained}/{triples} contained ({informative} with nontrivial intervals), {}",
        within(Duration::from_secs(300), start)?
    ))
}

fn corner_cells(grid: &Grid) -> Vec<usize> {
    let (lo, hi) = (grid.safe_box().lo(), grid.safe_box().hi());
    let e = grid.side() / 2.0;
    [[lo[0] + e, lo[1] + e], [lo[0] + e, hi[1] - e], [hi[0] - e, lo[1] + e], [hi[0] - e, hi[1] - e]]
        .iter()
        .map(|c| grid.locate(c))
        .collect()
}

fn origin_cells(grid: &Grid) -> Vec<usize> {
    (0..grid.num_cells())
        .filter(|&q| {
            let c = grid.cell(q);
            (0..2).all(|d| c.lo()[d] <= 0.0 && 0.0 <= c.hi()[d])
        })
        .collect()
}

fn criterion_5(inv: &mut Invariants) -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    // a coarser hyperparameter search keeps 30 fits affordable
    let extra = "gp.per_decade = 5\ngp.max_points = 200\n";
    for system in ["rotation", "upper", "lower"] {
        let mut passed = 0;
        for seed in 1..=10 {
            let run = build(system, seed, extra)?;
            let b = inv.verify(system, &run.imdp, 10);
            let near_origin = origin_cells(&run.grid).iter().any(|&q| b.lower[q] == 1.0);
            let corner_leaves = corner_cells(&run.grid).iter().any(|&q| b.upper[q] < 0.05);
            passed += (near_origin && corner_leaves) as usize;
        }
        ok &= passed >= 9;
        lines.push(format!("{system} {passed}/10"));
    }
    let summary = format!("{} seeds pass, {:.1}s", lines.join(", "), start.elapsed().as_secs_f64());
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Keeps the models of one action and renames it to action 0.
fn single_action(run: &Run, action: usize) -> Result<Imdp, String> {
    let models: Vec<GpModel> = run
        .models
        .iter()
        .filter(|m| m.action == action)
        .cloned()
        .map(|mut m| {
            m.action = 0;
            m
        })
        .collect();
    let name = &run.spec.action_names()[action];
    let cfg = RunConfig::from_toml_str(&config_text(name, run.cfg.data.seed, "")).map_err(|e| e.to_string())?;
    abstract_models(&cfg, &models).map_err(|e| e.to_string())
}

fn criterion_6(inv: &mut Invariants) -> Outcome {
    let start = Instant::now();
    let run = build("switched", 1, "")?;
    let upper = single_action(&run, 0)?;
    let lower = single_action(&run, 1)?;
    let m = run.grid.num_cells();
    let mut details = Vec::new();
    for t in [1, 1000] {
        let sw = inv.verify("switched", &run.imdp, t);
        let up = inv.verify("switched/upper", &upper, t);
        let lo = inv.verify("switched/lower", &lower, t);
        if let Some(q) = (0..m).find(|&q| sw.lower[q] > up.lower[q].min(lo.lower[q]) + 1e-12) {
            return Err(format!("T={t}, cell {q}: switched {} > min({}, {})", sw.lower[q], up.lower[q], lo.lower[q]));
        }
        let safe = (0..m).filter(|&q| sw.lower[q] == 1.0).count();
        details.push(format!("T={t}: {safe} cells with p_min = 1"));
        if t == 1000 {
            if safe == 0 {
                return Err("no cell keeps p_min = 1 at T = 1000".into());
            }
            let fix = verify_infinite(&run.imdp, DEFAULT_TOL, MAX_ITERATIONS).map_err(|e| e.to_string())?;
            let gap = fix
                .lower
                .iter()
                .zip(&sw.lower)
                .chain(fix.upper.iter().zip(&sw.upper))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if !fix.converged || gap > DEFAULT_TOL {
                return Err(format!("fixpoint not reached: converged {}, gap {gap:e}", fix.converged));
            }
            details.push(format!("fixpoint after {} iterations, gap to T=1000 {gap:.1e}", fix.iterations_run));
        }
    }
    Ok(format!("{}, {}", details.join("; "), within(Duration::from_secs(600), start)?))
}

fn criterion_7(inv: &mut Invariants) -> Outcome {
    let run = build("nonlinear", 1, "")?;
    let m = run.grid.num_cells();
    let sets: Vec<Vec<usize>> = [1, 2, 4, 6]
        .iter()
        .map(|&t| {
            let b = inv.verify("nonlinear", &run.imdp, t);
            (0..m).filter(|&q| b.lower[q] == 1.0).collect()
        })
        .collect();
    for w in sets.windows(2) {
        if !w[1].iter().all(|q| w[0].contains(q)) {
            return Err("surely-safe sets are not nested".into());
        }
    }
    let last = &sets[3];
    let near = last
        .iter()
        .filter(|&&q| run.grid.cell(q).center().iter().all(|c| c.abs() <= 2.0))
        .count();
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    let detail = format!("set sizes {sizes:?} for T = 1, 2, 4, 6; {near}/{} T=6 cells within inf-distance 2", last.len());
    if last.is_empty() || 2 * near <= last.len() {
        return Err(detail);
    }
    Ok(detail)
}

fn criterion_8(inv: &Invariants) -> Outcome {
    let detail = format!("{} verification runs, {} steps checked", inv.runs, inv.steps);
    if inv.violations.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", inv.violations[..inv.violations.len().min(5)].join("; ")))
    }
}

/// Uniform error bound of the regression on a function of known RKHS norm.
fn criterion_9() -> Outcome {
    let kernel = SeKernelParams::new(1.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centers: Vec<f64> = (0..10).map(|i| 0.25 + 0.5 * i as f64).collect();
    let coef: Vec<f64> = centers.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |x: f64| -> f64 { centers.iter().zip(&coef).map(|(c, a)| a * kernel.eval(&[x], &[*c])).sum() };
    let norm_sq: f64 = centers
        .iter()
        .zip(&coef)
        .flat_map(|(ci, ai)| centers.iter().zip(&coef).map(move |(cj, aj)| ai * aj * kernel.eval(&[*ci], &[*cj])))
        .sum();
    let b = norm_sq.sqrt();
    let (delta, sigma, n, runs) = (0.1, 1.0, 200, 100);
    let lambda = default_lambda(n);
    let test: Vec<f64> = (0..200).map(|i| 5.0 * i as f64 / 199.0).collect();
    let mut held = 0;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + run);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..5.0)]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| f(x[0]) + sample_noise(&mut rng, sigma, 1)[0]).collect();
        let model = GpModel::fit_points(xs, ys, kernel, lambda).map_err(|e| e.to_string())?;
        let bt = beta(b, sigma, lambda, information_gain(&model), delta).map_err(|e| e.to_string())?;
        if test
            .iter()
            .all(|&x| (model.posterior_mean(&[x]) - f(x)).abs() <= bt * model.posterior_var(&[x]).sqrt())
        {
            held += 1;
        }
    }
    let need = ((1.0 - delta) * runs as f64 - 10.0).ceil() as usize;
    let detail = format!("bound held in {held}/{runs} runs (need {need}), B = {b:.3}, sigma = {sigma}");
    if held >= need {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = config_text("rotation", 1, "").replace("output.dir = \"unused\"", &format!("output.dir = {:?}", dir.path()));
    let cfg = RunConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    let reports = run_stage(&cfg, Stage::Pipeline, &sha256_hex(text.as_bytes())).map_err(|e| e.to_string())?;
    let rows = std::fs::read_to_string(cfg.results_path())
        .map_err(|e| e.to_string())?
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1;
    if rows != 1025 {
        return Err(format!("results have {rows} rows"));
    }
    Ok(format!(
        "{} stages, {rows} result rows, {}",
        reports.len(),
        within(Duration::from_secs(300), start)?
    ))
}

fn main() -> ExitCode {
    let mut inv = Invariants::default();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("criterion {n:2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {d}");
            }
        }
    };
    report(1, "GP posterior vs dense solve", criterion_1());
    report(2, "adversary optimisation vs brute force", criterion_2(&mut inv));
    report(3, "hand-solved chain", criterion_3(&mut inv));
    let rotation = build("rotation", 1, "");
    let c4 = rotation.as_ref().map_err(Clone::clone).and_then(criterion_4);
    if let Ok(run) = &rotation {
        inv.verify("rotation", &run.imdp, 10);
    }
    report(4, "transition interval soundness", c4);
    report(5, "linear systems, qualitative", criterion_5(&mut inv));
    report(6, "switched system", criterion_6(&mut inv));
    report(7, "nonlinear system", criterion_7(&mut inv));
    report(9, "regression error bound validity", criterion_9());
    report(10, "desk-scale runtime", criterion_10());
    report(8, "verifier invariants", criterion_8(&inv));
    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
