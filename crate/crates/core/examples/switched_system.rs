//! A two-mode switched system where either matrix may be applied at each
//! step. `p_min` holds for every switching sequence and `p_max` is reached by
//! the best one, so the switched lower bound never exceeds either single-mode
//! lower bound, and the switched upper bound never falls below either
//! single-mode upper bound. Both modes are stable on their own, yet some
//! switching sequences drive every state out of the safe set.
//!
//! ```sh
//! cargo run --release --example switched_system
//! ```

use gpverify::config::RunConfig;
use gpverify::dynamics::generate_dataset;
use gpverify::gp::GpModel;
use gpverify::pipeline::{abstract_models, fit_models};
use gpverify::verifier::{verify_finite, verify_infinite, DEFAULT_TOL, MAX_ITERATIONS};

fn config(system: &str) -> gpverify::Result<RunConfig> {
    RunConfig::from_toml_str(&format!(
        r#"system.name = "{system}"
grid.safe_box = [[-4.0, 4.0], [-4.0, 4.0]]
grid.h = 0.5
data.n = 1000
data.sigma = 0.01
data.seed = 2
gp.per_decade = 5
bounds.delta = 0.0
bounds.epsilon = 0.12
verify.horizon = "inf"
output.dir = "unused"
"#
    ))
}

fn main() -> gpverify::Result<()> {
    let cfg = config("switched")?;
    let spec = cfg.system_spec()?;
    let data = generate_dataset(&spec, &cfg.sampling_region()?, cfg.data.n, cfg.data.sigma, cfg.data.seed)?;
    let models = fit_models(&cfg, &spec, &data)?;
    let switched = abstract_models(&cfg, &models)?;

    // Single-mode abstractions reuse the switched models of that mode.
    let mut single = Vec::new();
    for (a, name) in spec.action_names().iter().enumerate() {
        let mode: Vec<GpModel> = models
            .iter()
            .filter(|m| m.action == a)
            .cloned()
            .map(|mut m| {
                m.action = 0;
                m
            })
            .collect();
        single.push((name.clone(), abstract_models(&config(name)?, &mode)?));
    }

    let m = switched.num_safe();
    let surely = |lower: &[f64]| (0..m).filter(|&q| lower[q] == 1.0).count();
    let possible = |upper: &[f64]| (0..m).filter(|&q| upper[q] == 1.0).count();
    println!("cells out of {m} with p_min = 1 / p_max = 1:");
    println!("{:>8} {:>10}{}", "T", "switched", single.iter().map(|(n, _)| format!("{n:>10}")).collect::<String>());
    for t in [1, 5, 20, 100] {
        let cell = |imdp| {
            let b = verify_finite(imdp, t);
            format!("{:>10}", format!("{}/{}", surely(&b.lower), possible(&b.upper)))
        };
        let modes: String = single.iter().map(|(_, imdp)| cell(imdp)).collect();
        println!("{t:>8} {}{modes}", cell(&switched));
    }
    let fix = verify_infinite(&switched, DEFAULT_TOL, MAX_ITERATIONS)?;
    println!(
        "{:>8} {:>10}   (fixpoint after {} iterations, converged: {})",
        "inf",
        format!("{}/{}", surely(&fix.lower), possible(&fix.upper)),
        fix.iterations_run,
        fix.converged
    );
    Ok(())
}
