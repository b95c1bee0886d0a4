//! Compares verified bounds with simulation of the true system: for a few
//! cells, the fraction of trajectories that stay safe under a fixed strategy
//! should not be confidently outside `[p_min, p_max]`. Also checks one
//! abstract transition interval against sampled one-step transitions.
//!
//! ```sh
//! cargo run --release --example monte_carlo_audit
//! ```

use gpverify::config::RunConfig;
use gpverify::dynamics::generate_dataset;
use gpverify::pipeline::{abstract_models, fit_models};
use gpverify::validation::{
    constant_strategy, empirical_transition_check, monte_carlo_safety, Destination, McSettings, DEFAULT_CONFIDENCE,
};
use gpverify::verifier::verify_finite;

fn main() -> gpverify::Result<()> {
    let cfg = RunConfig::from_toml_str(
        r#"system.name = "upper"
grid.safe_box = [[-4.0, 4.0], [-4.0, 4.0]]
grid.h = 0.5
data.n = 1000
data.sigma = 0.01
data.seed = 4
bounds.delta = 0.0
bounds.epsilon = 0.12
verify.horizon = 10
output.dir = "unused"
"#,
    )?;
    let spec = cfg.system_spec()?;
    let safe = cfg.safe_box()?;
    let grid = cfg.grid()?;
    let data = generate_dataset(&spec, &cfg.sampling_region()?, cfg.data.n, cfg.data.sigma, cfg.data.seed)?;
    let models = fit_models(&cfg, &spec, &data)?;
    let imdp = abstract_models(&cfg, &models)?;
    let horizon = 10;
    let bounds = verify_finite(&imdp, horizon);

    let settings = McSettings {
        horizon,
        sigma: cfg.data.sigma,
        trials: 500,
        seed: 99,
        confidence: DEFAULT_CONFIDENCE,
    };
    let strategy = constant_strategy(0);
    println!("{:>5} {:>18} {:>10} {:>22} {:>8}", "cell", "center", "estimate", "bounds", "agrees");
    for q in (0..grid.num_cells()).step_by(23) {
        let x0 = grid.cell(q).center();
        let mc = monte_carlo_safety(&spec, &safe, &x0, &strategy, settings)?;
        println!(
            "{q:>5} {:>18} {:>10.3} {:>22} {:>8}",
            format!("({:.2}, {:.2})", x0[0], x0[1]),
            mc.point_estimate,
            format!("[{:.3}, {:.3}]", bounds.lower[q], bounds.upper[q]),
            mc.meets(bounds.lower[q], bounds.upper[q])
        );
    }

    // One-step check of the exit probability for a few cells on the right edge.
    println!("\n{:>5} {:>18} {:>16} {:>16} {:>11}", "cell", "center", "P(leave) bound", "sampled range", "consistent");
    for k in [0, 3, 6, 9, 12, 15] {
        let q = grid.flat_index(&[15, k]);
        let interval = imdp.interval(q, 0, imdp.unsafe_index());
        let env = empirical_transition_check(
            &spec,
            &grid.cell(q),
            0,
            &Destination::Outside(safe.clone()),
            cfg.data.sigma,
            200,
            200,
            5,
            DEFAULT_CONFIDENCE,
        )?;
        let c = grid.cell(q).center();
        println!(
            "{q:>5} {:>18} {:>16} {:>16} {:>11}",
            format!("({:.2}, {:.2})", c[0], c[1]),
            format!("[{:.3}, {:.3}]", interval.lower, interval.upper),
            format!("[{:.3}, {:.3}]", env.min.point_estimate, env.max.point_estimate),
            env.consistent_with(&interval)
        );
    }
    Ok(())
}
