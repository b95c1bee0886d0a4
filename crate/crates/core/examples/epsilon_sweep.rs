//! How the abstraction margin trades soundness against precision. A margin
//! below the actual regression error makes the abstraction unreliable; a
//! large margin makes it sound but loose. The measured error is printed for
//! reference.
//!
//! ```sh
//! cargo run --release --example epsilon_sweep
//! ```

use gpverify::config::RunConfig;
use gpverify::dynamics::generate_dataset;
use gpverify::pipeline::{abstract_models, fit_models, gp_error_audit};
use gpverify::verifier::verify_finite;

const BASE: &str = r#"system.name = "rotation"
grid.safe_box = [[-4.0, 4.0], [-4.0, 4.0]]
grid.h = 0.5
data.n = 1000
data.sigma = 0.01
data.seed = 1
bounds.delta = 0.0
bounds.epsilon = 0.12
verify.horizon = 10
output.dir = "unused"
"#;

fn main() -> gpverify::Result<()> {
    let cfg = RunConfig::from_toml_str(BASE)?;
    let spec = cfg.system_spec()?;
    let safe = cfg.safe_box()?;
    let data = generate_dataset(&spec, &cfg.sampling_region()?, cfg.data.n, cfg.data.sigma, cfg.data.seed)?;
    let models = fit_models(&cfg, &spec, &data)?;
    let worst = gp_error_audit(&spec, &models, &safe, 2500, 7)?
        .into_iter()
        .map(|(_, _, e)| e)
        .fold(0.0, f64::max);
    println!("largest |mean - f| over 2500 random states: {worst:.4}\n");

    println!("{:>8} {:>14} {:>14} {:>12}", "epsilon", "p_min = 1", "p_max < 1", "mean gap");
    for eps in [0.02, 0.05, 0.12, 0.25, 0.5, 1.0] {
        let cfg = RunConfig::from_toml_str_with(BASE, &[format!("bounds.epsilon={eps}")])?;
        let imdp = abstract_models(&cfg, &models)?;
        let b = verify_finite(&imdp, 10);
        let m = imdp.num_safe();
        let certified = (0..m).filter(|&q| b.lower[q] == 1.0).count();
        let refuted = (0..m).filter(|&q| b.upper[q] < 1.0).count();
        let gap = (0..m).map(|q| b.upper[q] - b.lower[q]).sum::<f64>() / m as f64;
        let flag = if eps < worst { "  (below measured error)" } else { "" };
        println!("{eps:>8} {certified:>14} {refuted:>14} {gap:>12.3}{flag}");
    }
    Ok(())
}
