//! Certified-safe sets of a nonlinear spiral shrink as the horizon grows and
//! stay nested: a cell safe for T steps is also safe for fewer steps.
//!
//! ```sh
//! cargo run --release --example nonlinear_horizons
//! ```

use std::fs;
use std::path::Path;

use gpverify::config::RunConfig;
use gpverify::dynamics::generate_dataset;
use gpverify::pipeline::{abstract_models, fit_models};
use gpverify::verifier::verify_finite;

fn main() -> gpverify::Result<()> {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/nonlinear.toml"))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    let spec = cfg.system_spec()?;
    let data = generate_dataset(&spec, &cfg.sampling_region()?, cfg.data.n, cfg.data.sigma, cfg.data.seed)?;
    let models = fit_models(&cfg, &spec, &data)?;
    let imdp = abstract_models(&cfg, &models)?;
    let grid = cfg.grid()?;
    let [nx, ny] = [grid.counts()[0], grid.counts()[1]];

    let horizons = [1, 2, 4, 6];
    let sets: Vec<Vec<bool>> = horizons
        .iter()
        .map(|&t| verify_finite(&imdp, t).lower[..grid.num_cells()].iter().map(|&p| p == 1.0).collect())
        .collect();
    for (t, set) in horizons.iter().zip(&sets) {
        println!("T = {t}: {} cells with p_min = 1", set.iter().filter(|&&s| s).count());
    }
    let nested = sets.windows(2).all(|w| w[1].iter().zip(&w[0]).all(|(&later, &earlier)| !later || earlier));
    println!("nested: {nested}\n");

    // Digit = largest listed horizon for which the cell is certified.
    println!("largest certified horizon per cell (. = none):");
    for row in (0..ny).rev() {
        let line: String = (0..nx)
            .map(|col| {
                let q = grid.flat_index(&[col, row]);
                match (0..sets.len()).rev().find(|&i| sets[i][q]) {
                    Some(i) => char::from_digit(horizons[i] as u32, 10).unwrap_or('*'),
                    None => '.',
                }
            })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
