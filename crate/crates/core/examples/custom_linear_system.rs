//! Uses the library directly, without a configuration file, on a
//! three-dimensional linear system defined in code: a slowly decaying
//! rotation in the first two coordinates that drives the third. Each step of
//! the abstraction over-approximates the reachable cells, so on this coarse
//! grid the certificates fade as the horizon grows.
//!
//! ```sh
//! cargo run --release --example custom_linear_system
//! ```

use gpverify::abstraction::{build_imdp, AbstractionSettings, Grid};
use gpverify::bounds::{resolve_bounds, BoundsConfig, EpsilonMode};
use gpverify::dynamics::{generate_dataset, Dynamics, SystemSpec};
use gpverify::geometry::Region;
use gpverify::gp::{default_lambda, log_space, optimize_hyperparameters, GpModel, HyperGrid};
use gpverify::verifier::{verify, Horizon, DEFAULT_TOL};

fn main() -> gpverify::Result<()> {
    let a = vec![vec![0.7, 0.3, 0.0], vec![-0.3, 0.7, 0.0], vec![0.0, 0.3, 0.7]];
    let spec = SystemSpec::new(vec![("damped".to_string(), Dynamics::Linear(a))])?;
    let safe = Region::cube(-2.0, 2.0, 3)?;
    let data = generate_dataset(&spec, &safe, 600, 0.01, 21)?;

    let hyper = HyperGrid {
        signal_variances: log_space(1e-1, 1e3, 4),
        lengthscales: log_space(1e-1, 1e2, 4),
        max_points: 200,
    };
    let lambda = default_lambda(data.count_for_action(0));
    let models: Vec<GpModel> = (0..spec.dim())
        .map(|i| {
            let kernel = optimize_hyperparameters(&data, 0, i, &hyper, Some(lambda))?;
            println!("dim {i}: signal variance {:.3}, lengthscale {:.3}", kernel.signal_variance, kernel.lengthscale);
            GpModel::fit(&data, 0, i, kernel, lambda)
        })
        .collect::<gpverify::Result<_>>()?;

    let grid = Grid::new(safe, 0.5)?;
    let settings = AbstractionSettings::default();
    let bounds = resolve_bounds(
        &BoundsConfig {
            delta: 0.0,
            rkhs_norms: None,
            mode: EpsilonMode::Explicit,
            epsilon: Some(0.1),
        },
        &models,
        0.01,
        &grid.cells(),
        settings.subgrid_k,
    )?;
    let imdp = build_imdp(&grid, &models, 1, &bounds, settings)?;
    println!("{} cells, epsilon {}", grid.num_cells(), imdp.epsilon);

    for horizon in [Horizon::Finite(1), Horizon::Finite(5), Horizon::Finite(25), Horizon::Infinite] {
        let b = verify(&imdp, horizon, DEFAULT_TOL)?;
        let certified = (0..grid.num_cells()).filter(|&q| b.lower[q] == 1.0).count();
        println!("T = {horizon}: {certified} of {} cells with p_min = 1", grid.num_cells());
    }
    Ok(())
}
