//! Checks the probabilistic uniform error bound `|mu(x) - f(x)| <= beta sigma(x)`
//! on a one-dimensional function of known RKHS norm: a combination of ten
//! kernel bumps, observed with bounded noise.
//!
//! ```sh
//! cargo run --release --example gp_error_bound
//! ```

use gpverify::bounds::{beta, information_gain};
use gpverify::dynamics::sample_noise;
use gpverify::gp::{default_lambda, GpModel, SeKernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gpverify::Result<()> {
    let kernel = SeKernelParams::new(1.0, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let centers: Vec<f64> = (0..10).map(|i| 0.25 + 0.5 * i as f64).collect();
    let coef: Vec<f64> = centers.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |x: f64| -> f64 { centers.iter().zip(&coef).map(|(c, a)| a * kernel.eval(&[x], &[*c])).sum() };
    // ||f||_k^2 = a^T K a for f = sum a_i k(c_i, .)
    let norm_sq: f64 = centers
        .iter()
        .zip(&coef)
        .flat_map(|(ci, ai)| centers.iter().zip(&coef).map(move |(cj, aj)| ai * aj * kernel.eval(&[*ci], &[*cj])))
        .sum();
    let b = norm_sq.sqrt();
    let (delta, sigma, n, runs) = (0.1, 1.0, 200, 50);
    let lambda = default_lambda(n);
    println!("RKHS norm B = {b:.3}, noise bound sigma = {sigma}, delta = {delta}, n = {n}, lambda = {lambda:.4}\n");

    let test: Vec<f64> = (0..200).map(|i| 5.0 * i as f64 / 199.0).collect();
    let mut held = 0;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..5.0)]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| f(x[0]) + sample_noise(&mut rng, sigma, 1)[0]).collect();
        let model = GpModel::fit_points(xs, ys, kernel, lambda)?;
        let gamma = information_gain(&model);
        let bt = beta(b, sigma, lambda, gamma, delta)?;
        let (mut worst_ratio, mut worst_err) = (0.0f64, 0.0f64);
        for &x in &test {
            let err = (model.posterior_mean(&[x]) - f(x)).abs();
            worst_err = worst_err.max(err);
            worst_ratio = worst_ratio.max(err / (bt * model.posterior_var(&[x]).sqrt()));
        }
        if worst_ratio <= 1.0 {
            held += 1;
        }
        if run < 5 {
            println!(
                "run {run}: info gain {gamma:.2}, beta {bt:.2}, max error {worst_err:.3}, max error / bound {worst_ratio:.3}"
            );
        }
    }
    println!("\nbound held on the whole test grid in {held}/{runs} runs (expected at least {:.0}%)", 100.0 * (1.0 - delta));
    Ok(())
}
