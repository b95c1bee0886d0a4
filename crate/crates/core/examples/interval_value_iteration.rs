//! Interval value iteration on a hand-written interval MDP, checked against
//! brute-force enumeration of the adversary's extreme choices.
//!
//! ```sh
//! cargo run --release --example interval_value_iteration
//! ```

use gpverify::abstraction::{Imdp, ImdpRow, TransitionInterval};
use gpverify::validation::enumerate_extreme_adversaries;
use gpverify::verifier::{verify_finite_observed, verify_infinite, DEFAULT_TOL, MAX_ITERATIONS};

fn iv(lo: f64, hi: f64) -> TransitionInterval {
    TransitionInterval::new(lo, hi).expect("valid interval")
}

fn main() -> gpverify::Result<()> {
    // States 0..2 are safe, state 3 is the absorbing unsafe state.
    // Action 0 is cautious but slow, action 1 is fast but risky.
    let unsafe_state = 3;
    let rows = vec![
        vec![
            ImdpRow::new(vec![(0, iv(0.6, 0.9)), (1, iv(0.1, 0.3)), (unsafe_state, iv(0.0, 0.1))], TransitionInterval::ZERO),
            ImdpRow::new(vec![(2, iv(0.5, 0.8)), (unsafe_state, iv(0.2, 0.5))], TransitionInterval::ZERO),
        ],
        vec![
            ImdpRow::new(vec![(1, iv(0.7, 1.0)), (unsafe_state, iv(0.0, 0.3))], TransitionInterval::ZERO),
            ImdpRow::new(vec![(2, iv(0.4, 0.9)), (0, iv(0.0, 0.2)), (unsafe_state, iv(0.1, 0.4))], TransitionInterval::ZERO),
        ],
        vec![
            // Unlisted safe destinations share the row default [0, 0.2].
            ImdpRow::new(vec![(2, iv(0.8, 1.0)), (unsafe_state, iv(0.0, 0.05))], iv(0.0, 0.2)),
            ImdpRow::new(vec![(2, iv(0.9, 1.0)), (unsafe_state, iv(0.0, 0.1))], TransitionInterval::ZERO),
        ],
    ];
    let imdp = Imdp::new(3, 2, rows)?;

    let horizon = 5;
    println!("{:>2}  {:>26}  {:>26}", "k", "p_min (states 0, 1, 2)", "p_max (states 0, 1, 2)");
    let fmt = |v: &[f64]| v[..3].iter().map(|p| format!("{p:8.4}")).collect::<String>();
    let bounds = verify_finite_observed(&imdp, horizon, |k, lo, hi| {
        println!("{k:>2}  {}  {}", fmt(lo), fmt(hi));
    });

    let (oracle_lo, oracle_hi) = enumerate_extreme_adversaries(&imdp, horizon)?;
    let deviation = bounds
        .lower
        .iter()
        .zip(&oracle_lo)
        .chain(bounds.upper.iter().zip(&oracle_hi))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("\nlargest deviation from brute-force enumeration at T = {horizon}: {deviation:.1e}");

    let fix = verify_infinite(&imdp, DEFAULT_TOL, MAX_ITERATIONS)?;
    println!(
        "unbounded horizon after {} iterations: p_min {}  p_max {}",
        fix.iterations_run,
        fmt(&fix.lower),
        fmt(&fix.upper)
    );
    Ok(())
}
