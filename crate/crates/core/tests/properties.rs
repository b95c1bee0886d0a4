//! Property-based checks of the geometric, abstraction and verification layers.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gpverify::abstraction::{transition_interval, unsafe_transition_interval, ImdpRow, TransitionInterval};
use gpverify::geometry::Region;
use gpverify::validation::{enumerate_extreme_adversaries, random_endpoint_imdp};
use gpverify::verifier::{bellman_step, o_optimize, verify_finite, verify_finite_observed};

fn boxes() -> impl Strategy<Value = Region> {
    (-5.0..5.0f64, -5.0..5.0f64, 0.01..3.0f64, 0.01..3.0f64)
        .prop_map(|(x, y, w, h)| Region::from_bounds(&[(x, x + w), (y, y + h)]).unwrap())
}

proptest! {
    #[test]
    fn shrink_and_expand_nest(b in boxes(), m in 0.0..1.0f64) {
        let big = b.expand(m);
        prop_assert!(big.contains_box(&b));
        if let Some(small) = b.shrink(m) {
            prop_assert!(b.contains_box(&small));
        }
    }

    #[test]
    fn subdivision_covers_the_box(b in boxes(), k in 1usize..5) {
        let parts = b.subdivide(k);
        prop_assert_eq!(parts.len(), k * k);
        let area = |r: &Region| (r.hi()[0] - r.lo()[0]) * (r.hi()[1] - r.lo()[1]);
        let total: f64 = parts.iter().map(area).sum();
        prop_assert!((total - area(&b)).abs() <= 1e-9 * area(&b).max(1.0));
        for p in &parts {
            prop_assert!(b.expand(1e-12).contains_box(p));
        }
    }

    #[test]
    fn transition_intervals_are_ordered(image in boxes(), target in boxes(), eps in 0.001..0.5f64, c in 0.0..=1.0f64) {
        let t = transition_interval(&image, &target, eps, &[c.sqrt(), c.sqrt()]);
        prop_assert!(0.0 <= t.lower && t.lower <= t.upper && t.upper <= 1.0);
        let u = unsafe_transition_interval(&image, &target, eps, &[c.sqrt(), c.sqrt()]);
        prop_assert!(0.0 <= u.lower && u.lower <= u.upper && u.upper <= 1.0);
        // staying and leaving cannot both be certain
        prop_assert!(t.lower + u.lower <= 1.0 + 1e-12);
    }

    #[test]
    fn o_optimize_returns_feasible_extremes(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imdp = random_endpoint_imdp(&mut rng, 4, 1);
        let values: Vec<f64> = (0..imdp.num_states()).map(|i| ((seed + 7 * i as u64) % 11) as f64 / 10.0).collect();
        for q in 0..imdp.num_safe() {
            let row = imdp.row(q, 0);
            let (dmax, vmax) = o_optimize(&values, row, imdp.num_safe(), true).unwrap();
            let (dmin, vmin) = o_optimize(&values, row, imdp.num_safe(), false).unwrap();
            prop_assert!(vmax >= vmin - 1e-12);
            for dist in [&dmax, &dmin] {
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (d, p) in dist.iter().enumerate() {
                    let t = imdp.interval(q, 0, d);
                    prop_assert!(t.lower - 1e-12 <= *p && *p <= t.upper + 1e-12);
                }
            }
        }
    }

    #[test]
    fn value_iteration_is_monotone_and_ordered(seed in 0u64..5000, t in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imdp = random_endpoint_imdp(&mut rng, 4, 2);
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut ok = true;
        verify_finite_observed(&imdp, t, |_, lo, hi| {
            ok &= lo.iter().zip(hi).all(|(a, b)| a <= b);
            if let Some((pl, ph)) = &prev {
                ok &= lo.iter().zip(pl).all(|(a, b)| a <= b) && hi.iter().zip(ph).all(|(a, b)| a <= b);
            }
            prev = Some((lo.to_vec(), hi.to_vec()));
        });
        prop_assert!(ok);
    }

    #[test]
    fn bellman_step_preserves_order(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imdp = random_endpoint_imdp(&mut rng, 4, 2);
        let n = imdp.num_states();
        let mut lo: Vec<f64> = (0..n).map(|i| ((seed >> i) % 5) as f64 / 8.0).collect();
        let mut hi: Vec<f64> = lo.iter().map(|v| v + 0.25).collect();
        lo[n - 1] = 0.0;
        hi[n - 1] = 0.0;
        let (a, b) = bellman_step(&imdp, &lo, &hi);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
    }

    #[test]
    fn oracle_matches_on_small_instances(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imdp = random_endpoint_imdp(&mut rng, 4, 2);
        let t = (seed % 6) as usize;
        let (lo, hi) = enumerate_extreme_adversaries(&imdp, t).unwrap();
        let b = verify_finite(&imdp, t);
        prop_assert_eq!(b.lower, lo);
        prop_assert_eq!(b.upper, hi);
    }
}

#[test]
fn rows_with_defaults_behave_like_dense_rows() {
    let sparse = ImdpRow::new(
        vec![(0, TransitionInterval::new(0.5, 0.5).unwrap())],
        TransitionInterval::new(0.0, 0.25).unwrap(),
    );
    let dense = ImdpRow::new(
        vec![
            (0, TransitionInterval::new(0.5, 0.5).unwrap()),
            (1, TransitionInterval::new(0.0, 0.25).unwrap()),
            (2, TransitionInterval::new(0.0, 0.25).unwrap()),
            (3, TransitionInterval::new(0.0, 0.25).unwrap()),
        ],
        TransitionInterval::ZERO,
    );
    let values = [0.9, 0.1, 0.7, 0.4, 0.0];
    for maximize in [true, false] {
        assert_eq!(
            o_optimize(&values, &sparse, 4, maximize).unwrap(),
            o_optimize(&values, &dense, 4, maximize).unwrap()
        );
    }
}
