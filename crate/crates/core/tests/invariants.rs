//! Property-based invariants: the relaxation lines really do sandwich the
//! ReLU, improvements stay normalized, and the solver is deterministic.

mod common;

use common::random_lp;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relubab_core::bab::improvement;
use relubab_core::bounds::alpha_beta;
use relubab_core::lp::{solve, LpStatus};

proptest! {
    #[test]
    fn relaxation_lines_sandwich_the_relu(
        l in -100.0f64..100.0,
        width in 0.0f64..200.0,
        t in 0.0f64..=1.0,
    ) {
        let u = l + width;
        let p = alpha_beta(l, u).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.alpha));
        prop_assert!(p.beta >= 0.0);
        let x = l + t * (u - l);
        let relu = x.max(0.0);
        let scale = 1.0 + l.abs().max(u.abs());
        prop_assert!(
            p.alpha * x <= relu + 1e-9 * scale,
            "lower line {} above relu {relu} at {x}", p.alpha * x
        );
        prop_assert!(
            p.alpha * x + p.beta >= relu - 1e-9 * scale,
            "upper line {} below relu {relu} at {x}", p.alpha * x + p.beta
        );
    }

    #[test]
    fn inverted_intervals_are_rejected(l in -10.0f64..10.0, gap in 1e-9f64..10.0) {
        prop_assert!(alpha_beta(l, l - gap).is_err());
    }

    #[test]
    fn improvement_is_always_normalized(
        parent in -1e6f64..-1e-9,
        c1 in prop_oneof![Just(f64::INFINITY), -1e6f64..1e6],
        c2 in prop_oneof![Just(f64::INFINITY), -1e6f64..1e6],
    ) {
        let m = improvement(parent, c1, c2);
        prop_assert!((0.0..=1.0).contains(&m), "m = {m}");
    }

    #[test]
    fn improvement_rewards_tighter_children(
        parent in -100.0f64..-0.1,
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        // Children interpolated between the parent bound and zero: closer
        // to zero must never score lower.
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let child_loose = parent * (1.0 - lo);
        let child_tight = parent * (1.0 - hi);
        let m_loose = improvement(parent, child_loose, child_loose);
        let m_tight = improvement(parent, child_tight, child_tight);
        prop_assert!(m_tight >= m_loose - 1e-12);
    }
}

#[test]
fn identical_problems_solve_bit_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5001);
    for _ in 0..30 {
        let p = random_lp(&mut rng);
        let a = solve(&p).unwrap();
        let b = solve(&p).unwrap();
        assert_eq!(a.status, b.status);
        if a.status == LpStatus::Optimal {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
            assert_eq!(a.iterations, b.iterations);
            for (x, y) in a.primal.iter().zip(b.primal.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.dual.iter().zip(b.dual.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
