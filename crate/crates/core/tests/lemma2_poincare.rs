use corrector_lab::cli::random_field;
use corrector_lab::ergodic::{nearest_multiple, poincare_check};
use corrector_lab::lattice::taxicab;
use corrector_lab::TorusShape;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn nearest_multiple_bounds(m in prop::collection::vec(-1000i64..=1000, 1..=4), n in 1u64..=60) {
        let d = m.len() as i128;
        let l = nearest_multiple(&m, n).unwrap();
        let norm = taxicab(&m);
        let k = norm as u64 / n;
        prop_assert!(taxicab(&l) <= norm);
        prop_assert_eq!(taxicab(&l) as u64, k * n);
        let diff: Vec<i64> = l.iter().zip(&m).map(|(a, b)| a - b).collect();
        // |l - m| n <= n^2 + |m| d
        prop_assert!(taxicab(&diff) as i128 * n as i128 <= (n * n) as i128 + norm as i128 * d);
        if k > 0 {
            prop_assert!(l.iter().all(|&c| c % k as i64 == 0));
            // signs follow m
            prop_assert!(l.iter().zip(&m).all(|(a, b)| a * b >= 0));
        } else {
            prop_assert!(l.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn poincare_holds(d in 1usize..=3, seed in any::<u64>(), r in 1usize..=4, scale in 1e-3f64..1e3) {
        let shape = TorusShape::new(d, 12).unwrap();
        let u: Vec<f64> = random_field(&shape, seed, 7).iter().map(|v| v * scale).collect();
        let check = poincare_check(&shape, &u, r).unwrap();
        prop_assert!(check.holds, "{} > {}", check.lhs, check.rhs);
    }
}

#[test]
fn hand_examples() {
    assert_eq!(nearest_multiple(&[7], 2).unwrap(), vec![6]);
    assert_eq!(nearest_multiple(&[2, -1], 5).unwrap(), vec![0, 0]);
    assert_eq!(nearest_multiple(&[0, 0], 3).unwrap(), vec![0, 0]);
}
