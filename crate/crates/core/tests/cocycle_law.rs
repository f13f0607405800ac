use corrector_lab::cli::random_field;
use corrector_lab::solver::{kunnemann_cocycle, SolverOptions};
use corrector_lab::{CocycleField, Environment, GeneratorModel, PathSpec, TorusShape};
use proptest::prelude::*;

/// Closed field `y_i + g(n + e_i) - g(n)` built from a random potential.
fn closed_field(shape: TorusShape, seed: u64, y: &[f64]) -> CocycleField {
    let g = random_field(&shape, seed, 0);
    let cob = CocycleField::coboundary(shape, &g);
    let increments = (0..shape.dim())
        .map(|i| cob.increments(i).iter().map(|f| f + y[i]).collect())
        .collect();
    CocycleField::new(shape, increments).unwrap()
}

fn point(raw: &[i64], d: usize) -> Vec<i64> {
    raw[..d].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cocycle_law_holds(
        d in 1usize..=3,
        l in 2usize..=9,
        seed in any::<u64>(),
        y in prop::collection::vec(-3.0f64..3.0, 3),
        n in prop::collection::vec(-25i64..=25, 3),
        m in prop::collection::vec(-25i64..=25, 3),
    ) {
        let shape = TorusShape::new(d, l).unwrap();
        let field = closed_field(shape, seed, &y[..d]);
        let (n, m) = (point(&n, d), point(&m, d));
        let sum: Vec<i64> = n.iter().zip(&m).map(|(a, b)| a + b).collect();
        let lhs = field.evaluate(&sum);
        let rhs = field.evaluate(&n) + field.evaluate_from(&n, &m);
        prop_assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
        let other = field.evaluate_along(&vec![0; d], &sum, &PathSpec::reversed_order(&sum)).unwrap();
        prop_assert!((lhs - other).abs() <= 1e-9);
    }

    #[test]
    fn torus_period_and_mean(d in 1usize..=3, l in 2usize..=9, seed in any::<u64>(), y in prop::collection::vec(-3.0f64..3.0, 3)) {
        let shape = TorusShape::new(d, l).unwrap();
        let field = closed_field(shape, seed, &y[..d]);
        prop_assert!(field.closedness_residual() <= 1e-12);
        for i in 0..d {
            let mut n = vec![0i64; d];
            n[i] = l as i64;
            prop_assert!((field.evaluate(&n) - l as f64 * y[i]).abs() <= 1e-10);
            prop_assert!((field.mean_vector()[i] - y[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn kunnemann_field_obeys_the_cocycle_law() {
    let shape = TorusShape::new(2, 12).unwrap();
    let env = Environment::generate(shape, GeneratorModel::IidUniform, (1.0, 2.0), 5).unwrap();
    let field = kunnemann_cocycle(&env, &[0.3, -1.2], &SolverOptions::default()).unwrap();
    assert!(field.closedness_residual() <= 1e-12);
    for (n, m) in [([3, -7], [11, 4]), ([-20, 2], [5, 5]), ([0, 13], [-13, 0])] {
        let sum = [n[0] + m[0], n[1] + m[1]];
        let gap = field.evaluate(&sum) - field.evaluate(&n) - field.evaluate_from(&n, &m);
        assert!(gap.abs() <= 1e-9, "{gap}");
    }
}
