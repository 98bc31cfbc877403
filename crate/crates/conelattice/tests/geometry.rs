use conelattice::geometry::{boundary_distance, cone_contains, cone_subset, half_cone_contains, Cube, Direction, DoubleCone};
use proptest::prelude::*;
use std::f64::consts::PI;

fn cone(axis: Vec<f64>, apex: f64) -> DoubleCone {
    DoubleCone::new(Direction::new(axis).unwrap(), apex).unwrap()
}

fn axis_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

#[test]
fn membership_examples() {
    let c = cone(vec![1.0, 0.0], PI / 4.0);
    assert!(!cone_contains(&c, &[0.0, 0.0], &[0.0, 0.0]).unwrap());
    assert!(cone_contains(&c, &[0.0, 0.0], &[-2.0, -1.0]).unwrap());
    let flat = cone(vec![1.0, 0.0], PI / 2.0);
    assert!(!cone_contains(&flat, &[0.0, 0.0], &[0.0, 1.0]).unwrap());
}

#[test]
fn half_cone_examples() {
    let flat = cone(vec![1.0, 0.0], PI / 2.0);
    assert!(half_cone_contains(&flat, 1.0, &[0.0, 0.0], &[2.0, 0.0]).unwrap());
    assert!(!half_cone_contains(&flat, 1.0, &[3.0, 1.0], &[3.0, 1.0]).unwrap());
    let narrow = cone(vec![1.0, 0.0], PI / 4.0);
    assert!(!half_cone_contains(&narrow, 10.0, &[0.0, 0.0], &[2.0, 0.0]).unwrap());
}

#[test]
fn subset_examples() {
    let e1 = vec![1.0, 0.0];
    assert!(cone_subset(&cone(e1.clone(), PI / 6.0), &cone(e1.clone(), PI / 4.0)).unwrap());
    assert!(cone_subset(&cone(e1.clone(), PI / 4.0), &cone(e1.clone(), PI / 4.0)).unwrap());
    assert!(!cone_subset(&cone(vec![0.0, 1.0], PI / 6.0), &cone(e1, PI / 4.0)).unwrap());
}

#[test]
fn boundary_distance_matches_line_distance() {
    // Apex π/4 around e₁ in the plane: the boundary lines are y = ±x.
    let c = cone(vec![1.0, 0.0], PI / 4.0);
    let (x, y) = (5.0, 1.0);
    let oracle = (x - y) / 2f64.sqrt();
    assert!((boundary_distance(&c, &[x, y]) - oracle).abs() < 1e-12);
}

#[test]
fn cube_diameter() {
    let q = Cube::new(vec![0.0; 3], 2.0, true).unwrap();
    assert!((q.diameter() - 2.0 * 3f64.sqrt()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn double_cone_is_symmetric(axis in axis_strategy(3), apex in 0.05..(PI / 2.0),
                                x in prop::collection::vec(-20.0..20.0f64, 3),
                                y in prop::collection::vec(-20.0..20.0f64, 3)) {
        let c = cone(axis, apex);
        prop_assert_eq!(cone_contains(&c, &x, &y).unwrap(), cone_contains(&c, &y, &x).unwrap());
    }

    #[test]
    fn axis_negation_changes_nothing(axis in axis_strategy(2), apex in 0.05..(PI / 2.0),
                                     h in prop::collection::vec(-20.0..20.0f64, 2), r in 0.1..5.0f64) {
        let a = cone(axis.clone(), apex);
        let b = cone(axis.iter().map(|v| -v).collect(), apex);
        prop_assert_eq!(a.contains_offset(&h), b.contains_offset(&h));
        prop_assert_eq!(
            half_cone_contains(&a, r, &[0.0, 0.0], &h).unwrap(),
            half_cone_contains(&b, r, &[0.0, 0.0], &h).unwrap()
        );
    }

    /// V_{h√d}[ξ] ⊂ V_{h√d/2}[x] and V_{h√d/2}[x] ⊂ V[ξ] for ξ in the cube A_h(x).
    #[test]
    fn cone_intersection_chain(axis in axis_strategy(2), apex in 0.1..(PI / 2.0), h in 0.05..2.0f64,
                               x in prop::collection::vec(-5.0..5.0f64, 2),
                               u in prop::collection::vec(-0.5..0.5f64, 2),
                               z in prop::collection::vec(-60.0..60.0f64, 2)) {
        let c = cone(axis, apex);
        let sd = 2f64.sqrt();
        let xi: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        if half_cone_contains(&c, h * sd, &xi, &z).unwrap() {
            prop_assert!(half_cone_contains(&c, h * sd / 2.0, &x, &z).unwrap());
        }
        if half_cone_contains(&c, h * sd / 2.0, &x, &z).unwrap() {
            prop_assert!(cone_contains(&c, &xi, &z).unwrap());
        }
    }

    /// (1/(2√d))|x−y| < |s−t| < 2√d|x−y| for s ∈ A_h(x), t ∈ A_h(y), |x−y| > √d h.
    #[test]
    fn cube_distance_bounds(d in 1usize..=3, h in 0.01..3.0f64,
                            x in prop::collection::vec(-6i64..=6, 3), y in prop::collection::vec(-6i64..=6, 3),
                            u in prop::collection::vec(-0.5..0.5f64, 3), v in prop::collection::vec(-0.5..0.5f64, 3)) {
        let n2: i64 = (0..d).map(|k| (x[k] - y[k]).pow(2)).sum();
        prop_assume!(n2 > d as i64);
        let sd = (d as f64).sqrt();
        let xy = h * (n2 as f64).sqrt();
        let st = (0..d).map(|k| (h * ((x[k] - y[k]) as f64 + u[k] - v[k])).powi(2)).sum::<f64>().sqrt();
        prop_assert!(xy / (2.0 * sd) < st && st < 2.0 * sd * xy);
    }
}
