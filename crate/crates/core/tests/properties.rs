//! Property tests for the factor-space geometry: randomized inputs, exact
//! invariants.

use logchol::geometry::{
    self, distance, exp_map, frechet_mean, log_map, translate, translate_inverse, tri_index,
    tri_len, weighted_frechet_mean, CholeskyPoint, Lower, TangentLower,
};
use proptest::prelude::*;

const DIMS: [usize; 4] = [2, 3, 5, 8];

/// Raw packed entries in a box, with diagonals mapped through `exp` so the
/// point is valid and reasonably conditioned.
fn point_strategy(dim: usize) -> impl Strategy<Value = CholeskyPoint<f64>> {
    proptest::collection::vec(-1.5f64..1.5, tri_len(dim)).prop_map(move |raw| {
        let mut entries = raw;
        for i in 0..dim {
            let p = tri_index(i, i);
            entries[p] = entries[p].exp();
        }
        CholeskyPoint::from_packed(dim, entries).expect("positive diagonal by construction")
    })
}

fn tangent_strategy(dim: usize) -> impl Strategy<Value = TangentLower<f64>> {
    proptest::collection::vec(-1.5f64..1.5, tri_len(dim))
        .prop_map(move |raw| TangentLower::from_packed(dim, raw).expect("finite by construction"))
}

fn dim_strategy() -> impl Strategy<Value = usize> {
    proptest::sample::select(&DIMS[..])
}

fn point_and_tangent() -> impl Strategy<Value = (CholeskyPoint<f64>, TangentLower<f64>)> {
    dim_strategy().prop_flat_map(|d| (point_strategy(d), tangent_strategy(d)))
}

fn point_pair() -> impl Strategy<Value = (CholeskyPoint<f64>, CholeskyPoint<f64>)> {
    dim_strategy().prop_flat_map(|d| (point_strategy(d), point_strategy(d)))
}

fn point_triple()
-> impl Strategy<Value = (CholeskyPoint<f64>, CholeskyPoint<f64>, CholeskyPoint<f64>)> {
    dim_strategy().prop_flat_map(|d| (point_strategy(d), point_strategy(d), point_strategy(d)))
}

fn point_cloud() -> impl Strategy<Value = Vec<CholeskyPoint<f64>>> {
    dim_strategy()
        .prop_flat_map(|d| proptest::collection::vec(point_strategy(d), 1..6))
}

/// Entrywise gap between two points, relative to their magnitude.
fn relative_gap(a: &CholeskyPoint<f64>, b: &CholeskyPoint<f64>) -> f64 {
    let scale = a
        .packed()
        .iter()
        .chain(b.packed())
        .fold(1.0f64, |m, &v| m.max(v.abs()));
    a.packed()
        .iter()
        .zip(b.packed())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
        / scale
}

fn sum_sq_distance(center: &CholeskyPoint<f64>, points: &[CholeskyPoint<f64>]) -> f64 {
    points.iter().map(|p| distance(center, p).unwrap().powi(2)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn exp_then_log_recovers_the_tangent((x, v) in point_and_tangent()) {
        let y = exp_map(&x, &v).unwrap();
        let back = log_map(&x, &y).unwrap();
        let scale = 1.0 + v.packed().iter().fold(0.0f64, |m, &e| m.max(e.abs()));
        for (a, b) in back.packed().iter().zip(v.packed()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn log_then_exp_recovers_the_point((x, y) in point_pair()) {
        let v = log_map(&x, &y).unwrap();
        let again = exp_map(&x, &v).unwrap();
        prop_assert!(relative_gap(&again, &y) <= 1e-10);
    }

    #[test]
    fn distance_is_a_metric((x, y, z) in point_triple()) {
        let dxy = distance(&x, &y).unwrap();
        let dyx = distance(&y, &x).unwrap();
        prop_assert_eq!(dxy.to_bits(), dyx.to_bits(), "symmetry must hold bitwise");

        prop_assert_eq!(distance(&x, &x).unwrap(), 0.0);
        prop_assert!(dxy >= 0.0);

        let dxz = distance(&x, &z).unwrap();
        let dzy = distance(&z, &y).unwrap();
        prop_assert!(dxy <= dxz + dzy + 1e-12);
    }

    #[test]
    fn translation_is_a_commutative_group((a, b, c) in point_triple()) {
        let dim = a.dim();

        let ab_c = translate(&translate(&a, &b).unwrap(), &c).unwrap();
        let a_bc = translate(&a, &translate(&b, &c).unwrap()).unwrap();
        prop_assert!(relative_gap(&ab_c, &a_bc) <= 1e-12);

        let ab = translate(&a, &b).unwrap();
        let ba = translate(&b, &a).unwrap();
        prop_assert!(relative_gap(&ab, &ba) <= 1e-12);

        let id = CholeskyPoint::identity(dim);
        let a_id = translate(&a, &id).unwrap();
        prop_assert!(relative_gap(&a_id, &a) == 0.0, "identity must act exactly");

        let inv = translate_inverse(&a).unwrap();
        let a_inv = translate(&a, &inv).unwrap();
        prop_assert!(relative_gap(&a_inv, &id) <= 1e-12);
    }

    #[test]
    fn frechet_mean_minimizes_summed_squared_distance(
        points in point_cloud(),
        step in 1e-3f64..0.5,
        dir_seed in proptest::collection::vec(-1.5f64..1.5, 36),
    ) {
        let dim = points[0].dim();
        let mean = frechet_mean(&points).unwrap();
        let at_mean = sum_sq_distance(&mean, &points);

        // Four deterministic perturbation directions carved out of the seed
        // vector (36 entries covers tri_len(8)).
        for chunk in 0..4 {
            let entries: Vec<f64> = (0..tri_len(dim))
                .map(|p| dir_seed[(chunk * 7 + p) % dir_seed.len()] * step)
                .collect();
            let nudge = TangentLower::from_packed(dim, entries).unwrap();
            let candidate = exp_map(&mean, &nudge).unwrap();
            let at_candidate = sum_sq_distance(&candidate, &points);
            prop_assert!(
                at_candidate + 1e-9 * (1.0 + at_mean) >= at_mean,
                "perturbed objective {} undercut the mean's {}",
                at_candidate,
                at_mean,
            );
        }
    }

    #[test]
    fn unit_weights_reduce_the_weighted_mean_to_the_plain_one(points in point_cloud()) {
        let dim = points[0].dim();
        let ones: Vec<TangentLower<f64>> = (0..points.len())
            .map(|_| TangentLower::from_packed(dim, vec![1.0; tri_len(dim)]).unwrap())
            .collect();
        let plain = frechet_mean(&points).unwrap();
        let weighted = weighted_frechet_mean(&points, &ones).unwrap();
        for (a, b) in plain.packed().iter().zip(weighted.packed()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

/// A deliberately wrong logarithm (strict part flipped) must be caught by the
/// same round-trip probe the real map passes, which shows the probe has
/// teeth.
#[test]
fn round_trip_probe_detects_a_sign_flipped_logarithm() {
    fn broken_log(base: &CholeskyPoint<f64>, target: &CholeskyPoint<f64>) -> TangentLower<f64> {
        let good = log_map(base, target).unwrap();
        let dim = base.dim();
        let mut entries = good.packed().to_vec();
        for i in 0..dim {
            for j in 0..i {
                entries[tri_index(i, j)] = -entries[tri_index(i, j)];
            }
        }
        TangentLower::from_packed(dim, entries).unwrap()
    }

    let x = CholeskyPoint::identity(3);
    let y = CholeskyPoint::from_packed(3, vec![1.0, 0.8, 2.0, -0.4, 0.6, 0.5]).unwrap();

    let good_gap = relative_gap(&exp_map(&x, &log_map(&x, &y).unwrap()).unwrap(), &y);
    let bad_gap = relative_gap(&exp_map(&x, &broken_log(&x, &y)).unwrap(), &y);

    assert!(good_gap <= 1e-12, "true map should round trip, gap {good_gap}");
    assert!(bad_gap > 1e-2, "flipped map should blow the tolerance, gap {bad_gap}");
}

/// The distance must coincide with the metric norm of the logarithm taken at
/// the base point; a diagonal that skips its log weighting would break this.
#[test]
fn distance_agrees_with_the_tangent_norm_at_the_base() {
    let x = CholeskyPoint::from_packed(2, vec![0.7, -0.3, 1.9]).unwrap();
    let y = CholeskyPoint::from_packed(2, vec![2.2, 0.5, 0.4]).unwrap();
    let v = log_map(&x, &y).unwrap();
    let norm = f64::sqrt(geometry::metric(&x, &v, &v).unwrap());
    let dist = distance(&x, &y).unwrap();
    assert!(
        (norm - dist).abs() <= 1e-12 * (1.0 + dist),
        "metric norm {norm} vs distance {dist}",
    );
}
