//! Property-based invariants for the data model and the numerical kernel.

use einv::data::{
    export_csv, ingest_csv, BehaviorMode, Dataset, Observation, PolicySpec, Subset,
};
use einv::num;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn finite_f64(range: std::ops::Range<f64>) -> impl Strategy<Value = f64> {
    range.prop_map(|v| if v == 0.0 { 0.0 } else { v })
}

fn observation_strategy(d: usize, k_env: usize) -> impl Strategy<Value = Observation> {
    (
        0..k_env,
        prop::collection::vec(finite_f64(-5.0..5.0), d),
        0usize..2,
        finite_f64(-10.0..10.0),
        0.05f64..0.95,
    )
        .prop_map(|(env, x, t, y, p)| Observation {
            env,
            x,
            t,
            y,
            p_obs: Some(p),
        })
}

fn dataset_strategy(d: usize, k_env: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec(observation_strategy(d, k_env), 4..40).prop_map(move |mut rows| {
        // Every environment label must occur at least once.
        for e in 0..k_env {
            rows[e].env = e;
        }
        let labels = (0..k_env).map(|i| format!("e{i}")).collect();
        Dataset::new(rows, d, 2, labels, false).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Logistic policy probabilities form a distribution for any input.
    #[test]
    fn policy_probabilities_sum_to_one(
        coef in prop::collection::vec(-4.0f64..4.0, 4),
        x in prop::collection::vec(-6.0f64..6.0, 3),
    ) {
        let policy = PolicySpec::Logistic { subset: Subset::full(3), coef };
        let probs = policy.probabilities(&x).unwrap();
        prop_assert_eq!(probs.len(), 2);
        for &p in &probs {
            prop_assert!((0.0..=1.0).contains(&p));
        }
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Datasets survive a CSV export/import round trip.
    #[test]
    fn csv_round_trip(ds in dataset_strategy(3, 2)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        export_csv(&ds, &path).unwrap();
        let back = ingest_csv(&path, None, BehaviorMode::Given).unwrap();
        prop_assert_eq!(back.n(), ds.n());
        prop_assert_eq!(back.d(), ds.d());
        prop_assert_eq!(back.env_count(), ds.env_count());
        for (a, b) in ds.rows().iter().zip(back.rows()) {
            prop_assert_eq!(ds.env_labels()[a.env].clone(), back.env_labels()[b.env].clone());
            prop_assert_eq!(a.t, b.t);
            prop_assert!((a.y - b.y).abs() < 1e-9);
            prop_assert!((a.p_obs.unwrap() - b.p_obs.unwrap()).abs() < 1e-9);
            for (u, v) in a.x.iter().zip(&b.x) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    /// The chi-square quantile inverts the tail probability.
    #[test]
    fn chi_square_quantile_inverts_tail(p in 0.01f64..0.99, dof in 1usize..30) {
        let q = num::chi_square_quantile(p, dof).unwrap();
        let tail = num::chi_square_tail(q, dof).unwrap();
        prop_assert!((tail - (1.0 - p)).abs() < 1e-8, "p={p} dof={dof} tail={tail}");
    }

    /// Weighted least-squares residuals are W-orthogonal to the design.
    #[test]
    fn wls_residuals_orthogonal(
        rows in prop::collection::vec((finite_f64(-3.0..3.0), finite_f64(-5.0..5.0), 0.1f64..4.0), 8..40),
    ) {
        let n = rows.len();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { rows[i].0 });
        let y = DVector::from_fn(n, |i, _| rows[i].1);
        let w = DVector::from_fn(n, |i, _| rows[i].2);
        let fit = num::weighted_least_squares(&design, &y, &w).unwrap();
        for j in 0..2 {
            let dot: f64 = (0..n).map(|i| w[i] * fit.residuals[i] * design[(i, j)]).sum();
            prop_assert!(dot.abs() < 1e-6 * n as f64, "column {j} inner product {dot}");
        }
    }

    /// Selecting rows and projecting to a subset commute.
    #[test]
    fn select_and_project_commute(ds in dataset_strategy(3, 2), raw in prop::collection::vec(0usize..3, 0..3)) {
        let s = Subset::new(raw);
        // Keep every other row, plus the first row of each environment so
        // no environment ends up empty after selection.
        let mut keep: Vec<usize> = (0..ds.n())
            .filter(|&i| i % 2 == 0 || i < ds.env_count())
            .collect();
        keep.sort_unstable();
        let a = ds.select_rows(&keep).unwrap().project_subset(&s).unwrap();
        let full = ds.project_subset(&s).unwrap();
        let b = DMatrix::from_fn(keep.len(), s.len(), |i, j| full[(keep[i], j)]);
        prop_assert_eq!(a, b);
    }

    /// A subset and its complement partition the covariates.
    #[test]
    fn complement_partitions(raw in prop::collection::vec(0usize..5, 0..6)) {
        let s = Subset::new(raw);
        let c = s.complement(5);
        let mut merged: Vec<usize> = s.indices().iter().chain(c.indices()).copied().collect();
        merged.sort_unstable();
        prop_assert_eq!(merged, (0..5).collect::<Vec<_>>());
    }
}
