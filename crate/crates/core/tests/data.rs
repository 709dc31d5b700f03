mod common;

use std::collections::BTreeSet;
use std::io::Write;

use common::*;
use proptest::prelude::*;

use stochgp::data::{
    load_csv, sample_batch, split, split_indices, standardize, write_csv, TargetColumn,
};
use stochgp::Error;

#[test]
fn large_csv_round_trip_is_bit_identical() {
    let mut r = rng(1);
    let data = random_dataset(14_000, 5, &mut r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.csv");
    write_csv(&path, &data, "y").unwrap();
    let back = load_csv(&path, &TargetColumn::Name("y".into())).unwrap();
    assert_eq!(back.features, data.features);
    assert_eq!(back.targets, data.targets);
    let by_index = load_csv(&path, &TargetColumn::Index(5)).unwrap();
    assert_eq!(by_index.targets, data.targets);
}

#[test]
fn non_numeric_and_missing_target_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "a,b,y\n1,2,3\n4,abc,6").unwrap();
    match load_csv(&path, &TargetColumn::Name("y".into())) {
        Err(Error::NonNumeric { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "b")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        load_csv(&path, &TargetColumn::Name("z".into())),
        Err(Error::MissingTarget(_))
    ));
    assert!(matches!(
        load_csv(dir.path().join("absent.csv"), &TargetColumn::Index(0)),
        Err(Error::Io { .. })
    ));
}

#[test]
fn standardized_moments() {
    let mut r = rng(2);
    let mut data = random_dataset(50, 4, &mut r);
    data.features
        .column_mut(2)
        .iter_mut()
        .for_each(|v| *v = *v * 7.0 + 3.0);
    let (std_data, scaler) = standardize(&data);
    for j in 0..4 {
        let col = std_data.features.column(j);
        let mean = col.sum() / 50.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);
    }
    let back = scaler.inverse(&std_data);
    let rel = (&back.features - &data.features).norm() / data.features.norm();
    assert!(rel < 1e-10);
    assert!((&back.targets - &data.targets).norm() / data.targets.norm() < 1e-10);
}

#[test]
fn split_is_a_seeded_partition() {
    let (train, test) = split_indices(137, 0.9, 5).unwrap();
    assert_eq!((train.len(), test.len()), (123, 14));
    let all: BTreeSet<usize> = train.iter().chain(&test).copied().collect();
    assert_eq!(all.len(), 137);
    assert_eq!(all, (0..137).collect());
    assert_eq!(split_indices(137, 0.9, 5).unwrap(), (train, test));
    assert_ne!(
        split_indices(137, 0.9, 6).unwrap().0,
        split_indices(137, 0.9, 5).unwrap().0
    );

    let mut r = rng(3);
    let data = random_dataset(10, 2, &mut r);
    let (tr, te) = split(&data, 0.9, 0).unwrap();
    assert_eq!((tr.len(), te.len()), (9, 1));
    assert!(split(&data, 1.0, 0).is_err());
    assert!(split(&data, 0.0, 0).is_err());
}

#[test]
fn batch_frequencies_are_uniform() {
    let mut r = rng(4);
    let mut counts = [0usize; 4];
    let draws = 40_000;
    for _ in 0..draws {
        counts[sample_batch(4, 1, &mut r).unwrap().indices[0]] += 1;
    }
    let se = (0.25f64 * 0.75 / draws as f64).sqrt();
    for c in counts {
        assert!(
            (c as f64 / draws as f64 - 0.25).abs() < 3.0 * se,
            "{counts:?}"
        );
    }
}

#[test]
fn batches_replay_under_a_fixed_seed() {
    let a = sample_batch(100, 16, &mut rng(7)).unwrap();
    let b = sample_batch(100, 16, &mut rng(7)).unwrap();
    assert_eq!(a, b);
    let mut r = rng(7);
    let first = sample_batch(100, 16, &mut r).unwrap();
    let second = sample_batch(100, 16, &mut r).unwrap();
    assert_eq!(first, a);
    assert_ne!(first, second);
}

proptest! {
    #[test]
    fn split_partitions_for_all_sizes(n in 2usize..400, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let (train, test) = split_indices(n, frac, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        let all: BTreeSet<usize> = train.iter().chain(&test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert!(all.iter().all(|&i| i < n));
    }

    #[test]
    fn standardize_inverts(seed in any::<u64>(), n in 2usize..60, p in 1usize..6) {
        let mut r = rng(seed);
        let data = random_dataset(n, p, &mut r);
        let (s, scaler) = standardize(&data);
        let back = scaler.inverse(&s);
        prop_assert!((&back.features - &data.features).norm() <= 1e-10 * data.features.norm().max(1.0));
    }

    #[test]
    fn sampled_indices_are_in_range(seed in any::<u64>(), n in 1usize..50, s in 1usize..50) {
        let b = sample_batch(n, s, &mut rng(seed)).unwrap();
        prop_assert_eq!(b.size(), s);
        prop_assert!(b.indices.iter().all(|&i| i < n));
    }
}
