//! Ingestion, splitting, normalization and windowing, each checked against
//! a recomputation that does not go through the dataset type.

use dmsc_core::data::{named_split, read_csv, synth_series, Normalizer, SineComponent};
use dmsc_core::{Error, SeriesFrame, Split, SplitRows, SplitSpec, SynthSpec, Tensor, WindowedDataset};
use proptest::prelude::*;

fn ramp(len: usize, c: usize) -> SeriesFrame {
    SeriesFrame {
        timestamps: (0..len).map(|i| i as f64).collect(),
        values: (0..len * c).map(|i| ((i * 37) % 101) as f64 * 0.3 + (i / c) as f64).collect(),
        names: (0..c).map(|j| format!("v{j}")).collect(),
    }
}

#[test]
fn benchmark_split_sizes() {
    // (dataset, total rows, benchmark (train, val, test) window counts)
    let table = [
        ("ETTh1", 14400, (8545, 2881, 2881)),
        ("ETTh2", 14400, (8545, 2881, 2881)),
        ("ETTm1", 57600, (34465, 11521, 11521)),
        ("ETTm2", 57600, (34465, 11521, 11521)),
        ("Electricity", 26304, (18317, 2633, 5261)),
        ("Traffic", 17544, (12185, 1757, 3509)),
        ("Weather", 52696, (36792, 5271, 10540)),
    ];
    for (name, total, expected) in table {
        let rows = named_split(name, total).unwrap();
        assert_eq!(rows.context_counts(96), expected, "{name}");
    }
    assert!(named_split("mystery", 100).is_none());
    let err = SplitSpec::Named("mystery".into()).resolve(100).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn toy_window_count() {
    let frame = ramp(20, 2);
    let split = SplitSpec::Rows(SplitRows { train: 14, val: 3, test: 3 });
    let ds = WindowedDataset::new(&frame, &split, 4, 2).unwrap();
    assert_eq!(ds.n_windows(Split::Train), 9);
    // val and test borrow 4 rows of look-back: 3 + 4 - 4 - 2 + 1
    assert_eq!(ds.n_windows(Split::Val), 2);
    assert_eq!(ds.n_windows(Split::Test), 2);
    let bad = WindowedDataset::new(&frame, &split, 12, 4);
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn csv_ingestion_and_errors() {
    let ok = "date,a,b\n2016-07-01 00:00:00,1.0,2.0\n2016-07-01 01:00:00,3.0,4.5\n2016-07-01 02:00:00,-1,0\n";
    let f = read_csv(ok.as_bytes()).unwrap();
    assert_eq!((f.len(), f.n_vars()), (3, 2));
    assert_eq!(f.row(1), &[3.0, 4.5]);
    assert_eq!(f.timestamps[1] - f.timestamps[0], 3600.0);

    let bad_cell = "date,a,b\n2016-07-01 00:00:00,1.0,2.0\n2016-07-01 01:00:00,x,4.5\n";
    match read_csv(bad_cell.as_bytes()) {
        Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
        other => panic!("expected parse error, got {other:?}"),
    }
    let dup = "date,a\n2016-07-01 00:00:00,1\n2016-07-01 00:00:00,2\n";
    assert!(matches!(read_csv(dup.as_bytes()), Err(Error::Order { row: 2, .. })));
    let gap = "date,a,b\n2016-07-01 00:00:00,1,\n";
    assert!(matches!(read_csv(gap.as_bytes()), Err(Error::Parse { row: 1, col: 3, .. })));
}

#[test]
fn statistics_come_from_training_rows_only() {
    let frame = ramp(60, 3);
    let split = SplitSpec::Rows(SplitRows { train: 40, val: 10, test: 10 });
    let ds = WindowedDataset::new(&frame, &split, 5, 3).unwrap();

    // recompute from the first 40 raw rows
    for j in 0..3 {
        let col: Vec<f64> = (0..40).map(|t| frame.values[t * 3 + j]).collect();
        let mean = col.iter().sum::<f64>() / 40.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0).sqrt();
        assert!((ds.normalizer.mean[j] - mean).abs() < 1e-12);
        assert!((ds.normalizer.std[j] - std).abs() < 1e-12);
    }

    // perturbing val/test rows must not move the statistics
    let mut poisoned = frame.clone();
    for v in &mut poisoned.values[40 * 3..] {
        *v = 1e6;
    }
    let ds2 = WindowedDataset::new(&poisoned, &split, 5, 3).unwrap();
    assert_eq!(ds.normalizer, ds2.normalizer);
    assert_eq!(ds.data[..40 * 3], ds2.data[..40 * 3]);
}

#[test]
fn normalized_training_rows_are_standardized() {
    let frame = ramp(200, 4);
    let ds = WindowedDataset::new(&frame, &SplitSpec::Fractions { train: 0.7, test: 0.2 }, 8, 4).unwrap();
    let n = ds.rows.train;
    for j in 0..4 {
        let col: Vec<f64> = (0..n).map(|t| ds.data[t * 4 + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-9, "std {std}");
    }
}

#[test]
fn constant_column_uses_std_floor() {
    let frame = SeriesFrame { timestamps: (0..30).map(f64::from).collect(), values: vec![2.5; 30], names: vec!["k".into()] };
    let ds = WindowedDataset::new(&frame, &SplitSpec::Rows(SplitRows { train: 20, val: 5, test: 5 }), 4, 2).unwrap();
    assert_eq!(ds.normalizer.std[0], 1e-8);
    assert!(ds.data.iter().all(|v| *v == 0.0));
}

#[test]
fn windows_respect_chronology() {
    let frame = ramp(120, 2);
    let split = SplitSpec::Rows(SplitRows { train: 80, val: 20, test: 20 });
    let ds = WindowedDataset::new(&frame, &split, 10, 5).unwrap();
    let target_rows = |s: Split| -> Vec<usize> {
        ds.window_starts(s).flat_map(|w| w + 10..w + 15).collect()
    };
    let train_max = target_rows(Split::Train).into_iter().max().unwrap();
    let val = target_rows(Split::Val);
    let test = target_rows(Split::Test);
    assert!(train_max < 80);
    assert!(val.iter().all(|&r| (80..100).contains(&r)));
    assert!(test.iter().all(|&r| (100..120).contains(&r)));
    // every val and test target row is predicted by some window
    assert_eq!(*val.iter().min().unwrap(), 80);
    assert_eq!(*test.iter().max().unwrap(), 119);

    // batch contents equal the normalized raw rows
    let start = ds.window_starts(Split::Test).start;
    let (x, y) = ds.batch(&[start]);
    for j in 0..2 {
        for k in 0..10 {
            let raw = frame.values[(start + k) * 2 + j];
            let want = (raw - ds.normalizer.mean[j]) / ds.normalizer.std[j];
            assert_eq!(x.data()[j * 10 + k], want);
        }
        for k in 0..5 {
            let raw = frame.values[(start + 10 + k) * 2 + j];
            assert_eq!(y.data()[j * 5 + k], (raw - ds.normalizer.mean[j]) / ds.normalizer.std[j]);
        }
    }
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(
        vals in prop::collection::vec(-1e3f64..1e3, 24),
        means in prop::collection::vec(-50.0f64..50.0, 3),
        stds in prop::collection::vec(0.01f64..100.0, 3),
    ) {
        let norm = Normalizer { mean: means, std: stds };
        let x = Tensor::new(&[2, 3, 4], vals.clone()).unwrap();
        let back = norm.denormalize(&norm.normalize(&x));
        for (a, b) in back.data().iter().zip(&vals) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn window_counts_follow_formula(train in 20usize..80, val in 8usize..30, test in 8usize..30, t in 1usize..8, h in 1usize..8) {
        let frame = ramp(train + val + test, 1);
        let ds = WindowedDataset::new(&frame, &SplitSpec::Rows(SplitRows { train, val, test }), t, h).unwrap();
        prop_assert_eq!(ds.n_windows(Split::Train), train - t - h + 1);
        // brute force: windows whose targets lie in [lo, hi) and whose
        // inputs stay inside the series
        let count = |lo: usize, hi: usize| (0..train + val + test).filter(|&s| s + t >= lo && s + t + h <= hi).count();
        prop_assert_eq!(ds.n_windows(Split::Val), count(train, train + val));
        prop_assert_eq!(ds.n_windows(Split::Test), count(train + val, train + val + test));
    }
}

#[test]
fn synthetic_series_is_periodic_and_deterministic() {
    let spec = SynthSpec {
        n_vars: 1,
        length: 480,
        components: vec![SineComponent { amplitude: 1.3, frequency: 1.0 / 24.0, phase: 0.2 }],
        phase_step: 0.0,
        slope: 0.0,
        noise_std: 0.0,
        seed: 1,
    };
    let f = synth_series(&spec).unwrap();
    for i in 0..480 - 24 {
        assert!((f.values[i] - f.values[i + 24]).abs() < 1e-12);
    }
    // not periodic at any shorter lag
    for lag in 1..24 {
        assert!((0..48).any(|i| (f.values[i] - f.values[i + lag]).abs() > 1e-3), "lag {lag}");
    }
    let spec = SynthSpec::default();
    assert_eq!(synth_series(&spec).unwrap(), synth_series(&spec).unwrap());
    let other = SynthSpec { seed: 9, ..SynthSpec::default() };
    assert_ne!(synth_series(&spec).unwrap().values, synth_series(&other).unwrap().values);
}

#[test]
fn synthetic_noise_level() {
    let spec = SynthSpec { n_vars: 1, length: 10_000, noise_std: 0.1, seed: 42, ..SynthSpec::default() };
    let f = synth_series(&spec).unwrap();
    let resid: Vec<f64> = (0..10_000).map(|i| f.values[i] - spec.signal(0, i)).collect();
    let mean = resid.iter().sum::<f64>() / 1e4;
    let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (1e4 - 1.0)).sqrt();
    assert!((std - 0.1).abs() < 0.01, "residual std {std}");
}
