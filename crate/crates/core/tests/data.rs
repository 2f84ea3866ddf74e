use chrono::NaiveDate;
use relgate::data::{
    align_and_transform, load_csv, load_dir, synth_gbm, write_csv, AlignedDataset, AssetSeries, Bar, DataError, SynthParams,
};
use std::fs;

fn bar(date: NaiveDate, close: f64) -> Bar {
    Bar {
        date,
        open: close,
        high: close * 1.01,
        low: close * 0.99,
        close,
        volume: 1000.0,
    }
}

fn day(n: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(n)
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams::new(2, 40, vec![0.001, -0.002], vec![0.013, 0.021], 77);
    for s in synth_gbm(&p).unwrap() {
        let path = dir.path().join(format!("{}.csv", s.symbol));
        write_csv(&s, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), s);
    }
    assert_eq!(load_dir(dir.path()).unwrap().len(), 2);
}

#[test]
fn malformed_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("X.csv");
    fs::write(
        &path,
        "date,open,high,low,close,volume\n2020-01-01,1,1,1,1,5\n2020-01-02,1,1,abc,1,5\n",
    )
    .unwrap();
    match load_csv(&path).unwrap_err() {
        DataError::Malformed { line, .. } => assert_eq!(line, 3),
        e => panic!("{e}"),
    }
}

#[test]
fn inconsistent_bars_are_rejected() {
    let mut b = bar(day(0), 10.0);
    b.high = 9.0;
    assert!(AssetSeries::new("A", vec![b]).is_err());
    assert!(AssetSeries::new("A", vec![bar(day(0), 10.0), bar(day(0), 11.0)]).is_err());
}

#[test]
fn empty_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dir(dir.path()).is_err());
}

#[test]
fn alignment_uses_the_calendar_intersection() {
    let a = AssetSeries::new("A", (0..10).map(|t| bar(day(t), 10.0 + t as f64)).collect()).unwrap();
    let b = AssetSeries::new("B", (4..15).map(|t| bar(day(t), 50.0)).collect()).unwrap();
    let ds = align_and_transform(&[a, b]).unwrap();
    // 6 common dates, one consumed by differencing
    assert_eq!(ds.num_days(), 5);
    assert_eq!(ds.dates[0], day(5));
    assert_eq!(ds.columns(), 3);
}

#[test]
fn doubling_close_differences_to_log_two() {
    let a = AssetSeries::new("A", vec![bar(day(0), 10.0), bar(day(1), 20.0)]).unwrap();
    let ds = align_and_transform(&[a]).unwrap();
    assert!((ds.log_return(0, 1) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn cash_column_is_constant_and_differences_to_zero() {
    let p = SynthParams::new(3, 60, vec![0.0; 3], vec![0.02; 3], 3);
    let ds = align_and_transform(&synth_gbm(&p).unwrap()).unwrap();
    for t in 0..ds.num_days() {
        for f in 0..5 {
            assert_eq!(ds.raw(t, 0, f), 1.0);
            assert_eq!(ds.diff(t, 0, f), 0.0);
        }
        assert_eq!(ds.closes(t)[0], 1.0);
    }
}

#[test]
fn zero_volume_is_floored_before_differencing() {
    let mut bars: Vec<Bar> = (0..3).map(|t| bar(day(t), 10.0)).collect();
    bars[1].volume = 0.0;
    let ds = align_and_transform(&[AssetSeries::new("A", bars).unwrap()]).unwrap();
    assert!(ds.diff(0, 1, 4).is_finite());
    assert!((ds.diff(0, 1, 4) - 1000f64.recip().ln()).abs() < 1e-12);
}

#[test]
fn alignment_is_order_insensitive() {
    let p = SynthParams::new(3, 50, vec![0.001, 0.0, -0.001], vec![0.01, 0.02, 0.03], 11);
    let series = synth_gbm(&p).unwrap();
    let fwd = align_and_transform(&series).unwrap();
    let rev: Vec<AssetSeries> = series.iter().rev().cloned().collect();
    let bwd = align_and_transform(&rev).unwrap();
    assert_eq!(fwd.dates, bwd.dates);
    let m = fwd.num_assets();
    for (i, sym) in fwd.symbols.iter().enumerate() {
        let j = bwd.symbols.iter().position(|s| s == sym).unwrap();
        assert_eq!(j, m - 1 - i);
        for t in 0..fwd.num_days() {
            for f in 0..5 {
                assert_eq!(fwd.raw(t, i + 1, f), bwd.raw(t, j + 1, f));
                assert_eq!(fwd.diff(t, i + 1, f), bwd.diff(t, j + 1, f));
            }
            assert_eq!(fwd.spreads(t)[i + 1], bwd.spreads(t)[j + 1]);
        }
    }
}

#[test]
fn dataset_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams::new(2, 45, vec![0.001, 0.002], vec![0.01, 0.02], 13);
    let ds = align_and_transform(&synth_gbm(&p).unwrap()).unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(AlignedDataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn slicing_keeps_dates_and_values() {
    let p = SynthParams::new(1, 30, vec![0.001], vec![0.01], 14);
    let ds = align_and_transform(&synth_gbm(&p).unwrap()).unwrap();
    let s = ds.slice(5, 15).unwrap();
    assert_eq!(s.num_days(), 10);
    assert_eq!(s.dates[0], ds.dates[5]);
    assert_eq!(s.closes(3), ds.closes(8));
    assert!(ds.slice(10, 5).is_err());
    assert!(ds.slice(0, 100).is_err());
}

#[test]
fn frozen_gbm_examples() {
    let flat = synth_gbm(&SynthParams::new(1, 20, vec![0.0], vec![0.0], 1)).unwrap();
    assert!(flat[0].bars.iter().all(|b| b.close == flat[0].bars[0].close));
    let trend = synth_gbm(&SynthParams::new(1, 20, vec![0.003], vec![0.0], 1)).unwrap();
    let c0 = trend[0].bars[0].close;
    for (t, b) in trend[0].bars.iter().enumerate() {
        assert!((b.close - c0 * (0.003 * t as f64).exp()).abs() < 1e-9 * b.close);
        assert!(b.high >= b.open.max(b.close) && b.low <= b.open.min(b.close));
    }
    let p = SynthParams::new(2, 30, vec![0.001; 2], vec![0.02; 2], 5);
    assert_eq!(synth_gbm(&p).unwrap(), synth_gbm(&p).unwrap());
}
