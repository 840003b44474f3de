use proptest::prelude::*;
use volsurf::backtest::{generate_synthetic, Generator, SyntheticSpec};
use volsurf::market_data::{build_frame, load_quotes, write_quotes, Curve, CurveSet, PreprocessConfig, QuoteSchema};
use volsurf::Error;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        generator: Generator::Flat { sigma: 0.25 },
        maturities: vec![0.02, 0.5, 1.0],
        strikes: vec![80.0, 100.0, 120.0],
        spread: 0.01,
        seed: 1,
        noise: 0.0,
    }
}

#[test]
fn quote_and_curve_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let curves = CurveSet::new(100.0, Curve::new(vec![0.0, 1.0], vec![0.01, 0.03]).unwrap(), Curve::flat(0.02)).unwrap();
    let quotes = generate_synthetic(&spec(), &curves).unwrap();
    let qpath = dir.path().join("quotes.csv");
    write_quotes(std::fs::File::create(&qpath).unwrap(), &quotes).unwrap();
    let load = load_quotes(&qpath, &QuoteSchema::default()).unwrap();
    assert_eq!(load.records, quotes);
    assert!(load.rejected.is_empty());

    let rpath = dir.path().join("rates.csv");
    curves.rates.write(std::fs::File::create(&rpath).unwrap()).unwrap();
    assert_eq!(Curve::load(&rpath).unwrap(), curves.rates);
}

#[test]
fn frame_drops_short_maturities_and_keeps_the_rest() {
    let curves = CurveSet::flat(100.0, 0.02, 0.0);
    let quotes = generate_synthetic(&spec(), &curves).unwrap();
    let frame = build_frame(&quotes, &curves, &PreprocessConfig::default()).unwrap();
    assert_eq!(frame.len(), 6);
    assert_eq!(frame.dropped.len(), 3);
    for p in &frame.points {
        assert!((p.mid_iv - 0.25).abs() < 1e-3, "{}", p.mid_iv);
        assert!((p.k - curves.reduced_strike(p.maturity, p.quote.strike)).abs() < 1e-12);
    }
}

#[test]
fn all_quotes_filtered_is_an_input_error() {
    let curves = CurveSet::flat(100.0, 0.0, 0.0);
    let quotes = generate_synthetic(&SyntheticSpec { maturities: vec![0.01], ..spec() }, &curves).unwrap();
    let err = build_frame(&quotes, &curves, &PreprocessConfig::default()).unwrap_err();
    assert!(err.is_input_error(), "{err}");
    assert!(matches!(err, Error::EmptyFrame(_) | Error::EmptyInput(_) | Error::InvalidInput(_)));
}

#[test]
fn holdout_split_partitions_the_frame() {
    let curves = CurveSet::flat(100.0, 0.0, 0.0);
    let quotes = generate_synthetic(&SyntheticSpec { maturities: vec![0.25, 0.5, 1.0], ..spec() }, &curves).unwrap();
    let frame = build_frame(&quotes, &curves, &PreprocessConfig::default()).unwrap();
    let (train, test) = frame.holdout_split().unwrap();
    assert_eq!(train.len() + test.len(), frame.len());
    assert_eq!(train.len(), 5);
    for p in &test.points {
        assert!(!train.points.iter().any(|q| q.quote == p.quote));
    }
}

proptest! {
    #[test]
    fn reduced_strike_inverts(r in -0.05f64..0.1, q in 0.0f64..0.05, t in 0.01f64..5.0, strike in 10.0f64..500.0) {
        let curves = CurveSet::flat(100.0, r, q);
        let k = curves.reduced_strike(t, strike);
        prop_assert!((curves.strike_from_reduced(t, k) - strike).abs() <= 1e-10 * strike);
        let p = curves.reduced_price(t, 3.5);
        prop_assert!((curves.price_from_reduced(t, p) - 3.5).abs() <= 1e-12);
    }

    #[test]
    fn unit_scaling_round_trips(t in 0.1f64..2.0, k in 70.0f64..130.0) {
        let curves = CurveSet::flat(100.0, 0.0, 0.0);
        let quotes = generate_synthetic(&SyntheticSpec { maturities: vec![0.1, 2.0], strikes: vec![70.0, 130.0], ..spec() }, &curves).unwrap();
        let frame = build_frame(&quotes, &curves, &PreprocessConfig::default()).unwrap();
        let s = frame.to_unit_square(t, k);
        prop_assert!(!s.extrapolated);
        let (t2, k2) = frame.from_unit_square(s.u, s.v);
        prop_assert!((t2 - t).abs() < 1e-12 && (k2 - k).abs() < 1e-10);
    }
}
