use proptest::prelude::*;
use volsurf::backtest::{generate_synthetic, Generator, SyntheticSpec};
use volsurf::local_vol::{dupire_terms, linspace, ThetaSurface};
use volsurf::market_data::{build_frame, CurveSet, MarketFrame, PreprocessConfig};
use volsurf::ssvi::{self, check_no_arbitrage, AtmCurve, SsviConfig, SsviModel, SsviParams, SsviSurface};
use volsurf::Error;

fn ssvi_frame(rho: f64, eta: f64) -> MarketFrame {
    let spec = SyntheticSpec {
        generator: Generator::Ssvi { rho, eta, gamma: 0.5, atm_slope: 0.04 },
        maturities: vec![0.25, 0.5, 1.0, 1.5, 2.0],
        strikes: linspace(70.0, 130.0, 25),
        spread: 0.0,
        seed: 1,
        noise: 0.0,
    };
    let curves = CurveSet::flat(100.0, 0.0, 0.0);
    build_frame(&generate_synthetic(&spec, &curves).unwrap(), &curves, &PreprocessConfig::default()).unwrap()
}

#[test]
fn recovers_generator_parameters() {
    let m = ssvi::calibrate(&ssvi_frame(-0.5, 1.0), &SsviConfig { ssvi_only: true, ..Default::default() }).unwrap();
    assert!((m.params.rho + 0.5).abs() < 0.02, "{}", m.params.rho);
    assert!((m.params.eta - 1.0).abs() < 0.05, "{}", m.params.eta);
    assert!(check_no_arbitrage(&m.params).passed());
}

#[test]
fn slice_refinement_keeps_the_surface_clean() {
    let f = ssvi_frame(-0.3, 1.2);
    let m = ssvi::calibrate(&f, &SsviConfig::default()).unwrap();
    assert_eq!(m.report.violations.butterfly, 0);
    assert_eq!(m.report.violations.calendar, 0);
    assert!(m.report.kappa_range.0 < 0.0 && m.report.kappa_range.1 > 0.0);
    for p in &f.points {
        assert!((m.surface.implied_vol(p.maturity, p.kappa).unwrap() - p.mid_iv).abs() < 2e-3);
    }
}

#[test]
fn model_json_round_trips_and_checks_its_version() {
    let m = ssvi::calibrate(&ssvi_frame(-0.3, 1.2), &SsviConfig { ssvi_only: true, ..Default::default() }).unwrap();
    let text = m.to_json().unwrap();
    assert_eq!(SsviModel::from_json(&text).unwrap(), m);
    let stale = text.replacen(ssvi::SSVI_MODEL_VERSION, "ssvi/0", 1);
    assert!(matches!(SsviModel::from_json(&stale), Err(Error::Version { .. })));
}

#[test]
fn gamma_outside_the_admissible_range_is_rejected() {
    let err = ssvi::calibrate(&ssvi_frame(-0.3, 1.2), &SsviConfig { gamma: 0.7, ..Default::default() }).unwrap_err();
    assert!(err.is_input_error());
}

proptest! {
    #[test]
    fn admissible_parameters_have_no_butterfly_or_calendar_arbitrage(
        rho in -0.95f64..0.95,
        frac in 0.05f64..0.99,
        gamma in 0.1f64..0.5,
        t in 0.1f64..3.0,
        kappa in -1.5f64..1.5,
    ) {
        let eta = frac * 2.0 / (1.0 + rho.abs());
        let p = SsviParams { rho, eta, gamma, theta_curve: AtmCurve::linear(0.04, linspace(0.05, 3.0, 12)).unwrap() };
        prop_assert!(check_no_arbitrage(&p).passed());
        let s = SsviSurface { params: p, spot: 100.0 };
        let terms = s.theta_terms(t, kappa).unwrap();
        let (cal, butt) = dupire_terms(&terms, kappa).unwrap();
        prop_assert!(cal >= -1e-12, "cal {cal}");
        prop_assert!(butt >= -1e-9, "butt {butt}");
    }

    #[test]
    fn excessive_eta_fails_the_check(rho in -0.95f64..0.95, excess in 1.01f64..2.0) {
        let eta = excess * 2.0 / (1.0 + rho.abs());
        let p = SsviParams { rho, eta, gamma: 0.5, theta_curve: AtmCurve::linear(0.04, vec![0.5, 1.0]).unwrap() };
        prop_assert!(!check_no_arbitrage(&p).butterfly_ok);
    }
}
