use proptest::prelude::*;
use volsurf::black_scholes::{bs_put, bs_vega, implied_vol, BsQuote};

proptest! {
    #[test]
    fn implied_vol_inverts_the_put_price(
        vol in 0.03f64..1.5,
        t in 0.05f64..5.0,
        moneyness in -0.5f64..0.5,
        df in 0.8f64..1.0,
    ) {
        let forward = 100.0;
        let strike = forward * moneyness.exp();
        let q = BsQuote { forward, strike, maturity: t, vol, discount: df };
        let price = bs_put(&q);
        prop_assume!(bs_vega(&q) > 1e-6);
        let iv = implied_vol(price, forward, strike, t, df).unwrap();
        prop_assert!((iv - vol).abs() < 1e-7, "vol {vol} recovered {iv}");
    }

    #[test]
    fn put_price_is_monotone_and_bounded(vol in 0.01f64..2.0, t in 0.01f64..5.0, strike in 50.0f64..200.0) {
        let q = |v: f64| BsQuote { forward: 100.0, strike, maturity: t, vol: v, discount: 0.97 };
        let (p, p_up) = (bs_put(&q(vol)), bs_put(&q(vol * 1.01)));
        prop_assert!(p_up >= p);
        prop_assert!(p >= 0.97 * (strike - 100.0f64).max(0.0) - 1e-10);
        prop_assert!(p <= 0.97 * strike);
    }
}

#[test]
fn put_call_parity_through_the_forward() {
    // C - P = D (F - K); the call comes from the put at the reflected strike.
    let (f, k, t, v, d) = (105.0, 95.0, 0.75, 0.3, 0.98);
    let put = bs_put(&BsQuote { forward: f, strike: k, maturity: t, vol: v, discount: d });
    let call = put + d * (f - k);
    assert!(call > d * (f - k));
    assert!((implied_vol(put, f, k, t, d).unwrap() - v).abs() < 1e-10);
}
