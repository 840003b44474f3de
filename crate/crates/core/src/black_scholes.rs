//! Black-Scholes put analytics on the forward and implied-volatility inversion.
//!
//! Prices are expressed as `df * E[(K - F_T)^+]` with a lognormal forward, so
//! reduced prices are obtained with `forward = S0`, `strike = k`, `df = 1`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inputs of a European put on the forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsQuote {
    pub forward: f64,
    pub strike: f64,
    pub maturity: f64,
    pub vol: f64,
    pub discount: f64,
}

impl BsQuote {
    pub fn new(forward: f64, strike: f64, maturity: f64, vol: f64, discount: f64) -> Result<Self> {
        let q = BsQuote { forward, strike, maturity, vol, discount };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.forward > 0.0
            && self.strike > 0.0
            && self.maturity > 0.0
            && self.vol > 0.0
            && self.discount > 0.0
            && self.discount <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid Black-Scholes inputs {self:?}")))
        }
    }
}

fn d1_d2(forward: f64, strike: f64, total_sd: f64) -> (f64, f64) {
    let d1 = ((forward / strike).ln() + 0.5 * total_sd * total_sd) / total_sd;
    (d1, d1 - total_sd)
}

/// Black-Scholes put price `df * (K N(-d2) - F N(-d1))`.
///
/// A zero volatility returns the discounted intrinsic value and an infinite
/// volatility returns `df * K`.
pub fn bs_put(q: &BsQuote) -> f64 {
    let sd = q.vol * q.maturity.sqrt();
    if sd <= 0.0 {
        return q.discount * (q.strike - q.forward).max(0.0);
    }
    if !sd.is_finite() {
        return q.discount * q.strike;
    }
    let (d1, d2) = d1_d2(q.forward, q.strike, sd);
    let undiscounted = q.strike * norm_cdf(-d2) - q.forward * norm_cdf(-d1);
    let intrinsic = (q.strike - q.forward).max(0.0);
    q.discount * undiscounted.max(intrinsic).min(q.strike)
}

/// Vega `df * F * pdf(d1) * sqrt(T)`; identical for puts and calls.
pub fn bs_vega(q: &BsQuote) -> f64 {
    let sqrt_t = q.maturity.sqrt();
    let sd = q.vol * sqrt_t;
    if sd <= 0.0 || !sd.is_finite() {
        return 0.0;
    }
    let (d1, _) = d1_d2(q.forward, q.strike, sd);
    q.discount * q.forward * norm_pdf(d1) * sqrt_t
}

/// Implied total variance `iv^2 * T`.
pub fn total_variance(iv: f64, maturity: f64) -> f64 {
    iv * iv * maturity
}

const BISECTION_WIDTH: f64 = 1e-4;
const PRICE_TOL: f64 = 1e-12;
const MAX_VOL: f64 = 1e3;

/// Inverts [`bs_put`] for the volatility.
///
/// Bracketed bisection down to a `1e-4` volatility bracket, then Newton steps
/// on vega kept inside the bracket until the repriced value matches.
pub fn implied_vol(price: f64, forward: f64, strike: f64, maturity: f64, discount: f64) -> Result<f64> {
    if !(forward > 0.0 && strike > 0.0 && maturity > 0.0 && discount > 0.0 && discount <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "invalid inversion inputs F={forward} K={strike} T={maturity} df={discount}"
        )));
    }
    let lower = discount * (strike - forward).max(0.0);
    let upper = discount * strike;
    if !(price > lower && price < upper) || !price.is_finite() {
        return Err(Error::InversionDomain { price, lower, upper });
    }
    let price_at = |vol: f64| {
        bs_put(&BsQuote { forward, strike, maturity, vol, discount })
    };

    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while price_at(hi) < price {
        lo = hi;
        hi *= 2.0;
        if hi > MAX_VOL {
            return Err(Error::InversionDomain { price, lower, upper });
        }
    }
    while hi - lo > BISECTION_WIDTH {
        let mid = 0.5 * (lo + hi);
        if price_at(mid) < price {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let tol = PRICE_TOL * price.max(1.0);
    let mut vol = 0.5 * (lo + hi);
    for _ in 0..100 {
        let q = BsQuote { forward, strike, maturity, vol, discount };
        let diff = bs_put(&q) - price;
        if diff.abs() <= tol {
            return Ok(vol);
        }
        if diff < 0.0 {
            lo = vol;
        } else {
            hi = vol;
        }
        let vega = bs_vega(&q);
        let newton = if vega > 0.0 { vol - diff / vega } else { f64::NAN };
        vol = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi {
            return Ok(vol);
        }
    }
    Ok(vol)
}
