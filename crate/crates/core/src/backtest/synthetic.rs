use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cn::{price_cn, CnConfig};
use crate::black_scholes::{bs_put, implied_vol, BsQuote};
use crate::error::{Error, Result};
use crate::local_vol::{linspace, LocalVolGrid};
use crate::market_data::{CurveSet, QuoteRecord};
use crate::ssvi::{check_no_arbitrage, AtmCurve, SsviParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Flat { sigma: f64 },
    /// Power-law SSVI with `Θ_T = atm_slope · T`.
    Ssvi { rho: f64, eta: f64, gamma: f64, atm_slope: f64 },
    /// Local volatility `σ0 S^(β-1)`.
    Cev { sigma0: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub maturities: Vec<f64>,
    pub strikes: Vec<f64>,
    /// Relative half-width of the bid-ask spread around the mid.
    pub spread: f64,
    pub seed: u64,
    /// Relative standard deviation of multiplicative noise on the mid.
    #[serde(default)]
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.maturities.is_empty() || self.strikes.is_empty() {
            return bad("maturities and strikes must be non-empty");
        }
        if self.maturities.iter().chain(&self.strikes).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("maturities and strikes must be positive");
        }
        if !(self.spread >= 0.0 && self.spread < 1.0) || !(self.noise >= 0.0) {
            return bad("spread must lie in [0, 1) and noise must be nonnegative");
        }
        match self.generator {
            Generator::Flat { sigma } if !(sigma > 0.0) => bad("flat volatility must be positive"),
            Generator::Cev { sigma0, beta } if !(sigma0 > 0.0 && beta > 0.0 && beta <= 2.0) => {
                bad("CEV needs sigma0 > 0 and beta in (0, 2]")
            }
            Generator::Ssvi { atm_slope, .. } if !(atm_slope > 0.0) => bad("ATM slope must be positive"),
            _ => Ok(()),
        }
    }

    /// SSVI parameters of an SSVI generator, with ATM knots at the quoted maturities.
    pub fn ssvi_params(&self) -> Option<Result<SsviParams>> {
        let Generator::Ssvi { rho, eta, gamma, atm_slope } = self.generator else {
            return None;
        };
        let mut ts = self.maturities.clone();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        Some(AtmCurve::linear(atm_slope, ts).map(|theta_curve| SsviParams { rho, eta, gamma, theta_curve }))
    }
}

/// CEV local volatility in reduced coordinates on a grid wide enough for the quotes.
fn cev_grid(sigma0: f64, beta: f64, curves: &CurveSet, t_max: f64) -> Result<LocalVolGrid> {
    let s0 = curves.spot;
    let t_axis = linspace(0.0, t_max, 201);
    let k_axis = linspace(0.2 * s0, 3.0 * s0, 561);
    let mut values = Vec::with_capacity(t_axis.len() * k_axis.len());
    for &t in &t_axis {
        let growth = curves.drift_integral(t).exp();
        values.extend(k_axis.iter().map(|k| sigma0 * (k * growth).powf(beta - 1.0)));
    }
    let n = values.len();
    LocalVolGrid::new(t_axis, k_axis, values, vec![true; n])
}

/// Put quotes on the `maturities × strikes` layout priced by the generator's oracle.
pub fn generate_synthetic(spec: &SyntheticSpec, curves: &CurveSet) -> Result<Vec<QuoteRecord>> {
    spec.validate()?;
    for &t in &spec.maturities {
        curves.check_covers(t)?;
    }
    let ssvi = spec.ssvi_params().transpose()?;
    if let Some(p) = &ssvi {
        let report = check_no_arbitrage(p);
        if !report.passed() {
            return Err(Error::Arbitrage(format!("SSVI generator parameters: {report:?}")));
        }
    }
    let cev = match spec.generator {
        Generator::Cev { sigma0, beta } => {
            let t_max = spec.maturities.iter().copied().fold(0.0, f64::max);
            let lv = cev_grid(sigma0, beta, curves, t_max)?;
            let cfg = CnConfig { n_t: 400, n_k: 1121, k_range: None, rannacher_steps: 2 };
            Some(price_cn(&lv, curves, &cfg, &spec.maturities)?)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut quotes = Vec::with_capacity(spec.maturities.len() * spec.strikes.len());
    for &t in &spec.maturities {
        let (fwd, df) = (curves.forward(t), curves.discount(t));
        for &strike in &spec.strikes {
            let (mid, iv) = match spec.generator {
                Generator::Flat { sigma } => {
                    (bs_put(&BsQuote { forward: fwd, strike, maturity: t, vol: sigma, discount: df }), Some(sigma))
                }
                Generator::Ssvi { .. } => {
                    let kappa = (curves.reduced_strike(t, strike) / curves.spot).ln();
                    let iv = ssvi.as_ref().unwrap().implied_vol(t, kappa)?;
                    (bs_put(&BsQuote { forward: fwd, strike, maturity: t, vol: iv, discount: df }), Some(iv))
                }
                Generator::Cev { .. } => {
                    let k = curves.reduced_strike(t, strike);
                    let p = cev.as_ref().unwrap().reduced_price(t, k)?;
                    let price = curves.price_from_reduced(t, p);
                    (price, implied_vol(price, fwd, strike, t, df).ok())
                }
            };
            let mid = if spec.noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mid * (1.0 + spec.noise * z).max(0.0)
            } else {
                mid
            };
            quotes.push(QuoteRecord {
                maturity: t,
                strike,
                bid: mid * (1.0 - spec.spread),
                ask: mid * (1.0 + spec.spread),
                listed_iv: iv,
            });
        }
    }
    Ok(quotes)
}
