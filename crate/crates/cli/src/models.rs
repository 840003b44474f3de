use std::path::Path;

use serde::Serialize;
use volsurf::black_scholes::{bs_put, implied_vol, BsQuote};
use volsurf::gp::{GpModel, GP_MODEL_VERSION};
use volsurf::market_data::{CurveSet, MarketFrame};
use volsurf::nn_iv::{NnIvModel, NN_MODEL_VERSION};
use volsurf::ssvi::{SsviModel, SSVI_MODEL_VERSION};
use volsurf::{Error, Result};

use crate::inputs::read_text;

pub enum FittedModel {
    Gp(Box<GpModel>),
    Nn(Box<NnIvModel>),
    Ssvi(Box<SsviModel>),
}

impl FittedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let version = v.get("version").and_then(|x| x.as_str()).unwrap_or("");
        match version {
            GP_MODEL_VERSION => Ok(FittedModel::Gp(Box::new(GpModel::from_json(&text)?))),
            NN_MODEL_VERSION => Ok(FittedModel::Nn(Box::new(NnIvModel::from_json(&text)?))),
            SSVI_MODEL_VERSION => Ok(FittedModel::Ssvi(Box::new(SsviModel::from_json(&text)?))),
            other => Err(Error::Version {
                found: other.into(),
                expected: format!("{GP_MODEL_VERSION}, {NN_MODEL_VERSION} or {SSVI_MODEL_VERSION}"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FittedModel::Gp(_) => "gp",
            FittedModel::Nn(_) => "nn",
            FittedModel::Ssvi(_) => "ssvi",
        }
    }

    /// Model put price and implied volatility at a maturity and strike.
    pub fn quote(&self, curves: &CurveSet, t: f64, strike: f64) -> Result<(f64, Option<f64>)> {
        let (fwd, df) = (curves.forward(t), curves.discount(t));
        let from_iv = |iv: f64| (bs_put(&BsQuote { forward: fwd, strike, maturity: t, vol: iv, discount: df }), Some(iv));
        let kappa = (curves.reduced_strike(t, strike) / curves.spot).ln();
        match self {
            FittedModel::Gp(m) => {
                let p = m.reduced_price(t, curves.reduced_strike(t, strike))?;
                let price = curves.price_from_reduced(t, p);
                Ok((price, implied_vol(price, fwd, strike, t, df).ok()))
            }
            FittedModel::Nn(m) => Ok(from_iv(m.implied_vol(&[t], &[kappa])[0])),
            FittedModel::Ssvi(m) => Ok(from_iv(m.surface.implied_vol(t, kappa)?)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitStats {
    pub quotes: usize,
    /// Quotes the model could not price, e.g. outside its domain.
    pub unpriced: usize,
    pub price_rmse: Option<f64>,
    pub iv_rmse: Option<f64>,
    pub iv_failures: usize,
}

fn rmse(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
}

pub fn fit_stats(model: &FittedModel, frame: &MarketFrame) -> FitStats {
    let (mut price_err, mut iv_err) = (Vec::new(), Vec::new());
    let (mut unpriced, mut iv_failures) = (0, 0);
    for p in &frame.points {
        match model.quote(&frame.curves, p.maturity, p.quote.strike) {
            Ok((price, iv)) => {
                price_err.push(price - p.quote.mid());
                match iv {
                    Some(iv) => iv_err.push(iv - p.mid_iv),
                    None => iv_failures += 1,
                }
            }
            Err(_) => unpriced += 1,
        }
    }
    FitStats { quotes: frame.len(), unpriced, price_rmse: rmse(&price_err), iv_rmse: rmse(&iv_err), iv_failures }
}
