use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::black_scholes::implied_vol;
use crate::error::{Error, Result};
use crate::market_data::MarketFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "CN")]
    Cn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub maturity: f64,
    pub strike: f64,
    pub model_price: f64,
    pub market_price: f64,
    /// `None` when the model price could not be inverted.
    pub model_iv: Option<f64>,
    pub market_iv: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub method: Method,
    pub rows: Vec<ReportRow>,
    pub price_rmse: f64,
    /// Over invertible rows; `None` if there are none.
    pub iv_rmse: Option<f64>,
    pub iv_failures: usize,
    /// Not serialized, so reports of seeded runs compare byte for byte.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// Compares model prices with the frame's mid quotes, in price and implied volatility.
pub fn report(
    method: Method,
    model_prices: &[f64],
    std_errors: Option<&[f64]>,
    frame: &MarketFrame,
    runtime_seconds: f64,
) -> Result<BacktestReport> {
    if model_prices.len() != frame.points.len() || std_errors.is_some_and(|s| s.len() != model_prices.len()) {
        return Err(Error::InvalidInput(format!(
            "{} model prices for {} options",
            model_prices.len(),
            frame.points.len()
        )));
    }
    let curves = &frame.curves;
    let rows: Vec<ReportRow> = frame
        .points
        .iter()
        .zip(model_prices)
        .enumerate()
        .map(|(i, (pt, &price))| {
            let (t, strike) = (pt.maturity, pt.quote.strike);
            ReportRow {
                maturity: t,
                strike,
                model_price: price,
                market_price: pt.quote.mid(),
                model_iv: implied_vol(price, curves.forward(t), strike, t, curves.discount(t)).ok(),
                market_iv: pt.mid_iv,
                std_error: std_errors.map(|s| s[i]),
            }
        })
        .collect();
    let n = rows.len() as f64;
    let price_rmse = (rows.iter().map(|r| (r.model_price - r.market_price).powi(2)).sum::<f64>() / n).sqrt();
    let iv_errors: Vec<f64> = rows.iter().filter_map(|r| r.model_iv.map(|iv| iv - r.market_iv)).collect();
    let iv_failures = rows.len() - iv_errors.len();
    let iv_rmse = (!iv_errors.is_empty())
        .then(|| (iv_errors.iter().map(|e| e * e).sum::<f64>() / iv_errors.len() as f64).sqrt());
    Ok(BacktestReport { method, rows, price_rmse, iv_rmse, iv_failures, runtime_seconds })
}

impl BacktestReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["T", "K", "model_price", "market_price", "model_iv", "market_iv", "std_error"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.maturity.to_string(),
                r.strike.to_string(),
                r.model_price.to_string(),
                r.market_price.to_string(),
                opt(r.model_iv),
                r.market_iv.to_string(),
                opt(r.std_error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
