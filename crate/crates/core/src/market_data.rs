//! Quote ingestion, rate/dividend curves, reduced prices and unit-square scaling.
//!
//! A put with price `P` at `(T, K)` is mapped to the reduced price
//! `p = exp(∫q) P` at the forward-discounted strike `k = K exp(-∫(r - q))`.
//! In these coordinates the forward of the underlying is the spot `S0`.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::black_scholes::implied_vol;
use crate::error::{Error, Result};

/// One market put quote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuoteRecord {
    pub maturity: f64,
    pub strike: f64,
    pub bid: f64,
    pub ask: f64,
    pub listed_iv: Option<f64>,
}

impl QuoteRecord {
    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }

    fn check(&self) -> std::result::Result<(), &'static str> {
        if !(self.maturity > 0.0) {
            return Err("non-positive maturity");
        }
        if !(self.strike > 0.0) {
            return Err("non-positive strike");
        }
        if !(self.bid >= 0.0) {
            return Err("negative bid");
        }
        if self.bid > self.ask {
            return Err("crossed quote");
        }
        if matches!(self.listed_iv, Some(iv) if !(iv > 0.0)) {
            return Err("non-positive listed iv");
        }
        Ok(())
    }
}

/// Column names of the quote table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteSchema {
    pub maturity: String,
    pub strike: String,
    pub bid: String,
    pub ask: String,
    /// Optional column; missing from the header means no listed IVs.
    pub iv: String,
}

impl Default for QuoteSchema {
    fn default() -> Self {
        QuoteSchema {
            maturity: "maturity".into(),
            strike: "strike".into(),
            bid: "bid".into(),
            ask: "ask".into(),
            iv: "iv".into(),
        }
    }
}

/// A data row that could not be turned into a [`QuoteRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// Zero-based data row index (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QuoteLoad {
    pub records: Vec<QuoteRecord>,
    pub rejected: Vec<RejectedRow>,
    pub warnings: Vec<String>,
}

/// Reads a quote CSV.
pub fn load_quotes(path: impl AsRef<Path>, schema: &QuoteSchema) -> Result<QuoteLoad> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_quotes(&text, schema)
}

/// Parses quote CSV text; see [`load_quotes`].
pub fn parse_quotes(text: &str, schema: &QuoteSchema) -> Result<QuoteLoad> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("quote file has no header".into()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = [&schema.maturity, &schema.strike, &schema.bid, &schema.ask];
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(required) {
        *slot = column(name).ok_or_else(|| Error::Schema(format!("missing column {name:?}")))?;
    }
    let iv_idx = column(&schema.iv);

    let mut load = QuoteLoad::default();
    for (row, rec) in reader.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                load.rejected.push(RejectedRow { row, reason: format!("malformed row: {e}") });
                continue;
            }
        };
        let field = |i: usize| -> std::result::Result<f64, String> {
            let raw = rec.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("non-numeric value {raw:?} in column {:?}", &headers[i]))
        };
        let parsed = (|| -> std::result::Result<QuoteRecord, String> {
            let listed_iv = match iv_idx.and_then(|i| rec.get(i)) {
                Some(s) if !s.is_empty() => Some(field(iv_idx.unwrap())?),
                _ => None,
            };
            let q = QuoteRecord {
                maturity: field(idx[0])?,
                strike: field(idx[1])?,
                bid: field(idx[2])?,
                ask: field(idx[3])?,
                listed_iv,
            };
            q.check().map_err(str::to_string)?;
            Ok(q)
        })();
        match parsed {
            Ok(q) => load.records.push(q),
            Err(reason) => load.rejected.push(RejectedRow { row, reason }),
        }
    }
    if load.records.is_empty() && load.rejected.is_empty() {
        let msg = "quote file contains a header but no data rows".to_string();
        warn!("{msg}");
        load.warnings.push(msg);
    }
    for r in &load.rejected {
        warn!("quote row {} rejected: {}", r.row, r.reason);
    }
    Ok(load)
}

/// Writes quotes in the `maturity,strike,bid,ask,iv` layout.
pub fn write_quotes<W: std::io::Write>(out: W, quotes: &[QuoteRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["maturity", "strike", "bid", "ask", "iv"])?;
    for q in quotes {
        let iv = q.listed_iv.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            q.maturity.to_string(),
            q.strike.to_string(),
            q.bid.to_string(),
            q.ask.to_string(),
            iv,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Piecewise-linear term structure, flat outside its knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    tenors: Vec<f64>,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(tenors: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if tenors.is_empty() || tenors.len() != values.len() {
            return Err(Error::InvalidInput("curve needs matching, non-empty tenor/value lists".into()));
        }
        if tenors.windows(2).any(|w| !(w[1] > w[0])) || tenors[0] < 0.0 {
            return Err(Error::InvalidInput("curve tenors must be nonnegative and strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("curve values must be finite".into()));
        }
        Ok(Curve { tenors, values })
    }

    /// Constant curve defined for every maturity.
    pub fn flat(value: f64) -> Self {
        Curve { tenors: vec![0.0], values: vec![value] }
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Single-knot curves are constant and cover every maturity.
    pub fn covers(&self, t: f64) -> bool {
        self.tenors.len() == 1 || t <= self.tenors[self.tenors.len() - 1] * (1.0 + 1e-12)
    }

    pub fn value(&self, t: f64) -> f64 {
        let n = self.tenors.len();
        if t <= self.tenors[0] {
            return self.values[0];
        }
        if t >= self.tenors[n - 1] {
            return self.values[n - 1];
        }
        let i = self.tenors.partition_point(|&x| x <= t) - 1;
        let w = (t - self.tenors[i]) / (self.tenors[i + 1] - self.tenors[i]);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// `∫_0^t value(s) ds` by the trapezoidal rule on the knots.
    pub fn integral(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut prev = 0.0;
        for &knot in self.tenors.iter().filter(|&&x| x > 0.0 && x < t) {
            acc += 0.5 * (knot - prev) * (self.value(prev) + self.value(knot));
            prev = knot;
        }
        acc + 0.5 * (t - prev) * (self.value(prev) + self.value(t))
    }

    /// Reads a `tenor,value` CSV.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput("curve file is empty".into()));
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let t_idx = headers
            .iter()
            .position(|h| h == "tenor")
            .ok_or_else(|| Error::Schema("curve file missing column \"tenor\"".into()))?;
        let v_idx = headers
            .iter()
            .position(|h| h == "value")
            .ok_or_else(|| Error::Schema("curve file missing column \"value\"".into()))?;
        let mut tenors = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let get = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("curve row {row}: non-numeric field")))
            };
            tenors.push(get(t_idx)?);
            values.push(get(v_idx)?);
        }
        if tenors.is_empty() {
            return Err(Error::EmptyInput("curve file has no data rows".into()));
        }
        Curve::new(tenors, values)
    }

    pub fn write<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tenor", "value"])?;
        for (t, v) in self.tenors.iter().zip(&self.values) {
            w.write_record([t.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Spot plus continuously-compounded rate and dividend-yield curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub spot: f64,
    pub rates: Curve,
    pub dividends: Curve,
}

impl CurveSet {
    pub fn new(spot: f64, rates: Curve, dividends: Curve) -> Result<Self> {
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(Error::InvalidInput(format!("spot must be positive, got {spot}")));
        }
        Ok(CurveSet { spot, rates, dividends })
    }

    pub fn flat(spot: f64, rate: f64, dividend: f64) -> Self {
        CurveSet { spot, rates: Curve::flat(rate), dividends: Curve::flat(dividend) }
    }

    pub fn check_covers(&self, t: f64) -> Result<()> {
        for c in [&self.rates, &self.dividends] {
            if !c.covers(t) {
                return Err(Error::CurveCoverage {
                    maturity: t,
                    last_tenor: *c.tenors.last().unwrap(),
                });
            }
        }
        Ok(())
    }

    /// `∫_0^T (r - q) ds`.
    pub fn drift_integral(&self, t: f64) -> f64 {
        self.rates.integral(t) - self.dividends.integral(t)
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.rates.integral(t)).exp()
    }

    pub fn dividend_factor(&self, t: f64) -> f64 {
        (-self.dividends.integral(t)).exp()
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.spot * self.drift_integral(t).exp()
    }

    /// Forward-discounted strike `k = K exp(-∫(r - q))`.
    pub fn reduced_strike(&self, t: f64, strike: f64) -> f64 {
        strike * (-self.drift_integral(t)).exp()
    }

    pub fn strike_from_reduced(&self, t: f64, k: f64) -> f64 {
        k * self.drift_integral(t).exp()
    }

    /// Reduced price `p = exp(∫q) P`.
    pub fn reduced_price(&self, t: f64, price: f64) -> f64 {
        price / self.dividend_factor(t)
    }

    pub fn price_from_reduced(&self, t: f64, p: f64) -> f64 {
        p * self.dividend_factor(t)
    }
}

/// Preprocessing filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub min_maturity: f64,
    /// Maximum relative gap between the listed IV and the mid-implied IV.
    pub iv_gap_tol: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { min_maturity: 0.055, iv_gap_tol: 0.05 }
    }
}

/// Monotone affine map of one coordinate onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisMap {
    pub lower: f64,
    pub upper: f64,
}

impl AxisMap {
    /// Fits the map to the range of `values`. A degenerate range gets a unit width.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi > lo {
            AxisMap { lower: lo, upper: hi }
        } else {
            AxisMap { lower: lo, upper: lo + 1.0 }
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.lower) / self.width()
    }

    pub fn inverse(&self, u: f64) -> f64 {
        self.lower + u * self.width()
    }
}

/// Affine maps taking `(T, k)` to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitScaling {
    pub maturity: AxisMap,
    pub strike: AxisMap,
}

/// A scaled point and whether it fell outside `[0, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledPoint {
    pub u: f64,
    pub v: f64,
    pub extrapolated: bool,
}

impl UnitScaling {
    pub fn to_unit(&self, t: f64, k: f64) -> ScaledPoint {
        let u = self.maturity.forward(t);
        let v = self.strike.forward(k);
        let tol = 1e-12;
        let extrapolated = !(-tol..=1.0 + tol).contains(&u) || !(-tol..=1.0 + tol).contains(&v);
        ScaledPoint { u, v, extrapolated }
    }

    pub fn from_unit(&self, u: f64, v: f64) -> (f64, f64) {
        (self.maturity.inverse(u), self.strike.inverse(v))
    }
}

/// One retained quote in reduced coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketPoint {
    pub quote: QuoteRecord,
    pub maturity: f64,
    /// Reduced strike.
    pub k: f64,
    /// Log-moneyness `ln(k / S0)`.
    pub kappa: f64,
    pub reduced_bid: f64,
    pub reduced_ask: f64,
    pub reduced_mid: f64,
    pub mid_iv: f64,
}

/// Reason a quote was removed during preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedQuote {
    pub index: usize,
    pub reason: String,
}

/// Preprocessed, immutable dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketFrame {
    pub points: Vec<MarketPoint>,
    pub scaling: UnitScaling,
    pub curves: CurveSet,
    pub dropped: Vec<DroppedQuote>,
}

/// Applies the preprocessing filters and computes reduced quantities.
pub fn build_frame(quotes: &[QuoteRecord], curves: &CurveSet, filters: &PreprocessConfig) -> Result<MarketFrame> {
    if quotes.is_empty() {
        return Err(Error::EmptyInput("no quotes supplied".into()));
    }
    for q in quotes {
        curves.check_covers(q.maturity)?;
    }
    let mut points = Vec::with_capacity(quotes.len());
    let mut dropped = Vec::new();
    for (index, q) in quotes.iter().enumerate() {
        if let Err(reason) = q.check() {
            dropped.push(DroppedQuote { index, reason: reason.into() });
            continue;
        }
        if q.maturity < filters.min_maturity {
            dropped.push(DroppedQuote { index, reason: format!("maturity below {}", filters.min_maturity) });
            continue;
        }
        let t = q.maturity;
        let df = curves.discount(t);
        let mid_iv = match implied_vol(q.mid(), curves.forward(t), q.strike, t, df) {
            Ok(iv) => iv,
            Err(_) => {
                dropped.push(DroppedQuote { index, reason: "mid price not invertible".into() });
                continue;
            }
        };
        if let Some(listed) = q.listed_iv {
            let gap = (listed - mid_iv).abs() / listed;
            if gap > filters.iv_gap_tol {
                dropped.push(DroppedQuote {
                    index,
                    reason: format!("listed iv {listed} vs mid iv {mid_iv:.6} (gap {gap:.4})"),
                });
                continue;
            }
        }
        let k = curves.reduced_strike(t, q.strike);
        points.push(MarketPoint {
            quote: *q,
            maturity: t,
            k,
            kappa: (k / curves.spot).ln(),
            reduced_bid: curves.reduced_price(t, q.bid),
            reduced_ask: curves.reduced_price(t, q.ask),
            reduced_mid: curves.reduced_price(t, q.mid()),
            mid_iv,
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyFrame(format!("{} quotes dropped", dropped.len())));
    }
    let scaling = UnitScaling {
        maturity: AxisMap::fit(points.iter().map(|p| p.maturity)),
        strike: AxisMap::fit(points.iter().map(|p| p.k)),
    };
    Ok(MarketFrame { points, scaling, curves: curves.clone(), dropped })
}

impl MarketFrame {
    /// Scaled coordinates of `(T, k)`.
    pub fn to_unit_square(&self, t: f64, k: f64) -> ScaledPoint {
        self.scaling.to_unit(t, k)
    }

    pub fn from_unit_square(&self, u: f64, v: f64) -> (f64, f64) {
        self.scaling.from_unit(u, v)
    }

    pub fn quotes(&self) -> Vec<QuoteRecord> {
        self.points.iter().map(|p| p.quote).collect()
    }

    pub fn spot(&self) -> f64 {
        self.curves.spot
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Frame restricted to the points selected by `keep`, with rescaling refitted.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Result<MarketFrame> {
        let points: Vec<MarketPoint> =
            self.points.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, p)| *p).collect();
        if points.is_empty() {
            return Err(Error::EmptyFrame("subset is empty".into()));
        }
        let scaling = UnitScaling {
            maturity: AxisMap::fit(points.iter().map(|p| p.maturity)),
            strike: AxisMap::fit(points.iter().map(|p| p.k)),
        };
        Ok(MarketFrame { points, scaling, curves: self.curves.clone(), dropped: Vec::new() })
    }

    /// Deterministic alternating split by sorted `(T, K)`: even ranks train, odd ranks test.
    pub fn holdout_split(&self) -> Result<(MarketFrame, MarketFrame)> {
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&self.points[a].quote, &self.points[b].quote);
            pa.maturity.total_cmp(&pb.maturity).then(pa.strike.total_cmp(&pb.strike))
        });
        let mut is_train = vec![false; order.len()];
        for (rank, &i) in order.iter().enumerate() {
            is_train[i] = rank % 2 == 0;
        }
        Ok((self.subset(|i| is_train[i])?, self.subset(|i| !is_train[i])?))
    }
}
