use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use volsurf::local_vol::linspace;
use volsurf::market_data::{build_frame, load_quotes, Curve, CurveSet, MarketFrame, PreprocessConfig, QuoteSchema};
use volsurf::{Error, Result};

/// Quote table, curves and preprocessing filters.
#[derive(Debug, Clone, Args)]
pub struct MarketArgs {
    /// Quote CSV with columns maturity,strike,bid,ask[,iv].
    #[arg(long)]
    pub quotes: PathBuf,
    /// Rate curve CSV with columns tenor,value.
    #[arg(long)]
    pub rates: PathBuf,
    /// Dividend-yield curve CSV with columns tenor,value.
    #[arg(long)]
    pub divs: PathBuf,
    /// Spot price of the underlying.
    #[arg(long)]
    pub spot: f64,
    /// Quotes with shorter maturities are dropped.
    #[arg(long, default_value_t = 0.055)]
    pub min_maturity: f64,
    /// Maximum relative gap between listed and mid-implied volatility.
    #[arg(long, default_value_t = 0.05)]
    pub iv_gap_tol: f64,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("{what} file {} does not exist", path.display())));
    }
    Ok(())
}

impl MarketArgs {
    pub fn curves(&self) -> Result<CurveSet> {
        require(&self.rates, "rate curve")?;
        require(&self.divs, "dividend curve")?;
        CurveSet::new(self.spot, Curve::load(&self.rates)?, Curve::load(&self.divs)?)
    }

    pub fn frame(&self) -> Result<MarketFrame> {
        require(&self.quotes, "quote")?;
        let curves = self.curves()?;
        let load = load_quotes(&self.quotes, &QuoteSchema::default())?;
        let filters = PreprocessConfig { min_maturity: self.min_maturity, iv_gap_tol: self.iv_gap_tol };
        let frame = build_frame(&load.records, &curves, &filters)?;
        log::info!(
            "{} quotes read, {} rejected at parse, {} dropped in preprocessing, {} retained",
            load.records.len() + load.rejected.len(),
            load.rejected.len(),
            frame.dropped.len(),
            frame.len()
        );
        Ok(frame)
    }
}

/// `a,b` pair.
pub fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let v = parse_list(s)?;
    match v.as_slice() {
        [a, b] if a < b => Ok((*a, *b)),
        _ => Err(format!("expected two increasing numbers `a,b`, got {s:?}")),
    }
}

/// Comma-separated numbers.
pub fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| format!("not a number: {x:?}"))).collect()
}

/// `a:b:n` for `n` evenly spaced values, or a comma-separated list.
pub fn parse_axis(s: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, n] => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad start in {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad end in {s:?}"))?;
            let n: usize = n.trim().parse().map_err(|_| format!("bad count in {s:?}"))?;
            if n < 1 || (n > 1 && !(b > a)) {
                return Err(format!("need a < b and n >= 1 in {s:?}"));
            }
            Ok(if n == 1 { vec![a] } else { linspace(a, b, n) })
        }
        [_] => parse_list(s),
        _ => Err(format!("expected `a:b:n` or a comma-separated list, got {s:?}")),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("file {} does not exist", path.display())));
    }
    Ok(std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_syntax() {
        assert_eq!(parse_axis("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_axis("0.5, 2").unwrap(), vec![0.5, 2.0]);
        assert!(parse_axis("1:0:3").is_err());
        assert!(parse_axis("a:b").is_err());
        assert_eq!(parse_pair("1,2").unwrap(), (1.0, 2.0));
        assert!(parse_pair("2,1").is_err());
    }
}
