use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use volsurf::backtest::{generate_synthetic, Generator, SyntheticSpec};
use volsurf::market_data::{write_quotes, Curve, CurveSet};
use volsurf::{Error, Result};

use crate::inputs::{create_file, parse_axis, read_text, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Flat,
    Ssvi,
    Cev,
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    /// Output directory for quotes.csv, rates.csv, divs.csv and spec.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with a full specification; overrides the generator flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "flat")]
    pub kind: GeneratorKind,
    /// Flat volatility.
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = -0.3)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.2)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// ATM total variance per unit maturity.
    #[arg(long, default_value_t = 0.04)]
    pub atm_slope: f64,
    /// CEV volatility scale.
    #[arg(long, default_value_t = 2.0)]
    pub sigma0: f64,
    /// CEV elasticity.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Maturities as `a:b:n` or a list.
    #[arg(long, default_value = "0.1:2:20")]
    pub maturities: String,
    /// Strikes as `a:b:n` or a list.
    #[arg(long, default_value = "70:130:40")]
    pub strikes: String,
    /// Relative bid-ask half-width.
    #[arg(long, default_value_t = 0.005)]
    pub spread: f64,
    /// Relative noise on the mid.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 100.0)]
    pub spot: f64,
    /// Flat continuously compounded rate.
    #[arg(long, default_value_t = 0.0)]
    pub rate: f64,
    /// Flat continuous dividend yield.
    #[arg(long, default_value_t = 0.0)]
    pub div: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Everything needed to regenerate a quote set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticFile {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    pub spot: f64,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub div: f64,
}

impl SyntheticArgs {
    fn to_file(&self) -> Result<SyntheticFile> {
        if let Some(path) = &self.spec {
            return Ok(serde_json::from_str(&read_text(path)?)?);
        }
        let generator = match self.kind {
            GeneratorKind::Flat => Generator::Flat { sigma: self.sigma },
            GeneratorKind::Ssvi => Generator::Ssvi { rho: self.rho, eta: self.eta, gamma: self.gamma, atm_slope: self.atm_slope },
            GeneratorKind::Cev => Generator::Cev { sigma0: self.sigma0, beta: self.beta },
        };
        Ok(SyntheticFile {
            spec: SyntheticSpec {
                generator,
                maturities: parse_axis(&self.maturities).map_err(Error::InvalidInput)?,
                strikes: parse_axis(&self.strikes).map_err(Error::InvalidInput)?,
                spread: self.spread,
                seed: self.seed,
                noise: self.noise,
            },
            spot: self.spot,
            rate: self.rate,
            div: self.div,
        })
    }
}

pub fn run(args: &SyntheticArgs) -> Result<Value> {
    let file = args.to_file()?;
    if !(file.spot > 0.0) {
        return Err(Error::InvalidInput("spot must be positive".into()));
    }
    let curves = CurveSet::flat(file.spot, file.rate, file.div);
    let quotes = generate_synthetic(&file.spec, &curves)?;
    let paths = ["quotes.csv", "rates.csv", "divs.csv", "spec.json"].map(|f| args.out.join(f));
    write_quotes(create_file(&paths[0])?, &quotes)?;
    Curve::flat(file.rate).write(create_file(&paths[1])?)?;
    Curve::flat(file.div).write(create_file(&paths[2])?)?;
    write_json(&paths[3], &file)?;
    log::info!("wrote {} synthetic quotes", quotes.len());
    Ok(json!({
        "quotes": paths[0],
        "rates": paths[1],
        "divs": paths[2],
        "spec": paths[3],
        "count": quotes.len(),
        "spot": file.spot,
    }))
}
