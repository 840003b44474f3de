use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde_json::{json, Value};
use volsurf::backtest::{price_mc, price_options_cn, report, CnConfig, McConfig, Method};
use volsurf::local_vol::LocalVolGrid;
use volsurf::{Error, Result};

use crate::inputs::{create_file, parse_pair, read_text, write_text, MarketArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PricingMethod {
    Mc,
    Cn,
}

#[derive(Debug, Clone, Args)]
pub struct BacktestArgs {
    /// Pricing method.
    #[arg(value_enum)]
    pub method: PricingMethod,
    /// Local volatility grid written by `localvol`.
    #[arg(long)]
    pub localvol: PathBuf,
    #[command(flatten)]
    pub market: MarketArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    /// Monte Carlo time steps up to the last maturity.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Antithetic Monte Carlo pairs.
    #[arg(long)]
    pub antithetic: bool,
    /// Monte Carlo paths per parallel work unit; it changes results only through summation rounding.
    #[arg(long, default_value_t = 2048)]
    pub chunk: usize,
    /// Crank-Nicolson time steps.
    #[arg(long, default_value_t = 100)]
    pub cn_n_t: usize,
    /// Crank-Nicolson strike nodes.
    #[arg(long, default_value_t = 200)]
    pub cn_n_k: usize,
    /// Crank-Nicolson reduced-strike domain `a,b`; defaults to half the lowest and twice the
    /// highest local volatility strike, with flat extrapolation of the grid.
    #[arg(long, value_parser = parse_pair)]
    pub cn_k_range: Option<(f64, f64)>,
}

pub fn run(args: &BacktestArgs) -> Result<Value> {
    let lv = LocalVolGrid::from_json(&read_text(&args.localvol)?)?;
    let lv = if lv.valid.iter().all(|v| *v) {
        lv
    } else {
        let (filled, fraction) = lv.fill_masked()?;
        log::warn!("{:.1}% of local volatility cells were masked and filled from the nearest valid cell", 100.0 * fraction);
        filled
    };
    let frame = args.market.frame()?;
    let curves = &frame.curves;
    let covered: Vec<bool> =
        frame.points.iter().map(|p| lv.covers(p.maturity, curves.reduced_strike(p.maturity, p.quote.strike))).collect();
    let outside = covered.iter().filter(|c| !**c).count();
    if outside == frame.len() {
        return Err(Error::InvalidInput("no quote lies inside the local volatility grid".into()));
    }
    let frame = if outside > 0 {
        log::warn!("{outside} quotes lie outside the local volatility grid and are skipped");
        frame.subset(|i| covered[i])?
    } else {
        frame
    };
    let options: Vec<(f64, f64)> = frame.points.iter().map(|p| (p.maturity, p.quote.strike)).collect();
    let start = Instant::now();
    let rep = match args.method {
        PricingMethod::Mc => {
            let cfg = McConfig {
                n_paths: args.paths,
                n_steps: args.steps,
                seed: args.seed,
                antithetic: args.antithetic,
                chunk: args.chunk,
            };
            let out = price_mc(&lv, &frame.curves, &options, &cfg)?;
            let prices: Vec<f64> = out.iter().map(|p| p.price).collect();
            let errors: Vec<f64> = out.iter().map(|p| p.std_error).collect();
            report(Method::Mc, &prices, Some(&errors), &frame, start.elapsed().as_secs_f64())?
        }
        PricingMethod::Cn => {
            let k_range = args.cn_k_range.unwrap_or((0.5 * lv.k_axis[0], 2.0 * lv.k_axis[lv.k_axis.len() - 1]));
            let cfg = CnConfig { n_t: args.cn_n_t, n_k: args.cn_n_k, k_range: Some(k_range), ..Default::default() };
            let (prices, surface) = price_options_cn(&lv, &frame.curves, &options, &cfg)?;
            if surface.clamped > 0 {
                log::warn!("{} negative PDE values clamped to zero, most negative {:e}", surface.clamped, surface.most_negative);
            }
            report(Method::Cn, &prices, None, &frame, start.elapsed().as_secs_f64())?
        }
    };
    log::info!("backtest finished in {:.2}s", rep.runtime_seconds);
    let json_path = args.out.join("backtest.json");
    let csv_path = args.out.join("backtest.csv");
    write_text(&json_path, &rep.to_json()?)?;
    rep.write_csv(create_file(&csv_path)?)?;
    Ok(json!({
        "method": rep.method,
        "options": rep.rows.len(),
        "skipped": outside,
        "price_rmse": rep.price_rmse,
        "iv_rmse": rep.iv_rmse,
        "iv_failures": rep.iv_failures,
        "runtime_seconds": rep.runtime_seconds,
        "report": json_path,
        "csv": csv_path,
    }))
}
