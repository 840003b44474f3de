use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde_json::{json, Value};
use volsurf::gp::{self, GpConfig, PosteriorConfig};
use volsurf::market_data::MarketFrame;
use volsurf::nn_iv::{self, TrainConfig};
use volsurf::ssvi::{self, SsviConfig};
use volsurf::{Error, Result};

use crate::inputs::{parse_list, write_json, write_text, MarketArgs};
use crate::models::{fit_stats, FittedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrationMethod {
    Gp,
    Nn,
    Ssvi,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Model family.
    #[arg(value_enum)]
    pub method: CalibrationMethod,
    #[command(flatten)]
    pub market: MarketArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every random choice (optimizer starts, initialization, sampling).
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fit on all quotes instead of alternate quotes by sorted (T, K).
    #[arg(long)]
    pub no_holdout: bool,
    /// GP basis nodes along maturity.
    #[arg(long, default_value_t = 25)]
    pub gp_n_t: usize,
    /// GP basis nodes along strike.
    #[arg(long, default_value_t = 100)]
    pub gp_n_k: usize,
    /// GP likelihood optimizer starts.
    #[arg(long, default_value_t = 5)]
    pub gp_starts: usize,
    /// Constrained posterior paths to sample after the MAP fit.
    #[arg(long, default_value_t = 0)]
    pub gp_paths: usize,
    /// Single NN penalty weight triple `l1,l2,l3` instead of the grid search.
    #[arg(long, value_parser = parse_lambda)]
    pub lambda: Option<[f64; 3]>,
    /// NN training epochs per candidate.
    #[arg(long, default_value_t = 3000)]
    pub epochs: usize,
    /// NN hidden layer widths.
    #[arg(long, default_value = "40,40,40")]
    pub hidden: String,
    /// NN learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// SSVI power-law exponent.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Stop after the parametric SSVI fit.
    #[arg(long)]
    pub ssvi_only: bool,
}

fn parse_lambda(s: &str) -> std::result::Result<[f64; 3], String> {
    match parse_list(s)?.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!("expected three weights `l1,l2,l3`, got {s:?}")),
    }
}

pub fn run(args: &CalibrateArgs) -> Result<Value> {
    let frame = args.market.frame()?;
    let (train, test) = if args.no_holdout { (frame.clone(), None) } else {
        let (a, b) = frame.holdout_split()?;
        (a, Some(b))
    };
    let start = Instant::now();
    let (model, model_json, details) = match args.method {
        CalibrationMethod::Gp => calibrate_gp(args, &train)?,
        CalibrationMethod::Nn => calibrate_nn(args, &train)?,
        CalibrationMethod::Ssvi => calibrate_ssvi(args, &train)?,
    };
    let runtime = start.elapsed().as_secs_f64();
    let model_path = args.out.join("model.json");
    write_text(&model_path, &model_json)?;
    let report = json!({
        "method": model.name(),
        "seed": args.seed,
        "quotes": frame.len() + frame.dropped.len(),
        "dropped": frame.dropped,
        "holdout": !args.no_holdout,
        "train": fit_stats(&model, &train),
        "test": test.as_ref().map(|t| fit_stats(&model, t)),
        "details": details,
    });
    let report_path = args.out.join("report.json");
    write_json(&report_path, &report)?;
    log::info!("{} calibration finished in {runtime:.2}s", model.name());
    Ok(json!({
        "model": model_path,
        "report": report_path,
        "train": report["train"],
        "test": report["test"],
        "runtime_seconds": runtime,
    }))
}

type Calibrated = (FittedModel, String, Value);

fn calibrate_gp(args: &CalibrateArgs, train: &MarketFrame) -> Result<Calibrated> {
    let mut cfg = GpConfig { n_t: args.gp_n_t, n_k: args.gp_n_k, ..Default::default() };
    cfg.mle.starts = args.gp_starts;
    cfg.mle.seed = args.seed;
    let model = gp::calibrate(train, &cfg)?;
    let violations = model.violations(1e-8);
    let mut details = json!({
        "kernel": model.params,
        "constraint_violations": violations,
        "min_slack": model.map_min_slack,
        "qp": model.qp,
        "mle": model.mle,
    });
    if args.gp_paths > 0 {
        let samples = gp::sample_posterior(&model, train, args.gp_paths, args.seed, &PosteriorConfig::default())?;
        let constraints = gp::build_constraints(&model.grid);
        let violating = samples.paths.iter().filter(|p| constraints.violations(p, 0.0).total() > 0).count();
        let path_file = args.out.join("posterior_paths.json");
        write_json(&path_file, &samples.paths)?;
        details["posterior"] = json!({
            "paths": samples.paths.len(),
            "violating_paths": violating,
            "bounces": samples.bounces,
            "rejected_trajectories": samples.rejected_trajectories,
            "file": path_file,
        });
    }
    let text = model.to_json()?;
    Ok((FittedModel::Gp(Box::new(model)), text, details))
}

fn calibrate_nn(args: &CalibrateArgs, train: &MarketFrame) -> Result<Calibrated> {
    let hidden: Vec<usize> = args
        .hidden
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("bad hidden layer list {:?}", args.hidden)))?;
    let mut cfg = TrainConfig { hidden, epochs: args.epochs, learning_rate: args.learning_rate, seed: args.seed, ..Default::default() };
    if let Some(l) = args.lambda {
        cfg.lambda_grid = vec![l];
    }
    let fit = nn_iv::train(train, &cfg)?;
    log::info!(
        "selected penalty weights {:?}; grid means cal- {:e}, butt- {:e}",
        fit.report.candidates[fit.report.selected].lambda,
        fit.report.penalty_grid.mean_cal_neg,
        fit.report.penalty_grid.mean_butt_neg
    );
    let training_path = args.out.join("training.json");
    write_text(&training_path, &fit.report.to_json()?)?;
    let details = json!({
        "selected_lambda": fit.report.candidates[fit.report.selected].lambda,
        "penalty_grid": fit.report.penalty_grid,
        "training_report": training_path,
    });
    let text = fit.model.to_json()?;
    Ok((FittedModel::Nn(Box::new(fit.model)), text, details))
}

fn calibrate_ssvi(args: &CalibrateArgs, train: &MarketFrame) -> Result<Calibrated> {
    let cfg = SsviConfig { gamma: args.gamma, ssvi_only: args.ssvi_only, ..Default::default() };
    let model = ssvi::calibrate(train, &cfg)?;
    let details = json!({
        "rho": model.params.rho,
        "eta": model.params.eta,
        "gamma": model.params.gamma,
        "ssvi_rmse": model.report.ssvi_rmse,
        "arbitrage": model.report.arbitrage,
        "violations": model.report.violations,
        "slices": model.report.slices.len(),
        "skipped_maturities": model.report.skipped_maturities,
    });
    let text = model.to_json()?;
    Ok((FittedModel::Ssvi(Box::new(model)), text, details))
}
