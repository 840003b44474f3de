use std::path::PathBuf;

use clap::Args;
use serde_json::{json, Value};
use volsurf::local_vol::{cap_and_report, dupire_fd, dupire_iv, EvalGrid, FdConfig, LocalVolGrid, MaskCounts};
use volsurf::ssvi::{SsviParams, SsviSurface};
use volsurf::{Error, Result};

use crate::inputs::{create_file, parse_pair, read_text, write_json, write_text};
use crate::models::FittedModel;

/// Evaluation grid in maturity and reduced strike.
#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Maturity range `a,b`; defaults to the model's calibrated range.
    #[arg(long, value_parser = parse_pair)]
    pub t_range: Option<(f64, f64)>,
    /// Reduced-strike range `a,b`; defaults to the model's calibrated range.
    #[arg(long, value_parser = parse_pair)]
    pub k_range: Option<(f64, f64)>,
    /// Maturity nodes (default 50, or every `stride`-th basis node for GP models).
    #[arg(long)]
    pub n_t: Option<usize>,
    /// Strike nodes (default 50, or every `stride`-th basis node for GP models).
    #[arg(long)]
    pub n_k: Option<usize>,
    /// GP only: basis-node stride of the default grid.
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
}

const DEFAULT_NODES: usize = 50;
/// Relative widening of the data log-moneyness range for surfaces defined beyond it.
const KAPPA_MARGIN: f64 = 0.1;

fn widen(kappa: (f64, f64)) -> (f64, f64) {
    let m = KAPPA_MARGIN * (kappa.1 - kappa.0);
    (kappa.0 - m, kappa.1 + m)
}

impl GridArgs {
    fn is_default(&self) -> bool {
        self.t_range.is_none() && self.k_range.is_none() && self.n_t.is_none() && self.n_k.is_none()
    }

    fn uniform(&self, t: (f64, f64), k: (f64, f64)) -> Result<EvalGrid> {
        EvalGrid::uniform(
            self.t_range.unwrap_or(t),
            self.n_t.unwrap_or(DEFAULT_NODES),
            self.k_range.unwrap_or(k),
            self.n_k.unwrap_or(DEFAULT_NODES),
        )
    }

    /// Grid for a model, defaulting to its calibrated `(T, k)` box.
    pub fn grid_for(&self, model: &FittedModel, ssvi_override: Option<&SsviSurface>) -> Result<EvalGrid> {
        match model {
            FittedModel::Gp(m) if self.is_default() => m.node_grid(self.stride, 1.0),
            FittedModel::Gp(m) => {
                let (t, k) = m.domain();
                self.uniform(t, k)
            }
            FittedModel::Nn(m) => {
                let Some((t, kappa)) = m.data_domain else {
                    if let (Some(t), Some(k)) = (self.t_range, self.k_range) {
                        return self.uniform(t, k);
                    }
                    return Err(Error::InvalidInput("model has no stored data range; pass --t-range and --k-range".into()));
                };
                let kappa = widen(kappa);
                self.uniform(t, (m.spot * kappa.0.exp(), m.spot * kappa.1.exp()))
            }
            FittedModel::Ssvi(m) => {
                let t = match ssvi_override {
                    Some(s) => s.params.theta_curve.range(),
                    None => m.surface.maturity_range(),
                };
                if m.report.kappa_range.0 >= m.report.kappa_range.1 && self.k_range.is_none() {
                    return Err(Error::InvalidInput("model has no stored strike range; pass --k-range".into()));
                }
                let kappa = widen(m.report.kappa_range);
                let spot = m.surface.spot;
                self.uniform(t, (spot * kappa.0.exp(), spot * kappa.1.exp()))
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LocalvolArgs {
    /// Calibrated model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Exported values are capped here.
    #[arg(long, default_value_t = 2.0)]
    pub cap: f64,
    /// Cells whose denominator is at or below this are masked.
    #[arg(long, default_value_t = 1e-8)]
    pub floor: f64,
    /// SSVI only: use these parametric SSVI parameters (JSON) instead of the slice surface.
    #[arg(long)]
    pub ssvi_params: Option<PathBuf>,
}

pub fn load_ssvi_override(path: Option<&PathBuf>, model: &FittedModel) -> Result<Option<SsviSurface>> {
    let Some(path) = path else { return Ok(None) };
    let FittedModel::Ssvi(m) = model else {
        return Err(Error::InvalidInput("--ssvi-params applies to SSVI models only".into()));
    };
    let params: SsviParams = serde_json::from_str(&read_text(path)?)?;
    params.theta_curve.validate()?;
    Ok(Some(SsviSurface { params, spot: m.surface.spot }))
}

/// Local volatility of a model on a grid, with mask counts.
pub fn extract(
    model: &FittedModel,
    grid: &EvalGrid,
    floor: f64,
    ssvi_override: Option<&SsviSurface>,
) -> Result<(LocalVolGrid, MaskCounts)> {
    match (model, ssvi_override) {
        (FittedModel::Gp(m), _) => dupire_fd(m.as_ref(), grid, &FdConfig { denom_floor: floor, ..Default::default() }),
        (FittedModel::Nn(m), _) => dupire_iv(m.as_ref(), grid, floor),
        (FittedModel::Ssvi(_), Some(s)) => dupire_iv(s, grid, floor),
        (FittedModel::Ssvi(m), None) => dupire_iv(&m.surface, grid, floor),
    }
}

pub fn run(args: &LocalvolArgs) -> Result<Value> {
    if !(args.cap > 0.0) || !(args.floor >= 0.0) {
        return Err(Error::InvalidInput("cap must be positive and floor nonnegative".into()));
    }
    let model = FittedModel::load(&args.model)?;
    let ssvi = load_ssvi_override(args.ssvi_params.as_ref(), &model)?;
    let grid = args.grid.grid_for(&model, ssvi.as_ref())?;
    let (lv, mask) = extract(&model, &grid, args.floor, ssvi.as_ref())?;
    let (capped, summary) = cap_and_report(&lv, args.cap);
    if summary.fully_masked {
        log::warn!("every local volatility cell is masked");
    } else if summary.masked_fraction > 0.0 {
        log::warn!("{:.1}% of local volatility cells are masked", 100.0 * summary.masked_fraction);
    }
    let json_path = args.out.join("localvol.json");
    let csv_path = args.out.join("localvol.csv");
    write_text(&json_path, &capped.to_json()?)?;
    capped.write_csv(create_file(&csv_path)?)?;
    let out = json!({
        "model": model.name(),
        "grid": { "n_t": grid.t_axis.len(), "n_k": grid.k_axis.len() },
        "mask": mask,
        "summary": summary,
        "localvol": json_path,
        "csv": csv_path,
    });
    write_json(&args.out.join("summary.json"), &out)?;
    Ok(out)
}
