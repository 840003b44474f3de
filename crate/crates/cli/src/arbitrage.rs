use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};
use volsurf::local_vol::{dupire_terms, EvalGrid, ThetaSurface};
use volsurf::ssvi::check_no_arbitrage;
use volsurf::{Error, Result};

use crate::inputs::write_json;
use crate::localvol::{extract, load_ssvi_override, GridArgs};
use crate::models::FittedModel;

#[derive(Debug, Clone, Args)]
pub struct ArbitrageArgs {
    /// Calibrated model file.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Values below `-tol` count as violations.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// SSVI only: check these parametric SSVI parameters (JSON) instead of the slice surface.
    #[arg(long)]
    pub ssvi_params: Option<PathBuf>,
    /// Optional output directory for arbitrage.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Calendar and butterfly sign checks over a grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CellViolations {
    pub cells: usize,
    pub calendar: usize,
    pub butterfly: usize,
    /// Cells where the surface could not be evaluated.
    pub unevaluated: usize,
    pub calendar_pct: f64,
    pub butterfly_pct: f64,
    pub worst_calendar: f64,
    pub worst_butterfly: f64,
}

pub fn cell_violations<S: ThetaSurface + ?Sized>(surface: &S, grid: &EvalGrid, tol: f64) -> CellViolations {
    let mut v = CellViolations { worst_calendar: 0.0, worst_butterfly: 0.0, ..Default::default() };
    let spot = surface.spot();
    for &t in &grid.t_axis {
        for &k in &grid.k_axis {
            v.cells += 1;
            let kappa = (k / spot).ln();
            let Ok((cal, butt)) = surface.theta_terms(t, kappa).and_then(|terms| dupire_terms(&terms, kappa)) else {
                v.unevaluated += 1;
                continue;
            };
            if cal < -tol {
                v.calendar += 1;
            }
            if butt < -tol {
                v.butterfly += 1;
            }
            v.worst_calendar = v.worst_calendar.min(cal);
            v.worst_butterfly = v.worst_butterfly.min(butt);
        }
    }
    let n = v.cells.max(1) as f64;
    v.calendar_pct = 100.0 * v.calendar as f64 / n;
    v.butterfly_pct = 100.0 * v.butterfly as f64 / n;
    v
}

pub fn run(args: &ArbitrageArgs) -> Result<Value> {
    if !(args.tol >= 0.0) {
        return Err(Error::InvalidInput("tolerance must be nonnegative".into()));
    }
    let model = FittedModel::load(&args.model)?;
    let ssvi = load_ssvi_override(args.ssvi_params.as_ref(), &model)?;
    let grid = args.grid.grid_for(&model, ssvi.as_ref())?;
    let (_, mask) = extract(&model, &grid, 0.0, ssvi.as_ref())?;
    let out = match &model {
        FittedModel::Gp(m) => {
            let v = m.violations(args.tol);
            json!({
                "model": "gp",
                "constraint_violations": v,
                "violations": v.total(),
                "min_slack": m.map_min_slack,
                "localvol_mask": mask,
            })
        }
        FittedModel::Nn(m) => {
            let cells = cell_violations(m.as_ref(), &grid, args.tol);
            json!({
                "model": "nn",
                "cells": cells,
                "violations": cells.calendar + cells.butterfly,
                "localvol_mask": mask,
            })
        }
        FittedModel::Ssvi(m) => {
            let (cells, parametric) = match &ssvi {
                Some(s) => (cell_violations(s, &grid, args.tol), check_no_arbitrage(&s.params)),
                None => (cell_violations(&m.surface, &grid, args.tol), check_no_arbitrage(&m.params)),
            };
            let kappas: Vec<f64> = grid.k_axis.iter().map(|k| (k / m.surface.spot).ln()).collect();
            let slices = m.surface.violations(&kappas, args.tol);
            json!({
                "model": "ssvi",
                "cells": cells,
                "violations": cells.calendar + cells.butterfly,
                "parametric": parametric,
                "parametric_passed": parametric.passed(),
                "slices": slices,
                "localvol_mask": mask,
            })
        }
    };
    if let Some(dir) = &args.out {
        write_json(&dir.join("arbitrage.json"), &out)?;
    }
    Ok(out)
}
