use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::{evaluate_surface, BasisGrid};
use super::constraints::{build_constraints, ConstraintSystem, ViolationCounts};
use super::kernel::KernelParams;
use super::mle::{fit_hyperparameters_obs, Design, MleConfig, MleData, MleFit, Observations, PriorFactor};
use crate::constrained_sampling::{
    sample_truncated_chains, solve_qp, HmcConfig, QpConfig, QpDiagnostics, QuadProgram, TruncatedGaussian,
};
use crate::error::{Error, Result};
use crate::linalg::{robust_cholesky, symmetrize};
use crate::local_vol::{EvalGrid, PriceSurface};
use crate::market_data::{CurveSet, MarketFrame, UnitScaling};

pub const GP_MODEL_VERSION: &str = "gpmodel/1";

/// Fitted constrained GP on reduced put prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub version: String,
    pub params: KernelParams,
    pub grid: BasisGrid,
    /// MAP node values `ϱ̂`.
    pub map_nodes: Vec<f64>,
    /// MAP noise `ê = y - Φ ϱ̂`, bid and ask rows interleaved per quote.
    pub map_noise: Vec<f64>,
    pub scaling: UnitScaling,
    pub curves: CurveSet,
    /// Ridge, relative to unit correlation, needed to factor the node prior.
    pub prior_jitter: f64,
    /// Smallest constraint row value at the MAP.
    pub map_min_slack: f64,
    pub qp: QpDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mle: Option<MleFit>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpConfig {
    pub n_t: usize,
    pub n_k: usize,
    pub mle: MleConfig,
    pub qp: QpConfig,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { n_t: 25, n_k: 100, mle: MleConfig::default(), qp: QpConfig::default() }
    }
}

/// Hyperparameter MLE followed by the MAP quadratic program.
pub fn calibrate(frame: &MarketFrame, cfg: &GpConfig) -> Result<GpModel> {
    let grid = BasisGrid::new(cfg.n_t, cfg.n_k)?;
    let obs = Observations::from_frame(frame)?;
    let fit = fit_hyperparameters_obs(&obs, &grid, &cfg.mle)?;
    info!(
        "gp hyperparameters sigma={:.4} theta_t={:.4} theta_k={:.4} noise={:.4} (log L {:.3})",
        fit.params.sigma, fit.params.theta_t, fit.params.theta_k, fit.params.noise_sd, fit.log_likelihood
    );
    let mut model = fit_map(frame, &grid, &fit.params, &cfg.qp)?;
    model.mle = Some(fit);
    Ok(model)
}

/// MAP surface: `min ϱᵀ Γ⁻¹ ϱ + |y - Φ ϱ|² / ς²` over the constraint cone.
///
/// Solved in whitened coordinates `ϱ = L z`, where the prior term is `zᵀ z` and the
/// constraints become `(A L) z ≥ 0`.
pub fn fit_map(frame: &MarketFrame, grid: &BasisGrid, params: &KernelParams, qp_cfg: &QpConfig) -> Result<GpModel> {
    params.validate()?;
    let obs = Observations::from_frame(frame)?;
    let constraints = build_constraints(grid);
    let (nodes, diagnostics, jitter) = map_nodes(&obs, grid, params, &constraints, qp_cfg)?;
    let design = Design::new(grid, &obs.points)?;
    let fitted = design.times(&DMatrix::from_column_slice(nodes.len(), 1, nodes.as_slice()));
    let noise: Vec<f64> = (0..obs.len()).map(|i| obs.y[i] - fitted[(i, 0)]).collect();
    let min_slack = constraints.min_slack(nodes.as_slice());
    if min_slack < -1e-8 {
        warn!("MAP node values violate a constraint row by {min_slack:e}");
    }
    Ok(GpModel {
        version: GP_MODEL_VERSION.into(),
        params: *params,
        grid: *grid,
        map_nodes: nodes.as_slice().to_vec(),
        map_noise: noise,
        scaling: frame.scaling,
        curves: frame.curves.clone(),
        prior_jitter: jitter,
        map_min_slack: min_slack,
        qp: diagnostics,
        mle: None,
    })
}

fn map_nodes(
    obs: &Observations,
    grid: &BasisGrid,
    params: &KernelParams,
    constraints: &ConstraintSystem,
    qp_cfg: &QpConfig,
) -> Result<(DVector<f64>, QpDiagnostics, f64)> {
    let prior = PriorFactor::new(params, grid)?;
    let data = MleData::new(grid, obs)?;
    let s2 = params.noise_sd * params.noise_sd;
    let mut q = data.btb(&prior.l) / s2;
    for i in 0..grid.len() {
        q[(i, i)] += 1.0;
    }
    symmetrize(&mut q);
    let c = -prior.l.tr_mul(&data.phi_t_y) / s2;
    let a = constraints.times(&prior.l);
    let program = QuadProgram::new(q, c, a, constraints.rhs())?;
    let sol = solve_qp(&program, qp_cfg)?;
    Ok((&prior.l * &sol.x, sol.diagnostics, prior.jitter))
}

/// Unconstrained conditional Gaussian of node values given `y = Φ ϱ + e`, computed from
/// the printed formulas `η = ΓΦᵀ(ΦΓΦᵀ + ς²I)⁻¹y` and `K = Γ - ΓΦᵀ(ΦΓΦᵀ + ς²I)⁻¹ΦΓ`.
pub fn conditional_gaussian(
    gamma: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_sd: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let gpt = gamma * phi.transpose();
    let mut s = phi * &gpt;
    for i in 0..s.nrows() {
        s[(i, i)] += noise_sd * noise_sd;
    }
    let chol = robust_cholesky(&s)?;
    let eta = &gpt * chol.solve(y);
    let mut k = gamma - &gpt * chol.factor.solve(&gpt.transpose());
    symmetrize(&mut k);
    Ok((eta, k))
}

/// Posterior mean `η_y` and covariance `K_y` of the node values.
///
/// Evaluated through `C = ς² I + Bᵀ B` with `B = Φ L`: `η_y = L C⁻¹ Bᵀ y` and
/// `K_y = ς² L C⁻¹ Lᵀ`, which equal the conditional-Gaussian formulas above.
pub fn posterior_factors(model: &GpModel, frame: &MarketFrame) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let obs = Observations::from_frame_with(frame, &model.scaling)?;
    posterior_from_obs(&model.params, &model.grid, &obs)
}

pub(crate) fn posterior_from_obs(
    params: &KernelParams,
    grid: &BasisGrid,
    obs: &Observations,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let prior = PriorFactor::new(params, grid)?;
    let data = MleData::new(grid, obs)?;
    let s2 = params.noise_sd * params.noise_sd;
    let mut c = data.btb(&prior.l);
    for i in 0..grid.len() {
        c[(i, i)] += s2;
    }
    symmetrize(&mut c);
    let chol = robust_cholesky(&c)?;
    let bty = prior.l.tr_mul(&data.phi_t_y);
    let eta = &prior.l * chol.solve(&bty);
    let lt = prior.l.transpose();
    let mut k = &prior.l * chol.factor.solve(&lt) * s2;
    symmetrize(&mut k);
    Ok((eta, k))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PosteriorConfig {
    pub chains: usize,
    pub hmc: HmcConfig,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig { chains: 4, hmc: HmcConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    /// One node vector per path.
    pub paths: Vec<Vec<f64>>,
    /// Interior shift applied to the MAP before starting the chains.
    pub nudge: f64,
    pub jitter: f64,
    pub bounces: usize,
    pub rejected_trajectories: usize,
}

/// Constrained posterior paths by exact HMC, started from the MAP.
///
/// The MAP usually sits on active constraints, so it is shifted along a strictly feasible
/// direction by `1e-10` (relative to the node scale), escalating if the sampler still
/// rejects the start.
pub fn sample_posterior(
    model: &GpModel,
    frame: &MarketFrame,
    n_paths: usize,
    seed: u64,
    cfg: &PosteriorConfig,
) -> Result<PosteriorSamples> {
    if n_paths == 0 {
        return Ok(PosteriorSamples { paths: vec![], nudge: 0.0, jitter: 0.0, bounces: 0, rejected_trajectories: 0 });
    }
    let (eta, k) = posterior_factors(model, frame)?;
    let constraints = build_constraints(&model.grid);
    let tg = TruncatedGaussian::new(eta, k, constraints.to_dense(), constraints.rhs())?;
    let map = DVector::from_column_slice(&model.map_nodes);
    let dir = DVector::from_vec(ConstraintSystem::interior_direction(&model.grid));
    let scale = map.amax().max(1.0);
    let chains = cfg.chains.clamp(1, n_paths);
    let per_chain = n_paths.div_ceil(chains);
    let mut eps = 1e-10;
    loop {
        let init = &map + &dir * (eps * scale);
        match sample_truncated_chains(&tg, &init, chains, per_chain, seed, &cfg.hmc) {
            Ok(out) => {
                let paths: Vec<Vec<f64>> =
                    (0..n_paths).map(|r| out.samples.row(r).iter().copied().collect()).collect();
                for (i, p) in paths.iter().enumerate() {
                    let slack = constraints.min_slack(p);
                    if slack < 0.0 {
                        return Err(Error::Arbitrage(format!("posterior path {i} violates a constraint by {slack:e}")));
                    }
                }
                return Ok(PosteriorSamples {
                    paths,
                    nudge: eps * scale,
                    jitter: out.jitter,
                    bounces: out.bounces,
                    rejected_trajectories: out.rejected_trajectories,
                });
            }
            Err(Error::Precondition(msg)) if eps < 1e-4 => {
                log::debug!("sampler start rejected at nudge {eps:e}: {msg}");
                eps *= 100.0;
            }
            Err(e) => return Err(e),
        }
    }
}

impl Observations {
    /// Observations scaled with an existing model's maps rather than the frame's own.
    pub fn from_frame_with(frame: &MarketFrame, scaling: &UnitScaling) -> Result<Self> {
        let mut obs = Observations::from_frame(frame)?;
        for (p, pt) in frame.points.iter().flat_map(|p| [p, p]).zip(obs.points.iter_mut()) {
            let s = scaling.to_unit(p.maturity, p.k);
            *pt = (s.u, s.v);
        }
        Ok(obs)
    }
}

impl GpModel {
    /// MAP reduced price at `(T, k)`; errors outside the calibrated box.
    pub fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
        self.reduced_price_with(&self.map_nodes, t, k)
    }

    /// Reduced price of an arbitrary node vector on this model's grid, e.g. a posterior path.
    pub fn reduced_price_with(&self, nodes: &[f64], t: f64, k: f64) -> Result<f64> {
        let s = self.scaling.to_unit(t, k);
        if s.extrapolated {
            return Err(Error::Domain { t, k, detail: "outside the calibrated GP domain".into() });
        }
        evaluate_surface(nodes, &self.grid, s.u, s.v)
    }

    /// `((T_min, T_max), (k_min, k_max))` of the calibrated box.
    pub fn domain(&self) -> ((f64, f64), (f64, f64)) {
        let m = self.scaling.maturity;
        let k = self.scaling.strike;
        ((m.lower, m.upper), (k.lower, k.upper))
    }

    /// Evaluation grid on every `stride`-th node, restricted to the central `fraction` of
    /// each axis.
    pub fn node_grid(&self, stride: usize, fraction: f64) -> Result<EvalGrid> {
        if stride == 0 || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput("stride must be positive and fraction in (0, 1]".into()));
        }
        let lo = 0.5 * (1.0 - fraction) - 1e-12;
        let hi = 1.0 - lo;
        let pick = |nodes: Vec<f64>, map: &crate::market_data::AxisMap| -> Vec<f64> {
            nodes.into_iter().step_by(stride).filter(|u| *u >= lo && *u <= hi).map(|u| map.inverse(u)).collect()
        };
        EvalGrid::new(pick(self.grid.t_nodes(), &self.scaling.maturity), pick(self.grid.k_nodes(), &self.scaling.strike))
    }

    pub fn violations(&self, tol: f64) -> ViolationCounts {
        build_constraints(&self.grid).violations(&self.map_nodes, tol)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("").to_string();
        if found != GP_MODEL_VERSION {
            return Err(Error::Version { found, expected: GP_MODEL_VERSION.into() });
        }
        let model: GpModel = serde_json::from_value(v)?;
        if model.map_nodes.len() != model.grid.len() {
            return Err(Error::Schema("node vector does not match the grid".into()));
        }
        Ok(model)
    }
}

impl PriceSurface for GpModel {
    fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
        GpModel::reduced_price(self, t, k)
    }

    fn domain(&self) -> ((f64, f64), (f64, f64)) {
        GpModel::domain(self)
    }

    fn node_spacing(&self) -> Option<(f64, f64)> {
        Some((self.grid.h_t() * self.scaling.maturity.width(), self.grid.h_k() * self.scaling.strike.width()))
    }
}

/// A posterior path viewed as a price surface on its model's grid.
pub struct PathSurface<'a> {
    pub model: &'a GpModel,
    pub nodes: &'a [f64],
}

impl PriceSurface for PathSurface<'_> {
    fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
        self.model.reduced_price_with(self.nodes, t, k)
    }

    fn domain(&self) -> ((f64, f64), (f64, f64)) {
        self.model.domain()
    }

    fn node_spacing(&self) -> Option<(f64, f64)> {
        PriceSurface::node_spacing(self.model)
    }
}
