use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::basis::BasisGrid;
use super::kernel::{axis_correlation, KernelParams};
use crate::error::{Error, Result};
use crate::linalg::{robust_cholesky, sparse_rows_times};
use crate::market_data::MarketFrame;
use crate::optim::{nelder_mead, NelderMeadConfig};

/// Below this many observation rows the likelihood surface is too flat to trust.
pub const LOW_DATA_ROWS: usize = 10;

/// GP regression targets: every quote contributes its reduced bid and its reduced ask
/// at the same scaled location.
#[derive(Debug, Clone)]
pub struct Observations {
    pub points: Vec<(f64, f64)>,
    pub y: DVector<f64>,
}

impl Observations {
    pub fn from_frame(frame: &MarketFrame) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::EmptyInput("no observations in the market frame".into()));
        }
        let mut points = Vec::with_capacity(2 * frame.len());
        let mut y = Vec::with_capacity(2 * frame.len());
        for p in &frame.points {
            let s = frame.to_unit_square(p.maturity, p.k);
            for price in [p.reduced_bid, p.reduced_ask] {
                points.push((s.u, s.v));
                y.push(price);
            }
        }
        Ok(Observations { points, y: DVector::from_vec(y) })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Lower factor `L` of the node prior covariance `Γ = L Lᵀ`, built from the two axis factors.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub l: DMatrix<f64>,
    /// Largest ridge needed by either axis factorization, relative to unit correlation.
    pub jitter: f64,
}

impl PriorFactor {
    /// `Γ = σ² (G_T ⊗ G_k)` factors as `σ (L_T ⊗ L_k)`.
    pub fn new(params: &KernelParams, grid: &BasisGrid) -> Result<Self> {
        let ct = robust_cholesky(&axis_correlation(&grid.t_nodes(), params.theta_t))?;
        let ck = robust_cholesky(&axis_correlation(&grid.k_nodes(), params.theta_k))?;
        let l = ct.l().kronecker(&ck.l()) * params.sigma;
        Ok(PriorFactor { l, jitter: ct.jitter.max(ck.jitter) })
    }

    pub fn gamma(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Sparse rows of the design matrix `Φ`, four nonzeros at most per observation.
#[derive(Debug, Clone)]
pub struct Design {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_nodes: usize,
}

impl Design {
    pub fn new(grid: &BasisGrid, points: &[(f64, f64)]) -> Result<Self> {
        let rows = points.iter().map(|&(t, k)| grid.weights(t, k)).collect::<Result<Vec<_>>>()?;
        Ok(Design { rows, n_nodes: grid.len() })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.rows.len(), self.n_nodes);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                phi[(r, c)] = w;
            }
        }
        phi
    }

    /// `Φ M` for a dense `M` with one row per node.
    pub fn times(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        sparse_rows_times(&self.rows, m)
    }

    /// `Φᵀ v`.
    pub fn tr_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_nodes);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                out[c] += w * v[r];
            }
        }
        out
    }

    /// `Φᵀ Φ` as sparse rows.
    pub fn gram(&self) -> Vec<Vec<(usize, f64)>> {
        let mut dense: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); self.n_nodes];
        for row in &self.rows {
            for &(a, wa) in row {
                for &(b, wb) in row {
                    *dense[a].entry(b).or_insert(0.0) += wa * wb;
                }
            }
        }
        dense.into_iter().map(|m| m.into_iter().collect()).collect()
    }
}

/// Quantities shared by every likelihood evaluation on one data set.
pub(crate) struct MleData {
    pub grid: BasisGrid,
    pub design: Design,
    pub phi_gram: Vec<Vec<(usize, f64)>>,
    pub phi_t_y: DVector<f64>,
    pub y: DVector<f64>,
}

impl MleData {
    pub fn new(grid: &BasisGrid, obs: &Observations) -> Result<Self> {
        let design = Design::new(grid, &obs.points)?;
        Ok(MleData {
            grid: *grid,
            phi_gram: design.gram(),
            phi_t_y: design.tr_times(&obs.y),
            y: obs.y.clone(),
            design,
        })
    }

    /// `Bᵀ B = Lᵀ (Φᵀ Φ) L` using the sparsity of `Φᵀ Φ`.
    pub fn btb(&self, l: &DMatrix<f64>) -> DMatrix<f64> {
        l.tr_mul(&sparse_rows_times(&self.phi_gram, l))
    }

    pub fn log_likelihood(&self, params: &KernelParams) -> Result<f64> {
        let prior = PriorFactor::new(params, &self.grid)?;
        let n = self.y.len();
        let m = self.grid.len();
        let s2 = params.noise_sd * params.noise_sd;
        if n <= m {
            let b = self.design.times(&prior.l);
            let mut s = &b * b.transpose();
            for i in 0..n {
                s[(i, i)] += s2;
            }
            let chol = robust_cholesky(&s)?;
            let alpha = chol.solve(&self.y);
            return Ok(-0.5 * self.y.dot(&alpha) - 0.5 * chol.log_det());
        }
        // Woodbury: S⁻¹ = ς⁻²(I - B C⁻¹ Bᵀ), det S = ς^{2(n-M)} det C, C = ς² I + Bᵀ B.
        let mut c = self.btb(&prior.l);
        for i in 0..m {
            c[(i, i)] += s2;
        }
        let chol = robust_cholesky(&c)?;
        let bty = prior.l.tr_mul(&self.phi_t_y);
        let quad = (self.y.norm_squared() - bty.dot(&chol.solve(&bty))) / s2;
        let log_det = (n - m) as f64 * s2.ln() + chol.log_det();
        Ok(-0.5 * quad - 0.5 * log_det)
    }
}

/// `L(λ) = -½ yᵀ S⁻¹ y - ½ log det S` with `S = Φ Γ Φᵀ + ς² I`, without the `2π` term.
/// Shape constraints are ignored here.
pub fn marginal_log_likelihood(params: &KernelParams, frame: &MarketFrame, grid: &BasisGrid) -> Result<f64> {
    params.validate()?;
    let obs = Observations::from_frame(frame)?;
    MleData::new(grid, &obs)?.log_likelihood(params)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MleConfig {
    pub starts: usize,
    pub seed: u64,
    pub nelder_mead: NelderMeadConfig,
    /// Length-scale search box on scaled coordinates.
    pub theta_bounds: (f64, f64),
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            starts: 5,
            seed: 7,
            nelder_mead: NelderMeadConfig { max_evals: 400, f_tol: 1e-7, x_tol: 1e-5, initial_step: 0.5 },
            theta_bounds: (0.02, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub start: [f64; 4],
    pub start_value: f64,
    pub best: [f64; 4],
    pub best_value: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub params: KernelParams,
    pub log_likelihood: f64,
    pub starts: Vec<StartReport>,
    pub warnings: Vec<String>,
}

fn to_params(x: &[f64]) -> KernelParams {
    KernelParams { sigma: x[0].exp(), theta_t: x[1].exp(), theta_k: x[2].exp(), noise_sd: x[3].exp() }
}

/// Multi-start Nelder-Mead on `(ln σ, ln θ_T, ln θ_k, ln ς)`; returns the best local optimum.
pub fn fit_hyperparameters(frame: &MarketFrame, grid: &BasisGrid, cfg: &MleConfig) -> Result<MleFit> {
    let obs = Observations::from_frame(frame)?;
    fit_hyperparameters_obs(&obs, grid, cfg)
}

pub(crate) fn fit_hyperparameters_obs(obs: &Observations, grid: &BasisGrid, cfg: &MleConfig) -> Result<MleFit> {
    let data = MleData::new(grid, obs)?;
    let mut warnings = Vec::new();
    if obs.len() < LOW_DATA_ROWS {
        let msg = format!("only {} observation rows; hyperparameters are weakly identified", obs.len());
        warn!("{msg}");
        warnings.push(msg);
    }
    let scale = (obs.y.norm_squared() / obs.len() as f64).sqrt().max(1e-8);
    let (th_lo, th_hi) = (cfg.theta_bounds.0.ln(), cfg.theta_bounds.1.ln());
    let objective = |x: &[f64]| -> f64 {
        if x[1] < th_lo || x[1] > th_hi || x[2] < th_lo || x[2] > th_hi {
            return f64::INFINITY;
        }
        if (x[0] - scale.ln()).abs() > 12.0 || x[3] > scale.ln() + 5.0 || x[3] < scale.ln() - 20.0 {
            return f64::INFINITY;
        }
        match data.log_likelihood(&to_params(x)) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = Vec::with_capacity(cfg.starts);
    for _ in 0..cfg.starts.max(1) {
        let x0 = [
            scale.ln() + rng.random_range(-1.0..1.0),
            rng.random_range(0.05f64.ln()..1f64.ln()),
            rng.random_range(0.05f64.ln()..1f64.ln()),
            scale.ln() + rng.random_range(1e-3f64.ln()..1e-1f64.ln()),
        ];
        let start_value = objective(&x0);
        let res = nelder_mead(objective, &x0, &cfg.nelder_mead);
        starts.push(StartReport {
            start: x0,
            start_value: -start_value,
            best: [res.x[0], res.x[1], res.x[2], res.x[3]],
            best_value: -res.value,
            evals: res.evals,
            converged: res.converged,
        });
    }
    let best = starts
        .iter()
        .filter(|s| s.best_value.is_finite())
        .max_by(|a, b| a.best_value.total_cmp(&b.best_value))
        .ok_or_else(|| Error::NonConvergence {
            iterations: starts.iter().map(|s| s.evals).sum(),
            detail: format!("likelihood non-finite at every start: {starts:?}"),
        })?;
    let params = to_params(&best.best);
    Ok(MleFit { params, log_likelihood: best.best_value, starts: starts.clone(), warnings })
}
