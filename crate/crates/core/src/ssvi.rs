//! SSVI and natural-SVI implied total variance surfaces, their static no-arbitrage
//! conditions, a two-step calibration, and maturity interpolation of slices.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_vol::{dupire_terms, linspace, ThetaSurface, ThetaTerms};
use crate::market_data::MarketFrame;
use crate::optim::{nelder_mead, NelderMeadConfig};

pub const SSVI_MODEL_VERSION: &str = "ssvi/1";

/// `|ρ|` is kept below this in every fit.
const RHO_MAX: f64 = 0.999;

/// Natural SVI slice `Θ(κ) = Δ + ω/2 (1 + ρζ(κ-μ) + √((ζ(κ-μ)+ρ)² + 1-ρ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalSviParams {
    pub delta: f64,
    pub mu: f64,
    pub rho: f64,
    pub omega: f64,
    pub zeta: f64,
}

impl NaturalSviParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.delta, self.mu, self.rho, self.omega, self.zeta].iter().all(|v| v.is_finite());
        if finite && self.rho.abs() < 1.0 && self.omega >= 0.0 && self.zeta > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid natural SVI parameters {self:?}")))
        }
    }

    /// Smallest total variance over all `κ`.
    pub fn min_variance(&self) -> f64 {
        self.delta + self.omega * (1.0 - self.rho * self.rho)
    }

    fn to_vec(self) -> [f64; 5] {
        [self.delta, self.mu, self.rho, self.omega, self.zeta]
    }

    fn from_vec(v: [f64; 5]) -> Self {
        NaturalSviParams { delta: v[0], mu: v[1], rho: v[2], omega: v[3], zeta: v[4] }
    }

    /// The SSVI slice with ATM total variance `theta` and curvature `phi`.
    pub fn ssvi_slice(rho: f64, theta: f64, phi: f64) -> Self {
        NaturalSviParams { delta: 0.0, mu: 0.0, rho, omega: theta, zeta: phi }
    }
}

pub fn svi_total_variance(p: &NaturalSviParams, kappa: f64) -> f64 {
    let x = p.zeta * (kappa - p.mu);
    let r = ((x + p.rho).powi(2) + 1.0 - p.rho * p.rho).sqrt();
    p.delta + 0.5 * p.omega * (1.0 + p.rho * x + r)
}

/// `(Θ, ∂_κΘ, ∂²_κΘ)` of a natural SVI slice.
pub fn svi_derivatives(p: &NaturalSviParams, kappa: f64) -> (f64, f64, f64) {
    let x = p.zeta * (kappa - p.mu);
    let r = ((x + p.rho).powi(2) + 1.0 - p.rho * p.rho).sqrt();
    let theta = p.delta + 0.5 * p.omega * (1.0 + p.rho * x + r);
    let d_k = 0.5 * p.omega * p.zeta * (p.rho + (x + p.rho) / r);
    let d_kk = 0.5 * p.omega * p.zeta * p.zeta * (1.0 - p.rho * p.rho) / (r * r * r);
    (theta, d_k, d_kk)
}

/// Gradient of `Θ(κ)` with respect to `(Δ, μ, ρ, ω, ζ)`.
fn svi_param_gradient(p: &NaturalSviParams, kappa: f64) -> [f64; 5] {
    let u = kappa - p.mu;
    let x = p.zeta * u;
    let r = ((x + p.rho).powi(2) + 1.0 - p.rho * p.rho).sqrt();
    let half = 0.5 * p.omega;
    [
        1.0,
        -half * p.zeta * (p.rho + (x + p.rho) / r),
        half * (x + x / r),
        0.5 * (1.0 + p.rho * x + r),
        half * u * (p.rho + (x + p.rho) / r),
    ]
}

/// `φ(ϑ) = η / (ϑ^γ (1+ϑ)^(1-γ))`.
pub fn power_law_phi(theta: f64, eta: f64, gamma: f64) -> f64 {
    eta / (theta.powf(gamma) * (1.0 + theta).powf(1.0 - gamma))
}

fn power_law_phi_derivative(theta: f64, eta: f64, gamma: f64) -> f64 {
    -power_law_phi(theta, eta, gamma) * (gamma / theta + (1.0 - gamma) / (1.0 + theta))
}

/// ATM total variance knots, linearly interpolated between the first and last maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmCurve {
    pub maturities: Vec<f64>,
    pub thetas: Vec<f64>,
}

impl AtmCurve {
    pub fn new(maturities: Vec<f64>, thetas: Vec<f64>) -> Result<Self> {
        let c = AtmCurve { maturities, thetas };
        c.validate()?;
        Ok(c)
    }

    /// Knots of `Θ_T = slope · T`.
    pub fn linear(slope: f64, maturities: Vec<f64>) -> Result<Self> {
        let thetas = maturities.iter().map(|t| slope * t).collect();
        AtmCurve::new(maturities, thetas)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maturities.is_empty() || self.maturities.len() != self.thetas.len() {
            return Err(Error::InvalidInput("ATM curve needs matching, non-empty knots".into()));
        }
        if self.maturities.windows(2).any(|w| !(w[1] > w[0])) || !(self.maturities[0] > 0.0) {
            return Err(Error::InvalidInput("ATM curve maturities must be positive and increasing".into()));
        }
        if self.thetas.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("ATM total variances must be positive".into()));
        }
        Ok(())
    }

    pub fn range(&self) -> (f64, f64) {
        (self.maturities[0], *self.maturities.last().unwrap())
    }

    /// Index of the segment holding `t`, with `t` at a knot assigned to the segment on its right.
    fn segment(&self, t: f64) -> Result<usize> {
        let (lo, hi) = self.range();
        let eps = 1e-12 * hi.max(1.0);
        if t < lo - eps || t > hi + eps || !t.is_finite() {
            return Err(Error::Domain { t, k: f64::NAN, detail: format!("maturity outside [{lo}, {hi}]") });
        }
        let n = self.maturities.len();
        if n == 1 {
            return Ok(0);
        }
        Ok((self.maturities.partition_point(|&m| m <= t).max(1) - 1).min(n - 2))
    }

    /// `(Θ(T), Θ'(T))`.
    pub fn value(&self, t: f64) -> Result<(f64, f64)> {
        let i = self.segment(t)?;
        if self.maturities.len() == 1 {
            return Ok((self.thetas[0], 0.0));
        }
        let (t0, t1) = (self.maturities[i], self.maturities[i + 1]);
        let slope = (self.thetas[i + 1] - self.thetas[i]) / (t1 - t0);
        Ok((self.thetas[i] + slope * (t - t0), slope))
    }
}

/// Power-law SSVI parameters with an ATM total variance curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsviParams {
    pub rho: f64,
    pub eta: f64,
    pub gamma: f64,
    pub theta_curve: AtmCurve,
}

impl SsviParams {
    pub fn slice(&self, theta: f64) -> NaturalSviParams {
        NaturalSviParams::ssvi_slice(self.rho, theta, power_law_phi(theta, self.eta, self.gamma))
    }

    pub fn total_variance(&self, t: f64, kappa: f64) -> Result<f64> {
        let (theta, _) = self.theta_curve.value(t)?;
        Ok(svi_total_variance(&self.slice(theta), kappa))
    }

    pub fn implied_vol(&self, t: f64, kappa: f64) -> Result<f64> {
        Ok((self.total_variance(t, kappa)? / t).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageReport {
    pub butterfly_ok: bool,
    /// `max(0, η(1+|ρ|) - 2)`.
    pub butterfly_violation: f64,
    pub calendar_ok: bool,
    /// Largest decrease between consecutive ATM knots.
    pub calendar_violation: f64,
    pub rho_ok: bool,
    pub gamma_ok: bool,
}

impl ArbitrageReport {
    pub fn passed(&self) -> bool {
        self.butterfly_ok && self.calendar_ok && self.rho_ok && self.gamma_ok
    }
}

pub fn check_no_arbitrage(p: &SsviParams) -> ArbitrageReport {
    let butterfly_violation = (p.eta * (1.0 + p.rho.abs()) - 2.0).max(0.0);
    let calendar_violation =
        p.theta_curve.thetas.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    ArbitrageReport {
        butterfly_ok: butterfly_violation == 0.0 && p.eta > 0.0,
        butterfly_violation,
        calendar_ok: calendar_violation == 0.0,
        calendar_violation,
        rho_ok: p.rho.abs() < 1.0,
        gamma_ok: p.gamma > 0.0 && p.gamma <= 0.5,
    }
}

/// A power-law SSVI surface anchored at a spot, for local volatility extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsviSurface {
    pub params: SsviParams,
    pub spot: f64,
}

impl ThetaSurface for SsviSurface {
    fn theta_terms(&self, t: f64, kappa: f64) -> Result<ThetaTerms> {
        let p = &self.params;
        let (theta, theta_t) = p.theta_curve.value(t)?;
        let phi = power_law_phi(theta, p.eta, p.gamma);
        let slice = p.slice(theta);
        let (w, d_k, d_kk) = svi_derivatives(&slice, kappa);
        let x = phi * kappa;
        let r = ((x + p.rho).powi(2) + 1.0 - p.rho * p.rho).sqrt();
        let d_theta = 0.5 * (1.0 + p.rho * x + r)
            + 0.5 * theta * (p.rho + (x + p.rho) / r) * kappa * power_law_phi_derivative(theta, p.eta, p.gamma);
        Ok(ThetaTerms { theta: w, d_t: d_theta * theta_t, d_k, d_kk })
    }

    fn spot(&self) -> f64 {
        self.spot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SviSlice {
    pub maturity: f64,
    pub params: NaturalSviParams,
}

/// Per-maturity natural SVI slices, interpolated in maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SviSurface {
    pub spot: f64,
    pub slices: Vec<SviSlice>,
    /// ATM total variance at each slice maturity.
    pub atm_curve: Vec<f64>,
}

/// Slice parameters at `T` and their maturity derivative.
fn interpolate_with_rate(surface: &SviSurface, t: f64) -> Result<(NaturalSviParams, [f64; 5])> {
    let maturities: Vec<f64> = surface.slices.iter().map(|s| s.maturity).collect();
    let curve = AtmCurve::new(maturities, surface.atm_curve.clone())?;
    let i = curve.segment(t)?;
    if surface.slices.len() == 1 {
        return Ok((surface.slices[0].params, [0.0; 5]));
    }
    let (lo, hi) = (&surface.slices[i], &surface.slices[i + 1]);
    if t == lo.maturity {
        let rate = rate_between(lo, hi, 1.0 / (hi.maturity - lo.maturity));
        return Ok((lo.params, rate));
    }
    if t == hi.maturity && i + 2 == surface.slices.len() {
        let rate = rate_between(lo, hi, 1.0 / (hi.maturity - lo.maturity));
        return Ok((hi.params, rate));
    }
    let (theta_lo, theta_hi) = (surface.atm_curve[i], surface.atm_curve[i + 1]);
    let (theta, theta_t) = curve.value(t)?;
    let (alpha, alpha_t) = if theta_hi > theta_lo {
        ((theta - theta_lo) / (theta_hi - theta_lo), theta_t / (theta_hi - theta_lo))
    } else {
        let span = hi.maturity - lo.maturity;
        ((t - lo.maturity) / span, 1.0 / span)
    };
    let (a, b) = (lo.params.to_vec(), hi.params.to_vec());
    let mut mixed = [0.0; 5];
    for j in 0..5 {
        mixed[j] = (1.0 - alpha) * a[j] + alpha * b[j];
    }
    Ok((NaturalSviParams::from_vec(mixed), rate_between(lo, hi, alpha_t)))
}

fn rate_between(lo: &SviSlice, hi: &SviSlice, alpha_t: f64) -> [f64; 5] {
    let (a, b) = (lo.params.to_vec(), hi.params.to_vec());
    let mut r = [0.0; 5];
    for j in 0..5 {
        r[j] = (b[j] - a[j]) * alpha_t;
    }
    r
}

/// Parameter-wise interpolation between the two slices around `T`, weighted by ATM total
/// variance. Errors outside the slice range.
pub fn interpolate_slice(surface: &SviSurface, t: f64) -> Result<NaturalSviParams> {
    interpolate_with_rate(surface, t).map(|(p, _)| p)
}

impl SviSurface {
    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() || self.slices.len() != self.atm_curve.len() {
            return Err(Error::Schema("SVI surface needs one ATM value per slice".into()));
        }
        if self.slices.windows(2).any(|w| !(w[1].maturity > w[0].maturity)) {
            return Err(Error::Schema("slice maturities must be strictly increasing".into()));
        }
        for s in &self.slices {
            s.params.validate()?;
        }
        Ok(())
    }

    pub fn maturity_range(&self) -> (f64, f64) {
        (self.slices[0].maturity, self.slices.last().unwrap().maturity)
    }

    pub fn total_variance(&self, t: f64, kappa: f64) -> Result<f64> {
        Ok(svi_total_variance(&interpolate_slice(self, t)?, kappa))
    }

    pub fn implied_vol(&self, t: f64, kappa: f64) -> Result<f64> {
        let w = self.total_variance(t, kappa)?;
        if !(w > 0.0) {
            return Err(Error::DegenerateVariance(w));
        }
        Ok((w / t).sqrt())
    }

    /// Counts butterfly (`butt_k < -tol`) and calendar (`Θ` decreasing by more than `tol`
    /// between slices) violations over slices and a `κ` grid.
    pub fn violations(&self, kappas: &[f64], tol: f64) -> SurfaceViolations {
        let mut v = SurfaceViolations::default();
        for (i, s) in self.slices.iter().enumerate() {
            for &kappa in kappas {
                let (theta, d_k, d_kk) = svi_derivatives(&s.params, kappa);
                v.butterfly_cells += 1;
                let terms = ThetaTerms { theta, d_t: 0.0, d_k, d_kk };
                match dupire_terms(&terms, kappa) {
                    Ok((_, butt)) if butt >= -tol => {}
                    _ => v.butterfly += 1,
                }
                if i > 0 {
                    v.calendar_cells += 1;
                    if theta < svi_total_variance(&self.slices[i - 1].params, kappa) - tol {
                        v.calendar += 1;
                    }
                }
            }
        }
        v
    }
}

impl ThetaSurface for SviSurface {
    fn theta_terms(&self, t: f64, kappa: f64) -> Result<ThetaTerms> {
        let (p, rate) = interpolate_with_rate(self, t)?;
        let (theta, d_k, d_kk) = svi_derivatives(&p, kappa);
        let grad = svi_param_gradient(&p, kappa);
        let d_t = grad.iter().zip(&rate).map(|(g, r)| g * r).sum();
        Ok(ThetaTerms { theta, d_t, d_k, d_kk })
    }

    fn spot(&self) -> f64 {
        self.spot
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceViolations {
    pub butterfly: usize,
    pub butterfly_cells: usize,
    pub calendar: usize,
    pub calendar_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsviConfig {
    pub gamma: f64,
    /// Weight of the squared calendar and butterfly gaps in the slice refinement.
    pub penalty_weight: f64,
    /// `κ` grid on which slice penalties are evaluated.
    pub penalty_kappas: Vec<f64>,
    pub global_search: NelderMeadConfig,
    pub slice_search: NelderMeadConfig,
    /// Skip the per-slice refinement.
    pub ssvi_only: bool,
}

impl Default for SsviConfig {
    fn default() -> Self {
        SsviConfig {
            gamma: 0.5,
            penalty_weight: 1e6,
            penalty_kappas: linspace(-1.5, 1.5, 61),
            global_search: NelderMeadConfig { max_evals: 2000, f_tol: 1e-16, x_tol: 1e-9, initial_step: 0.2 },
            slice_search: NelderMeadConfig { max_evals: 3000, f_tol: 1e-16, x_tol: 1e-10, initial_step: 0.05 },
            ssvi_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceFit {
    pub maturity: f64,
    pub quotes: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsviReport {
    /// Sum of squared IV residuals of the SSVI fit.
    pub ssvi_objective: f64,
    pub ssvi_rmse: f64,
    pub slices: Vec<SliceFit>,
    pub skipped_maturities: Vec<f64>,
    pub arbitrage: ArbitrageReport,
    pub violations: SurfaceViolations,
    /// Log-moneyness range of the calibration quotes.
    #[serde(default)]
    pub kappa_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsviModel {
    pub version: String,
    pub params: SsviParams,
    pub surface: SviSurface,
    pub report: SsviReport,
}

impl SsviModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("").to_string();
        if found != SSVI_MODEL_VERSION {
            return Err(Error::Version { found, expected: SSVI_MODEL_VERSION.into() });
        }
        let m: SsviModel = serde_json::from_value(v)?;
        m.surface.validate()?;
        m.params.theta_curve.validate()?;
        Ok(m)
    }
}

struct MaturityGroup {
    maturity: f64,
    kappas: Vec<f64>,
    ivs: Vec<f64>,
}

fn group_by_maturity(frame: &MarketFrame) -> Vec<MaturityGroup> {
    let mut pts: Vec<(f64, f64, f64)> = frame.points.iter().map(|p| (p.maturity, p.kappa, p.mid_iv)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut groups: Vec<MaturityGroup> = Vec::new();
    for (t, kappa, iv) in pts {
        match groups.last_mut() {
            Some(g) if (t - g.maturity).abs() <= 1e-10 * t.max(1.0) => {
                g.kappas.push(kappa);
                g.ivs.push(iv);
            }
            _ => groups.push(MaturityGroup { maturity: t, kappas: vec![kappa], ivs: vec![iv] }),
        }
    }
    groups
}

/// ATM total variance by linear interpolation of `iv² T` across the quotes around `κ = 0`.
fn atm_total_variance(g: &MaturityGroup) -> Option<f64> {
    let w = |i: usize| g.ivs[i] * g.ivs[i] * g.maturity;
    (0..g.kappas.len()).find_map(|i| {
        if g.kappas[i] == 0.0 {
            return Some(w(i));
        }
        if i + 1 < g.kappas.len() && g.kappas[i] < 0.0 && g.kappas[i + 1] > 0.0 {
            let a = -g.kappas[i] / (g.kappas[i + 1] - g.kappas[i]);
            return Some((1.0 - a) * w(i) + a * w(i + 1));
        }
        None
    })
}

fn iv_sse(p: &NaturalSviParams, t: f64, kappas: &[f64], ivs: &[f64]) -> f64 {
    kappas
        .iter()
        .zip(ivs)
        .map(|(&k, &iv)| {
            let w = svi_total_variance(p, k).max(0.0);
            ((w / t).sqrt() - iv).powi(2)
        })
        .sum()
}

fn project_rho_eta(rho: f64, eta: f64) -> (f64, f64) {
    let rho = rho.clamp(-RHO_MAX, RHO_MAX);
    (rho, eta.clamp(1e-8, 2.0 / (1.0 + rho.abs())))
}

/// Two-step calibration: a power-law SSVI fit of `(ρ, η)` on an estimated ATM curve, then a
/// per-maturity natural-SVI refinement with calendar and butterfly penalties.
pub fn calibrate(frame: &MarketFrame, cfg: &SsviConfig) -> Result<SsviModel> {
    if !(cfg.gamma > 0.0 && cfg.gamma <= 0.5) {
        return Err(Error::InvalidInput(format!("gamma must lie in (0, 0.5], got {}", cfg.gamma)));
    }
    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for g in group_by_maturity(frame) {
        match atm_total_variance(&g) {
            Some(theta) if theta > 0.0 => groups.push((g, theta)),
            _ => {
                warn!("maturity {} has no quotes bracketing the money; skipped", g.maturity);
                skipped.push(g.maturity);
            }
        }
    }
    if groups.len() < 2 {
        return Err(Error::CalibrationScope(format!(
            "need at least 2 maturities with quotes bracketing the money, found {}",
            groups.len()
        )));
    }
    let mut running = 0.0f64;
    let thetas: Vec<f64> = groups
        .iter()
        .map(|(_, th)| {
            running = running.max(*th);
            running
        })
        .collect();
    let curve = AtmCurve::new(groups.iter().map(|(g, _)| g.maturity).collect(), thetas.clone())?;

    let ssvi_sse = |rho: f64, eta: f64| -> f64 {
        groups
            .iter()
            .zip(&thetas)
            .map(|((g, _), &theta)| {
                let slice = NaturalSviParams::ssvi_slice(rho, theta, power_law_phi(theta, eta, cfg.gamma));
                iv_sse(&slice, g.maturity, &g.kappas, &g.ivs)
            })
            .sum()
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for start in [[0.0, 1.0], [-0.5, 1.0], [0.5, 1.0], [-0.5, 0.3]] {
        let r = nelder_mead(
            |x| {
                let (rho, eta) = project_rho_eta(x[0], x[1]);
                ssvi_sse(rho, eta)
            },
            &start,
            &cfg.global_search,
        );
        let (rho, eta) = project_rho_eta(r.x[0], r.x[1]);
        if best.is_none_or(|b| r.value < b.2) {
            best = Some((rho, eta, r.value));
        }
    }
    let (rho, eta, ssvi_objective) = best.unwrap();
    let n_quotes: usize = groups.iter().map(|(g, _)| g.kappas.len()).sum();
    info!("ssvi fit: rho {rho:.4}, eta {eta:.4}, iv rmse {:.3e}", (ssvi_objective / n_quotes as f64).sqrt());
    let params = SsviParams { rho, eta, gamma: cfg.gamma, theta_curve: curve };

    let mut slices: Vec<SviSlice> = Vec::new();
    let mut fits = Vec::new();
    for ((g, _), &theta) in groups.iter().zip(&thetas) {
        let init = params.slice(theta);
        let prev = slices.last().map(|s| s.params);
        let objective = |p: &NaturalSviParams| -> f64 {
            iv_sse(p, g.maturity, &g.kappas, &g.ivs) + cfg.penalty_weight * slice_penalty(p, prev.as_ref(), &cfg.penalty_kappas)
        };
        let initial_objective = objective(&init);
        let (fitted, final_objective, evals) = if cfg.ssvi_only {
            (init, initial_objective, 0)
        } else {
            let to_params = |x: &[f64]| NaturalSviParams {
                delta: x[0] * theta,
                mu: x[1],
                rho: x[2],
                omega: x[3] * theta,
                zeta: x[4].exp(),
            };
            let x0 = [0.0, 0.0, init.rho, 1.0, init.zeta.ln()];
            let r = nelder_mead(
                |x| {
                    let p = to_params(x);
                    if p.rho.abs() > RHO_MAX || p.omega < 0.0 || p.min_variance() < 0.0 {
                        return f64::INFINITY;
                    }
                    objective(&p)
                },
                &x0,
                &cfg.slice_search,
            );
            (to_params(&r.x), r.value, r.evals)
        };
        fits.push(SliceFit { maturity: g.maturity, quotes: g.kappas.len(), initial_objective, final_objective, evals });
        slices.push(SviSlice { maturity: g.maturity, params: fitted });
    }
    let surface = SviSurface { spot: frame.spot(), slices, atm_curve: thetas };
    let violations = surface.violations(&cfg.penalty_kappas, 1e-8);
    let arbitrage = check_no_arbitrage(&params);
    if violations.butterfly + violations.calendar > 0 {
        warn!("refined SVI slices: {violations:?}");
    }
    Ok(SsviModel {
        version: SSVI_MODEL_VERSION.into(),
        params,
        surface,
        report: SsviReport {
            ssvi_objective,
            ssvi_rmse: (ssvi_objective / n_quotes as f64).sqrt(),
            slices: fits,
            skipped_maturities: skipped,
            arbitrage,
            violations,
            kappa_range: frame.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.kappa), b.max(p.kappa))),
        },
    })
}

/// Sum of squared calendar gaps against `prev` and squared negative butterfly terms.
fn slice_penalty(p: &NaturalSviParams, prev: Option<&NaturalSviParams>, kappas: &[f64]) -> f64 {
    kappas
        .iter()
        .map(|&kappa| {
            let (theta, d_k, d_kk) = svi_derivatives(p, kappa);
            let cal = prev.map_or(0.0, |q| (theta - svi_total_variance(q, kappa)).min(0.0));
            let butt = match dupire_terms(&ThetaTerms { theta, d_t: 0.0, d_k, d_kk }, kappa) {
                Ok((_, b)) => b.min(0.0),
                Err(_) => -1.0,
            };
            cal * cal + butt * butt
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> NaturalSviParams {
        NaturalSviParams { delta: 0.01, mu: 0.05, rho: -0.4, omega: 0.05, zeta: 3.0 }
    }

    #[test]
    fn svi_closed_form_cases() {
        let p = sample();
        assert!((svi_total_variance(&p, p.mu) - (p.delta + p.omega)).abs() < 1e-16);
        let flat = NaturalSviParams { omega: 0.0, ..p };
        for k in [-1.0, 0.0, 0.7] {
            assert_eq!(svi_total_variance(&flat, k), flat.delta);
        }
        let slice = NaturalSviParams::ssvi_slice(-0.3, 0.04, power_law_phi(0.04, 1.2, 0.5));
        assert!((svi_total_variance(&slice, 0.0) - 0.04).abs() < 1e-17);
    }

    #[test]
    fn power_law_cases() {
        assert!((power_law_phi(1.0, 1.2, 0.5) - 1.2 / 2f64.sqrt()).abs() < 1e-15);
        assert!((power_law_phi(0.3, 2.4, 0.5) - 2.0 * power_law_phi(0.3, 1.2, 0.5)).abs() < 1e-15);
        assert!(power_law_phi(1e12, 1.0, 0.5) < 1e-11);
        let (t, h) = (0.3, 1e-6);
        let fd = (power_law_phi(t + h, 1.2, 0.4) - power_law_phi(t - h, 1.2, 0.4)) / (2.0 * h);
        assert!((power_law_phi_derivative(t, 1.2, 0.4) - fd).abs() < 1e-6);
    }

    #[test]
    fn arbitrage_checks() {
        let curve = AtmCurve::new(vec![0.5, 1.0], vec![0.02, 0.04]).unwrap();
        let p = SsviParams { rho: 0.0, eta: 2.0, gamma: 0.5, theta_curve: curve.clone() };
        assert!(check_no_arbitrage(&p).passed());
        let r = check_no_arbitrage(&SsviParams { eta: 2.1, ..p.clone() });
        assert!(!r.butterfly_ok);
        assert!((r.butterfly_violation - 0.1).abs() < 1e-12);
        let bad = SsviParams { theta_curve: AtmCurve { maturities: vec![0.5, 1.0], thetas: vec![0.04, 0.03] }, ..p };
        let r = check_no_arbitrage(&bad);
        assert!(!r.calendar_ok);
        assert!((r.calendar_violation - 0.01).abs() < 1e-15);
    }

    fn two_slices(a: NaturalSviParams, b: NaturalSviParams) -> SviSurface {
        SviSurface {
            spot: 100.0,
            slices: vec![SviSlice { maturity: 0.5, params: a }, SviSlice { maturity: 1.5, params: b }],
            atm_curve: vec![0.02, 0.06],
        }
    }

    #[test]
    fn slice_interpolation() {
        let a = sample();
        let b = NaturalSviParams { delta: 0.03, mu: -0.05, rho: -0.2, omega: 0.09, zeta: 2.0 };
        let s = two_slices(a, b);
        assert_eq!(interpolate_slice(&s, 0.5).unwrap(), a);
        assert_eq!(interpolate_slice(&s, 1.5).unwrap(), b);
        let mid = interpolate_slice(&s, 1.0).unwrap();
        assert!((mid.omega - 0.07).abs() < 1e-15 && (mid.rho + 0.3).abs() < 1e-15);
        let same = two_slices(a, a);
        let p = interpolate_slice(&same, 0.8).unwrap();
        for (x, y) in p.to_vec().iter().zip(a.to_vec()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(interpolate_slice(&s, 0.4), Err(Error::Domain { .. })));
        assert!(matches!(interpolate_slice(&s, 1.6), Err(Error::Domain { .. })));
    }

    #[test]
    fn svi_surface_maturity_derivative_matches_fd() {
        let b = NaturalSviParams { delta: 0.03, mu: -0.05, rho: -0.2, omega: 0.09, zeta: 2.0 };
        let s = two_slices(sample(), b);
        for &(t, kappa) in &[(0.7, -0.3), (1.2, 0.4), (0.9, 0.0)] {
            let terms = s.theta_terms(t, kappa).unwrap();
            let h = 1e-5;
            let fd = (s.total_variance(t + h, kappa).unwrap() - s.total_variance(t - h, kappa).unwrap()) / (2.0 * h);
            assert!((terms.d_t - fd).abs() < 1e-8, "{} vs {fd}", terms.d_t);
        }
    }

    #[test]
    fn ssvi_surface_derivatives_match_fd() {
        let curve = AtmCurve::new(vec![0.2, 1.0, 2.0], vec![0.01, 0.045, 0.08]).unwrap();
        let s = SsviSurface { params: SsviParams { rho: -0.3, eta: 1.2, gamma: 0.5, theta_curve: curve }, spot: 100.0 };
        let w = |t: f64, k: f64| s.params.total_variance(t, k).unwrap();
        for &(t, kappa) in &[(0.5, -0.4), (1.4, 0.3), (0.7, 0.05)] {
            let terms = s.theta_terms(t, kappa).unwrap();
            let h = 1e-5;
            assert!((terms.theta - w(t, kappa)).abs() < 1e-16);
            assert!((terms.d_t - (w(t + h, kappa) - w(t - h, kappa)) / (2.0 * h)).abs() < 1e-7);
            assert!((terms.d_k - (w(t, kappa + h) - w(t, kappa - h)) / (2.0 * h)).abs() < 1e-8);
            let h = 1e-4;
            let fd2 = (w(t, kappa + h) - 2.0 * w(t, kappa) + w(t, kappa - h)) / (h * h);
            assert!((terms.d_kk - fd2).abs() < 1e-5);
        }
    }

    #[test]
    fn round_trips_json() {
        let curve = AtmCurve::linear(0.04, vec![0.5, 1.0]).unwrap();
        let params = SsviParams { rho: -0.3, eta: 1.2, gamma: 0.5, theta_curve: curve };
        let surface = two_slices(sample(), sample());
        let model = SsviModel {
            version: SSVI_MODEL_VERSION.into(),
            report: SsviReport {
                ssvi_objective: 0.0,
                ssvi_rmse: 0.0,
                slices: vec![],
                skipped_maturities: vec![],
                arbitrage: check_no_arbitrage(&params),
                violations: SurfaceViolations::default(),
                kappa_range: (-0.3, 0.3),
            },
            params,
            surface,
        };
        assert_eq!(SsviModel::from_json(&model.to_json().unwrap()).unwrap(), model);
        let wrong = model.to_json().unwrap().replace("ssvi/1", "ssvi/0");
        assert!(matches!(SsviModel::from_json(&wrong), Err(Error::Version { .. })));
    }

    proptest! {
        #[test]
        fn svi_is_convex_in_kappa(
            delta in -0.02f64..0.05, mu in -0.3f64..0.3, rho in -0.99f64..0.99,
            omega in 0.0f64..0.5, zeta in 0.05f64..10.0,
        ) {
            let p = NaturalSviParams { delta, mu, rho, omega, zeta };
            let h = 1e-3;
            for i in 0..400 {
                let k = -2.0 + i as f64 * 0.01;
                let d2 = svi_total_variance(&p, k + h) - 2.0 * svi_total_variance(&p, k) + svi_total_variance(&p, k - h);
                prop_assert!(d2 >= -1e-10);
            }
        }

        #[test]
        fn arbitrage_free_ssvi_has_nonnegative_butterfly(
            rho in -0.95f64..0.95, frac in 0.05f64..1.0, theta in 0.005f64..0.5,
        ) {
            let eta = frac * 2.0 / (1.0 + rho.abs());
            let curve = AtmCurve::new(vec![1.0], vec![theta]).unwrap();
            let p = SsviParams { rho, eta, gamma: 0.5, theta_curve: curve };
            prop_assume!(check_no_arbitrage(&p).passed());
            let slice = p.slice(theta);
            for i in 0..=200 {
                let kappa = -2.0 + i as f64 * 0.02;
                let (w, d_k, d_kk) = svi_derivatives(&slice, kappa);
                let (_, butt) = dupire_terms(&ThetaTerms { theta: w, d_t: 0.0, d_k, d_kk }, kappa).unwrap();
                prop_assert!(butt >= -1e-8, "butt {} at kappa {}", butt, kappa);
            }
        }
    }
}
