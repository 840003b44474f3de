use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::network::{InputTransform, Layer, NnIvModel, SigmaJet};
use crate::error::{Error, Result};
use crate::market_data::MarketFrame;

/// Implied-volatility observations in `(T, κ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub t: Vec<f64>,
    pub kappa: Vec<f64>,
    pub iv: Vec<f64>,
}

impl TrainingData {
    /// Mid implied vols of a frame; repeated `(T, κ)` points are merged into their mean.
    pub fn from_frame(frame: &MarketFrame) -> (Self, Vec<String>) {
        let mut pts: Vec<(f64, f64, f64)> = frame.points.iter().map(|p| (p.maturity, p.kappa, p.mid_iv)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut data = TrainingData { t: Vec::new(), kappa: Vec::new(), iv: Vec::new() };
        let mut warnings = Vec::new();
        let mut i = 0;
        while i < pts.len() {
            let mut j = i + 1;
            while j < pts.len() && same_point((pts[i].0, pts[i].1), (pts[j].0, pts[j].1)) {
                j += 1;
            }
            let iv = pts[i..j].iter().map(|p| p.2).sum::<f64>() / (j - i) as f64;
            if j - i > 1 {
                warnings.push(format!("{} quotes at T={} kappa={} merged to iv {iv}", j - i, pts[i].0, pts[i].1));
            }
            data.t.push(pts[i].0);
            data.kappa.push(pts[i].1);
            data.iv.push(iv);
            i = j;
        }
        (data, warnings)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        TrainingData {
            t: idx.iter().map(|&i| self.t[i]).collect(),
            kappa: idx.iter().map(|&i| self.kappa[i]).collect(),
            iv: idx.iter().map(|&i| self.iv[i]).collect(),
        }
    }
}

fn same_point(a: (f64, f64), b: (f64, f64)) -> bool {
    (a.0 - b.0).abs() <= 1e-12 * a.0.abs().max(1.0) && (a.1 - b.1).abs() <= 1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Distance from each observation to its nearest neighbour in `(T, κ)`.
    pub w: Vec<f64>,
    /// Mean of `w` over the observations.
    pub mu_w: f64,
    pub warnings: Vec<String>,
}

pub fn compute_weights(points: &[(f64, f64)]) -> Result<LossWeights> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }
    let mut warnings = Vec::new();
    let w: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let d = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| (a.0 - b.0).hypot(a.1 - b.1))
                .fold(f64::INFINITY, f64::min);
            if d == 0.0 {
                warnings.push(format!("observation {i} duplicates another point and gets zero weight"));
            }
            d
        })
        .collect();
    let mu_w = w.iter().sum::<f64>() / w.len() as f64;
    Ok(LossWeights { w, mu_w, warnings })
}

/// Penalty nodes in `(T, κ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGrid {
    pub t: Vec<f64>,
    pub kappa: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGridSpec {
    pub t_range: (f64, f64),
    pub n_t: usize,
    /// Range of `k / S0`.
    pub moneyness_range: (f64, f64),
    pub n_moneyness: usize,
}

impl Default for PenaltyGridSpec {
    fn default() -> Self {
        PenaltyGridSpec { t_range: (0.005, 10.0), n_t: 50, moneyness_range: (0.5, 2.0), n_moneyness: 100 }
    }
}

impl PenaltyGrid {
    /// Log-spaced maturities times log-spaced moneyness.
    pub fn new(spec: &PenaltyGridSpec) -> Result<Self> {
        let (t0, t1) = spec.t_range;
        let (m0, m1) = spec.moneyness_range;
        if !(t0 > 0.0 && t1 >= t0 && m0 > 0.0 && m1 >= m0) || spec.n_t == 0 || spec.n_moneyness == 0 {
            return Err(Error::InvalidInput("penalty grid needs positive ranges and at least one node".into()));
        }
        let logspace = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![a.ln()];
            }
            (0..n).map(|i| a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).collect()
        };
        let mut grid = PenaltyGrid { t: Vec::new(), kappa: Vec::new() };
        for lt in logspace(t0, t1, spec.n_t) {
            for &kappa in &logspace(m0, m1, spec.n_moneyness) {
                grid.t.push(lt.exp());
                grid.kappa.push(kappa);
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Weights of the calendar, butterfly and local-variance band terms.
    pub lambda: [f64; 3],
    /// Bounds on the local variance `cal / butt`.
    pub band: (f64, f64),
    pub grid: PenaltyGrid,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput("penalty weights must be nonnegative".into()));
        }
        if !(0.0 < self.band.0 && self.band.0 < self.band.1) {
            return Err(Error::InvalidInput("local variance band needs 0 < lower < upper".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("empty penalty grid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// Weighted relative RMSE.
    pub fit: f64,
    pub calendar: f64,
    pub butterfly: f64,
    pub band: f64,
    /// Unscaled grid means of `cal_T⁻`, `butt_k⁻` and the band excess.
    pub mean_cal_neg: f64,
    pub mean_butt_neg: f64,
    pub mean_band_excess: f64,
}

/// `(cal_T, butt_k)` from `Σ` and its derivatives in `ln T` and `κ`.
pub(crate) fn sigma_dupire(t: f64, kappa: f64, s: f64, s_a: f64, s_k: f64, s_kk: f64) -> (f64, f64) {
    let u = 1.0 - kappa * s_k / s;
    (2.0 * s * s_a + s * s, u * u - 0.25 * t * t * s * s * s_k * s_k + t * s * s_kk)
}

fn band_excess(cal: f64, butt: f64, band: (f64, f64)) -> (f64, f64) {
    if butt <= 0.0 {
        return (0.0, 0.0);
    }
    let r = cal / butt;
    if r > band.1 {
        (r - band.1, 1.0)
    } else if r < band.0 {
        (band.0 - r, -1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Points per forward/backward block; keeps the layer buffers cache-resident.
const CHUNK: usize = 128;

struct Partial {
    /// Squared weighted residuals, or the three penalty sums.
    sums: [f64; 3],
    grad: Option<Vec<f64>>,
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
}

fn fit_chunk(model: &NnIvModel, data: &TrainingData, weights: &LossWeights, range: std::ops::Range<usize>, want_grad: bool) -> Partial {
    let (t, kappa) = (&data.t[range.clone()], &data.kappa[range.clone()]);
    let tape = model.forward(t, kappa);
    let sj = model.sigma_from_tape(&tape);
    let len = t.len();
    let n = data.len() as f64;
    let mut sq = 0.0;
    let mut bar = SigmaJet { s: vec![0.0; len], s_a: vec![0.0; len], s_k: vec![0.0; len], s_kk: vec![0.0; len] };
    for (j, i) in range.enumerate() {
        let r = (sj.s[j] - data.iv[i]) / data.iv[i];
        let w = weights.w[i];
        sq += (w * r).powi(2);
        // Missing the 1 / fit factor, applied after the reduction.
        bar.s[j] = w * w * r / (n * data.iv[i]);
    }
    Partial { sums: [sq, 0.0, 0.0], grad: want_grad.then(|| flatten(&model.backward(&tape, &bar))) }
}

fn penalty_chunk(model: &NnIvModel, penalty: &PenaltyConfig, scale: f64, range: std::ops::Range<usize>, want_grad: bool) -> Partial {
    let (t, kappa) = (&penalty.grid.t[range.clone()], &penalty.grid.kappa[range]);
    let tape = model.forward(t, kappa);
    let sj = model.sigma_from_tape(&tape);
    let len = t.len();
    let [l1, l2, l3] = penalty.lambda;
    let mut sums = [0.0; 3];
    let mut bar = SigmaJet { s: vec![0.0; len], s_a: vec![0.0; len], s_k: vec![0.0; len], s_kk: vec![0.0; len] };
    let mut active = false;
    for i in 0..len {
        let (tt, kk) = (t[i], kappa[i]);
        let (s, s_a, s_k, s_kk) = (sj.s[i], sj.s_a[i], sj.s_k[i], sj.s_kk[i]);
        let (cal, butt) = sigma_dupire(tt, kk, s, s_a, s_k, s_kk);
        let (excess, d_ratio) = band_excess(cal, butt, penalty.band);
        sums[0] += (-cal).max(0.0);
        sums[1] += (-butt).max(0.0);
        sums[2] += excess;
        let mut g_cal = if cal < 0.0 { -l1 } else { 0.0 };
        let mut g_butt = if butt < 0.0 { -l2 } else { 0.0 };
        if d_ratio != 0.0 {
            g_cal += l3 * d_ratio / butt;
            g_butt -= l3 * d_ratio * cal / (butt * butt);
        }
        if g_cal == 0.0 && g_butt == 0.0 {
            continue;
        }
        active = true;
        let (g_cal, g_butt) = (scale * g_cal, scale * g_butt);
        let u = 1.0 - kk * s_k / s;
        bar.s[i] = g_cal * (2.0 * s_a + 2.0 * s)
            + g_butt * (2.0 * u * kk * s_k / (s * s) - 0.5 * tt * tt * s * s_k * s_k + tt * s_kk);
        bar.s_a[i] = g_cal * 2.0 * s;
        bar.s_k[i] = g_butt * (-2.0 * u * kk / s - 0.5 * tt * tt * s * s * s_k);
        bar.s_kk[i] = g_butt * tt * s;
    }
    let grad = (want_grad && active).then(|| flatten(&model.backward(&tape, &bar)));
    Partial { sums, grad }
}

fn chunks(len: usize) -> Vec<std::ops::Range<usize>> {
    (0..len).step_by(CHUNK).map(|a| a..(a + CHUNK).min(len)).collect()
}

/// Penalized loss and, optionally, its gradient in the flat parameter order.
///
/// Blocks are evaluated in parallel and reduced in block order, so results do not
/// depend on the thread count.
pub(crate) fn evaluate(
    model: &NnIvModel,
    data: &TrainingData,
    weights: &LossWeights,
    penalty: &PenaltyConfig,
    want_grad: bool,
) -> (LossComponents, Option<Vec<f64>>) {
    let (n, m) = (data.len(), penalty.grid.len());
    let scale = weights.mu_w / m as f64;
    let fit_parts: Vec<Partial> =
        chunks(n).into_par_iter().map(|r| fit_chunk(model, data, weights, r, want_grad)).collect();
    let pen_parts: Vec<Partial> =
        chunks(m).into_par_iter().map(|r| penalty_chunk(model, penalty, scale, r, want_grad)).collect();
    let sq: f64 = fit_parts.iter().map(|p| p.sums[0]).sum();
    let fit = (sq / n as f64).sqrt();
    let mut sums = [0.0; 3];
    for p in &pen_parts {
        for (a, b) in sums.iter_mut().zip(p.sums) {
            *a += b;
        }
    }
    let [l1, l2, l3] = penalty.lambda;
    let (calendar, butterfly, band) = (scale * l1 * sums[0], scale * l2 * sums[1], scale * l3 * sums[2]);
    let comps = LossComponents {
        total: fit + calendar + butterfly + band,
        fit,
        calendar,
        butterfly,
        band,
        mean_cal_neg: sums[0] / m as f64,
        mean_butt_neg: sums[1] / m as f64,
        mean_band_excess: sums[2] / m as f64,
    };
    let grad = want_grad.then(|| {
        let mut g = vec![0.0; model.n_params()];
        if fit > 0.0 {
            for p in &fit_parts {
                for (a, b) in g.iter_mut().zip(p.grad.as_ref().unwrap()) {
                    *a += b / fit;
                }
            }
        }
        for p in pen_parts.iter().filter_map(|p| p.grad.as_ref()) {
            for (a, b) in g.iter_mut().zip(p) {
                *a += b;
            }
        }
        g
    });
    (comps, grad)
}

/// Penalized loss of a model on weighted observations.
pub fn loss(model: &NnIvModel, data: &TrainingData, weights: &LossWeights, penalty: &PenaltyConfig) -> LossComponents {
    evaluate(model, data, weights, penalty, false).0
}

/// Unweighted relative RMSE of the model's vols.
pub fn relative_rmse(model: &NnIvModel, data: &TrainingData) -> f64 {
    let s = model.implied_vol(&data.t, &data.kappa);
    let sq: f64 = s.iter().zip(&data.iv).map(|(a, b)| ((a - b) / b).powi(2)).sum();
    (sq / data.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda_grid: Vec<[f64; 3]>,
    pub band: (f64, f64),
    pub penalty_grid: PenaltyGridSpec,
    pub sigma_bounds: (f64, f64),
    /// Every `validation_every`-th observation is held out; 0 disables the split.
    pub validation_every: usize,
    /// Fraction of the epochs after which a lagging candidate is stopped.
    pub prune_after: f64,
    /// A candidate is stopped when its validation error exceeds this multiple of the best.
    pub prune_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let levels = [0.1, 1.0, 10.0];
        let mut lambda_grid = Vec::new();
        for &a in &levels {
            for &b in &levels {
                for &c in &levels {
                    lambda_grid.push([a, b, c]);
                }
            }
        }
        TrainConfig {
            hidden: vec![40, 40, 40],
            epochs: 3000,
            learning_rate: 1e-3,
            seed: 0,
            lambda_grid,
            band: (1e-4, 4.0),
            penalty_grid: PenaltyGridSpec::default(),
            sigma_bounds: (0.01, 2.0),
            validation_every: 5,
            prune_after: 0.25,
            prune_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Completed,
    /// Stopped early for lagging the best arbitrage-free candidate.
    Pruned,
    /// Skipped: a candidate with smaller weights was already arbitrage-free.
    Dominated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub lambda: [f64; 3],
    pub status: CandidateStatus,
    pub epochs_run: usize,
    pub training: Option<LossComponents>,
    pub validation_rmse: Option<f64>,
    pub arbitrage_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossComponents,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStats {
    pub nodes: usize,
    pub mean_cal_neg: f64,
    pub mean_butt_neg: f64,
    pub mean_band_excess: f64,
    pub max_cal_neg: f64,
    pub max_butt_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub n_train: usize,
    pub n_validation: usize,
    pub mu_w: f64,
    pub selected: usize,
    pub candidates: Vec<CandidateReport>,
    /// Per-epoch losses of the selected run.
    pub history: Vec<EpochRecord>,
    pub penalty_grid: GridStats,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl TrainingReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct NnFit {
    pub model: NnIvModel,
    pub report: TrainingReport,
}

/// Arbitrage statistics of a model on a penalty grid.
pub fn grid_stats(model: &NnIvModel, grid: &PenaltyGrid) -> GridStats {
    let j = model.sigma_jet(&grid.t, &grid.kappa);
    let m = grid.len();
    let mut st = GridStats { nodes: m, mean_cal_neg: 0.0, mean_butt_neg: 0.0, mean_band_excess: 0.0, max_cal_neg: 0.0, max_butt_neg: 0.0 };
    for i in 0..m {
        let (cal, butt) = sigma_dupire(grid.t[i], grid.kappa[i], j.s[i], j.s_a[i], j.s_k[i], j.s_kk[i]);
        st.mean_cal_neg += (-cal).max(0.0);
        st.mean_butt_neg += (-butt).max(0.0);
        st.max_cal_neg = st.max_cal_neg.max(-cal);
        st.max_butt_neg = st.max_butt_neg.max(-butt);
    }
    st.mean_cal_neg /= m as f64;
    st.mean_butt_neg /= m as f64;
    st
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

struct RunOutcome {
    model: NnIvModel,
    history: Vec<EpochRecord>,
    epochs_run: usize,
    pruned: bool,
}

fn run(
    init: &NnIvModel,
    data: &TrainingData,
    weights: &LossWeights,
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
    prune: Option<(usize, &dyn Fn(&NnIvModel) -> bool)>,
) -> Result<RunOutcome> {
    let mut model = init.clone();
    let mut params = model.params_flat();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        model.set_params_flat(&params);
        let last = epoch == cfg.epochs;
        let (comps, grad) = evaluate(&model, data, weights, penalty, !last);
        if !comps.total.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                detail: format!("non-finite loss {comps:?} at lambda {:?}", penalty.lambda),
            });
        }
        if comps.total < best_loss {
            best_loss = comps.total;
            best.copy_from_slice(&params);
        }
        history.push(EpochRecord { epoch, loss: comps, best_so_far: best_loss });
        if let Some((at, lagging)) = prune {
            if epoch == at && lagging(&model) {
                model.set_params_flat(&best);
                return Ok(RunOutcome { model, history, epochs_run: epoch, pruned: true });
            }
        }
        if let Some(g) = grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::TrainingFailure { epoch, detail: "non-finite gradient".into() });
            }
            adam.update(&mut params, &g);
        }
    }
    model.set_params_flat(&best);
    Ok(RunOutcome { model, history, epochs_run: cfg.epochs, pruned: false })
}

const ZERO_PENALTY: f64 = 1e-12;

/// Trains the network over the penalty-weight grid and keeps the best arbitrage-free run.
///
/// Candidates run in order of increasing weights. A candidate is skipped when one with
/// componentwise smaller weights already ended arbitrage-free, and stopped early when
/// its validation error lags the best arbitrage-free run by `prune_factor`. Selection
/// minimizes validation error among arbitrage-free runs, or among all runs if none is.
pub fn train(frame: &MarketFrame, cfg: &TrainConfig) -> Result<NnFit> {
    let start = std::time::Instant::now();
    if cfg.lambda_grid.is_empty() || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("need penalty candidates, epochs and a positive learning rate".into()));
    }
    let (all, mut warnings) = TrainingData::from_frame(frame);
    if all.len() < 2 {
        return Err(Error::InvalidInput("need at least two distinct observations".into()));
    }
    let every = cfg.validation_every;
    let split = every >= 2 && all.len() >= 2 * every;
    let (train_set, valid_set) = if split {
        (all.subset(|i| i % every != every - 1), all.subset(|i| i % every == every - 1))
    } else {
        (all.clone(), all.clone())
    };
    let pts: Vec<(f64, f64)> = train_set.t.iter().zip(&train_set.kappa).map(|(a, b)| (*a, *b)).collect();
    let weights = compute_weights(&pts)?;
    warnings.extend(weights.warnings.iter().cloned());
    let grid = PenaltyGrid::new(&cfg.penalty_grid)?;
    let input = InputTransform::fit(&train_set.t, &train_set.kappa);
    let mean_iv = train_set.iv.iter().sum::<f64>() / train_set.len() as f64;
    let mut init = NnIvModel::new(&cfg.hidden, input, frame.spot(), cfg.sigma_bounds, mean_iv, cfg.seed)?;
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    init.data_domain = Some((range(&all.t), range(&all.kappa)));

    let mut order: Vec<usize> = (0..cfg.lambda_grid.len()).collect();
    let key = |l: &[f64; 3]| l.iter().map(|x| x.max(1e-300).ln()).sum::<f64>();
    order.sort_by(|&a, &b| {
        let (la, lb) = (&cfg.lambda_grid[a], &cfg.lambda_grid[b]);
        key(la).total_cmp(&key(lb)).then(la.partial_cmp(lb).unwrap_or(std::cmp::Ordering::Equal))
    });

    let mut reports: Vec<Option<CandidateReport>> = vec![None; cfg.lambda_grid.len()];
    let mut runs: Vec<Option<RunOutcome>> = (0..cfg.lambda_grid.len()).map(|_| None).collect();
    let mut best_free: Option<f64> = None;
    let prune_at = ((cfg.prune_after * cfg.epochs as f64) as usize).clamp(1, cfg.epochs);
    for &c in &order {
        let lambda = cfg.lambda_grid[c];
        let dominated = reports.iter().flatten().any(|r| {
            r.arbitrage_free && r.status == CandidateStatus::Completed && r.lambda.iter().zip(&lambda).all(|(a, b)| a <= b)
        });
        if dominated {
            reports[c] = Some(CandidateReport {
                lambda,
                status: CandidateStatus::Dominated,
                epochs_run: 0,
                training: None,
                validation_rmse: None,
                arbitrage_free: false,
            });
            continue;
        }
        let penalty = PenaltyConfig { lambda, band: cfg.band, grid: grid.clone() };
        penalty.validate()?;
        let lagging = |m: &NnIvModel| best_free.is_some_and(|b| relative_rmse(m, &valid_set) > cfg.prune_factor * b);
        let outcome = run(&init, &train_set, &weights, &penalty, cfg, Some((prune_at, &lagging)))?;
        let training = loss(&outcome.model, &train_set, &weights, &penalty);
        let validation = relative_rmse(&outcome.model, &valid_set);
        let free = training.mean_cal_neg <= ZERO_PENALTY && training.mean_butt_neg <= ZERO_PENALTY;
        let status = if outcome.pruned { CandidateStatus::Pruned } else { CandidateStatus::Completed };
        if free && !outcome.pruned {
            best_free = Some(best_free.map_or(validation, |b: f64| b.min(validation)));
        }
        log::info!("lambda {lambda:?}: {status:?} fit {:.3e} validation {validation:.3e} arbitrage-free {free}", training.fit);
        reports[c] = Some(CandidateReport {
            lambda,
            status,
            epochs_run: outcome.epochs_run,
            training: Some(training),
            validation_rmse: Some(validation),
            arbitrage_free: free,
        });
        runs[c] = Some(outcome);
    }
    let reports: Vec<CandidateReport> = reports.into_iter().map(|r| r.unwrap()).collect();
    let pick = |free_only: bool| {
        order
            .iter()
            .copied()
            .filter(|&c| runs[c].is_some() && (!free_only || reports[c].arbitrage_free))
            .min_by(|&a, &b| reports[a].validation_rmse.unwrap().total_cmp(&reports[b].validation_rmse.unwrap()))
    };
    let selected = match pick(true) {
        Some(c) => c,
        None => {
            warnings.push("no candidate is arbitrage-free on the penalty grid".into());
            pick(false).unwrap()
        }
    };
    let outcome = runs[selected].take().unwrap();
    let penalty_grid = grid_stats(&outcome.model, &grid);
    Ok(NnFit {
        report: TrainingReport {
            n_train: train_set.len(),
            n_validation: if split { valid_set.len() } else { 0 },
            mu_w: weights.mu_w,
            selected,
            candidates: reports,
            history: outcome.history,
            penalty_grid,
            warnings,
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
        model: outcome.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_vol::{dupire_terms, ThetaSurface};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64, scale: f64) -> NnIvModel {
        let input = InputTransform { mean_log_t: -0.3, std_log_t: 0.7, mean_kappa: 0.0, std_kappa: 0.2 };
        let mut m = NnIvModel::new(&[5, 4], input, 100.0, (0.01, 2.0), 0.2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut m.layers {
            l.w.iter_mut().for_each(|w| *w = scale * rng.random_range(-1.0..1.0));
        }
        m
    }

    fn flat_model(sigma: f64) -> NnIvModel {
        let mut m = small_model(0, 0.0);
        let last = m.layers.len() - 1;
        m.layers[last].b[0] = ((sigma - 0.01) / (2.0 - sigma)).ln();
        m
    }

    fn small_grid() -> PenaltyGrid {
        PenaltyGrid::new(&PenaltyGridSpec { t_range: (0.05, 5.0), n_t: 6, moneyness_range: (0.6, 1.6), n_moneyness: 7 }).unwrap()
    }

    fn toy_data() -> TrainingData {
        let mut d = TrainingData { t: vec![], kappa: vec![], iv: vec![] };
        for &t in &[0.25, 0.5, 1.0] {
            for &k in &[-0.2, 0.0, 0.2] {
                d.t.push(t);
                d.kappa.push(k);
                d.iv.push(0.2 + 0.1 * k * k - 0.02 * t);
            }
        }
        d
    }

    #[test]
    fn weights_examples() {
        let w = compute_weights(&[(0.0, 0.0), (0.0, 1.0), (0.0, 3.0)]).unwrap();
        assert_eq!(w.w, vec![1.0, 1.0, 2.0]);
        assert!((w.mu_w - 4.0 / 3.0).abs() < 1e-15);
        let w = compute_weights(&[(1.0, 0.5), (1.3, 0.9)]).unwrap();
        assert!((w.w[0] - 0.5).abs() < 1e-15 && w.w[0] == w.w[1]);
        let lattice: Vec<(f64, f64)> = (0..4).flat_map(|i| (0..5).map(move |j| (0.25 * i as f64, 0.25 * j as f64))).collect();
        assert!(compute_weights(&lattice).unwrap().w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let dup = compute_weights(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)]).unwrap();
        assert_eq!(dup.w[0], 0.0);
        assert_eq!(dup.warnings.len(), 2);
        assert!(compute_weights(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = PenaltyGrid::new(&PenaltyGridSpec::default()).unwrap();
        assert_eq!(g.len(), 5000);
        assert!((g.t[0] - 0.005).abs() < 1e-15 && (g.t[4999] - 10.0).abs() < 1e-12);
        assert!((g.kappa[0] - 0.5f64.ln()).abs() < 1e-15 && (g.kappa[99] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_generic_terms() {
        let m = small_model(3, 0.8);
        for (t, k) in [(0.3, -0.4), (1.0, 0.1), (2.5, 0.5)] {
            let th = m.theta_terms(t, k).unwrap();
            let (cal, butt) = dupire_terms(&th, k).unwrap();
            let j = m.sigma_jet(&[t], &[k]);
            let (c2, b2) = sigma_dupire(t, k, j.s[0], j.s_a[0], j.s_k[0], j.s_kk[0]);
            assert!((cal - c2).abs() < 1e-12 * (1.0 + cal.abs()));
            assert!((butt - b2).abs() < 1e-12 * (1.0 + butt.abs()));
        }
    }

    #[test]
    fn flat_model_has_no_penalty() {
        let m = flat_model(0.2);
        let d = TrainingData { t: vec![0.5, 1.0], kappa: vec![0.0, 0.1], iv: vec![0.2, 0.2] };
        let w = compute_weights(&[(0.5, 0.0), (1.0, 0.1)]).unwrap();
        let p = PenaltyConfig { lambda: [1.0, 1.0, 1.0], band: (1e-4, 4.0), grid: small_grid() };
        let c = loss(&m, &d, &w, &p);
        assert!(c.fit < 1e-14);
        assert_eq!((c.calendar, c.butterfly, c.band), (0.0, 0.0, 0.0));
        let (cal, butt) = sigma_dupire(2.0, 0.3, 0.2, 0.0, 0.0, 0.0);
        assert_eq!(butt, 1.0);
        assert!((cal - 0.04).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_is_pure_fit() {
        let m = small_model(5, 1.5);
        let d = toy_data();
        let pts: Vec<(f64, f64)> = d.t.iter().zip(&d.kappa).map(|(a, b)| (*a, *b)).collect();
        let w = compute_weights(&pts).unwrap();
        let p = PenaltyConfig { lambda: [0.0; 3], band: (1e-4, 4.0), grid: small_grid() };
        let c = loss(&m, &d, &w, &p);
        assert_eq!(c.total, c.fit);
        let s = m.implied_vol(&d.t, &d.kappa);
        let direct = (s.iter().zip(&d.iv).zip(&w.w).map(|((a, b), w)| (w * (a - b) / b).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!((c.fit - direct).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = small_model(7, 2.0);
        let d = toy_data();
        let pts: Vec<(f64, f64)> = d.t.iter().zip(&d.kappa).map(|(a, b)| (*a, *b)).collect();
        let w = compute_weights(&pts).unwrap();
        let p = PenaltyConfig { lambda: [3.0, 2.0, 5.0], band: (0.01, 0.05), grid: small_grid() };
        let (c, g) = evaluate(&m, &d, &w, &p, true);
        assert!(c.calendar > 0.0 || c.butterfly > 0.0 || c.band > 0.0, "{c:?}");
        let g = g.unwrap();
        let p0 = m.params_flat();
        let h = 1e-7;
        let mut mp = m.clone();
        for idx in 0..p0.len() {
            let mut v = p0.clone();
            v[idx] += h;
            mp.set_params_flat(&v);
            let fp = loss(&mp, &d, &w, &p).total;
            v[idx] -= 2.0 * h;
            mp.set_params_flat(&v);
            let fm = loss(&mp, &d, &w, &p).total;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[idx] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "param {idx}: {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn layer_shapes_are_consistent() {
        let m = small_model(1, 1.0);
        let shapes: Vec<(usize, usize)> = m.layers.iter().map(|l: &Layer| (l.w.nrows(), l.w.ncols())).collect();
        assert_eq!(shapes, vec![(5, 2), (4, 5), (1, 4)]);
        assert_eq!(m.n_params(), 15 + 24 + 5);
    }
}
