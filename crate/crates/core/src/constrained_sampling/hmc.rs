//! Exact Hamiltonian Monte Carlo for Gaussians truncated to a polyhedron.
//!
//! After whitening `x = μ + L w`, the target is a standard normal in `w` restricted to
//! `F w + g ≥ 0` with `F = A L` and `g = A μ - b`. Between walls the Hamiltonian flow is
//! `w(t) = v sin t + w₀ cos t`, so every wall-hitting time has a closed form and the
//! velocity is reflected off the hit wall. No step size is involved.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;

/// `N(mean, covariance)` restricted to `{x : A x ≥ b}`.
#[derive(Debug, Clone)]
pub struct TruncatedGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl TruncatedGaussian {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d || a.ncols() != d || a.nrows() != b.len() {
            return Err(Error::InvalidInput("truncated Gaussian dimensions are inconsistent".into()));
        }
        Ok(TruncatedGaussian { mean, covariance, a, b })
    }

    /// Smallest slack `min(A x - b)`; `+inf` without constraints.
    pub fn min_slack(&self, x: &DVector<f64>) -> f64 {
        (&self.a * x - &self.b).iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HmcConfig {
    pub burn_in: usize,
    /// Integration time of each trajectory.
    pub travel_time: f64,
    /// Bounce budget per trajectory before it is discarded and redrawn.
    pub max_bounces: usize,
    /// Row count above which `F Fᵀ` is not cached.
    pub gram_cache_limit: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig { burn_in: 100, travel_time: FRAC_PI_2, max_bounces: 100_000, gram_cache_limit: 3000 }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// One sample per row.
    pub samples: DMatrix<f64>,
    /// Ridge added to the covariance diagonal before factorization.
    pub jitter: f64,
    pub bounces: usize,
    /// Trajectories discarded because rounding pushed the endpoint across a wall.
    pub rejected_trajectories: usize,
}

/// Whitened sampler state shared by all chains.
struct Whitened {
    l: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DVector<f64>,
    f_norm_sq: DVector<f64>,
    gram: Option<DMatrix<f64>>,
    w0: DVector<f64>,
    jitter: f64,
}

fn whiten(tg: &TruncatedGaussian, init: &DVector<f64>, cfg: &HmcConfig) -> Result<Whitened> {
    let d = tg.mean.len();
    if init.len() != d {
        return Err(Error::InvalidInput("initial point has the wrong dimension".into()));
    }
    let slack = tg.min_slack(init);
    if !(slack > 0.0) {
        return Err(Error::Precondition(format!("initial point is not strictly feasible (min slack {slack:e})")));
    }
    // Plain factorization first, then a ridge of 1e-10 * trace / d, escalated if needed.
    let chol = cholesky_with_jitter(&tg.covariance, 1e-10, 1e-6)?;
    let l = chol.l();
    let f = &tg.a * &l;
    let g = &tg.a * &tg.mean - &tg.b;
    let w0 = l
        .solve_lower_triangular(&(init - &tg.mean))
        .ok_or_else(|| Error::Conditioning("singular covariance factor".into()))?;
    let whitened_slack = (&f * &w0 + &g).iter().copied().fold(f64::INFINITY, f64::min);
    if !(whitened_slack >= 1e-12_f64.min(slack)) {
        return Err(Error::Precondition(format!(
            "initial point is not strictly feasible after whitening (min slack {whitened_slack:e})"
        )));
    }
    let f_norm_sq = DVector::from_fn(f.nrows(), |i, _| f.row(i).norm_squared());
    let gram = if f.nrows() <= cfg.gram_cache_limit { Some(&f * f.transpose()) } else { None };
    Ok(Whitened { l, f, g, f_norm_sq, gram, w0, jitter: chol.jitter })
}

/// Earliest time in `(eps, limit)` at which constraint `j` is crossed outward.
#[inline]
fn hit_time(fv: f64, fw: f64, g: f64) -> Option<f64> {
    let u = fv.hypot(fw);
    if !(u > g) || u == 0.0 {
        return None;
    }
    let phi = fv.atan2(fw);
    let mut t = phi + (-g / u).clamp(-1.0, 1.0).acos();
    let two_pi = 2.0 * PI;
    while t < 0.0 {
        t += two_pi;
    }
    while t >= two_pi {
        t -= two_pi;
    }
    (t > 1e-10).then_some(t)
}

struct Chain<'a> {
    wh: &'a Whitened,
    tg: &'a TruncatedGaussian,
    cfg: HmcConfig,
    w: DVector<f64>,
    rng: ChaCha8Rng,
    bounces: usize,
    rejected: usize,
}

impl Chain<'_> {
    fn trajectory(&mut self) -> Option<DVector<f64>> {
        let wh = self.wh;
        let d = self.w.len();
        let mut v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut self.rng));
        let mut w = self.w.clone();
        let mut fw = &wh.f * &w;
        let mut fv = &wh.f * &v;
        let mut remaining = self.cfg.travel_time;
        let mut bounces = 0usize;
        loop {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..fw.len() {
                if let Some(t) = hit_time(fv[j], fw[j], wh.g[j]) {
                    if t < remaining && best.is_none_or(|(_, bt)| t < bt) {
                        best = Some((j, t));
                    }
                }
            }
            let t = best.map_or(remaining, |(_, t)| t);
            let (sn, cs) = t.sin_cos();
            let w_new = &v * sn + &w * cs;
            let v_new = &v * cs - &w * sn;
            let fw_new = &fv * sn + &fw * cs;
            let fv_new = &fv * cs - &fw * sn;
            w = w_new;
            v = v_new;
            fw = fw_new;
            fv = fv_new;
            remaining -= t;
            let Some((h, _)) = best else { break };
            bounces += 1;
            if bounces > self.cfg.max_bounces {
                self.bounces += bounces;
                return None;
            }
            let alpha = 2.0 * fv[h] / wh.f_norm_sq[h];
            let fh = wh.f.row(h).transpose();
            v.axpy(-alpha, &fh, 1.0);
            match &wh.gram {
                Some(gram) => fv.axpy(-alpha, &gram.column(h), 1.0),
                None => fv.axpy(-alpha, &(&wh.f * &fh), 1.0),
            }
        }
        self.bounces += bounces;
        let x = &self.tg.mean + &wh.l * &w;
        if self.tg.min_slack(&x) >= 0.0 && (&wh.f * &w + &wh.g).iter().all(|&c| c >= 0.0) {
            self.w = w;
            Some(x)
        } else {
            None
        }
    }

    fn next_sample(&mut self) -> Result<DVector<f64>> {
        for _ in 0..1000 {
            if let Some(x) = self.trajectory() {
                return Ok(x);
            }
            self.rejected += 1;
        }
        Err(Error::NonConvergence {
            iterations: 1000,
            detail: "every trajectory ended outside the support".into(),
        })
    }
}

fn run_chain(
    tg: &TruncatedGaussian,
    wh: &Whitened,
    n_samples: usize,
    seed: u64,
    cfg: &HmcConfig,
) -> Result<(Vec<DVector<f64>>, usize, usize)> {
    let mut chain = Chain {
        wh,
        tg,
        cfg: *cfg,
        w: wh.w0.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        bounces: 0,
        rejected: 0,
    };
    for _ in 0..cfg.burn_in {
        chain.next_sample()?;
    }
    let samples = (0..n_samples).map(|_| chain.next_sample()).collect::<Result<Vec<_>>>()?;
    Ok((samples, chain.bounces, chain.rejected))
}

fn to_rows(d: usize, samples: &[DVector<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(samples.len(), d);
    for (i, s) in samples.iter().enumerate() {
        out.set_row(i, &s.transpose());
    }
    out
}

/// Draws `n_samples` from the truncated Gaussian with one chain started at `init`.
///
/// Every returned sample satisfies `A x ≥ b` in the original coordinates; a trajectory
/// whose endpoint fails that check through rounding is discarded and redrawn.
pub fn sample_truncated(
    tg: &TruncatedGaussian,
    init: &DVector<f64>,
    n_samples: usize,
    seed: u64,
    cfg: &HmcConfig,
) -> Result<SampleOutput> {
    let wh = whiten(tg, init, cfg)?;
    let (samples, bounces, rejected) = run_chain(tg, &wh, n_samples, seed, cfg)?;
    Ok(SampleOutput {
        samples: to_rows(tg.mean.len(), &samples),
        jitter: wh.jitter,
        bounces,
        rejected_trajectories: rejected,
    })
}

/// Runs `n_chains` independent chains in parallel, chain `c` seeded with `seed + c`.
/// Rows are ordered chain by chain, so the output does not depend on the thread count.
pub fn sample_truncated_chains(
    tg: &TruncatedGaussian,
    init: &DVector<f64>,
    n_chains: usize,
    samples_per_chain: usize,
    seed: u64,
    cfg: &HmcConfig,
) -> Result<SampleOutput> {
    let wh = whiten(tg, init, cfg)?;
    let runs = (0..n_chains)
        .into_par_iter()
        .map(|c| run_chain(tg, &wh, samples_per_chain, seed.wrapping_add(c as u64), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut all = Vec::with_capacity(n_chains * samples_per_chain);
    let (mut bounces, mut rejected) = (0, 0);
    for (s, b, r) in runs {
        all.extend(s);
        bounces += b;
        rejected += r;
    }
    Ok(SampleOutput {
        samples: to_rows(tg.mean.len(), &all),
        jitter: wh.jitter,
        bounces,
        rejected_trajectories: rejected,
    })
}
