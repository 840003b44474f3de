use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_vol::{linspace, LocalVolGrid};
use crate::market_data::CurveSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    /// Uniform steps up to the last maturity; option maturities are added as dates.
    pub n_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Paths per parallel work unit; it changes results only through summation rounding.
    pub chunk: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { n_paths: 100_000, n_steps: 100, seed: 0, antithetic: false, chunk: 2048 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McPrice {
    pub price: f64,
    pub std_error: f64,
}

/// Monte Carlo put prices under `dS/S = (r - q)dt + σ(t, S)dW` with a log-Euler scheme.
///
/// Every sample (path, or antithetic pair) draws from its own ChaCha8 stream indexed by the
/// sample number, and chunk sums are combined in chunk order, so results depend only on
/// the seed and the configuration.
pub fn price_mc(lv: &LocalVolGrid, curves: &CurveSet, options: &[(f64, f64)], cfg: &McConfig) -> Result<Vec<McPrice>> {
    if options.is_empty() {
        return Ok(Vec::new());
    }
    if cfg.n_paths < 2 || cfg.n_steps == 0 || cfg.chunk == 0 {
        return Err(Error::InvalidInput("need at least 2 paths, 1 step and a positive chunk".into()));
    }
    for &(t, strike) in options {
        let k = curves.reduced_strike(t, strike);
        if !lv.covers(t, k) {
            return Err(Error::Domain { t, k, detail: "option outside the local vol grid".into() });
        }
    }
    let t_end = options.iter().map(|o| o.0).fold(0.0, f64::max);
    let mut dates = linspace(0.0, t_end, cfg.n_steps + 1);
    dates.extend(options.iter().map(|o| o.0));
    dates.sort_by(f64::total_cmp);
    dates.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));

    let steps: Vec<Step> = dates
        .windows(2)
        .map(|w| {
            let dt = w[1] - w[0];
            Step {
                t: w[0],
                dt,
                sqrt_dt: dt.sqrt(),
                drift: curves.drift_integral(w[1]) - curves.drift_integral(w[0]),
                deflator: (-curves.drift_integral(w[0])).exp(),
            }
        })
        .collect();
    let mut expiring: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); steps.len()];
    for (i, &(t, strike)) in options.iter().enumerate() {
        let level = dates.iter().position(|d| (d - t).abs() <= 1e-12 * t.max(1.0)).unwrap();
        expiring[level - 1].push((i, strike, curves.discount(t)));
    }

    let ln_s0 = curves.spot.ln();
    let samples = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    let n_opt = options.len();
    let chunks: Vec<(usize, usize)> =
        (0..samples).step_by(cfg.chunk).map(|a| (a, (a + cfg.chunk).min(samples))).collect();
    let partials: Vec<Vec<(f64, f64)>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut acc = vec![(0.0, 0.0); n_opt];
            let mut payoff = vec![0.0; n_opt];
            let mut z = vec![0.0; steps.len()];
            for sample in a..b {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(sample as u64);
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                payoff.iter_mut().for_each(|p| *p = 0.0);
                let legs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
                for &sign in legs {
                    let mut x = ln_s0;
                    for (m, st) in steps.iter().enumerate() {
                        let s = lv.lookup(st.t, x.exp() * st.deflator);
                        x += st.drift - 0.5 * s * s * st.dt + s * st.sqrt_dt * sign * z[m];
                        for &(i, strike, df) in &expiring[m] {
                            payoff[i] += df * (strike - x.exp()).max(0.0) / legs.len() as f64;
                        }
                    }
                }
                for (slot, &v) in acc.iter_mut().zip(&payoff) {
                    slot.0 += v;
                    slot.1 += v * v;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![(0.0, 0.0); n_opt];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.0 += p.0;
            t.1 += p.1;
        }
    }
    let n = samples as f64;
    Ok(total
        .into_iter()
        .map(|(s, s2)| {
            let mean = s / n;
            let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
            McPrice { price: mean, std_error: (var / n).sqrt() }
        })
        .collect())
}

struct Step {
    t: f64,
    dt: f64,
    sqrt_dt: f64,
    drift: f64,
    /// `exp(-∫_0^t (r - q))`, mapping spot to reduced strike.
    deflator: f64,
}
