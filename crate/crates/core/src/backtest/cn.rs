use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_vol::{linspace, LocalVolGrid};
use crate::market_data::CurveSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnConfig {
    /// Uniform time steps up to the last maturity; requested maturities are added as levels.
    pub n_t: usize,
    /// Strike nodes, boundaries included.
    pub n_k: usize,
    /// Reduced-strike domain; defaults to the local vol strike axis.
    pub k_range: Option<(f64, f64)>,
    /// Leading steps replaced by two implicit half steps each.
    pub rannacher_steps: usize,
}

impl Default for CnConfig {
    fn default() -> Self {
        CnConfig { n_t: 100, n_k: 100, k_range: None, rannacher_steps: 2 }
    }
}

/// Reduced put prices on the PDE grid; `values[n * n_k + j]` is `p(t_axis[n], k_axis[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnSurface {
    pub t_axis: Vec<f64>,
    pub k_axis: Vec<f64>,
    pub values: Vec<f64>,
    /// Negative values found and clamped to zero.
    pub clamped: usize,
    pub most_negative: f64,
}

/// Solves `a x = d` for a tridiagonal `a` given by `(lower, diag, upper)`.
pub(crate) fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], d: &mut [f64], scratch: &mut Vec<f64>) {
    let n = diag.len();
    scratch.clear();
    scratch.resize(n, 0.0);
    let c = scratch;
    c[0] = upper[0] / diag[0];
    d[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / m;
        }
        d[i] = (d[i] - lower[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
}

/// Forward Dupire equation `∂_T p = ½σ²k² ∂²_k p` in reduced variables by Crank-Nicolson,
/// from `p(0, k) = (k - S0)⁺` with `p = 0` and `p = k_max - S0` on the strike boundaries.
pub fn price_cn(lv: &LocalVolGrid, curves: &CurveSet, cfg: &CnConfig, maturities: &[f64]) -> Result<CnSurface> {
    if cfg.n_t < 1 || cfg.n_k < 3 {
        return Err(Error::InvalidInput("PDE grid needs n_t >= 1 and n_k >= 3".into()));
    }
    let s0 = curves.spot;
    let (k_lo, k_hi) = cfg.k_range.unwrap_or((lv.k_axis[0], *lv.k_axis.last().unwrap()));
    if !(k_lo >= 0.0 && k_hi > k_lo && k_lo < s0 && k_hi > s0) {
        return Err(Error::InvalidInput(format!("strike domain [{k_lo}, {k_hi}] must bracket the spot {s0}")));
    }
    let lv_t_max = *lv.t_axis.last().unwrap();
    let t_end = maturities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_end = if t_end.is_finite() { t_end } else { lv_t_max };
    for &t in maturities {
        if !(t > 0.0) || t > lv_t_max * (1.0 + 1e-9) {
            return Err(Error::Domain { t, k: s0, detail: format!("maturity outside (0, {lv_t_max}]") });
        }
    }
    let mut levels = linspace(0.0, t_end, cfg.n_t + 1);
    levels.extend_from_slice(maturities);
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));

    let n = cfg.n_k;
    let k_axis = linspace(k_lo, k_hi, n);
    let dk = (k_hi - k_lo) / (n - 1) as f64;
    let mut p: Vec<f64> = k_axis.iter().map(|k| (k - s0).max(0.0)).collect();
    p[0] = 0.0;
    p[n - 1] = k_hi - s0;
    let mut values = Vec::with_capacity(levels.len() * n);
    values.extend_from_slice(&p);

    let m = n - 2;
    let (mut lower, mut diag, mut upper, mut rhs) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut coef = vec![0.0; m];
    let mut scratch = Vec::new();
    let mut clamped = 0usize;
    let mut most_negative = 0.0f64;
    let mut step = |p: &mut Vec<f64>, t_mid: f64, dt: f64, theta: f64| {
        for i in 0..m {
            let k = k_axis[i + 1];
            let s = lv.lookup(t_mid, k);
            coef[i] = 0.5 * s * s * k * k / (dk * dk);
        }
        for i in 0..m {
            let a = coef[i];
            let lap = p[i] - 2.0 * p[i + 1] + p[i + 2];
            rhs[i] = p[i + 1] + (1.0 - theta) * dt * a * lap;
            lower[i] = -theta * dt * a;
            upper[i] = -theta * dt * a;
            diag[i] = 1.0 + 2.0 * theta * dt * a;
        }
        rhs[0] -= lower[0] * p[0];
        rhs[m - 1] -= upper[m - 1] * p[n - 1];
        thomas(&lower, &diag, &upper, &mut rhs, &mut scratch);
        p[1..n - 1].copy_from_slice(&rhs);
    };
    for (idx, w) in levels.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let dt = t1 - t0;
        if idx < cfg.rannacher_steps {
            step(&mut p, t0 + 0.25 * dt, 0.5 * dt, 1.0);
            step(&mut p, t0 + 0.75 * dt, 0.5 * dt, 1.0);
        } else {
            step(&mut p, t0 + 0.5 * dt, dt, 0.5);
        }
        for v in p.iter_mut() {
            if *v < 0.0 {
                most_negative = most_negative.min(*v);
                clamped += 1;
                *v = 0.0;
            }
        }
        values.extend_from_slice(&p);
    }
    if clamped > 0 {
        warn!("Crank-Nicolson produced {clamped} negative values (min {most_negative:.3e}); clamped to zero");
    }
    Ok(CnSurface { t_axis: levels, k_axis, values, clamped, most_negative })
}

impl CnSurface {
    fn level(&self, n: usize) -> &[f64] {
        let nk = self.k_axis.len();
        &self.values[n * nk..(n + 1) * nk]
    }

    fn interp_k(&self, row: &[f64], k: f64) -> f64 {
        let nk = self.k_axis.len();
        let (k0, k1) = (self.k_axis[0], self.k_axis[nk - 1]);
        let h = (k1 - k0) / (nk - 1) as f64;
        let x = (k - k0) / h;
        let j = (x.floor() as isize).clamp(0, nk as isize - 2) as usize;
        if j == 0 || j + 2 >= nk {
            let w = x - j as f64;
            return (1.0 - w) * row[j] + w * row[j + 1];
        }
        let u = x - j as f64;
        let (a, b, c, d) = (row[j - 1], row[j], row[j + 1], row[j + 2]);
        -u * (u - 1.0) * (u - 2.0) / 6.0 * a + (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0 * b
            - (u + 1.0) * u * (u - 2.0) / 2.0 * c
            + (u + 1.0) * u * (u - 1.0) / 6.0 * d
    }

    /// Reduced price at `(T, k)`: cubic in `k` on interior cells, linear in `T` between levels.
    pub fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
        let nk = self.k_axis.len();
        let t_max = *self.t_axis.last().unwrap();
        if !(0.0..=t_max * (1.0 + 1e-12)).contains(&t) || k < self.k_axis[0] || k > self.k_axis[nk - 1] {
            return Err(Error::Domain { t, k, detail: "outside the PDE grid".into() });
        }
        let (i, w) = crate::local_vol::bracket(&self.t_axis, t);
        let a = self.interp_k(self.level(i), k);
        if w == 0.0 {
            return Ok(a.max(0.0));
        }
        let b = self.interp_k(self.level(i + 1), k);
        Ok(((1.0 - w) * a + w * b).max(0.0))
    }
}

/// Currency put prices of `(T, K)` options from a Crank-Nicolson sweep.
pub fn price_options_cn(lv: &LocalVolGrid, curves: &CurveSet, options: &[(f64, f64)], cfg: &CnConfig) -> Result<(Vec<f64>, CnSurface)> {
    let maturities: Vec<f64> = options.iter().map(|o| o.0).collect();
    let surface = price_cn(lv, curves, cfg, &maturities)?;
    let prices = options
        .iter()
        .map(|&(t, strike)| {
            let k = curves.reduced_strike(t, strike);
            Ok(curves.price_from_reduced(t, surface.reduced_price(t, k)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((prices, surface))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::black_scholes::{bs_put, BsQuote};

    fn flat(vol: f64) -> LocalVolGrid {
        LocalVolGrid::flat(vec![0.0, 2.0], vec![20.0, 300.0], vol).unwrap()
    }

    #[test]
    fn thomas_solves_tridiagonal() {
        let (l, d, u) = (vec![0.0, 1.0, 2.0], vec![4.0, 5.0, 6.0], vec![1.0, 1.0, 0.0]);
        let x = [1.0, -2.0, 3.0];
        let mut b = vec![4.0 * 1.0 - 2.0, 1.0 - 10.0 + 3.0, -4.0 + 18.0];
        thomas(&l, &d, &u, &mut b, &mut Vec::new());
        for (a, e) in b.iter().zip(x) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_vol_keeps_payoff() {
        let curves = CurveSet::flat(100.0, 0.0, 0.0);
        let s = price_cn(&flat(0.0), &curves, &CnConfig::default(), &[0.5, 1.0]).unwrap();
        for n in 0..s.t_axis.len() {
            for (j, k) in s.k_axis.iter().enumerate() {
                assert!((s.level(n)[j] - (k - 100.0).max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_vol_matches_black_scholes() {
        let curves = CurveSet::flat(100.0, 0.0, 0.0);
        let cfg = CnConfig { n_t: 200, n_k: 400, ..Default::default() };
        let s = price_cn(&flat(0.2), &curves, &cfg, &[0.25, 1.0, 2.0]).unwrap();
        assert_eq!(s.clamped, 0);
        for &t in &[0.25, 1.0, 2.0] {
            for &k in &[80.0, 95.0, 100.0, 110.0, 125.0] {
                let exact = bs_put(&BsQuote { forward: 100.0, strike: k, maturity: t, vol: 0.2, discount: 1.0 });
                let got = s.reduced_price(t, k).unwrap();
                assert!((got - exact).abs() < 5e-3, "T={t} k={k}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn output_is_monotone_in_t_and_convex_in_k() {
        let curves = CurveSet::flat(100.0, 0.0, 0.0);
        let mut lv = LocalVolGrid::flat(vec![0.0, 1.0, 2.0], vec![20.0, 100.0, 300.0], 0.2).unwrap();
        lv.values = vec![0.3, 0.2, 0.15, 0.25, 0.2, 0.1, 0.4, 0.3, 0.2];
        let s = price_cn(&lv, &curves, &CnConfig::default(), &[]).unwrap();
        let nk = s.k_axis.len();
        for n in 0..s.t_axis.len() {
            let row = s.level(n);
            for j in 1..nk - 1 {
                assert!(row[j - 1] - 2.0 * row[j] + row[j + 1] >= -1e-8);
            }
            if n > 0 {
                let prev = s.level(n - 1);
                for j in 0..nk {
                    assert!(row[j] - prev[j] >= -1e-8);
                }
            }
        }
    }

    #[test]
    fn rejects_maturity_beyond_grid() {
        let curves = CurveSet::flat(100.0, 0.0, 0.0);
        assert!(matches!(price_cn(&flat(0.2), &curves, &CnConfig::default(), &[2.5]), Err(Error::Domain { .. })));
    }
}
