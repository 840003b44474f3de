//! Dupire local volatility from price surfaces (finite differences) and from implied
//! total variance surfaces (analytic derivatives).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor under which a Dupire denominator is treated as zero.
pub const DENOM_FLOOR: f64 = 1e-8;

/// A surface of reduced put prices `p(T, k)`.
pub trait PriceSurface: Sync {
    fn reduced_price(&self, t: f64, k: f64) -> Result<f64>;
    /// `((T_min, T_max), (k_min, k_max))` on which the surface may be evaluated.
    fn domain(&self) -> ((f64, f64), (f64, f64));
    /// Node spacing `(h_T, h_k)` of the underlying representation, when it has one.
    fn node_spacing(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Implied total variance and the derivatives entering the Dupire formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaTerms {
    pub theta: f64,
    pub d_t: f64,
    pub d_k: f64,
    pub d_kk: f64,
}

/// A surface of implied total variance `Θ(T, κ)` with `κ = ln(k / S0)`.
pub trait ThetaSurface: Sync {
    fn theta_terms(&self, t: f64, kappa: f64) -> Result<ThetaTerms>;
    fn spot(&self) -> f64;
}

/// `(cal_T, butt_k)`: numerator and denominator of the implied-variance Dupire formula.
pub fn dupire_terms(terms: &ThetaTerms, kappa: f64) -> Result<(f64, f64)> {
    let ThetaTerms { theta, d_t, d_k, d_kk } = *terms;
    if !(theta > 1e-12) {
        return Err(Error::DegenerateVariance(theta));
    }
    let butt = 1.0 - kappa / theta * d_k
        + 0.25 * (-0.25 - 1.0 / theta + kappa * kappa / (theta * theta)) * d_k * d_k
        + 0.5 * d_kk;
    Ok((d_t, butt))
}

/// Rectangular evaluation grid in `(T, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub t_axis: Vec<f64>,
    pub k_axis: Vec<f64>,
}

impl EvalGrid {
    pub fn new(t_axis: Vec<f64>, k_axis: Vec<f64>) -> Result<Self> {
        for (name, ax) in [("maturity", &t_axis), ("strike", &k_axis)] {
            if ax.len() < 3 || ax.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidInput(format!(
                    "{name} axis needs at least 3 strictly increasing values"
                )));
            }
        }
        Ok(EvalGrid { t_axis, k_axis })
    }

    pub fn uniform(t: (f64, f64), n_t: usize, k: (f64, f64), n_k: usize) -> Result<Self> {
        EvalGrid::new(linspace(t.0, t.1, n_t), linspace(k.0, k.1, n_k))
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

/// Local volatility on a `(T, k)` grid; `values[i * n_k + j]` belongs to `(t_axis[i], k_axis[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalVolGrid {
    pub t_axis: Vec<f64>,
    /// Reduced strikes.
    pub k_axis: Vec<f64>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    #[serde(default)]
    pub cap: Option<f64>,
}

/// Why cells were masked during extraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub cells: usize,
    /// Denominator at or below the floor.
    pub denominator: usize,
    /// Negative numerator.
    pub numerator: usize,
    /// Surface could not be evaluated.
    pub evaluation: usize,
}

impl LocalVolGrid {
    pub fn new(t_axis: Vec<f64>, k_axis: Vec<f64>, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let g = LocalVolGrid { t_axis, k_axis, values, valid, cap: None };
        g.validate()?;
        Ok(g)
    }

    /// Constant local volatility over the given axes.
    pub fn flat(t_axis: Vec<f64>, k_axis: Vec<f64>, vol: f64) -> Result<Self> {
        let n = t_axis.len() * k_axis.len();
        LocalVolGrid::new(t_axis, k_axis, vec![vol; n], vec![true; n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t_axis.len() * self.k_axis.len();
        if self.values.len() != n || self.valid.len() != n {
            return Err(Error::Schema("local vol matrix does not match its axes".into()));
        }
        for ax in [&self.t_axis, &self.k_axis] {
            if ax.is_empty() || ax.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Schema("local vol axes must be strictly increasing".into()));
            }
        }
        if self.values.iter().zip(&self.valid).any(|(v, ok)| *ok && !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Schema("valid local vol cells must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn n_t(&self) -> usize {
        self.t_axis.len()
    }

    pub fn n_k(&self) -> usize {
        self.k_axis.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k_axis.len() + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.k_axis.len() + j]
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }

    /// Bilinear lookup with flat extrapolation beyond the axes. Meant for filled grids.
    pub fn lookup(&self, t: f64, k: f64) -> f64 {
        let (i, wt) = bracket(&self.t_axis, t);
        let (j, wk) = bracket(&self.k_axis, k);
        let nk = self.k_axis.len();
        let v = |a: usize, b: usize| self.values[a * nk + b];
        let i1 = (i + 1).min(self.t_axis.len() - 1);
        let j1 = (j + 1).min(nk - 1);
        (1.0 - wt) * ((1.0 - wk) * v(i, j) + wk * v(i, j1)) + wt * ((1.0 - wk) * v(i1, j) + wk * v(i1, j1))
    }

    pub fn covers(&self, t: f64, k: f64) -> bool {
        let eps = 1e-9;
        let (k0, k1) = (self.k_axis[0], *self.k_axis.last().unwrap());
        t > 0.0 && t <= self.t_axis.last().unwrap() * (1.0 + eps) && k >= k0 * (1.0 - eps) && k <= k1 * (1.0 + eps)
    }

    /// Replaces masked cells by their nearest valid cell (index distance, ties by scan
    /// order) and returns the filled fraction.
    pub fn fill_masked(&self) -> Result<(LocalVolGrid, f64)> {
        let valid: Vec<(usize, usize)> = (0..self.n_t())
            .flat_map(|i| (0..self.n_k()).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_valid(i, j))
            .collect();
        if valid.is_empty() {
            return Err(Error::InvalidInput("local vol grid has no valid cell to fill from".into()));
        }
        let mut out = self.clone();
        let mut filled = 0usize;
        for i in 0..self.n_t() {
            for j in 0..self.n_k() {
                if self.is_valid(i, j) {
                    continue;
                }
                let &(bi, bj) = valid
                    .iter()
                    .min_by_key(|&&(a, b)| {
                        let (di, dj) = (a as i64 - i as i64, b as i64 - j as i64);
                        di * di + dj * dj
                    })
                    .unwrap();
                let idx = i * self.n_k() + j;
                out.values[idx] = self.at(bi, bj);
                out.valid[idx] = true;
                filled += 1;
            }
        }
        Ok((out, filled as f64 / self.values.len() as f64))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["T", "k", "local_vol", "valid"])?;
        for (i, t) in self.t_axis.iter().enumerate() {
            for (j, k) in self.k_axis.iter().enumerate() {
                let idx = i * self.n_k() + j;
                w.write_record([t.to_string(), k.to_string(), self.values[idx].to_string(), self.valid[idx].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: LocalVolGrid = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LocalVolGrid::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Index of the lower bracketing knot and the weight of the upper one, clamped to the axis.
pub(crate) fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 1, 0.0);
    }
    let i = axis.partition_point(|&a| a <= x) - 1;
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FdConfig {
    pub denom_floor: f64,
    /// Minimum ratio of evaluation spacing to surface node spacing on each axis.
    pub min_coarsening: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { denom_floor: DENOM_FLOOR, min_coarsening: 2.0 }
    }
}

/// Dupire local volatility `σ = √(2 ∂_T p / (k² ∂²_k p))` by finite differences.
///
/// `∂_T` is a central difference and `∂²_k` the three-point second difference, both
/// replaced by second-order one-sided stencils on the grid edges. Cells whose
/// curvature is at most `denom_floor`, or whose time derivative is negative, are masked.
pub fn dupire_fd<S: PriceSurface + ?Sized>(surface: &S, grid: &EvalGrid, cfg: &FdConfig) -> Result<(LocalVolGrid, MaskCounts)> {
    let ((t0, t1), (k0, k1)) = surface.domain();
    let eps = 1e-9;
    let inside = |x: f64, lo: f64, hi: f64| x >= lo - eps * lo.abs().max(1.0) && x <= hi + eps * hi.abs().max(1.0);
    for &t in &grid.t_axis {
        if !inside(t, t0, t1) {
            return Err(Error::Domain { t, k: grid.k_axis[0], detail: "maturity outside the surface domain".into() });
        }
    }
    for &k in &grid.k_axis {
        if !inside(k, k0, k1) {
            return Err(Error::Domain { t: grid.t_axis[0], k, detail: "strike outside the surface domain".into() });
        }
    }
    if let Some((ht, hk)) = surface.node_spacing() {
        let min_dt = grid.t_axis.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let min_dk = grid.k_axis.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let slack = 1.0 - 1e-9;
        if min_dt < cfg.min_coarsening * ht * slack || min_dk < cfg.min_coarsening * hk * slack {
            return Err(Error::InvalidInput(format!(
                "evaluation grid spacing ({min_dt:.4}, {min_dk:.4}) is finer than {} x node spacing ({ht:.4}, {hk:.4})",
                cfg.min_coarsening
            )));
        }
    }
    let (nt, nk) = (grid.t_axis.len(), grid.k_axis.len());
    let prices: Vec<Option<f64>> = (0..nt * nk)
        .into_par_iter()
        .map(|idx| surface.reduced_price(grid.t_axis[idx / nk], grid.k_axis[idx % nk]).ok())
        .collect();
    let p = |i: usize, j: usize| prices[i * nk + j];
    let mut values = vec![0.0; nt * nk];
    let mut valid = vec![false; nt * nk];
    let mut counts = MaskCounts { cells: nt * nk, ..Default::default() };
    let ta = &grid.t_axis;
    let ka = &grid.k_axis;
    let t_stencils: Vec<Stencil> = (0..nt).map(|i| stencil(ta, i, 1)).collect();
    let k_stencils: Vec<Stencil> = (0..nk).map(|j| stencil(ka, j, 2)).collect();
    for i in 0..nt {
        for j in 0..nk {
            // Values within rounding of the stencil magnitude are taken as zero.
            let apply = |st: &Stencil, along_t: bool| -> Option<f64> {
                let (mut acc, mut mag) = (0.0, 0.0);
                for (&n, w) in st.points.iter().zip(&st.weights) {
                    let v = if along_t { p(n, j) } else { p(i, n) }? * w;
                    acc += v;
                    mag += v.abs();
                }
                Some(if acc.abs() <= 1e-13 * mag { 0.0 } else { acc })
            };
            let (Some(d_t), Some(d_kk)) = (apply(&t_stencils[i], true), apply(&k_stencils[j], false)) else {
                counts.evaluation += 1;
                continue;
            };
            let k = ka[j];
            if d_kk <= cfg.denom_floor {
                counts.denominator += 1;
            } else if d_t < 0.0 {
                counts.numerator += 1;
            } else {
                values[i * nk + j] = (2.0 * d_t / (k * k * d_kk)).sqrt();
                valid[i * nk + j] = true;
            }
        }
    }
    Ok((LocalVolGrid { t_axis: ta.clone(), k_axis: ka.clone(), values, valid, cap: None }, counts))
}

struct Stencil {
    points: Vec<usize>,
    weights: Vec<f64>,
}

/// Central three-point stencil for derivative `order` at `axis[i]`; on the edges the
/// one-sided stencil of the same accuracy order.
fn stencil(axis: &[f64], i: usize, order: usize) -> Stencil {
    let n = axis.len();
    let width = if i == 0 || i == n - 1 { (order + 2).min(n) } else { 3 };
    let start = if i == 0 { 0 } else if i == n - 1 { n - width } else { i - 1 };
    let points: Vec<usize> = (start..start + width).collect();
    let xs: Vec<f64> = points.iter().map(|&q| axis[q]).collect();
    Stencil { weights: fd_weights(axis[i], &xs, order), points }
}

/// Finite-difference weights for the `order`-th derivative at `x0` (Fornberg's recursion).
fn fd_weights(x0: f64, xs: &[f64], order: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] *= c4 / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Dupire local volatility `σ = √(cal_T / butt_k)` from an implied total variance surface.
pub fn dupire_iv<S: ThetaSurface + ?Sized>(surface: &S, grid: &EvalGrid, denom_floor: f64) -> Result<(LocalVolGrid, MaskCounts)> {
    let (nt, nk) = (grid.t_axis.len(), grid.k_axis.len());
    let spot = surface.spot();
    let cells: Vec<std::result::Result<f64, u8>> = (0..nt * nk)
        .into_par_iter()
        .map(|idx| {
            let (t, k) = (grid.t_axis[idx / nk], grid.k_axis[idx % nk]);
            let kappa = (k / spot).ln();
            let terms = surface.theta_terms(t, kappa).map_err(|_| 0u8)?;
            let (cal, butt) = dupire_terms(&terms, kappa).map_err(|_| 0u8)?;
            if butt <= denom_floor {
                Err(1)
            } else if cal < 0.0 {
                Err(2)
            } else {
                Ok((cal / butt).sqrt())
            }
        })
        .collect();
    let mut counts = MaskCounts { cells: nt * nk, ..Default::default() };
    let mut values = vec![0.0; nt * nk];
    let mut valid = vec![false; nt * nk];
    for (idx, c) in cells.into_iter().enumerate() {
        match c {
            Ok(v) => {
                values[idx] = v;
                valid[idx] = true;
            }
            Err(0) => counts.evaluation += 1,
            Err(1) => counts.denominator += 1,
            Err(_) => counts.numerator += 1,
        }
    }
    Ok((LocalVolGrid { t_axis: grid.t_axis.clone(), k_axis: grid.k_axis.clone(), values, valid, cap: None }, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapSummary {
    pub cells: usize,
    pub cap: f64,
    pub capped_fraction: f64,
    pub masked_fraction: f64,
    pub fully_masked: bool,
    /// Extremes over valid cells before capping; `None` when every cell is masked.
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Caps valid values at `cap` for export and summarizes the grid.
pub fn cap_and_report(grid: &LocalVolGrid, cap: f64) -> (LocalVolGrid, CapSummary) {
    let mut out = grid.clone();
    let mut capped = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, ok) in out.values.iter_mut().zip(&grid.valid) {
        if !*ok {
            continue;
        }
        lo = lo.min(*v);
        hi = hi.max(*v);
        if *v > cap {
            *v = cap;
            capped += 1;
        }
    }
    out.cap = Some(cap);
    let n = grid.values.len();
    let masked = grid.valid.iter().filter(|v| !**v).count();
    let any = masked < n;
    let summary = CapSummary {
        cells: n,
        cap,
        capped_fraction: capped as f64 / n.max(1) as f64,
        masked_fraction: masked as f64 / n.max(1) as f64,
        fully_masked: !any,
        min: any.then_some(lo),
        max: any.then_some(hi),
    };
    (out, summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::black_scholes::{bs_put, BsQuote};

    struct Bs(f64);
    impl PriceSurface for Bs {
        fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
            Ok(bs_put(&BsQuote { forward: 100.0, strike: k, maturity: t, vol: self.0, discount: 1.0 }))
        }
        fn domain(&self) -> ((f64, f64), (f64, f64)) {
            ((0.05, 3.0), (40.0, 200.0))
        }
    }

    struct Poly;
    impl PriceSurface for Poly {
        fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
            Ok(0.3 * t + 0.01 * (k - 90.0).powi(2) + 2.0)
        }
        fn domain(&self) -> ((f64, f64), (f64, f64)) {
            ((0.0, 2.0), (50.0, 150.0))
        }
    }

    struct Affine(f64);
    impl PriceSurface for Affine {
        fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
            Ok(self.0 * t + 0.5 * k)
        }
        fn domain(&self) -> ((f64, f64), (f64, f64)) {
            ((0.0, 2.0), (50.0, 150.0))
        }
    }

    struct FlatTheta(f64);
    impl ThetaSurface for FlatTheta {
        fn theta_terms(&self, t: f64, _kappa: f64) -> Result<ThetaTerms> {
            Ok(ThetaTerms { theta: self.0 * self.0 * t, d_t: self.0 * self.0, d_k: 0.0, d_kk: 0.0 })
        }
        fn spot(&self) -> f64 {
            100.0
        }
    }

    #[test]
    fn stencil_weights() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert_eq!(w, vec![1.0, -2.0, 1.0]);
        let w = fd_weights(0.0, &[0.0, 1.0, 2.0], 1);
        assert!((w[0] + 1.5).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15 && (w[2] + 0.5).abs() < 1e-15);
        let w = fd_weights(0.0, &[0.0, 1.0, 2.0, 3.0], 2);
        for (a, b) in w.iter().zip([2.0, -5.0, 4.0, -1.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_black_scholes_recovers_vol() {
        let grid = EvalGrid::uniform((0.25, 2.0), 30, (70.0, 130.0), 30).unwrap();
        let (lv, _) = dupire_fd(&Bs(0.2), &grid, &FdConfig::default()).unwrap();
        for i in 1..29 {
            for j in 1..29 {
                assert!(lv.is_valid(i, j));
                assert!((lv.at(i, j) - 0.2).abs() < 0.005, "{} at ({i},{j})", lv.at(i, j));
            }
        }
    }

    #[test]
    fn exact_for_quadratic_in_k_linear_in_t() {
        let grid = EvalGrid::new(vec![0.2, 0.5, 1.1, 1.6], vec![60.0, 75.0, 80.0, 110.0, 140.0]).unwrap();
        let (lv, _) = dupire_fd(&Poly, &grid, &FdConfig::default()).unwrap();
        for i in 0..4 {
            for (j, k) in grid.k_axis.iter().enumerate() {
                let expect = (2.0 * 0.3 / (k * k * 0.02)).sqrt();
                assert!((lv.at(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn masks_zero_curvature_and_zero_numerator() {
        let grid = EvalGrid::uniform((0.5, 1.5), 5, (60.0, 140.0), 5).unwrap();
        let (lv, counts) = dupire_fd(&Affine(1.0), &grid, &FdConfig::default()).unwrap();
        assert!(lv.valid.iter().all(|v| !v));
        assert_eq!(counts.denominator, 25);
        struct Still;
        impl PriceSurface for Still {
            fn reduced_price(&self, _t: f64, k: f64) -> Result<f64> {
                Ok(0.01 * k * k)
            }
            fn domain(&self) -> ((f64, f64), (f64, f64)) {
                ((0.0, 2.0), (50.0, 150.0))
            }
        }
        let (lv, _) = dupire_fd(&Still, &grid, &FdConfig::default()).unwrap();
        assert!(lv.valid.iter().all(|v| *v));
        assert!(lv.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_grid_outside_domain_or_too_fine() {
        let grid = EvalGrid::uniform((0.5, 2.5), 5, (60.0, 140.0), 5).unwrap();
        assert!(matches!(dupire_fd(&Poly, &grid, &FdConfig::default()), Err(Error::Domain { .. })));
        struct Noded;
        impl PriceSurface for Noded {
            fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
                Poly.reduced_price(t, k)
            }
            fn domain(&self) -> ((f64, f64), (f64, f64)) {
                Poly.domain()
            }
            fn node_spacing(&self) -> Option<(f64, f64)> {
                Some((0.1, 5.0))
            }
        }
        let fine = EvalGrid::uniform((0.5, 1.5), 11, (60.0, 140.0), 5).unwrap();
        assert!(dupire_fd(&Noded, &fine, &FdConfig::default()).is_err());
        let coarse = EvalGrid::uniform((0.5, 1.5), 6, (60.0, 140.0), 5).unwrap();
        assert!(dupire_fd(&Noded, &coarse, &FdConfig::default()).is_ok());
    }

    #[test]
    fn flat_theta_gives_flat_local_vol() {
        let grid = EvalGrid::uniform((0.1, 2.0), 6, (60.0, 160.0), 7).unwrap();
        let (lv, counts) = dupire_iv(&FlatTheta(0.2), &grid, DENOM_FLOOR).unwrap();
        assert_eq!(counts.denominator + counts.numerator + counts.evaluation, 0);
        assert!(lv.values.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let t = ThetaTerms { theta: 0.04, d_t: 0.04, d_k: 0.0, d_kk: 0.0 };
        assert_eq!(dupire_terms(&t, 0.3).unwrap(), (0.04, 1.0));
        assert!(matches!(dupire_terms(&ThetaTerms { theta: 0.0, ..t }, 0.0), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn negative_calendar_is_masked() {
        struct Decreasing;
        impl ThetaSurface for Decreasing {
            fn theta_terms(&self, t: f64, _kappa: f64) -> Result<ThetaTerms> {
                let d_t = if t > 1.0 { -0.01 } else { 0.04 };
                Ok(ThetaTerms { theta: 0.04, d_t, d_k: 0.0, d_kk: 0.0 })
            }
            fn spot(&self) -> f64 {
                100.0
            }
        }
        let grid = EvalGrid::uniform((0.5, 1.5), 5, (80.0, 120.0), 3).unwrap();
        let (lv, counts) = dupire_iv(&Decreasing, &grid, DENOM_FLOOR).unwrap();
        assert_eq!(counts.numerator, 6);
        assert_eq!(lv.valid.iter().filter(|v| !**v).count(), 6);
    }

    #[test]
    fn capping_and_summary() {
        let mut g = LocalVolGrid::flat(vec![0.5, 1.0], vec![90.0, 100.0, 110.0], 0.2).unwrap();
        let (same, s) = cap_and_report(&g, 2.0);
        assert_eq!(same.values, g.values);
        assert_eq!(s.capped_fraction, 0.0);
        g.values[4] = 3.5;
        let (capped, s) = cap_and_report(&g, 2.0);
        assert_eq!(capped.values[4], 2.0);
        assert!((s.capped_fraction - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(s.max, Some(3.5));
        g.valid = vec![false; 6];
        let (_, s) = cap_and_report(&g, 2.0);
        assert!(s.fully_masked);
        assert_eq!(s.masked_fraction, 1.0);
    }

    #[test]
    fn fill_uses_nearest_valid_cell() {
        let mut g = LocalVolGrid::flat(vec![0.5, 1.0, 1.5], vec![90.0, 100.0, 110.0], 0.2).unwrap();
        g.values[8] = 0.4;
        g.valid[0] = false;
        g.valid[7] = false;
        let (f, frac) = g.fill_masked().unwrap();
        assert!(f.valid.iter().all(|v| *v));
        assert_eq!(f.values[7], 0.2);
        assert!((frac - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn lookup_and_round_trips() {
        let g = LocalVolGrid::new(vec![0.0, 1.0], vec![90.0, 110.0], vec![0.1, 0.3, 0.2, 0.4], vec![true; 4]).unwrap();
        assert!((g.lookup(0.5, 100.0) - 0.25).abs() < 1e-15);
        assert_eq!(g.lookup(5.0, 500.0), 0.4);
        assert_eq!(g.lookup(-1.0, 10.0), 0.1);
        assert_eq!(LocalVolGrid::from_json(&g.to_json().unwrap()).unwrap(), g);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("T,k,local_vol,valid\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
