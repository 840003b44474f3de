//! Primal-dual interior point method (Mehrotra predictor-corrector) for
//!
//! ```text
//! minimize ½ xᵀQx + cᵀx   subject to  A x ≥ b,  E x = f
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, JitteredCholesky};

/// Convex quadratic program with inequality rows `A x ≥ b` and optional equalities.
#[derive(Debug, Clone)]
pub struct QuadProgram {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: Option<DMatrix<f64>>,
    pub b_eq: Option<DVector<f64>>,
}

impl QuadProgram {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, a_ineq: DMatrix<f64>, b_ineq: DVector<f64>) -> Result<Self> {
        let p = QuadProgram { q, c, a_ineq, b_ineq, a_eq: None, b_eq: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Result<Self> {
        self.a_eq = Some(a_eq);
        self.b_eq = Some(b_eq);
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    fn validate(&self) -> Result<()> {
        let d = self.c.len();
        if self.q.nrows() != d || self.q.ncols() != d {
            return Err(Error::InvalidInput(format!("Q must be {d}x{d}")));
        }
        if self.a_ineq.ncols() != d || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(Error::InvalidInput("inequality system has inconsistent dimensions".into()));
        }
        match (&self.a_eq, &self.b_eq) {
            (None, None) => {}
            (Some(e), Some(f)) if e.ncols() == d && e.nrows() == f.len() => {}
            _ => return Err(Error::InvalidInput("equality system has inconsistent dimensions".into())),
        }
        let scale = self.q.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput("Q is not symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QpConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpConfig {
    fn default() -> Self {
        QpConfig { tol: 1e-8, max_iter: 200 }
    }
}

/// Final KKT residuals (infinity norms) and iteration count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QpDiagnostics {
    pub iterations: usize,
    pub stationarity: f64,
    pub primal_infeasibility: f64,
    pub equality_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the inequality rows (nonnegative).
    pub z: DVector<f64>,
    /// Multipliers of the equality rows.
    pub y: DVector<f64>,
    pub diagnostics: QpDiagnostics,
}

struct Residuals {
    dual: DVector<f64>,
    primal: DVector<f64>,
    eq: DVector<f64>,
}

/// Solves the program to KKT tolerance `cfg.tol`.
///
/// Convergence requires stationarity, primal feasibility, equality feasibility and
/// the complementarity gap all below `tol` (relative to the data scale where one
/// is available). The interior point phase is followed by an active-set polish, which
/// recovers full accuracy on degenerate problems where the interior point Newton
/// systems lose it. Infeasible inequality systems return [`Error::Infeasible`] with a
/// Farkas-type certificate summary.
pub fn solve_qp(p: &QuadProgram, cfg: &QpConfig) -> Result<QpSolution> {
    p.validate()?;
    let d = p.dim();
    let m = p.a_ineq.nrows();
    let empty_e = DMatrix::<f64>::zeros(0, d);
    let empty_f = DVector::<f64>::zeros(0);
    let e = p.a_eq.as_ref().unwrap_or(&empty_e);
    let f = p.b_eq.as_ref().unwrap_or(&empty_f);
    let me = e.nrows();

    let a = &p.a_ineq;
    let b = &p.b_ineq;
    let scales = Scales {
        d: 1.0 + p.c.amax().max(p.q.amax()),
        p: 1.0 + b.amax().max(a.amax()),
        e: 1.0 + f.amax().max(e.amax()),
    };

    let mut x = DVector::<f64>::zeros(d);
    let ax = a * &x;
    let mut s = DVector::from_fn(m, |i, _| (ax[i] - b[i]).max(1.0));
    let mut z = DVector::from_element(m, 1.0);
    let mut y = DVector::<f64>::zeros(me);

    let residuals = |x: &DVector<f64>, s: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| Residuals {
        dual: &p.q * x + &p.c - a.tr_mul(z) - e.tr_mul(y),
        primal: a * x - s - b,
        eq: e * x - f,
    };

    let mut best: Option<(f64, QpSolution, DVector<f64>)> = None;
    let mut last_gain = 0usize;
    for iter in 0..=cfg.max_iter {
        let r = residuals(&x, &s, &z, &y);
        let mu = if m > 0 { s.dot(&z) / m as f64 } else { 0.0 };
        let objective = p.objective(&x);
        let diag = QpDiagnostics {
            iterations: iter,
            stationarity: r.dual.amax(),
            primal_infeasibility: r.primal.amax(),
            equality_infeasibility: r.eq.amax(),
            dual_infeasibility: z.iter().fold(0.0_f64, |acc, &v| acc.max(-v)),
            complementarity: mu,
            objective,
        };
        let merit = scales.merit(&diag);
        if best.as_ref().is_none_or(|(bm, _, _)| merit < *bm) {
            if best.as_ref().is_none_or(|(bm, _, _)| merit < 0.5 * *bm) {
                last_gain = iter;
            }
            let sol = QpSolution { x: x.clone(), z: z.clone(), y: y.clone(), diagnostics: diag };
            best = Some((merit, sol, s.clone()));
        }
        // Once the gap is far below tolerance and progress has stalled, further Newton
        // steps only add rounding noise.
        let exhausted = mu <= 1e-4 * cfg.tol * (1.0 + objective.abs()) && iter >= last_gain + 3;
        if merit <= cfg.tol || exhausted || iter == cfg.max_iter {
            break;
        }
        if let Some(cert) = infeasibility_certificate(a, b, e, f, &z, &y) {
            return Err(Error::Infeasible(cert));
        }

        // Reduced Newton system: (Q + Aᵀ diag(z/s) A) dx - Eᵀ dy = rhs.
        let w = DVector::from_fn(m, |i, _| (z[i] / s[i]).sqrt());
        let mut scaled_a = a.clone();
        for (i, mut row) in scaled_a.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut h = scaled_a.tr_mul(&scaled_a);
        h += &p.q;
        let reg = 1e-12 * (1.0 + h.diagonal().amax());
        for i in 0..d {
            h[(i, i)] += reg;
        }
        let Ok(hf) = ScaledCholesky::new(&h) else { break };
        let schur = if me > 0 {
            match schur_factor(&hf, e) {
                Ok(sf) => Some(sf),
                Err(_) => break,
            }
        } else {
            None
        };

        let solve_dir = |rc: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
            // rc is the complementarity right-hand side of Z ds + S dz = -rc.
            let t = DVector::from_fn(m, |i, _| (rc[i] + z[i] * r.primal[i]) / s[i]);
            let rhs1 = -&r.dual - a.tr_mul(&t);
            let (dx, dy) = match &schur {
                None => (hf.solve(&rhs1), DVector::zeros(0)),
                Some((sf, hinv_et)) => {
                    let h_rhs = hf.solve(&rhs1);
                    let dy = sf.solve(&(-&r.eq - e * &h_rhs));
                    (h_rhs + hinv_et * &dy, dy)
                }
            };
            let ds = a * &dx + &r.primal;
            let dz = DVector::from_fn(m, |i, _| (-rc[i] - z[i] * ds[i]) / s[i]);
            (dx, ds, dz, dy)
        };

        // Predictor.
        let rc_aff = s.component_mul(&z);
        let (_, ds_a, dz_a, _) = solve_dir(&rc_aff);
        let alpha_p = max_step(&s, &ds_a).min(1.0);
        let alpha_d = max_step(&z, &dz_a).min(1.0);
        let mu_aff = if m > 0 {
            (0..m).map(|i| (s[i] + alpha_p * ds_a[i]) * (z[i] + alpha_d * dz_a[i])).sum::<f64>() / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

        // Corrector.
        let rc = DVector::from_fn(m, |i, _| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu);
        let (dx, ds, dz, dy) = solve_dir(&rc);
        let step_p = (0.995 * max_step(&s, &ds)).min(1.0);
        let step_d = (0.995 * max_step(&z, &dz)).min(1.0);
        let (nx, ns, nz, ny) = (&x + step_p * dx, &s + step_p * ds, &z + step_d * dz, &y + step_d * dy);
        if nx.iter().chain(nz.iter()).chain(ns.iter()).chain(ny.iter()).any(|v| !v.is_finite()) {
            break;
        }
        (x, s, z, y) = (nx, ns, nz, ny);
    }

    let (_, ipm, slack) = best.expect("at least one iterate is evaluated");
    if let Some(polished) = polish(p, e, f, &ipm, &slack, &scales, cfg.tol) {
        if scales.merit(&polished.diagnostics) <= cfg.tol {
            return Ok(polished);
        }
    }
    if scales.merit(&ipm.diagnostics) <= cfg.tol {
        return Ok(ipm);
    }
    let diag = ipm.diagnostics;
    Err(Error::NonConvergence {
        iterations: diag.iterations,
        detail: format!(
            "stationarity {:.3e}, primal {:.3e}, equality {:.3e}, complementarity {:.3e}",
            diag.stationarity, diag.primal_infeasibility, diag.equality_infeasibility, diag.complementarity
        ),
    })
}

struct Scales {
    d: f64,
    p: f64,
    e: f64,
}

impl Scales {
    /// Largest KKT residual relative to its tolerance scale.
    fn merit(&self, g: &QpDiagnostics) -> f64 {
        (g.stationarity / self.d)
            .max(g.primal_infeasibility / self.p)
            .max(g.equality_infeasibility / self.e)
            .max(g.dual_infeasibility / self.d)
            .max(g.complementarity / (1.0 + g.objective.abs()))
    }
}

/// Active-set refinement of an interior point iterate.
///
/// Rows with `z > s` are treated as equalities and the equality-constrained program is
/// solved by iterative refinement on a regularized KKT system. Rows whose multiplier
/// turns negative are released and violated rows are added, for a few rounds.
fn polish(
    p: &QuadProgram,
    e: &DMatrix<f64>,
    f: &DVector<f64>,
    ipm: &QpSolution,
    slack: &DVector<f64>,
    scales: &Scales,
    tol: f64,
) -> Option<QpSolution> {
    let a = &p.a_ineq;
    let b = &p.b_ineq;
    let d = p.dim();
    let m = a.nrows();
    let me = e.nrows();
    let delta = 1e-10 * (1.0 + p.q.amax());
    let mut qr = p.q.clone();
    for i in 0..d {
        qr[(i, i)] += delta;
    }
    let qf = cholesky_with_jitter(&qr, 1e-14, 1e-6).ok()?;
    let mut active: Vec<bool> = (0..m).map(|i| ipm.z[i] > slack[i]).collect();
    let mut out = None;
    for _round in 0..5 {
        let rows: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
        let ng = rows.len() + me;
        let g = DMatrix::from_fn(ng, d, |r, c| if r < rows.len() { a[(rows[r], c)] } else { e[(r - rows.len(), c)] });
        let h = DVector::from_fn(ng, |r, _| if r < rows.len() { b[rows[r]] } else { f[r - rows.len()] });
        let mut qi_gt = g.transpose();
        qf.factor.solve_mut(&mut qi_gt);
        let mut sm = &g * &qi_gt;
        for i in 0..ng {
            sm[(i, i)] += delta;
        }
        let sf = cholesky_with_jitter(&sm, 1e-14, 1e-6).ok()?;
        let mut x = DVector::<f64>::zeros(d);
        let mut lam = DVector::<f64>::zeros(ng);
        for _ in 0..30 {
            let r1 = -&p.c - &p.q * &x - g.tr_mul(&lam);
            let r2 = &h - &g * &x;
            if r1.amax() <= 1e-15 * scales.d && r2.amax() <= 1e-15 * scales.p {
                break;
            }
            let dl = sf.solve(&(&g * qf.solve(&r1) - &r2));
            let dx = qf.solve(&(&r1 - g.tr_mul(&dl)));
            x += dx;
            lam += dl;
        }
        let mut z = DVector::<f64>::zeros(m);
        for (r, &i) in rows.iter().enumerate() {
            z[i] = -lam[r];
        }
        let y = DVector::from_fn(me, |i, _| -lam[rows.len() + i]);
        let sl = a * &x - b;
        let objective = p.objective(&x);
        let diag = QpDiagnostics {
            iterations: ipm.diagnostics.iterations,
            stationarity: (&p.q * &x + &p.c - a.tr_mul(&z) - e.tr_mul(&y)).amax(),
            primal_infeasibility: sl.iter().fold(0.0_f64, |acc, &v| acc.max(-v)),
            equality_infeasibility: (e * &x - f).amax(),
            dual_infeasibility: z.iter().fold(0.0_f64, |acc, &v| acc.max(-v)),
            complementarity: if m > 0 { sl.iter().zip(z.iter()).map(|(s, z)| (s * z).abs()).sum::<f64>() / m as f64 } else { 0.0 },
            objective,
        };
        let mut changed = false;
        for i in 0..m {
            if active[i] && z[i] < -tol * scales.d {
                active[i] = false;
                changed = true;
            } else if !active[i] && sl[i] < -tol * scales.p {
                active[i] = true;
                changed = true;
            }
        }
        out = Some(QpSolution { x, z, y, diagnostics: diag });
        if !changed {
            break;
        }
    }
    out
}

/// Cholesky of `D^{-1/2} H D^{-1/2}` with `D = diag(H)`. Near an optimum `z/s` spans many
/// orders of magnitude, and the symmetric diagonal scaling keeps the factorization stable.
struct ScaledCholesky {
    chol: JitteredCholesky,
    inv_sqrt_d: DVector<f64>,
}

impl ScaledCholesky {
    fn new(h: &DMatrix<f64>) -> Result<Self> {
        let inv_sqrt_d = DVector::from_fn(h.nrows(), |i, _| 1.0 / h[(i, i)].max(f64::MIN_POSITIVE).sqrt());
        let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * inv_sqrt_d[i] * inv_sqrt_d[j]);
        Ok(ScaledCholesky { chol: cholesky_with_jitter(&scaled, 1e-14, 1e-6)?, inv_sqrt_d })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.component_mul(&self.inv_sqrt_d);
        self.chol.factor.solve_mut(&mut x);
        x.component_mul(&self.inv_sqrt_d)
    }

    fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.inv_sqrt_d);
        }
        self.chol.factor.solve_mut(&mut x);
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.inv_sqrt_d);
        }
        x
    }
}

fn schur_factor(hf: &ScaledCholesky, e: &DMatrix<f64>) -> Result<(JitteredCholesky, DMatrix<f64>)> {
    let hinv_et = hf.solve_matrix(&e.transpose());
    let s = e * &hinv_et;
    Ok((cholesky_with_jitter(&s, 1e-14, 1e-6)?, hinv_et))
}

/// Largest step in `(0, ∞)` keeping `v + step * dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter().zip(dv.iter()).filter(|(_, &d)| d < 0.0).map(|(&x, &d)| -x / d).fold(f64::INFINITY, f64::min)
}

/// Checks whether the current multipliers form a Farkas certificate:
/// `z ≥ 0`, `Aᵀz + Eᵀy ≈ 0` and `bᵀz + fᵀy > 0`.
fn infeasibility_certificate(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    e: &DMatrix<f64>,
    f: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<String> {
    let norm = z.amax().max(y.amax());
    if !(norm > 1e8) {
        return None;
    }
    let zn = z / norm;
    let yn = y / norm;
    let combo = a.tr_mul(&zn) + e.tr_mul(&yn);
    let gap = b.dot(&zn) + f.dot(&yn);
    let scale = 1.0 + a.amax().max(e.amax());
    if combo.amax() <= 1e-6 * scale && gap > 1e-6 {
        Some(format!(
            "multipliers with |Aᵀz + Eᵀy| = {:.2e} and bᵀz + fᵀy = {:.3e} > 0",
            combo.amax(),
            gap
        ))
    } else {
        None
    }
}
