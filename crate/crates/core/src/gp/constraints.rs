use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::BasisGrid;
use crate::linalg::sparse_rows_times;

/// Which no-arbitrage family a constraint row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// `ϱ[i+1, j] - ϱ[i, j] ≥ 0`
    Monotone,
    /// `ϱ[i, j+2] - 2 ϱ[i, j+1] + ϱ[i, j] ≥ 0`
    Convex,
    /// `ϱ[i, j] ≥ 0`
    Nonnegative,
}

/// One sparse row of `A ϱ ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub kind: ConstraintKind,
    pub entries: Vec<(usize, f64)>,
}

impl ConstraintRow {
    pub fn apply(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, c)| c * x[i]).sum()
    }
}

/// Linear no-arbitrage system over node values; the right-hand side is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSystem {
    pub rows: Vec<ConstraintRow>,
    pub n_nodes: usize,
}

/// Count of violated rows per family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub monotone: usize,
    pub convex: usize,
    pub nonnegative: usize,
    pub worst: f64,
}

impl ViolationCounts {
    pub fn total(&self) -> usize {
        self.monotone + self.convex + self.nonnegative
    }
}

/// Monotonicity in maturity, convexity in strike and nonnegativity at every node.
pub fn build_constraints(grid: &BasisGrid) -> ConstraintSystem {
    let mut rows = Vec::with_capacity(3 * grid.len());
    for i in 0..grid.n_t - 1 {
        for j in 0..grid.n_k {
            rows.push(ConstraintRow {
                kind: ConstraintKind::Monotone,
                entries: vec![(grid.index(i + 1, j), 1.0), (grid.index(i, j), -1.0)],
            });
        }
    }
    for i in 0..grid.n_t {
        for j in 0..grid.n_k - 2 {
            rows.push(ConstraintRow {
                kind: ConstraintKind::Convex,
                entries: vec![(grid.index(i, j + 2), 1.0), (grid.index(i, j + 1), -2.0), (grid.index(i, j), 1.0)],
            });
        }
    }
    for idx in 0..grid.len() {
        rows.push(ConstraintRow { kind: ConstraintKind::Nonnegative, entries: vec![(idx, 1.0)] });
    }
    ConstraintSystem { rows, n_nodes: grid.len() }
}

impl ConstraintSystem {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, kind: ConstraintKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    /// Row values `A ϱ`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.apply(x)).collect()
    }

    pub fn min_slack(&self, x: &[f64]) -> f64 {
        self.rows.iter().map(|r| r.apply(x)).fold(f64::INFINITY, f64::min)
    }

    /// Rows below `-tol`, per family.
    pub fn violations(&self, x: &[f64], tol: f64) -> ViolationCounts {
        let mut out = ViolationCounts::default();
        for r in &self.rows {
            let v = r.apply(x);
            if v < -tol {
                match r.kind {
                    ConstraintKind::Monotone => out.monotone += 1,
                    ConstraintKind::Convex => out.convex += 1,
                    ConstraintKind::Nonnegative => out.nonnegative += 1,
                }
                out.worst = out.worst.min(v);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), self.n_nodes);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in &row.entries {
                a[(r, c)] = v;
            }
        }
        a
    }

    /// `A M` for a dense `M` with one row per node.
    pub fn times(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<(usize, f64)>> = self.rows.iter().map(|r| r.entries.clone()).collect();
        sparse_rows_times(&rows, m)
    }

    pub fn rhs(&self) -> DVector<f64> {
        DVector::zeros(self.rows.len())
    }

    /// Node vector strictly inside every family: increasing in maturity, strictly convex
    /// in strike and positive, with each row value at least 1.
    pub fn interior_direction(grid: &BasisGrid) -> Vec<f64> {
        (0..grid.len())
            .map(|idx| {
                let (i, j) = ((idx / grid.n_k) as f64, (idx % grid.n_k) as f64);
                1.0 + i + 0.5 * j * j
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts_by_enumeration() {
        let s = build_constraints(&BasisGrid::new(3, 3).unwrap());
        assert_eq!(
            (s.count(ConstraintKind::Monotone), s.count(ConstraintKind::Convex), s.count(ConstraintKind::Nonnegative)),
            (6, 3, 9)
        );
        assert_eq!(s.len(), 18);
        let s = build_constraints(&BasisGrid::new(2, 3).unwrap());
        assert_eq!(s.len(), 11);
        let g = BasisGrid::new(25, 100).unwrap();
        let s = build_constraints(&g);
        assert_eq!(s.count(ConstraintKind::Monotone), 24 * 100);
        assert_eq!(s.count(ConstraintKind::Convex), 25 * 98);
    }

    #[test]
    fn flat_surface_is_feasible_with_equality() {
        let g = BasisGrid::new(4, 5).unwrap();
        let s = build_constraints(&g);
        let v = s.apply(&vec![2.0; g.len()]);
        for (row, val) in s.rows.iter().zip(v) {
            match row.kind {
                ConstraintKind::Nonnegative => assert_eq!(val, 2.0),
                _ => assert_eq!(val, 0.0),
            }
        }
    }

    #[test]
    fn interior_direction_is_strict() {
        let g = BasisGrid::new(4, 6).unwrap();
        let s = build_constraints(&g);
        assert!(s.min_slack(&ConstraintSystem::interior_direction(&g)) >= 1.0);
    }

    #[test]
    fn dense_and_sparse_products_agree() {
        let g = BasisGrid::new(3, 4).unwrap();
        let s = build_constraints(&g);
        let m = DMatrix::from_fn(g.len(), 2, |i, j| (i * 3 + j) as f64 * 0.1);
        assert!((s.times(&m) - s.to_dense() * &m).amax() < 1e-14);
    }

    #[test]
    fn detects_arbitrage() {
        let g = BasisGrid::new(2, 3).unwrap();
        let s = build_constraints(&g);
        // Decreasing in maturity at the middle strike and concave in strike.
        let x = [1.0, 2.0, 1.0, 1.0, 1.5, 1.0];
        let v = s.violations(&x, 1e-12);
        assert_eq!(v.monotone, 1);
        assert_eq!(v.convex, 2);
        assert_eq!(v.nonnegative, 0);
    }
}
