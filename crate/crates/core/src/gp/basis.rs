use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular node grid over the scaled square; node `(i, j)` sits at `(i h_T, j h_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisGrid {
    /// Nodes along maturity.
    pub n_t: usize,
    /// Nodes along reduced strike.
    pub n_k: usize,
}

impl BasisGrid {
    pub fn new(n_t: usize, n_k: usize) -> Result<Self> {
        if n_t < 2 || n_k < 3 {
            return Err(Error::InvalidInput(format!(
                "basis grid needs at least 2 maturity and 3 strike nodes, got {n_t}x{n_k}"
            )));
        }
        Ok(BasisGrid { n_t, n_k })
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h_t(&self) -> f64 {
        1.0 / (self.n_t - 1) as f64
    }

    pub fn h_k(&self) -> f64 {
        1.0 / (self.n_k - 1) as f64
    }

    /// Flat index of node `(i, j)`; strikes vary fastest.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_k + j
    }

    pub fn t_nodes(&self) -> Vec<f64> {
        (0..self.n_t).map(|i| i as f64 * self.h_t()).collect()
    }

    pub fn k_nodes(&self) -> Vec<f64> {
        (0..self.n_k).map(|j| j as f64 * self.h_k()).collect()
    }

    pub fn node(&self, index: usize) -> (f64, f64) {
        ((index / self.n_k) as f64 * self.h_t(), (index % self.n_k) as f64 * self.h_k())
    }

    /// Nonzero basis weights at a scaled point, as `(node index, weight)`.
    pub fn weights(&self, t: f64, k: f64) -> Result<Vec<(usize, f64)>> {
        let tol = 1e-12;
        if !(-tol..=1.0 + tol).contains(&t) || !(-tol..=1.0 + tol).contains(&k) {
            return Err(Error::Domain { t, k, detail: "outside the unit square of the basis grid".into() });
        }
        let (i0, wt) = cell(t.clamp(0.0, 1.0), self.n_t);
        let (j0, wk) = cell(k.clamp(0.0, 1.0), self.n_k);
        let mut out = Vec::with_capacity(4);
        for (di, ft) in [(0, 1.0 - wt), (1, wt)] {
            for (dj, fk) in [(0, 1.0 - wk), (1, wk)] {
                let w = ft * fk;
                if w != 0.0 {
                    out.push((self.index(i0 + di, j0 + dj), w));
                }
            }
        }
        Ok(out)
    }

    /// `n × M` design matrix `Φ` of basis functions at scaled points.
    pub fn design_matrix(&self, points: &[(f64, f64)]) -> Result<DMatrix<f64>> {
        let mut phi = DMatrix::zeros(points.len(), self.len());
        for (r, &(t, k)) in points.iter().enumerate() {
            for (c, w) in self.weights(t, k)? {
                phi[(r, c)] = w;
            }
        }
        Ok(phi)
    }
}

/// Lower cell index and the fractional position inside it.
fn cell(x: f64, n: usize) -> (usize, f64) {
    let h = 1.0 / (n - 1) as f64;
    let i = ((x / h).floor() as usize).min(n - 2);
    (i, (x - i as f64 * h) / h)
}

/// Tensor-product hat function of node `(i, j)` at scaled `x = (T, k)`.
pub fn hat_basis(x: (f64, f64), node: (usize, usize), h_t: f64, h_k: f64) -> f64 {
    let ft = (1.0 - (x.0 - node.0 as f64 * h_t).abs() / h_t).max(0.0);
    let fk = (1.0 - (x.1 - node.1 as f64 * h_k).abs() / h_k).max(0.0);
    ft * fk
}

/// Bilinear interpolation `Σ ϱ_ι φ_ι(x)` of node values at a scaled point.
pub fn evaluate_surface(node_values: &[f64], grid: &BasisGrid, t: f64, k: f64) -> Result<f64> {
    if node_values.len() != grid.len() {
        return Err(Error::InvalidInput("node vector does not match the grid".into()));
    }
    Ok(grid.weights(t, k)?.into_iter().map(|(i, w)| w * node_values[i]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hat_values() {
        let (ht, hk) = (0.25, 0.1);
        assert!((hat_basis((0.5, 0.3), (2, 3), ht, hk) - 1.0).abs() < 1e-12);
        assert!((hat_basis((2.5 * ht, 3.0 * hk), (2, 3), ht, hk) - 0.5).abs() < 1e-12);
        assert_eq!(hat_basis((3.0 * ht, 4.0 * hk), (2, 3), ht, hk), 0.0);
    }

    #[test]
    fn surface_at_nodes_and_cell_centres() {
        let g = BasisGrid::new(3, 4).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|i| (i * i) as f64).collect();
        for i in 0..3 {
            for j in 0..4 {
                let (t, k) = g.node(g.index(i, j));
                assert!((evaluate_surface(&vals, &g, t, k).unwrap() - vals[g.index(i, j)]).abs() < 1e-12);
            }
        }
        let centre = evaluate_surface(&vals, &g, 0.25, 0.5 * g.h_k()).unwrap();
        let avg = (vals[g.index(0, 0)] + vals[g.index(0, 1)] + vals[g.index(1, 0)] + vals[g.index(1, 1)]) / 4.0;
        assert!((centre - avg).abs() < 1e-12);
        assert!(matches!(evaluate_surface(&vals, &g, 1.2, 0.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn grid_validation() {
        assert!(BasisGrid::new(1, 5).is_err());
        assert!(BasisGrid::new(2, 2).is_err());
        assert_eq!(BasisGrid::new(2, 3).unwrap().len(), 6);
    }

    proptest! {
        #[test]
        fn partition_of_unity(t in 0.0f64..=1.0, k in 0.0f64..=1.0, nt in 2usize..8, nk in 3usize..9) {
            let g = BasisGrid::new(nt, nk).unwrap();
            let total: f64 = (0..g.len())
                .map(|idx| hat_basis((t, k), (idx / nk, idx % nk), g.h_t(), g.h_k()))
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let constant = vec![3.5; g.len()];
            prop_assert!((evaluate_surface(&constant, &g, t, k).unwrap() - 3.5).abs() < 1e-12);
            let w: f64 = g.weights(t, k).unwrap().iter().map(|(_, w)| w).sum();
            prop_assert!((w - 1.0).abs() < 1e-12);
        }
    }
}
