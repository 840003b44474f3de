use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matérn ν = 5/2 correlation at distance `d` with length scale `theta`.
pub fn matern52(d: f64, theta: f64) -> f64 {
    let r = 5f64.sqrt() * d.abs() / theta;
    (1.0 + r + r * r / 3.0) * (-r).exp()
}

/// Hyperparameters of the separable price kernel plus the observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Prior standard deviation, in price units.
    pub sigma: f64,
    /// Length scale along scaled maturity.
    pub theta_t: f64,
    /// Length scale along scaled reduced strike.
    pub theta_k: f64,
    /// Homoscedastic noise standard deviation, in price units.
    pub noise_sd: f64,
}

impl KernelParams {
    pub fn new(sigma: f64, theta_t: f64, theta_k: f64, noise_sd: f64) -> Result<Self> {
        let p = KernelParams { sigma, theta_t, theta_k, noise_sd };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.sigma, self.theta_t, self.theta_k, self.noise_sd];
        if vals.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("kernel parameters must be positive and finite: {self:?}")))
        }
    }

    /// `σ² γ_T(T - T') γ_k(k - k')` on scaled coordinates `(T, k)`.
    pub fn kernel(&self, x: (f64, f64), y: (f64, f64)) -> f64 {
        self.sigma * self.sigma * matern52(x.0 - y.0, self.theta_t) * matern52(x.1 - y.1, self.theta_k)
    }

    /// Gram matrix of the kernel over a point set.
    pub fn gram(&self, points: &[(f64, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(points.len(), points.len(), |i, j| self.kernel(points[i], points[j]))
    }
}

/// Correlation matrix of one axis of the node grid.
pub(crate) fn axis_correlation(nodes: &[f64], theta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(nodes.len(), nodes.len(), |i, j| matern52(nodes[i] - nodes[j], theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matern_values() {
        assert_eq!(matern52(0.0, 0.3), 1.0);
        // (1 + √5 + 5/3) e^{-√5}, evaluated in extended precision.
        assert!((matern52(0.3, 0.3) - 0.523994108831820318).abs() < 1e-15);
        assert!(matern52(3.0, 0.3) < 1e-3);
        let mut prev = 1.0;
        for i in 1..100 {
            let v = matern52(i as f64 * 0.01, 0.2);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn kernel_diagonal_and_separability() {
        let p = KernelParams::new(2.0, 0.2, 0.4, 0.1).unwrap();
        assert_eq!(p.kernel((0.3, 0.7), (0.3, 0.7)), 4.0);
        let v = p.kernel((0.1, 0.5), (0.3, 0.5));
        assert!((v - 4.0 * 0.523994108831820318).abs() < 1e-14);
        assert_eq!(p.kernel((0.1, 0.2), (0.5, 0.9)), p.kernel((0.5, 0.9), (0.1, 0.2)));
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let p = KernelParams::new(1.5, 0.3, 0.2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (0..20).map(|_| (rng.random(), rng.random())).collect();
        let eig = p.gram(&pts).symmetric_eigenvalues();
        assert!(eig.min() >= -1e-8 * p.sigma * p.sigma);
    }

    #[test]
    fn large_price_scale_parameters_validate() {
        assert!(KernelParams::new(185.7611, 0.2211, 0.3282, 0.6876).is_ok());
        assert!(KernelParams::new(1.0, 0.0, 0.3, 0.1).is_err());
        assert!(KernelParams::new(1.0, 0.3, 0.3, -0.1).is_err());
    }
}
