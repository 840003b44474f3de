use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use volsurf::constrained_sampling::{sample_truncated, sample_truncated_chains, solve_qp, HmcConfig, QpConfig, QuadProgram, TruncatedGaussian};

fn box_2d(mean: [f64; 2], rho: f64) -> TruncatedGaussian {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
    // 0 <= x <= 1, 0 <= y
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
    let b = DVector::from_vec(vec![0.0, -1.0, 0.0]);
    TruncatedGaussian::new(DVector::from_vec(mean.to_vec()), cov, a, b).unwrap()
}

#[test]
fn samples_respect_every_constraint() {
    let tg = box_2d([0.5, -1.0], 0.6);
    let out = sample_truncated(&tg, &DVector::from_vec(vec![0.5, 0.5]), 2000, 3, &HmcConfig::default()).unwrap();
    for r in 0..out.samples.nrows() {
        let x = out.samples.row(r).transpose();
        assert!(tg.min_slack(&x) >= 0.0, "{x}");
    }
}

#[test]
fn chains_are_reproducible() {
    let tg = box_2d([0.2, 0.3], -0.4);
    let init = DVector::from_vec(vec![0.5, 0.5]);
    let a = sample_truncated_chains(&tg, &init, 3, 50, 9, &HmcConfig::default()).unwrap();
    let b = sample_truncated_chains(&tg, &init, 3, 50, 9, &HmcConfig::default()).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.samples.nrows(), 150);
}

#[test]
fn infeasible_start_is_rejected() {
    let tg = box_2d([0.0, 0.0], 0.0);
    assert!(sample_truncated(&tg, &DVector::from_vec(vec![2.0, 0.5]), 10, 1, &HmcConfig::default()).is_err());
}

#[test]
fn uniform_marginal_of_a_flat_box() {
    // Huge variance inside [0, 1]: the x marginal is close to uniform.
    let tg = TruncatedGaussian::new(
        DVector::from_element(1, 0.5),
        DMatrix::from_element(1, 1, 1e4),
        DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        DVector::from_vec(vec![0.0, -1.0]),
    )
    .unwrap();
    let out = sample_truncated(&tg, &DVector::from_element(1, 0.3), 5000, 4, &HmcConfig::default()).unwrap();
    let mean = out.samples.column(0).mean();
    let var = out.samples.column(0).variance();
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
    assert!((var - 1.0 / 12.0).abs() < 0.01, "{var}");
}

#[test]
fn equality_constrained_projection() {
    // min ½|x|² s.t. x1 + x2 = 1, x1 >= 0.8: x = (0.8, 0.2).
    let p = QuadProgram::new(
        DMatrix::identity(2, 2),
        DVector::zeros(2),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DVector::from_element(1, 0.8),
    )
    .unwrap()
    .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 1.0))
    .unwrap();
    let s = solve_qp(&p, &QpConfig::default()).unwrap();
    assert!((s.x[0] - 0.8).abs() < 1e-7 && (s.x[1] - 0.2).abs() < 1e-7, "{}", s.x);
}

proptest! {
    #[test]
    fn box_projection_matches_clamping(c in proptest::collection::vec(-3.0f64..3.0, 1..5)) {
        // min ½|x - c|² over [-1, 1]^d is the clamp of c.
        let d = c.len();
        let mut a = DMatrix::zeros(2 * d, d);
        for i in 0..d {
            a[(2 * i, i)] = 1.0;
            a[(2 * i + 1, i)] = -1.0;
        }
        let p = QuadProgram::new(DMatrix::identity(d, d), -DVector::from_vec(c.clone()), a, DVector::from_element(2 * d, -1.0)).unwrap();
        let s = solve_qp(&p, &QpConfig::default()).unwrap();
        for i in 0..d {
            prop_assert!((s.x[i] - c[i].clamp(-1.0, 1.0)).abs() < 1e-6);
        }
    }
}
