//! Acceptance checks, one PASS/FAIL line each. Run with `cargo test --test acceptance`;
//! pass criterion numbers after `--` to run a subset.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volsurf::backtest::{generate_synthetic, price_mc, price_options_cn, report, CnConfig, Generator, McConfig, Method, SyntheticSpec};
use volsurf::black_scholes::{bs_put, BsQuote};
use volsurf::constrained_sampling::{sample_truncated, solve_qp, HmcConfig, QpConfig, QuadProgram, TruncatedGaussian};
use volsurf::gp::{self, build_constraints, GpConfig, PosteriorConfig};
use volsurf::local_vol::{dupire_fd, dupire_iv, linspace, EvalGrid, FdConfig, LocalVolGrid, PriceSurface, ThetaSurface};
use volsurf::market_data::{build_frame, CurveSet, MarketFrame, PreprocessConfig};
use volsurf::nn_iv::{self, InputTransform, NnIvModel, TrainConfig};
use volsurf::ssvi::{self, check_no_arbitrage, SsviConfig, SsviSurface};
use volsurf::Result;

const S0: f64 = 100.0;
const SIGMA: f64 = 0.2;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn layout(generator: Generator, spread: f64) -> SyntheticSpec {
    SyntheticSpec {
        generator,
        maturities: linspace(0.1, 2.0, 20),
        strikes: linspace(70.0, 130.0, 40),
        spread,
        seed: 7,
        noise: 0.0,
    }
}

fn frame(spec: &SyntheticSpec) -> Result<MarketFrame> {
    let curves = CurveSet::flat(S0, 0.0, 0.0);
    let quotes = generate_synthetic(spec, &curves)?;
    build_frame(&quotes, &curves, &PreprocessConfig::default())
}

fn flat_frame(spread: f64) -> Result<MarketFrame> {
    frame(&layout(Generator::Flat { sigma: SIGMA }, spread))
}

fn options(frame: &MarketFrame) -> Vec<(f64, f64)> {
    frame.points.iter().map(|p| (p.maturity, p.quote.strike)).collect()
}

fn flat_lv() -> Result<LocalVolGrid> {
    LocalVolGrid::flat(linspace(0.0, 2.0, 21), linspace(20.0, 400.0, 39), SIGMA)
}

fn cn_baseline() -> Result<Outcome> {
    let f = flat_frame(0.0)?;
    let start = Instant::now();
    let cfg = CnConfig { n_t: 100, n_k: 100, ..Default::default() };
    let (prices, _) = price_options_cn(&flat_lv()?, &f.curves, &options(&f), &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let r = report(Method::Cn, &prices, None, &f, secs)?;
    let iv = r.iv_rmse.unwrap_or(f64::INFINITY);
    outcome(
        iv <= 0.012 && r.price_rmse <= 6.0 && secs <= 10.0,
        format!("IV RMSE {:.3}%, price RMSE {:.4}, {} uninvertible, {secs:.2}s", 100.0 * iv, r.price_rmse, r.iv_failures),
    )
}

fn mc_baseline() -> Result<Outcome> {
    let f = flat_frame(0.0)?;
    let start = Instant::now();
    let cfg = McConfig { n_paths: 100_000, n_steps: 100, seed: 7, ..Default::default() };
    let out = price_mc(&flat_lv()?, &f.curves, &options(&f), &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let prices: Vec<f64> = out.iter().map(|p| p.price).collect();
    let r = report(Method::Mc, &prices, None, &f, secs)?;
    let iv = r.iv_rmse.unwrap_or(f64::INFINITY);
    outcome(
        iv <= 0.04 && secs <= 60.0,
        format!("IV RMSE {:.3}%, {} uninvertible, {secs:.2}s", 100.0 * iv, r.iv_failures),
    )
}

fn worst_deviation(lv: &LocalVolGrid) -> (f64, usize) {
    let valid: Vec<f64> = lv.values.iter().zip(&lv.valid).filter(|(_, ok)| **ok).map(|(v, _)| (v - SIGMA).abs()).collect();
    (valid.iter().copied().fold(0.0, f64::max), valid.len())
}

fn gp_round_trip() -> Result<Outcome> {
    let f = flat_frame(0.005)?;
    let start = Instant::now();
    let model = gp::calibrate(&f, &GpConfig { n_t: 15, n_k: 40, ..Default::default() })?;
    let secs = start.elapsed().as_secs_f64();
    let slack = build_constraints(&model.grid).min_slack(&model.map_nodes);
    let (lv, _) = dupire_fd(&model, &model.node_grid(2, 1.0)?, &FdConfig::default())?;
    let ((t0, t1), (k0, k1)) = model.domain();
    let central = |x: f64, a: f64, b: f64| (x - a) / (b - a) >= 0.2 - 1e-12 && (x - a) / (b - a) <= 0.8 + 1e-12;
    let mut interior = lv.clone();
    let nk = lv.k_axis.len();
    for (idx, ok) in interior.valid.iter_mut().enumerate() {
        *ok &= central(lv.t_axis[idx / nk], t0, t1) && central(lv.k_axis[idx % nk], k0, k1);
    }
    let cells = (0..lv.values.len())
        .filter(|&idx| central(lv.t_axis[idx / nk], t0, t1) && central(lv.k_axis[idx % nk], k0, k1))
        .count();
    let (worst, valid) = worst_deviation(&interior);
    outcome(
        slack >= -1e-8 && valid > 0 && worst <= 0.02 && secs <= 300.0,
        format!(
            "min constraint slack {slack:.2e}, local vol worst |σ-0.2| {worst:.4} over {valid}/{cells} valid interior cells, {secs:.1}s"
        ),
    )
}

fn nn_round_trip() -> Result<Outcome> {
    let f = flat_frame(0.005)?;
    let start = Instant::now();
    let fit = nn_iv::train(&f, &TrainConfig::default())?;
    let secs = start.elapsed().as_secs_f64();
    let g = fit.report.penalty_grid;
    let ((t0, t1), (k0, k1)) = fit.model.data_domain.expect("trained model records its data range");
    let grid = EvalGrid::uniform((t0, t1), 30, (S0 * k0.exp(), S0 * k1.exp()), 30)?;
    let (lv, _) = dupire_iv(&fit.model, &grid, 1e-8)?;
    let (worst, valid) = worst_deviation(&lv);
    outcome(
        g.mean_cal_neg <= 1e-12 && g.mean_butt_neg <= 1e-12 && valid == lv.values.len() && worst <= 0.02 && secs <= 600.0,
        format!(
            "penalty grid mean cal- {:.1e}, butt- {:.1e}; local vol worst |σ-0.2| {worst:.2e} over {valid} cells; {secs:.1}s",
            g.mean_cal_neg, g.mean_butt_neg
        ),
    )
}

fn ssvi_round_trip() -> Result<Outcome> {
    let f = frame(&layout(Generator::Ssvi { rho: -0.3, eta: 1.2, gamma: 0.5, atm_slope: 0.04 }, 0.0))?;
    let model = ssvi::calibrate(&f, &SsviConfig::default())?;
    let (rho, eta) = (model.params.rho, model.params.eta);
    let arb = check_no_arbitrage(&model.params);
    outcome(
        (rho + 0.3).abs() <= 0.05 && (eta - 1.2).abs() <= 0.1 && arb.passed(),
        format!("rho {rho:.4}, eta {eta:.4}, no-arbitrage check {}", if arb.passed() { "passed" } else { "failed" }),
    )
}

fn sampler() -> Result<Outcome> {
    let tg = TruncatedGaussian::new(
        DVector::from_element(1, 0.0),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DVector::from_element(1, 0.0),
    )?;
    let n = 20_000;
    let out = sample_truncated(&tg, &DVector::from_element(1, 1.0), n, 11, &HmcConfig::default())?;
    let xs: Vec<f64> = out.samples.column(0).iter().copied().collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    let target = (2.0 / std::f64::consts::PI).sqrt();
    let z = (mean - target) / se;

    let f = flat_frame(0.005)?;
    let model = gp::calibrate(&f, &GpConfig { n_t: 8, n_k: 12, ..Default::default() })?;
    let paths = gp::sample_posterior(&model, &f, 100, 3, &PosteriorConfig::default())?;
    let constraints = build_constraints(&model.grid);
    let feasible = paths.paths.iter().filter(|p| constraints.min_slack(p) >= 0.0).count();
    outcome(
        z.abs() <= 3.0 && feasible == paths.paths.len(),
        format!(
            "truncated normal mean {mean:.5} vs {target:.5} ({z:+.2} SE); {feasible}/{} posterior paths feasible",
            paths.paths.len()
        ),
    )
}

fn nn_derivatives() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let input = InputTransform { mean_log_t: -0.3, std_log_t: 0.9, mean_kappa: 0.0, std_kappa: 0.2 };
        let mut m = NnIvModel::new(&[8, 8], input, S0, (0.01, 2.0), 0.2, case)?;
        for l in &mut m.layers {
            l.w.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let t: f64 = rng.random_range(0.1..2.0);
        let kappa: f64 = rng.random_range(-0.4..0.4);
        let a = m.theta_terms(t, kappa)?;
        let theta = |t: f64, k: f64| m.theta_terms(t, k).map(|x| x.theta);
        let (ht, hk) = (1e-5 * t, 1e-4);
        let fd_t = (theta(t + ht, kappa)? - theta(t - ht, kappa)?) / (2.0 * ht);
        let fd_k = (theta(t, kappa + hk)? - theta(t, kappa - hk)?) / (2.0 * hk);
        let fd_kk = (theta(t, kappa + hk)? - 2.0 * a.theta + theta(t, kappa - hk)?) / (hk * hk);
        for (x, y) in [(a.d_t, fd_t), (a.d_k, fd_k), (a.d_kk, fd_kk)] {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-300));
        }
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 cases"))
}

fn brute_force(p: &QuadProgram) -> f64 {
    let (d, m) = (p.dim(), p.a_ineq.nrows());
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let n = d + rows.len();
        let mut kkt = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        kkt.view_mut((0, 0), (d, d)).copy_from(&p.q);
        for i in 0..d {
            rhs[i] = -p.c[i];
        }
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = p.a_ineq[(i, j)];
                kkt[(j, d + r)] = p.a_ineq[(i, j)];
            }
            rhs[d + r] = p.b_ineq[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, d).into_owned();
        if (&p.a_ineq * &x - &p.b_ineq).min() >= -1e-9 {
            best = best.min(p.objective(&x));
        }
    }
    best
}

fn qp() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let m = rng.random_range(1..=6);
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let q = g.tr_mul(&g) + DMatrix::identity(d, d) * 0.1;
        let q = (&q + q.transpose()) * 0.5;
        let c = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let b = &a * &x0 - DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
        let p = QuadProgram::new(q, c, a, b)?;
        let s = solve_qp(&p, &QpConfig::default())?;
        worst = worst.max((s.diagnostics.objective - brute_force(&p)).abs());
    }
    outcome(worst <= 1e-6, format!("max objective gap {worst:.2e} over 50 programs"))
}

/// Black-Scholes prices of an SSVI surface, with zero rates.
struct SsviPrices<'a>(&'a SsviSurface);

impl PriceSurface for SsviPrices<'_> {
    fn reduced_price(&self, t: f64, k: f64) -> Result<f64> {
        let iv = self.0.params.implied_vol(t, (k / S0).ln())?;
        Ok(bs_put(&BsQuote { forward: S0, strike: k, maturity: t, vol: iv, discount: 1.0 }))
    }

    fn domain(&self) -> ((f64, f64), (f64, f64)) {
        ((0.05, 3.0), (20.0, 400.0))
    }
}

fn cross_method() -> Result<Outcome> {
    let spec = layout(Generator::Ssvi { rho: -0.3, eta: 1.2, gamma: 0.5, atm_slope: 0.04 }, 0.0);
    let mut params = spec.ssvi_params().expect("SSVI generator")?;
    params.theta_curve = volsurf::ssvi::AtmCurve::linear(0.04, linspace(0.05, 3.0, 60))?;
    let surface = SsviSurface { params, spot: S0 };
    let grid = EvalGrid::uniform((0.3, 1.8), 40, (70.0, 140.0), 80)?;
    let (iv, _) = dupire_iv(&surface, &grid, 1e-8)?;
    let (fd, _) = dupire_fd(&SsviPrices(&surface), &grid, &FdConfig::default())?;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for i in 0..iv.values.len() {
        if iv.valid[i] && fd.valid[i] {
            worst = worst.max((fd.values[i] / iv.values[i] - 1.0).abs());
            compared += 1;
        }
    }
    outcome(
        compared > 0 && worst <= 0.01,
        format!("worst relative gap {:.3}% over {compared}/{} cells", 100.0 * worst, iv.values.len()),
    )
}

fn determinism() -> Result<Outcome> {
    let f = flat_frame(0.005)?;
    let gp_cfg = GpConfig { n_t: 10, n_k: 20, ..Default::default() };
    let gp_run = || -> Result<String> {
        let m = gp::calibrate(&f, &gp_cfg)?;
        let paths = gp::sample_posterior(&m, &f, 20, 5, &PosteriorConfig::default())?;
        Ok(format!("{}{}", m.to_json()?, serde_json::to_string(&paths.paths)?))
    };
    let nn_cfg = TrainConfig { hidden: vec![16, 16], epochs: 200, lambda_grid: vec![[1.0, 1.0, 1.0], [10.0, 10.0, 10.0]], seed: 5, ..Default::default() };
    let nn_run = || -> Result<String> {
        let fit = nn_iv::train(&f, &nn_cfg)?;
        Ok(format!("{}{}", fit.model.to_json()?, fit.report.to_json()?))
    };
    let gp_same = gp_run()? == gp_run()?;
    let nn_same = nn_run()? == nn_run()?;
    outcome(gp_same && nn_same, format!("GP identical: {gp_same}, NN identical: {nn_same}"))
}

fn main() {
    let checks: [(&str, fn() -> Result<Outcome>); 10] = [
        ("flat-vol Crank-Nicolson baseline", cn_baseline),
        ("flat-vol Monte Carlo baseline", mc_baseline),
        ("GP round trip", gp_round_trip),
        ("NN round trip", nn_round_trip),
        ("SSVI round trip", ssvi_round_trip),
        ("sampler correctness", sampler),
        ("NN derivative correctness", nn_derivatives),
        ("QP correctness", qp),
        ("cross-method local vol consistency", cross_method),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let (passed, detail) = match check() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!("criterion {:>2} {}: {name}: {detail}", i + 1, if passed { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
