use fluctoscope::support::{estimate_support, estimate_support_with_restarts, lambda_max, solve_rx_cel0, solve_rx_l1};
use fluctoscope::{
    empirical_covariance, CovarianceData, ForwardModel, Psf, Regularizer, RegularizerKind, SimulationConfig,
    SolverOptions,
};
use ndarray::{Array1, Array2};

fn small_data(seed: u64) -> (ForwardModel, CovarianceData) {
    let cfg = SimulationConfig { coarse_size: 8, grid_factor: 2, frames: 300, seed, ..Default::default() };
    let data = fluctoscope::simulate::simulate(&cfg).unwrap();
    (cfg.forward_model().unwrap(), empirical_covariance(&data.stack).unwrap())
}

/// Covariance vector `A r + s·vec(I)` for the identity model.
fn identity_covariance(model: &ForwardModel, r: &Array2<f64>, s: f64) -> Array1<f64> {
    let m2 = model.coarse_size().pow(2);
    let mut v = model.apply_a(&r.view()).unwrap();
    for i in 0..m2 {
        v[i + i * m2] += s;
    }
    v
}

#[test]
fn lambda_max_separates_zero_and_nonzero_solutions() {
    let (model, cov) = small_data(2);
    let opts = SolverOptions::default();
    let ry_inf = cov.r_y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for kind in [RegularizerKind::L1, RegularizerKind::Cel0] {
        let lmax = lambda_max(&model, &cov.r_y(), kind).unwrap();
        let above = estimate_support(&model, &cov, &Regularizer::new(kind, 1.01 * lmax).unwrap(), &opts).unwrap();
        let peak = above.r_x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 1e-8 * ry_inf, "{kind:?}: {peak}");
        let below = estimate_support(&model, &cov, &Regularizer::new(kind, 0.5 * lmax).unwrap(), &opts).unwrap();
        assert!(!below.support.is_empty(), "{kind:?}");
    }
}

#[test]
fn l1_on_orthogonal_columns_is_soft_thresholding() {
    let model = ForwardModel::new(5, 1, Psf::delta(), 100.0).unwrap();
    let r = Array2::from_shape_fn((5, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
    let s = 0.7;
    let ry = identity_covariance(&model, &r, s);
    let lambda = 1.2;
    let opts = SolverOptions { rel_tol: 1e-12, inner_max: 5000, ..Default::default() };
    let got = solve_rx_l1(&model, &ry.view(), s, lambda, &opts).unwrap();
    // With a delta PSF, AᵀA = I and Aᵀ(r_y − s·vec(I)) = r.
    let expected = r.mapv(|v| (v - lambda).max(0.0));
    assert!((&got - &expected).iter().all(|d| d.abs() < 1e-8), "{got:?}");
}

#[test]
fn cel0_on_orthogonal_columns_is_hard_thresholding() {
    let model = ForwardModel::new(5, 1, Psf::delta(), 100.0).unwrap();
    let r = Array2::from_shape_fn((5, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.9);
    let ry = identity_covariance(&model, &r, 0.0);
    let lambda = 1.5;
    // Entries just above the cut gain only `c − √(2λ)` per reweighting round.
    let opts = SolverOptions { rel_tol: 1e-12, inner_max: 5000, irl1_rounds: 200, ..Default::default() };
    let got = solve_rx_cel0(&model, &ry.view(), 0.0, lambda, &opts).unwrap();
    let cut = (2.0 * lambda).sqrt();
    let expected = r.mapv(|v| if v > cut { v } else { 0.0 });
    assert!((&got - &expected).iter().all(|d| d.abs() < 1e-6), "{got:?}");
}

#[test]
fn noise_level_is_recovered_on_exact_data() {
    let model = ForwardModel::new(6, 1, Psf::delta(), 100.0).unwrap();
    let mut r = Array2::zeros((6, 6));
    for (i, j) in [(1, 1), (2, 4), (4, 2), (5, 5)] {
        r[[i, j]] = 40.0;
    }
    let sigma2 = 3.0;
    let ry = identity_covariance(&model, &r, sigma2);
    let matrix = Array2::from_shape_vec((36, 36), ry.to_vec()).unwrap().reversed_axes();
    let cov = CovarianceData::from_parts(Array2::zeros((6, 6)), matrix, 100).unwrap();
    let opts = SolverOptions { rel_tol: 1e-10, outer_max: 500, ..Default::default() };
    let reg = Regularizer::new(RegularizerKind::Cel0, 1.0).unwrap();
    let res = estimate_support(&model, &cov, &reg, &opts).unwrap();
    assert_eq!(res.support.len(), 4);
    assert!((res.s - sigma2).abs() < 1e-3 * sigma2, "s = {}", res.s);
}

#[test]
fn restarts_only_grow_the_support() {
    let (model, cov) = small_data(4);
    let lmax = lambda_max(&model, &cov.r_y(), RegularizerKind::Cel0).unwrap();
    let reg = Regularizer::new(RegularizerKind::Cel0, 5e-3 * lmax).unwrap();
    let opts = SolverOptions::default();
    let single = estimate_support(&model, &cov, &reg, &opts).unwrap();
    let restarted = estimate_support_with_restarts(&model, &cov, &reg, &opts, 10).unwrap();
    assert!(restarted.support.is_superset_of(&single.support));
    assert!(restarted.restarts <= 10);
}

#[test]
fn objective_traces_do_not_increase() {
    let (model, cov) = small_data(6);
    let opts = SolverOptions::default();
    for kind in [RegularizerKind::L1, RegularizerKind::Cel0, RegularizerKind::Tv] {
        let lk = if kind == RegularizerKind::Tv { RegularizerKind::L1 } else { kind };
        let lmax = lambda_max(&model, &cov.r_y(), lk).unwrap();
        let reg = Regularizer::new(kind, 1e-2 * lmax).unwrap();
        let res = estimate_support(&model, &cov, &reg, &opts).unwrap();
        assert!(res.s >= 0.0);
        for w in res.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-4) + 1e-9, "{kind:?}: {} -> {}", w[0], w[1]);
        }
    }
}
