use fluctoscope::intensity::{prox_h_scalar, prox_hbar_scalar, prox_q_scalar};
use fluctoscope::{ForwardModel, IntensityProblem, IntensitySettings, Support};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimizer of a convex scalar function: a coarse grid scan, then
/// bisection on the sign of the symmetric secant slope `f(u+h) − f(u−h)`.
fn argmin_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 2000;
    let step = (hi - lo) / n as f64;
    let best = (0..=n)
        .map(|k| lo + k as f64 * step)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let h = 1e-6;
    let slope = |u: f64| f(u + h) - f(u - h);
    let (mut a, mut b) = (best - step, best + step);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if slope(mid) > 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    0.5 * (a + b)
}

fn neg(u: f64) -> f64 {
    u.min(0.0)
}

#[test]
fn prox_h_minimizes_its_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let w = rng.random_range(-10.0..10.0);
        let at = 10f64.powf(rng.random_range(-2.0..2.0));
        let off = rng.random_bool(0.5);
        let i = if off { 1.0 } else { 0.0 };
        let obj = |u: f64| 0.5 * (u - w).powi(2) + 0.5 * at * (i * u * u + neg(u).powi(2));
        let oracle = argmin_1d(obj, -w.abs() - 1.0, w.abs() + 1.0);
        assert!((prox_h_scalar(w, at, off) - oracle).abs() < 1e-8, "w={w} at={at} off={off}");
    }
}

#[test]
fn prox_q_minimizes_its_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let d = rng.random_range(-10.0..10.0);
        let ad = 10f64.powf(rng.random_range(-2.0..2.0));
        let obj = |u: f64| 0.5 * (u - d).powi(2) + 0.5 * ad * neg(u).powi(2);
        let oracle = argmin_1d(obj, -d.abs() - 1.0, d.abs() + 1.0);
        assert!((prox_q_scalar(d, ad) - oracle).abs() < 1e-8);
    }
}

#[test]
fn prox_hbar_minimizes_its_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let z = rng.random_range(-10.0..10.0);
        let at = 10f64.powf(rng.random_range(-2.0..2.0));
        let (off, neg_hat) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let weight = off as u8 as f64 + neg_hat as u8 as f64;
        let obj = |u: f64| 0.5 * (u - z).powi(2) + 0.5 * at * weight * u * u;
        let oracle = argmin_1d(obj, -z.abs() - 1.0, z.abs() + 1.0);
        assert!((prox_hbar_scalar(z, at, off, neg_hat) - oracle).abs() < 1e-8);
    }
}

fn problem(model: &ForwardModel, settings: IntensitySettings) -> IntensityProblem<'_> {
    let l = model.fine_size();
    let support = Support::from_coords(l, &[(3, 3), (3, 4), (4, 4), (9, 10), (12, 5), (7, 7)]).unwrap();
    let mut x_true = support.mask() * 30.0;
    x_true[[7, 7]] = 80.0;
    let mean = model.apply_forward(&x_true.view()).unwrap() + 5.0;
    IntensityProblem::new(model, mean, support, 20.0, 50, settings).unwrap()
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0))
}

/// Central difference of `f` at `x` along `d` against `⟨grad, d⟩`.
fn check_directional(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, grad: &Array2<f64>, d: &Array2<f64>) {
    let eps = 1e-4;
    let fd = (f(&(x + &(d * eps))) - f(&(x - &(d * eps)))) / (2.0 * eps);
    let exact = (grad * d).sum();
    assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1e-3), "fd {fd} vs {exact}");
}

#[test]
fn smooth_gradients_match_central_differences() {
    let model = ForwardModel::gaussian(8, 2, 228.75, 100.0).unwrap();
    let p = problem(&model, IntensitySettings { mu: 0.3, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (x, b) = (random(&mut rng, 16) * 10.0, random(&mut rng, 8) * 10.0);
        let (dx, db) = (random(&mut rng, 16), random(&mut rng, 8));
        check_directional(|v| p.g_value(v, &b), &x, &p.grad_g(&x, &b), &dx);
        check_directional(|v| p.r_value(v, &x), &b, &p.grad_r(&b, &x), &db);
        let x_hat = random(&mut rng, 16) * 10.0;
        check_directional(|v| p.gbar_value(v, &x_hat), &x, &p.grad_gbar(&x, &x_hat), &dx);
    }
}

#[test]
fn sensitivity_matches_central_difference() {
    let model = ForwardModel::gaussian(8, 2, 228.75, 100.0).unwrap();
    let settings = IntensitySettings {
        mu: 0.5,
        rel_tol: 1e-14,
        inner_max: 200_000,
        joint_rel_tol: 1e-14,
        joint_max_iter: 200_000,
        ..Default::default()
    };
    let p = problem(&model, settings);
    let joint = p.solve_fixed().unwrap();
    let x_prime = p.solve_x_prime(&joint.x).unwrap();

    let eps = 1e-4;
    let mu = p.settings.mu;
    let solve = |m: f64| {
        p.with_mu(m).unwrap().solve_x_subproblem(&joint.b, &joint.x).unwrap()
    };
    let fd = (solve(mu * (1.0 + eps)) - solve(mu * (1.0 - eps))) / (2.0 * eps * mu);
    let err = (&fd - &x_prime).mapv(|v| v * v).sum().sqrt() / fd.mapv(|v| v * v).sum().sqrt();
    assert!(err < 1e-2, "relative error {err}");
}

#[test]
fn discrepancy_increases_with_smoothing() {
    let model = ForwardModel::gaussian(8, 2, 228.75, 100.0).unwrap();
    let p = problem(&model, IntensitySettings::default());
    let fs: Vec<f64> = (0..8)
        .map(|k| {
            let mu = 10f64.powi(k - 5);
            p.with_mu(mu).unwrap().solve_fixed().unwrap().f_residual
        })
        .collect();
    for w in fs.windows(2) {
        assert!(w[1] >= w[0] - 1e-6 * w[0].abs().max(1.0), "{fs:?}");
    }
}

#[test]
fn selected_mu_meets_the_stopping_rule() {
    let model = ForwardModel::gaussian(8, 2, 228.75, 100.0).unwrap();
    let p = problem(&model, IntensitySettings::default());
    let mut noisy = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    noisy.mean = &p.mean + &(random(&mut rng, 8) * (3.0 * p.s / p.frames as f64).sqrt());
    let res = noisy.select_mu(1.0).unwrap();
    assert!(res.converged);
    assert!(res.f_residual.abs() <= noisy.settings.dp_tol * noisy.discrepancy_target());
}
