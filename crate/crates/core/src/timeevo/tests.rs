use super::*;
use crate::config::TrainConfig;
use crate::data::{Column, Dataset};
use crate::error::Error;
use crate::numeric::{
    finite_diff_gradient, finite_diff_jacobian, gradient_rel_error, matrix_exp, seeded_rng,
    standard_normal,
};

fn euler_error(model: &LinearTimeModel, a0: &[f64], dt: f64) -> f64 {
    let exact = evolve_linear_exact(model, a0).unwrap();
    let traj = evolve_linear_euler(model, a0, dt).unwrap();
    exact
        .iter()
        .zip(traj.final_state())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn zero_linear_model_is_constant() {
    let m = LinearTimeModel::zero(3, 1.0).unwrap();
    let a0 = [0.3, -1.0, 2.0];
    let traj = evolve_linear_euler(&m, &a0, 0.1).unwrap();
    assert_eq!(traj.times.len(), 11);
    assert!(traj.states.iter().all(|s| s == &a0));
    assert_eq!(evolve_linear_exact(&m, &a0).unwrap(), a0.to_vec());
}

#[test]
fn uncoupled_linear_model_drifts_by_bias() {
    let m = LinearTimeModel::new(2, vec![0.0, 0.0], vec![0.5, -2.0], 3.0).unwrap();
    let out = evolve_linear_exact(&m, &[1.0, 1.0]).unwrap();
    assert!((out[0] - 2.5).abs() < 1e-12);
    assert!((out[1] + 5.0).abs() < 1e-12);
}

#[test]
fn nilpotent_coupling_closed_form() {
    let m = LinearTimeModel::new(2, vec![1.0, 0.0], vec![0.0, 1.0], 1.0).unwrap();
    let out = evolve_linear_exact(&m, &[0.0, 0.0]).unwrap();
    assert!((out[0] - 0.5).abs() < 1e-12, "{out:?}");
    assert!((out[1] - 1.0).abs() < 1e-12);
    assert!(euler_error(&m, &[0.0, 0.0], 1e-5) < 1e-4);
}

#[test]
fn exact_solution_matches_fine_euler() {
    let mut rng = seeded_rng(10, 0);
    for n in 1..=4 {
        let m = LinearTimeModel::random(n, 0.7, 1.0, &mut rng).unwrap();
        let a0: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        assert!(euler_error(&m, &a0, 1e-5) < 1e-4);
    }
}

#[test]
fn euler_is_first_order() {
    let mut rng = seeded_rng(11, 0);
    let m = LinearTimeModel::random(4, 0.8, 1.0, &mut rng).unwrap();
    let a0 = [0.5, -0.3, 1.0, 0.2];
    let errs: Vec<f64> = [0.02, 0.01, 0.005]
        .iter()
        .map(|dt| euler_error(&m, &a0, *dt))
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=3.0).contains(&ratio), "{errs:?}");
        let order = ratio.log2();
        assert!((0.8..=1.2).contains(&order), "{order}");
    }
}

#[test]
fn single_euler_step() {
    let m = LinearTimeModel::new(2, vec![2.0, -1.0], vec![0.1, 0.2], 0.5).unwrap();
    let traj = evolve_linear_euler(&m, &[1.0, 3.0], 0.5).unwrap();
    assert_eq!(traj.steps, vec![0.5]);
    let a = traj.final_state();
    assert!((a[0] - (1.0 + 0.5 * (2.0 * 3.0 + 0.1))).abs() < 1e-15);
    assert!((a[1] - (3.0 + 0.5 * (-1.0 + 0.2))).abs() < 1e-15);
}

#[test]
fn partial_final_step_reaches_horizon() {
    let m = LinearTimeModel::zero(1, 1.0).unwrap();
    let traj = evolve_linear_euler(&m, &[0.0], 0.3).unwrap();
    assert_eq!(traj.steps.len(), 4);
    assert!((traj.times.last().unwrap() - 1.0).abs() < 1e-12);
    assert!(evolve_linear_euler(&m, &[0.0], 1.5).is_err());
    assert!(evolve_linear_euler(&m, &[0.0], 0.0).is_err());
}

#[test]
fn zero_diagonal_flow_has_unit_determinant() {
    let mut rng = seeded_rng(12, 0);
    for k in 0..100 {
        let n = 2 + k % 5;
        let m = LinearTimeModel::random(n, 1.0, 1.0, &mut rng).unwrap();
        let w = m.w_matrix();
        assert_eq!(w.trace(), 0.0);
        let det = matrix_exp(&w, m.horizon).unwrap().det().unwrap();
        assert!((det - 1.0).abs() <= 1e-8, "n = {n}: det = {det}");
    }
}

#[test]
fn linear_phi_at_origin() {
    let m = LinearTimeModel::zero(1, 1.0).unwrap();
    let phi = linear_phi(&m, &[0.0]).unwrap();
    assert!((phi.phi - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
}

#[test]
fn linear_loss_is_sum_of_node_energies() {
    let mut rng = seeded_rng(13, 0);
    let m = LinearTimeModel::random(3, 0.5, 1.0, &mut rng).unwrap();
    let phi = linear_phi(&m, &[0.2, -0.4, 0.9]).unwrap();
    let energy: f64 = phi.final_state.iter().map(|v| v * v).sum();
    assert_eq!(phi.local.iter().sum::<f64>(), energy);
    assert!((phi.loss - energy - 1.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
}

#[test]
fn linear_phi_integrates_to_one() {
    // Importance sampling with a wide Gaussian proposal.
    let mut rng = seeded_rng(14, 0);
    let m = LinearTimeModel::random(2, 0.6, 1.0, &mut rng).unwrap();
    let sigma = 2.0;
    let n_samples = 20_000;
    let mut ws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = [standard_normal(&mut rng), standard_normal(&mut rng)];
        let a0 = [sigma * z[0], sigma * z[1]];
        let q = (-(z[0] * z[0] + z[1] * z[1]) / 2.0).exp()
            / (2.0 * std::f64::consts::PI * sigma * sigma);
        ws.push(linear_phi(&m, &a0).unwrap().phi / q);
    }
    let mean = ws.iter().sum::<f64>() / n_samples as f64;
    let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
    let se = (var / n_samples as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn linear_rollout_is_affine() {
    let mut rng = seeded_rng(15, 0);
    let m = LinearTimeModel::random(4, 0.8, 1.0, &mut rng).unwrap();
    let rep = check_linearity(&m, 50, &mut rng).unwrap();
    assert!(rep.residual <= 1e-9, "{}", rep.residual);
    let zero = LinearTimeModel::zero(4, 1.0).unwrap();
    assert_eq!(check_linearity(&zero, 10, &mut rng).unwrap().residual, 0.0);
}

fn curved_model(n: usize, rng: &mut crate::numeric::Rng) -> NonlinearTimeModel {
    let mut m = NonlinearTimeModel::random(n, n, 1.0, 1e-2, 3, 0.0, 0.5, rng).unwrap();
    for b in &mut m.boundary {
        b.t0 = 0.3 * standard_normal(rng);
        b.t2_free = 0.7;
        b.poly = vec![0.4, -0.6, 0.3];
    }
    m
}

#[test]
fn nonlinear_rollout_is_not_affine() {
    let mut rng = seeded_rng(16, 0);
    let mut m = NonlinearTimeModel::random(4, 4, 1.0, 1e-2, 3, -3.0, 0.5, &mut rng).unwrap();
    for b in &mut m.boundary {
        b.poly = vec![0.0, 0.5, 0.3];
    }
    let rep = check_linearity(&m, 50, &mut rng).unwrap();
    assert!(rep.residual > 1e-3, "{}", rep.residual);
}

fn symmetric_boundary() -> NonlinearTimeModel {
    let mut m = NonlinearTimeModel::new(1, 1, 1.0, 1e-2, 0, 0.0).unwrap();
    let one = crate::numeric::softplus_inv(1.0);
    m.boundary[0] = Boundary::new(0.0, one, one, vec![]);
    m
}

#[test]
fn boundary_function_derivatives() {
    let b = Boundary::new(0.2, -0.3, 0.5, vec![0.7, -1.1, 0.4]);
    for a in [0.05, 0.3, 0.5, 0.8, 0.97] {
        let h = 1e-6;
        let fd1 = (b.value(a + h) - b.value(a - h)) / (2.0 * h);
        let fd2 = (b.slope(a + h) - b.slope(a - h)) / (2.0 * h);
        assert!((b.slope(a) - fd1).abs() <= 1e-6 * (1.0 + fd1.abs()));
        assert!((b.curvature(a) - fd2).abs() <= 1e-5 * (1.0 + fd2.abs()));
    }
    assert!(b.value(1e-12) > 1.0 && b.value(1.0 - 1e-12) < -1.0);
}

#[test]
fn states_relax_towards_the_fixed_point() {
    let m = symmetric_boundary();
    assert!(m.boundary[0].value(0.5).abs() < 1e-15);
    let traj = evolve_nonlinear(&m, &InputAssignment::new(vec![0.9], vec![])).unwrap();
    for w in traj.states.windows(2) {
        assert!(w[1][0] < w[0][0] && w[1][0] > 0.5);
    }
    let mut fine = m.clone();
    fine.dt = 1e-5;
    let a_fine = fine.rollout(&[0.9]).unwrap().final_state()[0];
    assert!((traj.final_state()[0] - a_fine).abs() < 1e-2);
}

#[test]
fn refinement_changes_final_state_linearly() {
    let mut rng = seeded_rng(17, 0);
    let m = curved_model(3, &mut rng);
    let a0 = [0.3, 0.6, 0.45];
    let run = |dt: f64| {
        let mut c = m.clone();
        c.dt = dt;
        c.rollout(&a0).unwrap().final_state().to_vec()
    };
    let (a1, a2, a3) = (run(0.02), run(0.01), run(0.005));
    let d = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let ratio = d(&a1, &a2) / d(&a2, &a3);
    assert!((1.5..=3.0).contains(&ratio), "{ratio}");
}

#[test]
fn guard_keeps_states_interior() {
    let mut rng = seeded_rng(18, 0);
    let mut halvings = 0;
    for _ in 0..1000 {
        let n = 1 + (rng.random::<u32>() % 4) as usize;
        let mut m = NonlinearTimeModel::random(
            n,
            n,
            1.0,
            0.05,
            3,
            rng.random_range(-6.0..2.0),
            2.0,
            &mut rng,
        )
        .unwrap();
        for b in &mut m.boundary {
            b.t0 = 3.0 * standard_normal(&mut rng);
            b.poly = (0..3).map(|_| 3.0 * standard_normal(&mut rng)).collect();
        }
        let a0: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        match m.rollout(&a0) {
            Ok(traj) => {
                halvings += traj.halvings;
                assert!(traj.states.iter().flatten().all(|v| *v > 0.0 && *v < 1.0));
                assert!(traj.factors().iter().flatten().all(|f| *f > 0.0));
            }
            Err(Error::Stiffness { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(halvings > 0);
}

#[test]
fn initial_state_must_be_interior() {
    let m = symmetric_boundary();
    for a in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(
            evolve_nonlinear(&m, &InputAssignment::new(vec![a], vec![])),
            Err(Error::Domain { .. })
        ));
    }
}

#[test]
fn stiff_drift_exhausts_the_halving_budget() {
    let mut m = NonlinearTimeModel::new(1, 1, 1.0, 0.1, 0, -40.0).unwrap();
    m.boundary[0].t0 = 1e9;
    match m.rollout(&[0.5]) {
        Err(Error::Stiffness { node, halvings, .. }) => {
            assert_eq!(node, 0);
            assert_eq!(halvings, MAX_HALVINGS);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn nll_matches_one_dimensional_jacobian() {
    let m = symmetric_boundary();
    let mut slopes = Vec::new();
    for dt in [0.02, 0.01, 0.005] {
        let mut c = m.clone();
        c.dt = dt;
        let h = 1e-6;
        let f = |a: f64| c.rollout(&[a]).unwrap().final_state()[0];
        let jac = (f(0.8 + h) - f(0.8 - h)) / (2.0 * h);
        let nll = nonlinear_nll(&c.rollout(&[0.8]).unwrap(), &c).unwrap();
        slopes.push((nll.discrete + jac.ln()).abs());
        assert!((nll.discrete - nll.continuum).abs() < 20.0 * dt, "{nll:?}");
    }
    // W = 0 and n = 1: the diagonal product is the full Jacobian.
    assert!(slopes.iter().all(|g| *g < 1e-6), "{slopes:?}");
}

fn fd_log_det_gap(m: &NonlinearTimeModel, a0: &[f64]) -> (f64, f64) {
    let jac = finite_diff_jacobian(|a| Ok(m.rollout(a)?.final_state().to_vec()), a0, 1e-6).unwrap();
    let nll = nonlinear_nll(&m.rollout(a0).unwrap(), m).unwrap().discrete;
    (nll, (-jac.det().unwrap().ln() - nll).abs())
}

#[test]
fn nll_matches_full_jacobian_up_to_dt() {
    let mut rng = seeded_rng(19, 0);
    let mut m = curved_model(3, &mut rng);
    let a0 = [0.35, 0.55, 0.7];
    let mut gaps = Vec::new();
    for dt in [1e-3, 5e-4, 2.5e-4] {
        m.dt = dt;
        let (nll, gap) = fd_log_det_gap(&m, &a0);
        assert!(gap <= 5e-2 * (1.0 + nll.abs()), "{gap} vs {nll}");
        gaps.push(gap);
    }
    for w in gaps.windows(2) {
        let r = w[0] / w[1];
        assert!((1.5..=3.0).contains(&r), "{gaps:?}");
    }
}

#[test]
fn local_table_sums_to_continuum_form() {
    let mut rng = seeded_rng(20, 0);
    let m = curved_model(3, &mut rng);
    let traj = m.rollout(&[0.2, 0.5, 0.9]).unwrap();
    let nll = nonlinear_nll(&traj, &m).unwrap();
    let mut s = crate::numeric::KahanSum::new();
    for (row, h) in nll.local.iter().zip(&traj.steps) {
        for l in row {
            s.add(l * h);
        }
    }
    assert_eq!(s.total(), nll.continuum);
}

#[test]
fn non_positive_factor_is_a_step_size_error() {
    let m = symmetric_boundary();
    let mut traj = m.rollout(&[0.5]).unwrap();
    traj.slopes[3][0] = -1.0 / traj.steps[3];
    assert!(matches!(
        nonlinear_nll(&traj, &m),
        Err(Error::StepSize { node: 0, .. })
    ));
}

#[test]
fn rollout_gradient_matches_finite_difference() {
    let mut rng = seeded_rng(21, 0);
    for n in [1, 2, 3] {
        let mut m = curved_model(n, &mut rng);
        m.dt = 0.02;
        let a0: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
        let mut g = vec![0.0; m.n_params()];
        let (_, traj) = m.sample_loss(&a0, Some(&mut g)).unwrap();
        assert_eq!(traj.halvings, 0);
        let fd = finite_diff_gradient(
            |p| {
                let mut c = m.clone();
                c.set_params(p).unwrap();
                c.sample_loss(&a0, None).unwrap().0
            },
            &m.params(),
            1e-6,
        );
        let err = gradient_rel_error(&g, &fd, 1e-6);
        assert!(err <= 1e-3, "n = {n}: {err}");
    }
}

#[test]
fn untrained_model_recovers_a_normalized_density() {
    let mut rng = seeded_rng(22, 0);
    let m = NonlinearTimeModel::random(2, 1, 1.0, 1e-2, 3, -6.0, 0.01, &mut rng).unwrap();
    let mass = nonlinear::recovered_mass(&m, 256, &mut rng).unwrap();
    assert!((0.9..=1.1).contains(&mass), "{mass}");
}

#[test]
fn recovered_mass_shrinks_with_confinement() {
    // The boundary terms reach the walls in finite time, so the rollout map
    // is not onto (0, 1)^n and mass is lost as θ₁, θ₂ grow.
    let mut masses = Vec::new();
    for init in [-6.0, -4.0, -2.0] {
        let mut rng = seeded_rng(26, 0);
        let m = NonlinearTimeModel::random(2, 1, 1.0, 1e-2, 3, init, 0.0, &mut rng).unwrap();
        masses.push(nonlinear::recovered_mass(&m, 64, &mut rng).unwrap());
    }
    assert!(masses.windows(2).all(|w| w[1] < w[0]), "{masses:?}");
    assert!(masses[0] < 1.0 && masses[2] < 0.5, "{masses:?}");
}

#[test]
fn without_auxiliaries_recovery_is_deterministic() {
    let mut rng = seeded_rng(23, 0);
    let m = curved_model(2, &mut rng);
    let xs = vec![vec![0.3, 0.4], vec![0.6, 0.5]];
    let a = recover_input_density(&m, &xs, 7, &mut seeded_rng(1, 0)).unwrap();
    let b = recover_input_density(&m, &xs, 100, &mut seeded_rng(2, 0)).unwrap();
    assert_eq!(a, b);
    let direct = (-m.sample_loss(&xs[0], None).unwrap().0).exp();
    assert_eq!(a[0], direct);
}

#[test]
fn recovery_variance_falls_with_draws() {
    let mut rng = seeded_rng(24, 0);
    let mut m = curved_model(2, &mut rng);
    m.m = 1;
    let var_of = |n_mc: usize, rng: &mut crate::numeric::Rng| {
        let vals: Vec<f64> = (0..200)
            .map(|_| recover_input_density(&m, &[vec![0.4]], n_mc, rng).unwrap()[0])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let ratio = var_of(1, &mut rng) / var_of(16, &mut rng);
    assert!((8.0..=32.0).contains(&ratio), "{ratio}");
}

fn bimodal(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed, 0);
    let xs = (0..n)
        .map(|_| {
            let c = if rng.random::<f64>() < 0.5 { 0.3 } else { 0.7 };
            (c + 0.06 * standard_normal(&mut rng)).clamp(0.01, 0.99)
        })
        .collect();
    Dataset::new()
        .with_column("x", Column::Numeric(xs))
        .unwrap()
}

fn time_config(mode: crate::config::TrainMode, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.epochs = epochs;
    c.batch_size = 50;
    c.model.mode = mode;
    c
}

#[test]
fn both_training_modes_reduce_the_loss() {
    use crate::config::TrainMode;
    let data = bimodal(200, 1);
    for mode in [TrainMode::Global, TrainMode::SequentialLocal] {
        let (_, rep) = train_time_model(&data, &time_config(mode, 3)).unwrap();
        assert!(rep.final_loss() < rep.initial_loss, "{mode:?}: {rep:?}");
        let check = rep
            .checks
            .iter()
            .find(|c| c.check == "timeevo.nll_decrease")
            .unwrap();
        assert!(check.pass, "{mode:?}: {check:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = bimodal(100, 2);
    let cfg = time_config(crate::config::TrainMode::Global, 2);
    let (m1, mut r1) = train_time_model(&data, &cfg).unwrap();
    let (m2, mut r2) = train_time_model(&data, &cfg).unwrap();
    r1.wall_seconds = 0.0;
    r2.wall_seconds = 0.0;
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
}

#[test]
fn plain_local_mode_is_rejected() {
    let data = bimodal(20, 3);
    assert!(matches!(
        train_time_model(&data, &time_config(crate::config::TrainMode::Local, 1)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = seeded_rng(25, 0);
    let mut m = curved_model(3, &mut rng);
    m.m = 2;
    m.input_scale = vec![ColumnScale { lo: -1.0, hi: 4.0 }; 2];
    let text = serde_json::to_string(&m).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["n", "m", "W", "boundary", "T", "dt"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["W"].as_array().unwrap().len(), 6);
    let back: NonlinearTimeModel = serde_json::from_str(&text).unwrap();
    assert_eq!(back, m);
}

#[test]
fn trajectory_csv_layout() {
    let m = symmetric_boundary();
    let traj = m.rollout(&[0.7]).unwrap();
    let csv = traj.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,node,value"));
    assert_eq!(lines.next(), Some("0,0,0.7"));
    assert_eq!(csv.lines().count(), 1 + traj.states.len());
}
