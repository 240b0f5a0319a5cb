//! Invariant suites run by `probe verify`. Each suite is small enough to
//! finish in a few seconds and returns one record per check.

use rand::Rng as _;

use probe_core::config::Activation;
use probe_core::flow1d::{normalization, train_1d_values, MonotoneNet, Standardize};
use probe_core::flownd::{train_nd_rows, Route, TriangularFlowNet};
use probe_core::heads::{
    cross_entropy_one_hot, estimate_params_values, train_mse, train_regression_rows, FamilyKind,
    GaussianRegressionHead, SoftmaxClassifier,
};
use probe_core::loss::{fit_outcomes, log_loss_of};
use probe_core::numeric::{
    dual_forward, finite_diff_gradient, finite_diff_jacobian, gradient_rel_error, matrix_exp,
    quadrature, seeded_rng, standard_normal, DenseMatrix, Dual, KahanSum, Real, Rng,
};
use probe_core::timeevo::{
    check_linearity, evolve_linear_euler, evolve_linear_exact, linear_phi, nonlinear_nll,
    LinearTimeModel, NonlinearTimeModel,
};
use probe_core::verify::{
    closed_form_mle_gaussian, compare_densities, empirical_conditional, linspace, normal_cdf,
    normal_pdf, VerificationRecord as Rec,
};
use probe_core::{Result, TrainConfig};

use crate::cli::Suite;

pub fn run(suite: Suite, seed: u64) -> Result<Vec<Rec>> {
    let all = [
        Suite::Numeric,
        Suite::Loss,
        Suite::Flow1d,
        Suite::Flownd,
        Suite::Heads,
        Suite::Timeevo,
        Suite::Verify,
    ];
    let selected: Vec<Suite> = if suite == Suite::All {
        all.to_vec()
    } else {
        vec![suite]
    };
    let mut out = Vec::new();
    for s in selected {
        let mut rng = seeded_rng(seed, 0);
        out.extend(match s {
            Suite::Numeric => numeric(&mut rng)?,
            Suite::Loss => loss()?,
            Suite::Flow1d => flow1d(&mut rng)?,
            Suite::Flownd => flownd(&mut rng)?,
            Suite::Heads => heads(&mut rng)?,
            Suite::Timeevo => timeevo(&mut rng)?,
            Suite::Verify => verify()?,
            Suite::All => unreachable!("expanded above"),
        });
    }
    Ok(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn numeric(rng: &mut Rng) -> Result<Vec<Rec>> {
    let mut out = Vec::new();

    let theta = 1.3;
    let gen = DenseMatrix::from_rows(2, 2, vec![0.0, -1.0, 1.0, 0.0])?;
    let e = matrix_exp(&gen, theta)?;
    let rot = [theta.cos(), -theta.sin(), theta.sin(), theta.cos()];
    let got = [e[(0, 0)], e[(0, 1)], e[(1, 0)], e[(1, 1)]];
    out.push(Rec::at_most(
        "numeric.expm_rotation",
        "max |exp - rotation|",
        max_abs_diff(&got, &rot),
        1e-12,
    ));

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = DenseMatrix::from_rows(4, 4, (0..16).map(|_| standard_normal(rng)).collect())?;
        let det = matrix_exp(&a, 1.0)?.det()?;
        worst = worst.max((det / a.trace().exp() - 1.0).abs());
    }
    out.push(Rec::at_most(
        "numeric.expm_det_trace",
        "max |det exp(A) / exp(tr A) - 1|",
        worst,
        1e-10,
    ));

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x: f64 = rng.random_range(-2.0..2.0);
        let (_, d) = dual_forward(|v: Dual| v.tanh() * v.exp(), x)?;
        let t = x.tanh();
        let exact = x.exp() * (t + 1.0 - t * t);
        worst = worst.max((d - exact).abs());
    }
    out.push(Rec::at_most(
        "numeric.dual_chain_rule",
        "max |dual - analytic|",
        worst,
        1e-12,
    ));

    let mass = quadrature(|x| normal_pdf(x, 0.0, 1.0), -8.0, 8.0, 2000)?;
    out.push(Rec::at_most(
        "numeric.simpson_normal_mass",
        "|mass - 1|",
        (mass - 1.0).abs(),
        1e-10,
    ));

    let mut k = KahanSum::new();
    for v in [1e16, 1.0, -1e16] {
        k.add(v);
    }
    out.push(Rec::at_most(
        "numeric.compensated_sum",
        "|sum - 1|",
        (k.total() - 1.0).abs(),
        0.0,
    ));
    Ok(out)
}

fn loss() -> Result<Vec<Rec>> {
    let mut out = Vec::new();
    let l = log_loss_of(0.5)?.0;
    out.push(Rec::at_most(
        "loss.log_loss_half",
        "|L(0.5) - ln 2|",
        (l - 2f64.ln()).abs(),
        1e-15,
    ));
    let outcomes: Vec<String> = ["a", "a", "b", "c", "a", "b"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 20_000;
    cfg.learning_rate = 1.0;
    cfg.tolerance = 1e-9;
    let est = fit_outcomes(&outcomes, None, &cfg)?;
    let target = [0.5, 2.0 / 6.0, 1.0 / 6.0];
    out.push(Rec::at_most(
        "loss.discrete_optimum",
        "max |Φ - frequency|",
        max_abs_diff(&est.probabilities(), &target),
        1e-6,
    ));
    Ok(out)
}

fn small_monotone(rng: &mut Rng) -> Result<MonotoneNet> {
    MonotoneNet::new(
        &[8, 8],
        Activation::Sigmoid,
        Standardize {
            mean: 0.3,
            std: 1.7,
        },
        rng,
    )
}

fn flow1d(rng: &mut Rng) -> Result<Vec<Rec>> {
    let mut out = Vec::new();
    let net = small_monotone(rng)?;

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x: f64 = rng.random_range(-5.0..5.0);
        let (_, d) = net.forward_cdf(x)?;
        let h = 1e-5;
        let fd = (net.cdf_generic(x + h) - net.cdf_generic(x - h)) / (2.0 * h);
        worst = worst.max((d - fd).abs() / d.abs());
    }
    out.push(Rec::at_most(
        "flow1d.dual_vs_fd",
        "max rel |dy/dx - FD|",
        worst,
        1e-5,
    ));

    let (mass, integral) = normalization(&net, -60.0, 60.0)?;
    out.push(Rec::within(
        "flow1d.untrained_mass",
        "y(60) - y(-60)",
        mass,
        0.99,
        1.0,
    ));
    out.push(Rec::at_most(
        "flow1d.fundamental_theorem",
        "|quadrature - cdf difference|",
        (integral - mass).abs(),
        1e-6,
    ));

    let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, g) = net.mean_nll_and_grad(&xs);
    let fd = finite_diff_gradient(
        |p| {
            let mut m = net.clone();
            m.set_params(p).expect("same length");
            m.mean_nll(&xs)
        },
        &net.params(),
        1e-5,
    );
    out.push(Rec::at_most(
        "flow1d.gradient",
        "rel err vs central FD",
        gradient_rel_error(&g, &fd, 1e-6),
        1e-4,
    ));

    let data: Vec<f64> = (0..500)
        .map(|_| {
            if rng.random_bool(0.5) {
                -2.0 + 0.5 * standard_normal(rng)
            } else {
                2.0 + 0.5 * standard_normal(rng)
            }
        })
        .collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 300;
    let (_, report) = train_1d_values(&data, &cfg)?;
    out.extend(report.checks);
    Ok(out)
}

fn random_flow(n: usize, rng: &mut Rng) -> Result<TriangularFlowNet> {
    let standardize = (0..n)
        .map(|_| Standardize {
            mean: rng.random_range(-1.0..1.0),
            std: rng.random_range(0.5..2.0),
        })
        .collect();
    let mut net = TriangularFlowNet::new(n, 2, 3, standardize, None, rng)?;
    let p: Vec<f64> = net
        .params()
        .iter()
        .map(|v| v + rng.random_range(-0.5..0.5))
        .collect();
    net.set_params(&p)?;
    Ok(net)
}

fn flownd(rng: &mut Rng) -> Result<Vec<Rec>> {
    let mut out = Vec::new();
    let (mut upper, mut det_gap, mut table_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for n in [2, 3, 5] {
        let net = random_flow(n, rng)?;
        for _ in 0..10 {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let j = finite_diff_jacobian(|x| Ok(net.forward_generic(x, None)), &a, 1e-6)?;
            upper = upper.max(j.max_upper());
            let prod: f64 = net.forward_flow(&a)?.diag().iter().flatten().product();
            det_gap = det_gap.max(((j.det()? - prod) / prod).abs());
            let mut dual = KahanSum::new();
            for k in 0..n {
                let x: Vec<Dual> = a
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if i == k {
                            Dual::var(v)
                        } else {
                            Dual::constant(v)
                        }
                    })
                    .collect();
                dual.add(-net.forward_generic(&x, None)[k].d.ln());
            }
            table_gap = table_gap.max((net.local_losses(&a)?.sum - dual.total()).abs());
        }
    }
    out.push(Rec::at_most(
        "flownd.triangular",
        "max upper FD Jacobian entry",
        upper,
        1e-8,
    ));
    out.push(Rec::at_most(
        "flownd.determinant",
        "max rel |det - Π diag|",
        det_gap,
        1e-5,
    ));
    out.push(Rec::at_most(
        "flownd.local_table",
        "max |Σ local - dual-route NLL|",
        table_gap,
        1e-12,
    ));

    let net = random_flow(3, rng)?;
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let (_, g) = net.mean_nll_and_grad(&rows, Route::Global)?;
    let fd = finite_diff_gradient(
        |p| {
            let mut m = net.clone();
            m.set_params(p).expect("same length");
            m.mean_nll(&rows).unwrap_or(f64::NAN)
        },
        &net.params(),
        1e-5,
    );
    out.push(Rec::at_most(
        "flownd.gradient",
        "rel err vs central FD",
        gradient_rel_error(&g, &fd, 1e-6),
        1e-4,
    ));

    let rho: f64 = 0.8;
    let data: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let (z1, z2) = (standard_normal(rng), standard_normal(rng));
            vec![z1, rho * z1 + (1.0 - rho * rho).sqrt() * z2]
        })
        .collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 20;
    cfg.batch_size = 100;
    let (_, report) = train_nd_rows(&data, &["a".into(), "b".into()], &cfg)?;
    out.extend(report.checks);
    Ok(out)
}

fn heads(rng: &mut Rng) -> Result<Vec<Rec>> {
    let mut out = Vec::new();
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let clf = SoftmaxClassifier::new(
        labels.clone(),
        2,
        &[4, 3],
        vec![Standardize::IDENTITY; 2],
        rng,
    )?;
    let mut ce: f64 = 0.0;
    for _ in 0..50 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let p = clf.probabilities(&x)?;
        for (k, l) in labels.iter().enumerate() {
            ce = ce.max((clf.nll(&x, l)? - cross_entropy_one_hot(&p, k)).abs());
        }
    }
    out.push(Rec::at_most(
        "heads.cross_entropy",
        "max |nll - one-hot CE|",
        ce,
        1e-12,
    ));

    let xs = vec![vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.7, 0.9]];
    let ls: Vec<String> = ["a", "c", "b"].iter().map(|s| s.to_string()).collect();
    let (_, g) = clf.mean_nll_and_grad(&xs, &ls)?;
    let fd = finite_diff_gradient(
        |p| {
            let mut c = clf.clone();
            c.net.params = p.to_vec();
            c.mean_nll(&xs, &ls).unwrap_or(f64::NAN)
        },
        &clf.net.params,
        1e-6,
    );
    out.push(Rec::at_most(
        "heads.classifier_gradient",
        "rel err vs central FD",
        gradient_rel_error(&g, &fd, 1e-8),
        1e-4,
    ));

    let mut head = GaussianRegressionHead::new(
        2,
        &[5],
        &[(0.0, 1.0), (1.0, 2.0)],
        false,
        vec![Standardize::IDENTITY; 2],
        rng,
    )?;
    head.net
        .params
        .iter_mut()
        .for_each(|p| *p += 0.3 * standard_normal(rng));
    let hx: Vec<Vec<f64>> = (0..5)
        .map(|_| vec![standard_normal(rng), standard_normal(rng)])
        .collect();
    let ht: Vec<Vec<f64>> = (0..5)
        .map(|_| vec![standard_normal(rng), standard_normal(rng)])
        .collect();
    let (_, g) = head.mean_nll_and_grad(&hx, &ht)?;
    let fd = finite_diff_gradient(
        |p| {
            let mut h = head.clone();
            h.net.params = p.to_vec();
            h.mean_nll(&hx, &ht).unwrap_or(f64::NAN)
        },
        &head.net.params,
        1e-6,
    );
    out.push(Rec::at_most(
        "heads.gaussian_gradient",
        "rel err vs central FD",
        gradient_rel_error(&g, &fd, 1e-8),
        1e-4,
    ));

    let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let ts: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| vec![x[0].sin() + 0.1 * standard_normal(rng)])
        .collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 10;
    cfg.batch_size = 16;
    cfg.model.hidden = vec![6];
    cfg.model.fixed_covariance = true;
    let names = vec!["x".to_string()];
    let (a, _) = train_regression_rows(&xs, &ts, &names, &names, &cfg)?;
    let (b, _) = train_mse(&xs, &ts, &cfg)?;
    out.push(Rec::at_most(
        "heads.identity_covariance_is_mse",
        "max parameter gap",
        max_abs_diff(&a.net.params, &b.net.params),
        1e-12,
    ));

    let data: Vec<f64> = (0..1000)
        .map(|_| 5.0 + 2.0 * standard_normal(rng))
        .collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 50;
    let (est, _) = estimate_params_values(&data, FamilyKind::Gaussian1d, &cfg)?;
    let (m, v) = closed_form_mle_gaussian(&data)?;
    out.push(Rec::at_most(
        "heads.streaming_mean",
        "|mean - MLE|",
        (est.family.mean() - m).abs(),
        1e-3,
    ));
    out.push(Rec::at_most(
        "heads.streaming_variance",
        "|variance - MLE|",
        (est.family.variance() - v).abs(),
        5e-2,
    ));
    Ok(out)
}

fn curved_time_model(n: usize, rng: &mut Rng) -> Result<NonlinearTimeModel> {
    let mut m = NonlinearTimeModel::random(n, n, 1.0, 0.02, 3, 0.0, 0.5, rng)?;
    for b in &mut m.boundary {
        b.t0 = 0.3 * standard_normal(rng);
        b.t2_free = 0.7;
        b.poly = vec![0.4, -0.6, 0.3];
    }
    Ok(m)
}

fn timeevo(rng: &mut Rng) -> Result<Vec<Rec>> {
    let mut out = Vec::new();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let m = LinearTimeModel::random(2 + k % 4, 1.0, 1.0, rng)?;
        worst = worst.max((matrix_exp(&m.w_matrix(), m.horizon)?.det()? - 1.0).abs());
    }
    out.push(Rec::at_most(
        "timeevo.unit_determinant",
        "max |det exp(WT) - 1|",
        worst,
        1e-8,
    ));

    let m = LinearTimeModel::random(2, 0.6, 1.0, rng)?;
    let (sigma, n_samples) = (2.0, 20_000);
    let mut ws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = [standard_normal(rng), standard_normal(rng)];
        let q = (-(z[0] * z[0] + z[1] * z[1]) / 2.0).exp()
            / (2.0 * std::f64::consts::PI * sigma * sigma);
        ws.push(linear_phi(&m, &[sigma * z[0], sigma * z[1]])?.phi / q);
    }
    let mean = ws.iter().sum::<f64>() / n_samples as f64;
    let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
    let se = (var / n_samples as f64).sqrt();
    out.push(Rec::within(
        "timeevo.linear_mass",
        "importance-sampled ∫Φ",
        mean,
        1.0 - 3.0 * se,
        1.0 + 3.0 * se,
    ));

    let m = LinearTimeModel::random(4, 0.8, 1.0, rng)?;
    let a0: Vec<f64> = (0..4).map(|_| standard_normal(rng)).collect();
    let exact = evolve_linear_exact(&m, &a0)?;
    let e1 = max_abs_diff(&exact, evolve_linear_euler(&m, &a0, 0.02)?.final_state());
    let e2 = max_abs_diff(&exact, evolve_linear_euler(&m, &a0, 0.01)?.final_state());
    out.push(Rec::within(
        "timeevo.euler_order",
        "log2 error ratio",
        (e1 / e2).log2(),
        0.8,
        1.2,
    ));
    out.push(Rec::at_most(
        "timeevo.linear_affine",
        "superposition residual",
        check_linearity(&m, 20, rng)?.residual,
        1e-9,
    ));

    let mut table_gap: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    for n in [1, 2, 3] {
        let m = curved_time_model(n, rng)?;
        let a0: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let traj = m.rollout(&a0)?;
        let nll = nonlinear_nll(&traj, &m)?;
        let mut s = KahanSum::new();
        for (row, h) in nll.local.iter().zip(&traj.steps) {
            for l in row {
                s.add(l * h);
            }
        }
        table_gap = table_gap.max((s.total() - nll.continuum).abs());

        let mut g = vec![0.0; m.n_params()];
        m.sample_loss(&a0, Some(&mut g))?;
        let fd = finite_diff_gradient(
            |p| {
                let mut c = m.clone();
                c.set_params(p).expect("same length");
                c.sample_loss(&a0, None).map(|v| v.0).unwrap_or(f64::NAN)
            },
            &m.params(),
            1e-5,
        );
        grad_err = grad_err.max(gradient_rel_error(&g, &fd, 1e-6));
    }
    out.push(Rec::at_most(
        "timeevo.local_table",
        "|Σ L h - continuum|",
        table_gap,
        0.0,
    ));
    out.push(Rec::at_most(
        "timeevo.gradient",
        "rel err vs central FD",
        grad_err,
        1e-3,
    ));

    let mut escaped = 0usize;
    for _ in 0..100 {
        let n = 1 + rng.random_range(0..3);
        let mut m =
            NonlinearTimeModel::random(n, n, 1.0, 0.05, 3, rng.random_range(-4.0..2.0), 2.0, rng)?;
        for b in &mut m.boundary {
            b.t0 = 3.0 * standard_normal(rng);
        }
        let a0: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        if let Ok(traj) = m.rollout(&a0) {
            escaped += traj
                .states
                .iter()
                .flatten()
                .filter(|v| !(**v > 0.0 && **v < 1.0))
                .count();
        }
    }
    out.push(Rec::at_most(
        "timeevo.confinement",
        "states outside (0,1)",
        escaped as f64,
        0.0,
    ));
    Ok(out)
}

fn verify() -> Result<Vec<Rec>> {
    let mut out = Vec::new();
    let grid = linspace(-8.0, 8.0, 1601);
    let p: Vec<f64> = grid.iter().map(|&x| normal_pdf(x, 0.0, 1.0)).collect();
    let same = compare_densities(&p, &p, &grid)?;
    out.push(Rec::at_most(
        "verify.identical",
        "L1 + KL + max",
        same.l1 + same.kl + same.max_abs,
        0.0,
    ));

    let q: Vec<f64> = grid.iter().map(|&x| normal_pdf(x, 0.1, 1.0)).collect();
    let shifted = compare_densities(&p, &q, &grid)?;
    let analytic = 2.0 * (2.0 * normal_cdf(0.05, 0.0, 1.0) - 1.0);
    out.push(Rec::at_most(
        "verify.shifted_normal_l1",
        "|L1 - analytic overlap|",
        (shifted.l1 - analytic).abs(),
        1e-4,
    ));

    let (m, v) = closed_form_mle_gaussian(&[1.0, 3.0])?;
    out.push(Rec::at_most(
        "verify.mle_two_points",
        "|(mean, var) - (2, 1)|",
        (m - 2.0).abs() + (v - 1.0).abs(),
        0.0,
    ));

    let table = empirical_conditional(&[("0", "A"), ("0", "A"), ("0", "B"), ("1", "B")])?;
    let row0 = [
        table.prob("0", "A").unwrap_or(0.0),
        table.prob("0", "B").unwrap_or(0.0),
    ];
    out.push(Rec::at_most(
        "verify.empirical_conditional",
        "max |row - counts|",
        max_abs_diff(&row0, &[2.0 / 3.0, 1.0 / 3.0]),
        1e-15,
    ));
    Ok(out)
}
