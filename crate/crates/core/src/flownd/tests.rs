use rand::Rng as _;

use super::*;
use crate::mlp::Mlp;
use crate::numeric::{
    dual_forward, finite_diff_gradient, finite_diff_jacobian, gradient_rel_error, DenseMatrix, Dual,
};

fn random_net(n: usize, depth: usize, units: usize, seed: u64) -> TriangularFlowNet {
    let mut rng = seeded_rng(seed, 0);
    let standardize = (0..n)
        .map(|_| Standardize {
            mean: rng.random_range(-1.0..1.0),
            std: rng.random_range(0.5..2.0),
        })
        .collect();
    let mut net = TriangularFlowNet::new(n, depth, units, standardize, None, &mut rng).unwrap();
    // move away from the initialization so off-diagonal paths matter
    let p: Vec<f64> = net
        .params()
        .iter()
        .map(|v| v + rng.random_range(-0.5..0.5))
        .collect();
    net.set_params(&p).unwrap();
    net
}

fn random_point(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn fd_jacobian(net: &TriangularFlowNet, a: &[f64]) -> DenseMatrix {
    finite_diff_jacobian(|x| Ok(net.forward_generic(x, None)), a, 1e-6).unwrap()
}

#[test]
fn composite_jacobian_is_lower_triangular() {
    for n in [2, 3, 5] {
        let net = random_net(n, 2, 3, n as u64);
        let mut rng = seeded_rng(10, 0);
        for _ in 0..20 {
            let a = random_point(n, &mut rng);
            let j = fd_jacobian(&net, &a);
            assert!(j.max_upper() <= 1e-8, "n={n}: {}", j.max_upper());
        }
    }
}

#[test]
fn determinant_equals_product_of_diagonals() {
    for n in [2, 3, 5] {
        let net = random_net(n, 2, 3, 20 + n as u64);
        let mut rng = seeded_rng(11, 0);
        for _ in 0..20 {
            let a = random_point(n, &mut rng);
            let det = fd_jacobian(&net, &a).det().unwrap();
            let out = net.forward_flow(&a).unwrap();
            let prod: f64 = out.diag().iter().flatten().product();
            assert!(
                ((det - prod) / prod).abs() <= 1e-5,
                "n={n}: {det} vs {prod}"
            );
            let nll = net.nll(&a).unwrap();
            assert!((nll + det.ln()).abs() <= 1e-5);
        }
    }
}

#[test]
fn outputs_match_generic_path() {
    let net = random_net(3, 2, 4, 3);
    let a = [0.2, -0.7, 1.1];
    let out = net.forward_flow(&a).unwrap();
    let g = net.forward_generic(&a, None);
    for j in 0..3 {
        assert!((out.b[j] - g[j]).abs() < 1e-12);
        assert!(out.b[j] > 0.0 && out.b[j] < 1.0);
    }
}

#[test]
fn scalar_flow_diagonal_product_is_the_derivative() {
    let net = random_net(1, 3, 4, 4);
    let mut rng = seeded_rng(12, 0);
    for _ in 0..50 {
        let x: f64 = rng.random_range(-3.0..3.0);
        let (_, d) = dual_forward(|v: Dual| net.forward_generic(&[v], None)[0], x).unwrap();
        let out = net.forward_flow(&[x]).unwrap();
        let prod: f64 = out.diag().iter().map(|r| r[0]).product();
        assert!(((prod - d) / d).abs() <= 1e-12, "{prod} vs {d}");
        let cond = net.autoregressive_conditionals(&[x]).unwrap();
        assert!(((cond[0] - d) / d).abs() <= 1e-12);
    }
}

#[test]
fn local_table_sums_to_nll() {
    let net = random_net(3, 2, 2, 5);
    let mut rng = seeded_rng(13, 0);
    for _ in 0..200 {
        let a = random_point(3, &mut rng);
        let t = net.local_losses(&a).unwrap();
        assert_eq!(t.entries.len(), 3);
        assert!(t.entries.iter().flatten().all(|v| v.is_finite()));
        assert!((t.sum - net.nll(&a).unwrap()).abs() <= 1e-12);
    }
    let single = random_net(2, 0, 2, 6);
    let t = single.local_losses(&[0.1, 0.2]).unwrap();
    assert_eq!(t.entries.len(), 1);
    assert_eq!(t.entries[0].len(), 2);
}

#[test]
fn identity_layer_has_zero_local_loss() {
    let net = random_net(2, 0, 1, 7);
    let mut layers = net.layers().to_vec();
    layers.push(TriLayer {
        tri_weights: vec![0.0],
        diag_free: vec![softplus_inv(1.0 - DIAG_FLOOR); 2],
        bias: vec![0.0; 2],
        mix_logits: vec![0.0; 2],
    });
    let deeper =
        TriangularFlowNet::from_layers(2, 1, layers, net.standardize().to_vec(), None).unwrap();
    let a = [0.4, -0.3];
    let t = deeper.local_losses(&a).unwrap();
    assert!(
        t.entries[1].iter().all(|v| v.abs() < 1e-12),
        "{:?}",
        t.entries
    );
    assert!((t.sum - net.nll(&a).unwrap()).abs() < 1e-12);
}

#[test]
fn autoregressive_product_is_density() {
    let net = random_net(3, 1, 3, 8);
    let a = [0.5, 0.1, -0.9];
    let c = net.autoregressive_conditionals(&a).unwrap();
    let p: f64 = c.iter().product();
    assert!((p - (-net.nll(&a).unwrap()).exp()).abs() <= 1e-10 * p.max(1.0));
}

#[test]
fn global_gradient_matches_finite_difference() {
    let net = random_net(3, 2, 3, 9);
    let mut rng = seeded_rng(14, 0);
    let rows: Vec<Vec<f64>> = (0..8).map(|_| random_point(3, &mut rng)).collect();
    let (_, grad) = net.mean_nll_and_grad(&rows, Route::Global).unwrap();
    let fd = finite_diff_gradient(
        |p| {
            let mut m = net.clone();
            m.set_params(p).unwrap();
            m.mean_nll(&rows).unwrap()
        },
        &net.params(),
        1e-5,
    );
    let err = gradient_rel_error(&grad, &fd, 1e-6);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn local_gradient_is_each_layers_own_row() {
    let net = random_net(2, 2, 2, 15);
    let mut rng = seeded_rng(16, 0);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| random_point(2, &mut rng)).collect();
    let (_, grad) = net.mean_nll_and_grad(&rows, Route::Local).unwrap();
    let per_layer = net.n_params() / net.layers().len();
    for layer in 0..net.layers().len() {
        let block = layer * per_layer..(layer + 1) * per_layer;
        let fd = finite_diff_gradient(
            |p| {
                let mut m = net.clone();
                m.set_params(p).unwrap();
                rows.iter()
                    .map(|r| {
                        m.local_losses(r).unwrap().entries[layer]
                            .iter()
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / rows.len() as f64
            },
            &net.params(),
            1e-5,
        );
        let err = gradient_rel_error(&grad[block.clone()], &fd[block], 1e-6);
        assert!(err <= 1e-4, "layer {layer}: {err}");
    }
}

#[test]
fn conditional_gradient_matches_finite_difference() {
    let flow = random_net(2, 1, 2, 17);
    let mut rng = seeded_rng(18, 0);
    let cond = Mlp::new(&[1, 4, flow.n_shifts()], 0.5, &mut rng).unwrap();
    let net = ConditionalFlowNet::new(
        flow,
        cond,
        vec![Standardize {
            mean: 0.5,
            std: 2.0,
        }],
    )
    .unwrap();
    let xs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
    let ts: Vec<Vec<f64>> = (0..6).map(|_| random_point(2, &mut rng)).collect();
    let (_, grad) = net.mean_nll_and_grad(&xs, &ts).unwrap();
    let fd = finite_diff_gradient(
        |p| {
            let mut m = net.clone();
            m.set_params(p).unwrap();
            m.mean_nll(&xs, &ts).unwrap()
        },
        &net.params(),
        1e-5,
    );
    let err = gradient_rel_error(&grad, &fd, 1e-6);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn conditional_flow_is_triangular_in_t() {
    let flow = random_net(3, 1, 2, 19);
    let mut rng = seeded_rng(20, 0);
    let cond = Mlp::new(&[2, 5, flow.n_shifts()], 1.0, &mut rng).unwrap();
    let net = ConditionalFlowNet::new(flow, cond, vec![Standardize::IDENTITY; 2]).unwrap();
    let x = [0.3, -1.0];
    let t = [0.1, 0.4, -0.2];
    let j = finite_diff_jacobian(|v| net.forward_generic(&x, v), &t, 1e-6).unwrap();
    assert!(j.max_upper() <= 1e-8);
    let prod: f64 = net
        .forward_flow(&x, &t)
        .unwrap()
        .diag()
        .iter()
        .flatten()
        .product();
    assert!(((j.det().unwrap() - prod) / prod).abs() <= 1e-5);
}

#[test]
fn permutation_reorders_columns() {
    let net = random_net(2, 1, 2, 21);
    let swapped = TriangularFlowNet::from_layers(
        2,
        2,
        net.layers().to_vec(),
        net.standardize().to_vec(),
        Some(vec![1, 0]),
    )
    .unwrap();
    let a = [0.3, -0.8];
    let d1 = net.nll(&a).unwrap();
    let d2 = swapped.nll(&[a[1], a[0]]).unwrap();
    assert!((d1 - d2).abs() < 1e-14);
    assert!(TriangularFlowNet::from_layers(
        2,
        2,
        net.layers().to_vec(),
        net.standardize().to_vec(),
        Some(vec![0, 0]),
    )
    .is_err());
}

#[test]
fn input_validation() {
    let net = random_net(2, 1, 2, 22);
    assert!(matches!(net.forward_flow(&[0.0]), Err(Error::Shape { .. })));
    assert!(matches!(
        net.forward_flow(&[0.0, f64::NAN]),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn checkpoint_round_trip() {
    let net = random_net(3, 2, 2, 23);
    let text = serde_json::to_string(&net.to_checkpoint()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["n", "depth", "layers", "conditioner", "standardize"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["layers"][0].get("tri_weights").is_some());
    let back = TriangularFlowNet::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
    assert_eq!(back, net);
}

#[test]
fn sequential_local_is_rejected() {
    let mut cfg = TrainConfig::default();
    cfg.model.mode = TrainMode::SequentialLocal;
    let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let names = vec!["a".to_string(), "b".to_string()];
    assert!(train_nd_rows(&rows, &names, &cfg).is_err());
}
